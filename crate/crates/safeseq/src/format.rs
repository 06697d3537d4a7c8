//! Little-endian binary container shared by dataset and checkpoint files.
//!
//! Every file is `magic (4) | version u16 | reserved u16 | body | crc32 u32`, the CRC
//! covering everything before it.

use std::fs;
use std::path::Path;

use safeseq_core::trajectory::{Trajectory, TrajectoryDataset};

pub const DATASET_MAGIC: [u8; 4] = *b"SSQD";
pub const DATASET_VERSION: u16 = 1;

/// Upper bound on any single dimension or count read from a file.
const MAX_DIM: u64 = 1 << 24;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found}, this build reads {supported}")]
    Version { found: u16, supported: u16 },
    #[error("truncated input at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{count} trailing bytes after payload")]
    Trailing { count: usize },
    #[error("implausible {what} {value}")]
    Implausible { what: &'static str, value: u64 },
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("content: {0}")]
    Content(#[from] safeseq_core::Error),
}

impl FormatError {
    /// Stable short name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::Io(_) => "io",
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::Version { .. } => "version",
            FormatError::Truncated { .. } => "truncated",
            FormatError::Checksum { .. } => "checksum",
            FormatError::Trailing { .. } => "trailing-bytes",
            FormatError::Implausible { .. } => "implausible",
            FormatError::Header(_) => "header",
            FormatError::Content(_) => "content",
        }
    }
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: [u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        Self { buf }
    }

    pub(crate) fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.f64(x));
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and CRC, leaving the cursor at the start of the body.
    pub(crate) fn open(bytes: &'a [u8], magic: [u8; 4], version: u16) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated { offset: bytes.len(), what: "magic" });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        if bytes.len() < 12 {
            return Err(FormatError::Truncated { offset: bytes.len(), what: "header" });
        }
        let v = u16::from_le_bytes([bytes[4], bytes[5]]);
        if v != version {
            return Err(FormatError::Version { found: v, supported: version });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        Ok(Self { buf: &bytes[..body_end], pos: 8 })
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated { offset: self.pos, what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A count bounded by `MAX_DIM` and by what the remaining bytes could hold.
    pub(crate) fn count(&mut self, what: &'static str, item_bytes: usize) -> Result<usize, FormatError> {
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > MAX_DIM || n.saturating_mul(item_bytes as u64) > remaining {
            return Err(FormatError::Implausible { what, value: n });
        }
        Ok(n as usize)
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::Implausible { what, value: n as u64 })?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        self.take(n, what)
    }

    pub(crate) fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            count => Err(FormatError::Trailing { count }),
        }
    }
}

fn dim(r: &mut Reader<'_>, what: &'static str) -> Result<usize, FormatError> {
    let d = r.u32(what)? as u64;
    if d == 0 || d > MAX_DIM {
        return Err(FormatError::Implausible { what, value: d });
    }
    Ok(d as usize)
}

pub fn encode_dataset(ds: &TrajectoryDataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    w.f64(ds.c_max());
    w.u32(ds.state_dim() as u32);
    w.u32(ds.action_dim() as u32);
    w.u64(ds.len() as u64);
    for t in ds.trajectories() {
        let b = &t.base;
        w.u64(b.horizon() as u64);
        b.states.iter().for_each(|s| w.f64s(s));
        b.actions.iter().for_each(|a| w.f64s(a));
        w.f64s(&b.rewards);
        w.f64s(&b.costs);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrajectoryDataset, FormatError> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let c_max = r.f64("c_max")?;
    let sd = dim(&mut r, "state_dim")?;
    let ad = dim(&mut r, "action_dim")?;
    let n = r.count("trajectory count", 8)?;
    let step_bytes = 8 * (sd + ad + 2);
    let mut trajs = Vec::with_capacity(n);
    for _ in 0..n {
        let h = r.count("horizon", step_bytes)?;
        let states = (0..h).map(|_| r.f64s(sd, "states")).collect::<Result<Vec<_>, _>>()?;
        let actions = (0..h).map(|_| r.f64s(ad, "actions")).collect::<Result<Vec<_>, _>>()?;
        let rewards = r.f64s(h, "rewards")?;
        let costs = r.f64s(h, "costs")?;
        trajs.push(Trajectory { states, actions, rewards, costs });
    }
    r.finish()?;
    Ok(TrajectoryDataset::new(trajs, c_max)?)
}

pub fn save_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset, FormatError> {
    decode_dataset(&fs::read(path)?)
}
