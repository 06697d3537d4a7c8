//! Checkpoint files: a JSON header followed by raw parameter blocks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use safeseq_core::critics::CriticPair;
use safeseq_core::envs::EnvSpec;
use safeseq_core::eval::{ReturnReference, SequencePolicy};
use safeseq_core::policy::{CdtPolicy, ContextWindow, PolicyConfig};
use safeseq_core::rng::Rng;
use safeseq_core::trainer::{TrainConfig, Trainer, Variant};
use safeseq_core::Real;

use crate::format::{FormatError, Reader, Writer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSQC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn of<T: Real>() -> Self {
        if T::BITS == 32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub variant: Variant,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub lambda: f64,
    pub iter: u64,
    /// Training-data returns, used for return targets and normalization at evaluation.
    pub returns: ReturnReference,
    pub env: Option<EnvSpec>,
    pub policy_checksum: u64,
    pub has_critics: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub policy: CdtPolicy<T>,
    pub critics: Option<CriticPair<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>, returns: ReturnReference, env: Option<EnvSpec>) -> Self {
        let cfg = trainer.config().clone();
        Self {
            header: CheckpointHeader {
                precision: Precision::of::<T>(),
                variant: cfg.variant,
                policy: trainer.policy().config().clone(),
                train: cfg,
                lambda: trainer.lambda(),
                iter: trainer.iter(),
                returns,
                env,
                policy_checksum: trainer.policy().checksum(),
                has_critics: trainer.critics().is_some(),
            },
            policy: trainer.policy().clone(),
            critics: trainer.critics().cloned(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let header = serde_json::to_vec(&self.header)?;
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u64(header.len() as u64);
        w.bytes(&header);
        let mut block = |flat: Vec<f64>| {
            w.u64(flat.len() as u64);
            w.f64s(&flat);
        };
        block(self.policy.params().flatten_f64());
        if let Some(c) = &self.critics {
            for store in [c.q.online(), c.q.target(), c.c.online(), c.c.target()] {
                block(store.flatten_f64());
            }
        }
        Ok(w.finish())
    }
}

/// A checkpoint in whichever precision it was written.
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn rebuild<T: Real>(header: CheckpointHeader, r: &mut Reader<'_>) -> Result<Checkpoint<T>, FormatError> {
    let mut block = |what: &'static str| -> Result<Vec<f64>, FormatError> {
        let n = r.count(what, 8)?;
        r.f64s(n, what)
    };
    let policy = CdtPolicy::<T>::from_flat(header.policy.clone(), &block("policy parameters")?)?;
    let critics = if header.has_critics {
        let mut pair = CriticPair::<T>::new(header.policy.state_dim, header.policy.action_dim, header.train.critic.clone(), 0)?;
        pair.q.online_mut().assign_flat_f64(&block("reward critic")?)?;
        pair.q.target_mut().assign_flat_f64(&block("reward critic target")?)?;
        pair.c.online_mut().assign_flat_f64(&block("cost critic")?)?;
        pair.c.target_mut().assign_flat_f64(&block("cost critic target")?)?;
        Some(pair)
    } else {
        None
    };
    if policy.checksum() != header.policy_checksum {
        return Err(FormatError::Content(safeseq_core::Error::InvalidArgument(format!(
            "policy checksum {:016x} does not match header {:016x}",
            policy.checksum(),
            header.policy_checksum
        ))));
    }
    Ok(Checkpoint { header, policy, critics })
}

impl AnyCheckpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let n = r.count("header length", 1)?;
        let header: CheckpointHeader = serde_json::from_slice(r.bytes(n, "header")?)?;
        let out = match header.precision {
            Precision::F32 => AnyCheckpoint::F32(rebuild(header, &mut r)?),
            Precision::F64 => AnyCheckpoint::F64(rebuild(header, &mut r)?),
        };
        r.finish()?;
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        match self {
            AnyCheckpoint::F32(c) => c.encode(),
            AnyCheckpoint::F64(c) => c.encode(),
        }
    }

    pub fn header(&self) -> &CheckpointHeader {
        match self {
            AnyCheckpoint::F32(c) => &c.header,
            AnyCheckpoint::F64(c) => &c.header,
        }
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }
}

impl SequencePolicy for AnyCheckpoint {
    fn context_len(&self) -> usize {
        self.header().policy.context_len
    }

    fn act(&self, window: &ContextWindow, rng: &mut Rng, deterministic: bool) -> safeseq_core::Result<Vec<f64>> {
        match self {
            AnyCheckpoint::F32(c) => c.policy.act(window, rng, deterministic),
            AnyCheckpoint::F64(c) => c.policy.act(window, rng, deterministic),
        }
    }

    fn checksum(&self) -> u64 {
        match self {
            AnyCheckpoint::F32(c) => c.policy.checksum(),
            AnyCheckpoint::F64(c) => c.policy.checksum(),
        }
    }
}
