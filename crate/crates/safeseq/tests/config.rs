use serde_json::json;

use safeseq::checkpoint::Precision;
use safeseq::config::{resolve, GlobalConfig, Preset};
use safeseq_core::envs::EnvSpec;
use safeseq_core::trainer::Variant;

#[test]
fn empty_override_keeps_the_preset() {
    for p in [Preset::Paper, Preset::Desk] {
        let base = GlobalConfig::preset(p);
        assert!(base.violations().is_empty(), "{:?}", base.violations());
        assert_eq!(resolve(&base, &json!({})).unwrap(), base);
        assert_eq!(resolve(&base, &serde_json::Value::Null).unwrap(), base);
    }
}

#[test]
fn partial_override_touches_only_named_fields() {
    let base = GlobalConfig::default();
    let cfg = resolve(&base, &json!({ "precision": "f64", "train": { "variant": "QCDT", "weighting": { "alpha": 0.2 } } })).unwrap();
    assert_eq!(cfg.precision, Precision::F64);
    assert_eq!(cfg.train.variant, Variant::Qcdt);
    assert_eq!(cfg.train.weighting.alpha, 0.2);
    assert_eq!(cfg.train.weighting.gamma, base.train.weighting.gamma);
    assert_eq!(cfg.train.batch_size, base.train.batch_size);
}

#[test]
fn changing_env_kind_replaces_the_section() {
    let cfg = resolve(&GlobalConfig::default(), &json!({ "env": { "kind": "tabular-grid", "horizon": 12 } })).unwrap();
    match cfg.env {
        EnvSpec::TabularGrid(g) => assert_eq!((g.horizon, g.width), (12, 4)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_problem_is_reported_at_once() {
    let err = resolve(
        &GlobalConfig::default(),
        &json!({
            "mystery": 1,
            "train": { "eta": -1.0, "kappa": 0.0, "critic": { "soft_tau": 2.0, "nope": true } },
            "eval": { "thresholds": [] },
            "episodes": 0
        }),
    )
    .unwrap_err();
    let all = err.0.join("\n");
    assert!(all.contains("mystery: unknown key"), "{all}");
    assert!(all.contains("train.critic.nope: unknown key"), "{all}");
    // unknown keys stop parsing, so fix them and look at validation errors
    let err = resolve(
        &GlobalConfig::default(),
        &json!({ "train": { "eta": -1.0, "kappa": 0.0, "critic": { "soft_tau": 2.0 } }, "eval": { "thresholds": [] }, "episodes": 0 }),
    )
    .unwrap_err();
    let all = err.0.join("\n");
    for needle in ["train: eta", "kappa", "soft_tau", "eval:", "episodes"] {
        assert!(all.contains(needle), "missing {needle:?} in {all}");
    }
    assert!(err.0.len() >= 5, "{:?}", err.0);
}

#[test]
fn type_errors_name_their_section() {
    let err = resolve(&GlobalConfig::default(), &json!({ "seed": "seven", "policy": { "n_layers": -1 } })).unwrap_err();
    assert!(err.0.iter().any(|e| e.starts_with("seed:")), "{:?}", err.0);
    assert!(err.0.iter().any(|e| e.starts_with("policy:")), "{:?}", err.0);
}

#[test]
fn non_object_root_is_rejected() {
    assert!(resolve(&GlobalConfig::default(), &json!([1, 2])).is_err());
}
