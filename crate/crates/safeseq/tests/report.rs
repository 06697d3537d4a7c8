use safeseq::report::{emit_report, read_episodes, read_summary, write_metrics, EvalSummary};
use safeseq_core::envs::EnvSpec;
use safeseq_core::eval::{evaluate, EvalProtocol, RandomPolicy, ReturnReference};
use safeseq_core::trainer::MetricsRow;

#[test]
fn emitted_files_read_back() {
    let protocol = EvalProtocol { thresholds: vec![10.0, 20.0, 40.0], episodes_per_threshold: 3, ..EvalProtocol::default() };
    let report = evaluate(&RandomPolicy { action_dim: 1 }, &EnvSpec::default(), &protocol, &ReturnReference::range(0.0, 50.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(&report, dir.path()).unwrap();

    let summary = read_summary(&paths.summary_json).unwrap();
    assert_eq!(summary, EvalSummary::from(&report));
    assert_eq!(summary.safe, summary.averaged.mean_normalized_cost < 1.0);
    assert_eq!(read_episodes(&paths.episodes_csv).unwrap(), report.episodes);

    let plot = std::fs::read_to_string(&paths.plot_csv).unwrap();
    let mut lines = plot.lines();
    assert_eq!(lines.next(), Some("threshold,normalized_return,normalized_return_se,normalized_cost,normalized_cost_se"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn metrics_keep_missing_terms_as_nan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let row = MetricsRow { iter: 3, loss: 0.5, nll: 0.5, q_mean: f64::NAN, c_mean: f64::NAN, lambda: 0.0, j_c_hat: f64::NAN, grad_norm: 1.0 };
    write_metrics(&path, &[row]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().nth(1), Some("3,0.5,0.5,NaN,NaN,0.0,NaN,1.0"));
}
