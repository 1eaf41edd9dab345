use cameo_core::pipeline::*;
use cameo_core::report::{self, parse_metrics};
use cameo_core::scene::SceneSetSpec;

fn micro(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset("tiny", seed).unwrap();
    cfg.scenes = SceneSetSpec { scenes: 6, ..SceneSetSpec::tiny() };
    cfg.train_scenes = 4;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.train.iterations = 12;
    cfg.train.eval_every = 4;
    cfg
}

fn read(dir: &std::path::Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn micro_run_writes_every_artifact_deterministically() {
    let cfg = micro(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&cfg, a.path(), &mut |_| {}).unwrap();
    let rb = run_pipeline(&cfg, b.path(), &mut |_| {}).unwrap();
    assert_eq!(ra, rb);
    for name in ["config.json", "metrics.csv", "report.json", "curves.svg"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }

    let back: RunConfig = serde_json::from_slice(&read(a.path(), "config.json")).unwrap();
    assert_eq!(back, cfg);

    let arms = parse_metrics(&String::from_utf8(read(a.path(), "metrics.csv")).unwrap(), "metrics.csv", "x").unwrap();
    assert_eq!(arms.len(), 2);
    for arm in &arms {
        assert_eq!(arm.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
        assert!(arm.rows.iter().all(|r| r.loss_denoise.is_finite() && r.loss_denoise > 0.0));
    }
    assert!(arms[0].rows.iter().all(|r| r.loss_cameo.is_finite()));

    assert_eq!((ra.train_scenes, ra.eval_scenes), (4, 2));
    assert_eq!(ra.arms.iter().map(|a| a.arm.as_str()).collect::<Vec<_>>(), ["lambda_0", "lambda_0.02"]);
    assert!(ra.arms.iter().all(|a| a.checkpoints.iter().map(|c| c.iter).eq([4, 8, 12])));
    let p = ra.perturbation.as_ref().unwrap();
    assert_eq!(p.arm, "lambda_0.02");
    assert_eq!(p.pairs.len(), 4);
    assert_eq!(p.at_floor, 4);
    assert_eq!(p.ce_increased, 4);

    roxmltree::Document::parse(&String::from_utf8(read(a.path(), "curves.svg")).unwrap()).unwrap();
    for arm in ["lambda_0", "lambda_0.02"] {
        assert!(a.path().join("arms").join(arm).join("final").is_dir());
    }
    assert_eq!(std::fs::read_dir(a.path().join("corr")).unwrap().count(), 6);
}

#[test]
fn f64_single_arm_run() {
    let cfg = RunConfig { precision: 64, lambdas: vec![0.02], ..micro(1) };
    let dir = tempfile::tempdir().unwrap();
    let r = run_pipeline(&cfg, dir.path(), &mut |_| {}).unwrap();
    assert_eq!(r.arms.len(), 1);
    assert!(r.comparison.is_none());
    assert!(r.perturbation.is_some());
}

#[test]
fn bad_config_fails_in_config_stage() {
    let cfg = RunConfig { precision: 8, ..micro(0) };
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&cfg, dir.path(), &mut |_| {}).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(err.to_string().starts_with("[config]"));
}

#[test]
fn report_outputs_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = RunConfig { lambdas: vec![0.0], ..micro(2) };
    run_pipeline(&cfg, &run, &mut |_| {}).unwrap();
    let out = dir.path().join("rep");
    let written = report::write_report(&[run.join("metrics.csv")], &[], &out).unwrap();
    assert!(!written.is_empty());
    for p in &written {
        let text = std::fs::read_to_string(p).unwrap();
        if p.extension().is_some_and(|e| e == "svg") {
            roxmltree::Document::parse(&text).unwrap();
        }
    }
    assert!(report::write_report(&[dir.path().join("missing.csv")], &[], &out).is_err());
}
