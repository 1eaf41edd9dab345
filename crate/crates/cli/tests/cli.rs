use std::path::Path;
use std::process::{Command, Output};

fn cameo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cameo"))
        .args(args)
        .arg("-q")
        .current_dir(dir)
        .env_remove("CAMEO_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cameo(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn micro_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = cameo_core::pipeline::RunConfig::preset("tiny", 0).unwrap();
    cfg.scenes.scenes = 6;
    cfg.train_scenes = 4;
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.train.iterations = 10;
    cfg.train.eval_every = 5;
    let path = dir.join("micro.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--scenes", "4", "--preset", "tiny", "--out", "data", "--seed", "3"]);
    assert!(d.join("data/scene_0000/scene.json").is_file());
    assert!(d.join("data/scene_0000/0.pointmap.camt").is_file());
    assert!(d.join("data/scene_0000/1.plucker.camt").is_file());

    ok(d, &["corr", "--scene", "data/scene_0001", "--tokens", "8", "8", "--tau", "1.5", "--out", "corr1"]);
    let p = cameo_core::io::load_tensor(d.join("corr1/P_0_1.camt")).unwrap();
    assert_eq!(p.dims(), [64, 64]);
    let m = cameo_core::io::load_tensor(d.join("corr1/M_0_1.camt")).unwrap();
    assert_eq!(m.dims(), [64]);
    assert!(d.join("corr1/index.json").is_file());

    ok(d, &["train", "--data", "data", "--iters", "6", "--eval-every", "3", "--eval-scenes", "1", "--out", "run"]);
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,loss_denoise,loss_cameo,precision_supervised_layer\n"));
    assert_eq!(metrics.lines().count(), 7);
    assert!(d.join("run/final/checkpoint.json").is_file());
    assert!(d.join("run/iter_000003/checkpoint.json").is_file());

    ok(d, &["sample", "--checkpoint", "run/final", "--scene", "data/scene_0000", "--steps", "5", "--out", "smp"]);
    assert_eq!(cameo_core::io::load_tensor(d.join("smp/sample.camt")).unwrap().dims(), [512, 8]);

    ok(d, &["perturb", "--checkpoint", "run/final/checkpoint.json", "--scene", "data/scene_0000", "--out", "pt"]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("pt/summary.json")).unwrap()).unwrap();
    for pair in summary["pairs"].as_array().unwrap() {
        assert_eq!(pair["precision_perturbed"], pair["self_floor"]);
    }
    let post = cameo_core::io::load_tensor(d.join("pt/post/full_h0.camt")).unwrap().to_f64_vec();
    assert!(post.iter().enumerate().all(|(k, &v)| v == if k % 513 == 0 { 1.0 } else { 0.0 }));

    ok(d, &["probe", "--pairs", "data", "--source", "pointmap", "--out", "probe/gt.json", "--svg"]);
    ok(d, &["probe", "--pairs", "data", "--source", "attention", "--checkpoint", "run/final", "--out", "probe/attn.json"]);
    let gt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("probe/gt.json")).unwrap()).unwrap();
    assert_eq!(gt["grid"], "native");
    assert!(gt["overall"].as_f64().unwrap() > 0.5);
    assert!(std::fs::read_to_string(d.join("probe/gt.csv")).unwrap().starts_with("bin,pairs,precision\n"));
    roxmltree::Document::parse(&std::fs::read_to_string(d.join("probe/gt.svg")).unwrap()).unwrap();

    ok(d, &["report", "--metrics", "run/metrics.csv", "--probe", "probe/gt.json", "probe/attn.json", "--out", "rep"]);
    for f in ["curves.svg", "bins.svg"] {
        let svg = std::fs::read_to_string(d.join("rep").join(f)).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        assert!(!svg.contains("href"));
    }
}

#[test]
fn probe_reads_pair_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--scenes", "2", "--res", "48", "48", "--out", "data"]);
    // Descriptors are the 8×8 token coordinates themselves.
    for s in ["scene_0000", "scene_0001"] {
        let pms = cameo_core::scene::read_pointmaps(&d.join("data").join(s), 2).unwrap();
        for (v, pm) in pms.iter().enumerate() {
            let g = cameo_core::correspondence::token_grid(pm, 8, 8);
            let vals: Vec<f64> = g.points.iter().flat_map(|p| p.iter().copied()).collect();
            let t = cameo_core::io::Tensor::from_f64(vec![8, 8, 3], vals).unwrap();
            cameo_core::io::save_tensor(d.join(format!("{s}_{v}.camt")), &t).unwrap();
        }
    }
    let manifest = serde_json::json!({ "pairs": [
        { "scene": "data/scene_0000", "i": 0, "j": 1, "features_a": "scene_0000_0.camt", "features_b": "scene_0000_1.camt" },
        { "scene": "data/scene_0001", "i": 0, "j": 1, "theta_deg": 10.0, "features_a": "scene_0001_0.camt", "features_b": "scene_0001_1.camt" },
    ]});
    std::fs::write(d.join("pairs.json"), manifest.to_string()).unwrap();
    ok(d, &["probe", "--pairs", "pairs.json", "--source", "features", "--metric", "l2", "--out", "f.json"]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("f.json")).unwrap()).unwrap();
    assert_eq!(r["grid"], "8x8");
    assert_eq!(r["pairs"][1]["theta_deg"], 10.0);
    assert_eq!(r["pairs"][1]["bin"], "0-30");

    ok(d, &["probe", "--pairs", "pairs.json", "--source", "features", "--resize-grid", "12", "--out", "r.json"]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["grid"], "12x12");

    let out = cameo(d, &["probe", "--pairs", "pairs.json", "--source", "attention", "--out", "a.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_is_byte_deterministic_and_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = micro_config(d);
    let cfg = cfg.to_str().unwrap();
    ok(d, &["pipeline", "--config", cfg, "--out", "a"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cameo"))
        .args(["pipeline", "--config", cfg, "--out", "b", "-q"])
        .current_dir(d)
        .env("CAMEO_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "report.json", "curves.svg"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("arm,iter,loss_denoise,loss_cameo,precision_supervised_layer\n"));
    let b_cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("b/config.json")).unwrap()).unwrap();
    assert_eq!(b_cfg["threads"], 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&cameo(d, &["pipeline", "--preset", "huge"])), 2);
    assert_eq!(code(&cameo(d, &["frobnicate"])), 2);
    assert_eq!(code(&cameo(d, &["synth", "--out", "x", "--precision", "16"])), 2);
    assert_eq!(code(&cameo(d, &["synth", "--out", "x", "--views", "1"])), 2);
    assert_eq!(code(&cameo(d, &["train", "--data", "nowhere", "--out", "x"])), 2);
    assert_eq!(code(&cameo(d, &["probe", "--pairs", "data", "--source", "pointmap", "--rho", "0"])), 2);
    assert_eq!(code(&cameo(d, &["sample", "--checkpoint", "none", "--scene", "none", "--out", "x"])), 2);

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_cameo"))
        .args(["synth", "--out", "x"])
        .current_dir(d)
        .env("CAMEO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad_threads), 2);

    // Readable config, failing stage.
    ok(d, &["synth", "--scenes", "1", "--res", "16", "16", "--out", "data"]);
    std::fs::remove_file(d.join("data/scene_0000/1.pointmap.camt")).unwrap();
    assert_eq!(code(&cameo(d, &["corr", "--scene", "data", "--out", "c"])), 3);

    std::fs::write(d.join("empty.csv"), "iter,loss_denoise,loss_cameo,precision_supervised_layer\n").unwrap();
    let out = cameo(d, &["report", "--metrics", "empty.csv", "--out", "rep"]);
    assert_eq!(code(&out), 3);
    assert!(!d.join("rep").exists());
    std::fs::write(d.join("bad.csv"), "iter,loss_denoise,loss_cameo,precision_supervised_layer\n1,x,0,0\n").unwrap();
    assert_eq!(code(&cameo(d, &["report", "--metrics", "bad.csv", "--out", "rep"])), 3);
    assert!(!d.join("rep").exists());
}
