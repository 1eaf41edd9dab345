use std::fs;
use std::path::{Path, PathBuf};

use cameo_core::correspondence::{correspondence_set, token_grid, write_correspondences, TokenGrid};
use cameo_core::dataset::{self, read_dataset, write_dataset, DATASET_FILE};
use cameo_core::io::{load_tensor, resize_bilinear, save_tensor, seeded_rng, Grid, Tensor};
use cameo_core::model::{
    denoiser_forward, load_checkpoint, sample as ddim_sample, save_checkpoint, Denoiser, DenoiserParams, ForwardOptions, LossType,
    ModelConfig, NoiseSchedule, SampleRequest,
};
use cameo_core::nn::Real;
use cameo_core::pipeline::{self, attention_pairs, prepare_all, RunConfig};
use cameo_core::probe::{evaluate_pairs, MatchSource, Metric, PrecisionReport, ProbePair};
use cameo_core::report;
use cameo_core::scene::{read_pointmaps, read_scene_json, relative_rotation_deg, Pointmap, Scene, SceneSetSpec};
use cameo_core::train::{self, clean_latents, conditioning, init_params, prepare_scene, SceneData, TrainConfig};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::*;

type Res = Result<(), Failure>;

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure::Stage(format!("[{name}] {e}"))
}

fn config(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn write_json<S: Serialize>(path: &Path, value: &S, name: &'static str) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(stage(name))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(stage(name))?;
    }
    fs::write(path, text + "\n").map_err(stage(name))
}

fn is_dataset(dir: &Path) -> bool {
    dir.join(DATASET_FILE).is_file()
}

fn read_scene(dir: &Path, name: &'static str) -> Result<(Scene, Vec<Pointmap>), Failure> {
    let scene = read_scene_json(dir).map_err(stage(name))?;
    let pms = read_pointmaps(dir, scene.cameras.len()).map_err(stage(name))?;
    Ok((scene, pms))
}

fn arr_tensor<T: Real>(a: &Array2<T>) -> Tensor {
    Tensor::from_f64(a.shape().to_vec(), a.iter().map(|v| v.f64()).collect()).expect("shape matches data")
}

// ---------------------------------------------------------------------------

pub fn synth(g: &Globals, a: SynthArgs) -> Res {
    let mut spec = match a.preset.as_str() {
        "tiny" => SceneSetSpec::tiny(),
        "default" => SceneSetSpec::default(),
        p => return Err(config(format!("unknown scene preset '{p}'"))),
    };
    spec.scenes = a.scenes;
    spec.views = a.views;
    if let Some(d) = a.spread_deg {
        spec.spread_deg = d;
    }
    if let Some(r) = a.res {
        (spec.image_height, spec.image_width) = (r[0], r[1]);
    }
    if let Some(s) = a.size {
        (spec.size_min, spec.size_max) = (s[0], s[1]);
    }
    if let Some(f) = a.fov_deg {
        spec.fov_deg = f;
    }
    if spec.image_height == 0 || spec.image_width == 0 {
        return Err(config("resolution must be positive"));
    }
    g.log(&format!("synth: {} scenes x {} views", spec.scenes, spec.views));
    let m = write_dataset(&a.out, &spec, g.seed).map_err(|e| match e {
        cameo_core::scene::SceneError::Unsatisfiable(_) => config(e.to_string()),
        e => stage("synth")(e),
    })?;
    g.log(&format!("wrote {} scenes to {}", m.scenes.len(), a.out.display()));
    Ok(())
}

pub fn corr(g: &Globals, a: CorrArgs) -> Res {
    let (h, w) = (a.tokens[0], a.tokens[1]);
    if h == 0 || w == 0 {
        return Err(config("token grid must be non-empty"));
    }
    if !(a.tau >= 0.0) {
        return Err(config("tau must be non-negative"));
    }
    let scenes: Vec<(PathBuf, PathBuf)> = if is_dataset(&a.scene) {
        let m = dataset::read_manifest(&a.scene).map_err(stage("corr"))?;
        m.scenes.iter().map(|n| (a.scene.join(n), a.out.join(n))).collect()
    } else {
        vec![(a.scene.clone(), a.out.clone())]
    };
    for (src, dst) in &scenes {
        let (_, pms) = read_scene(src, "corr")?;
        let grids: Vec<TokenGrid> = pms.iter().map(|pm| token_grid(pm, h, w)).collect();
        let set = correspondence_set(&grids, a.tau).map_err(stage("corr"))?;
        let idx = write_correspondences(dst, &set).map_err(stage("corr"))?;
        let visible: usize = idx.pairs.iter().map(|p| p.visible).sum();
        g.log(&format!("corr: {} ({} pairs, {visible} visible tokens)", src.display(), idx.pairs.len()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    data: PathBuf,
    seed: u64,
    precision: u32,
    train_scenes: Vec<String>,
    eval_scenes: Vec<String>,
    model: ModelConfig,
    train: TrainConfig,
}

fn train_typed<T: Real>(g: &Globals, model: &ModelConfig, tcfg: &TrainConfig, tr: &[SceneData], ev: &[SceneData], out: &Path) -> Res {
    let init = init_params::<T>(model, g.seed).map_err(stage("train"))?;
    let outcome = train::train(model, init, tr, ev, tcfg, &NoiseSchedule::default(), |e, p| {
        g.log(&format!("iteration {}: median precision {:.4}", e.iter, e.median));
        save_checkpoint(&out.join(format!("iter_{:06}", e.iter)), model, p, e.iter, serde_json::json!({ "lambda": tcfg.lambda }))?;
        Ok(())
    })
    .map_err(stage("train"))?;
    save_checkpoint(&out.join("final"), model, &outcome.averaged, tcfg.iterations, serde_json::json!({ "lambda": tcfg.lambda }))
        .map_err(stage("train"))?;
    fs::write(out.join("metrics.csv"), report::metrics_table(&outcome.log)).map_err(stage("train"))?;
    write_json(&out.join("evals.json"), &outcome.checkpoints, "train")
}

pub fn train(g: &Globals, a: TrainArgs) -> Res {
    let preset = RunConfig::preset(&a.preset, g.seed).ok_or_else(|| config(format!("unknown preset '{}'", a.preset)))?;
    let model = preset.model;
    let mut t = TrainConfig { lambda: a.lambda, seed: g.seed, ..preset.train };
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.iters {
        t.iterations = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    if let Some(l) = a.loss {
        t.loss_type = match l {
            LossArg::Ce => LossType::Ce,
            LossArg::L1 => LossType::L1,
        };
    }
    t.validate().map_err(|e| config(e.to_string()))?;
    if !is_dataset(&a.data) {
        return Err(config(format!("{} is not a dataset directory", a.data.display())));
    }
    let raw = read_dataset(&a.data).map_err(stage("train"))?;
    let n_eval = a.eval_scenes.unwrap_or(raw.len() / 2);
    if n_eval == 0 || n_eval >= raw.len() {
        return Err(config(format!("need 1..{} held-out scenes, got {n_eval}", raw.len())));
    }
    if raw[0].0.cameras.len() != model.views {
        return Err(config(format!("preset expects {} views per scene", model.views)));
    }
    g.log(&format!("train: preparing {} scenes", raw.len()));
    let scenes = prepare_all(&raw, &model, t.tau).map_err(stage("train"))?;
    let (tr, ev) = scenes.split_at(raw.len() - n_eval);
    fs::create_dir_all(&a.out).map_err(stage("train"))?;
    let record = TrainRecord {
        data: a.data.clone(),
        seed: g.seed,
        precision: g.precision,
        train_scenes: tr.iter().map(|s| s.name.clone()).collect(),
        eval_scenes: ev.iter().map(|s| s.name.clone()).collect(),
        model: model.clone(),
        train: t.clone(),
    };
    write_json(&a.out.join("config.json"), &record, "train")?;
    if g.precision == 64 {
        train_typed::<f64>(g, &model, &t, tr, ev, &a.out)
    } else {
        train_typed::<f32>(g, &model, &t, tr, ev, &a.out)
    }
}

fn load<T: Real>(path: &Path) -> Result<(ModelConfig, DenoiserParams<T>), Failure> {
    let (m, p) = load_checkpoint::<T>(path).map_err(|e| config(format!("checkpoint {}: {e}", path.display())))?;
    Ok((m.model, p))
}

fn model_scene(model: &ModelConfig, dir: &Path, name: &'static str) -> Result<SceneData, Failure> {
    let (scene, pms) = read_scene(dir, name)?;
    if scene.cameras.len() != model.views {
        return Err(config(format!("scene has {} views, checkpoint expects {}", scene.cameras.len(), model.views)));
    }
    prepare_scene(&scene, &pms, model, cameo_core::correspondence::DEFAULT_TAU).map_err(stage(name))
}

#[derive(Serialize)]
struct SampleSummary {
    steps: usize,
    cfg: f64,
    seed: u64,
    targets: Vec<usize>,
    /// Mean squared difference to the clean latents over target rows.
    target_mse: f64,
    /// The same for an all-zero prediction, as a scale reference.
    zero_mse: f64,
}

fn sample_typed<T: Real>(g: &Globals, a: &SampleArgs) -> Res {
    let (model, params) = load::<T>(&a.checkpoint)?;
    let scene = model_scene(&model, &a.scene, "sample")?;
    let targets = a.targets.clone().unwrap_or_else(|| (1..model.views).collect());
    if targets.is_empty() || targets.iter().any(|&v| v >= model.views) {
        return Err(config(format!("targets must be view indices below {}", model.views)));
    }
    let flags: Vec<bool> = (0..model.views).map(|v| targets.contains(&v)).collect();
    let req = SampleRequest {
        clean: clean_latents::<T>(&scene),
        cond: conditioning::<T>(&scene, &flags, false),
        targets: flags.clone(),
        tokens_per_view: model.tokens_per_view(),
        steps: a.steps,
        cfg_weight: a.cfg,
    };
    let sched = NoiseSchedule::default();
    let predictor = Denoiser { cfg: &model, params: &params };
    g.log(&format!("sample: {} DDIM steps, guidance {}", a.steps, a.cfg));
    let out = ddim_sample(&predictor, &sched, &req, &mut seeded_rng(g.seed)).map_err(stage("sample"))?;
    let n = model.tokens_per_view();
    let mse = |x: &Array2<T>| {
        let mut acc = 0.0;
        let mut count = 0usize;
        for &v in &targets {
            for r in v * n..(v + 1) * n {
                for (p, q) in x.row(r).iter().zip(req.clean.row(r)) {
                    acc += (p.f64() - q.f64()).powi(2);
                    count += 1;
                }
            }
        }
        acc / count as f64
    };
    fs::create_dir_all(&a.out).map_err(stage("sample"))?;
    save_tensor(a.out.join("sample.camt"), &arr_tensor(&out)).map_err(stage("sample"))?;
    save_tensor(a.out.join("clean.camt"), &arr_tensor(&req.clean)).map_err(stage("sample"))?;
    let (target_mse, zero_mse) = (mse(&out), mse(&Array2::zeros(req.clean.raw_dim())));
    let summary = SampleSummary { steps: a.steps, cfg: a.cfg, seed: g.seed, targets, target_mse, zero_mse };
    write_json(&a.out.join("summary.json"), &summary, "sample")
}

pub fn sample(g: &Globals, a: SampleArgs) -> Res {
    if a.steps == 0 || a.steps > 1000 {
        return Err(config("steps must lie in 1..=1000"));
    }
    if g.precision == 64 {
        sample_typed::<f64>(g, &a)
    } else {
        sample_typed::<f32>(g, &a)
    }
}

// ---------------------------------------------------------------------------
// probe

/// One entry of a pair manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairSpec {
    #[serde(default)]
    pub id: Option<String>,
    /// Scene directory with stored pointmaps and cameras.
    pub scene: PathBuf,
    pub i: usize,
    pub j: usize,
    #[serde(default)]
    pub theta_deg: Option<f64>,
    /// `h × w × d` descriptor grids.
    #[serde(default)]
    pub features_a: Option<PathBuf>,
    #[serde(default)]
    pub features_b: Option<PathBuf>,
    /// `hw × hw` row-stochastic map with its token grid size.
    #[serde(default)]
    pub attention: Option<PathBuf>,
    #[serde(default)]
    pub tokens: Option<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairSpec>,
}

#[derive(Serialize)]
struct ProbeOutput {
    source: String,
    metric: Metric,
    /// Matching grid, or "native" for pixel-resolution pointmaps.
    grid: String,
    attention_ratio: &'static str,
    #[serde(flatten)]
    report: PrecisionReport,
}

fn feature_grid(path: &Path) -> Result<Grid, Failure> {
    let t = load_tensor(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    Grid::from_tensor(&t).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn grid_rows(g: &Grid) -> Array2<f64> {
    Array2::from_shape_vec((g.h * g.w, g.c), g.data.clone()).expect("grid shape")
}

fn pointmap_descriptors(grid: &TokenGrid) -> Array2<f64> {
    Array2::from_shape_fn((grid.len(), 3), |(r, c)| if grid.valid[r] { grid.points[r][c] } else { f64::NAN })
}

fn geometry(pm: &Pointmap, resize: Option<usize>, native_hw: Option<(usize, usize)>) -> TokenGrid {
    match (resize, native_hw) {
        (Some(n), _) => token_grid(pm, n, n),
        (None, Some((h, w))) => token_grid(pm, h, w),
        (None, None) => TokenGrid::from_pointmap(pm),
    }
}

fn manifest_pairs(a: &ProbeArgs, metric: Metric) -> Result<(Vec<ProbePair>, String), Failure> {
    let text = fs::read_to_string(&a.pairs).map_err(|e| config(format!("{}: {e}", a.pairs.display())))?;
    let m: PairManifest = serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", a.pairs.display())))?;
    if m.pairs.is_empty() {
        return Err(config("pair manifest is empty"));
    }
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let mut grids = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (k, p) in m.pairs.iter().enumerate() {
        let (scene, pms) = read_scene(&base.join(&p.scene), "probe")?;
        if p.i >= pms.len() || p.j >= pms.len() || p.i == p.j {
            return Err(config(format!("pair {k}: bad view indices ({}, {})", p.i, p.j)));
        }
        let theta = p.theta_deg.unwrap_or_else(|| relative_rotation_deg(&scene.cameras[p.i], &scene.cameras[p.j]));
        let id = p.id.clone().unwrap_or_else(|| format!("{}:{}-{}", scene.name, p.i, p.j));
        let (geom_a, geom_b, source) = match a.source {
            SourceArg::Pointmap => {
                let (ga, gb) = (geometry(&pms[p.i], a.resize_grid, None), geometry(&pms[p.j], a.resize_grid, None));
                let src = MatchSource::Descriptors { a: pointmap_descriptors(&ga), b: pointmap_descriptors(&gb), metric };
                (ga, gb, src)
            }
            SourceArg::Features => {
                let (Some(fa), Some(fb)) = (&p.features_a, &p.features_b) else {
                    return Err(config(format!("pair {k}: features_a and features_b are required")));
                };
                let (mut fa, mut fb) = (feature_grid(&base.join(fa))?, feature_grid(&base.join(fb))?);
                if let Some(n) = a.resize_grid {
                    fa = resize_bilinear(&fa, n, n);
                    fb = resize_bilinear(&fb, n, n);
                }
                let ga = geometry(&pms[p.i], None, Some((fa.h, fa.w)));
                let gb = geometry(&pms[p.j], None, Some((fb.h, fb.w)));
                (ga, gb, MatchSource::Descriptors { a: grid_rows(&fa), b: grid_rows(&fb), metric })
            }
            SourceArg::Attention => {
                let Some(path) = &p.attention else {
                    return Err(config(format!("pair {k}: attention is required")));
                };
                let t = load_tensor(base.join(path)).map_err(|e| config(format!("pair {k}: {e}")))?;
                let [n, n2] = t.dims() else {
                    return Err(config(format!("pair {k}: attention must be a matrix")));
                };
                let side = (*n as f64).sqrt().round() as usize;
                let [h, w] = p.tokens.unwrap_or([side, side]);
                if n != n2 || h * w != *n {
                    return Err(config(format!("pair {k}: attention shape {:?} does not fit {h}x{w} tokens", t.dims())));
                }
                let map = Array2::from_shape_vec((*n, *n), t.to_f64_vec()).expect("dims checked");
                let ga = geometry(&pms[p.i], None, Some((h, w)));
                let gb = geometry(&pms[p.j], None, Some((h, w)));
                (ga, gb, MatchSource::Attention(map))
            }
        };
        grids.insert(if a.source == SourceArg::Pointmap && a.resize_grid.is_none() {
            "native".to_string()
        } else {
            format!("{}x{}", geom_a.h, geom_a.w)
        });
        out.push(ProbePair { id, theta_deg: theta, geom_a, geom_b, source });
    }
    Ok((out, grids.into_iter().collect::<Vec<_>>().join(",")))
}

fn dataset_pairs<T: Real>(a: &ProbeArgs, metric: Metric) -> Result<(Vec<ProbePair>, String), Failure> {
    let raw = read_dataset(&a.pairs).map_err(stage("probe"))?;
    match a.source {
        SourceArg::Pointmap => {
            let mut out = Vec::new();
            for (scene, pms) in &raw {
                for i in 0..pms.len() {
                    for j in i + 1..pms.len() {
                        let (ga, gb) = (geometry(&pms[i], a.resize_grid, None), geometry(&pms[j], a.resize_grid, None));
                        out.push(ProbePair {
                            id: format!("{}:{i}-{j}", scene.name),
                            theta_deg: relative_rotation_deg(&scene.cameras[i], &scene.cameras[j]),
                            source: MatchSource::Descriptors { a: pointmap_descriptors(&ga), b: pointmap_descriptors(&gb), metric },
                            geom_a: ga,
                            geom_b: gb,
                        });
                    }
                }
            }
            let grid = a.resize_grid.map_or("native".to_string(), |n| format!("{n}x{n}"));
            Ok((out, grid))
        }
        SourceArg::Attention => {
            let Some(ck) = &a.checkpoint else {
                return Err(config("attention probing of a dataset needs --checkpoint"));
            };
            let (model, params) = load::<T>(ck)?;
            let scenes = prepare_all(&raw, &model, cameo_core::correspondence::DEFAULT_TAU).map_err(stage("probe"))?;
            let pairs = attention_pairs(&model, &params, &scenes).map_err(stage("probe"))?;
            Ok((pairs, format!("{}x{}", model.h, model.w)))
        }
        SourceArg::Features => Err(config("feature probing needs a pair manifest")),
    }
}

pub fn probe(g: &Globals, a: ProbeArgs) -> Res {
    if a.topk == 0 {
        return Err(config("topk must be positive"));
    }
    if !(a.rho > 0.0) {
        return Err(config("rho must be positive"));
    }
    if a.resize_grid == Some(0) {
        return Err(config("resize-grid must be positive"));
    }
    let metric = match a.metric {
        MetricArg::Cosine => Metric::Cosine,
        MetricArg::L2 => Metric::L2,
    };
    let (pairs, grid) = if a.pairs.is_dir() {
        if g.precision == 64 {
            dataset_pairs::<f64>(&a, metric)?
        } else {
            dataset_pairs::<f32>(&a, metric)?
        }
    } else {
        manifest_pairs(&a, metric)?
    };
    g.log(&format!("probe: {} pairs", pairs.len()));
    let report = evaluate_pairs(&pairs, a.topk, a.rho).map_err(stage("probe"))?;
    let out = ProbeOutput {
        source: format!("{:?}", a.source).to_lowercase(),
        metric,
        grid,
        attention_ratio: "1 - weight as pseudo-distance in the ratio test",
        report: report.clone(),
    };
    write_json(&a.out, &out, "probe")?;
    fs::write(a.out.with_extension("csv"), report.to_csv()).map_err(stage("probe"))?;
    if a.svg {
        let name = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
        let svg = report::render_svg(&[report::bin_chart(&[(name, report.clone())])], 1);
        fs::write(a.out.with_extension("svg"), svg).map_err(stage("probe"))?;
    }
    g.log(&format!("overall precision {:.4} over {} pairs", report.overall, report.pairs_evaluated));
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PerturbSummary {
    layer: usize,
    supervised_block: usize,
    /// RMS change of the predicted noise caused by the perturbation.
    eps_change_rms: f64,
    pairs: Vec<pipeline::PerturbedPair>,
}

fn perturb_typed<T: Real>(g: &Globals, a: &PerturbArgs) -> Res {
    let (model, params) = load::<T>(&a.checkpoint)?;
    let layer = a.layer.unwrap_or(model.supervised_block);
    if layer >= model.blocks {
        return Err(config(format!("layer {layer} out of range, model has {} blocks", model.blocks)));
    }
    let scene = model_scene(&model, &a.scene, "perturb")?;
    let input = train::eval_input::<T>(&scene);
    let pre = denoiser_forward(&model, &params, &input, ForwardOptions::default()).map_err(stage("perturb"))?;
    let post = denoiser_forward(&model, &params, &input, ForwardOptions { perturb_block: Some(layer) }).map_err(stage("perturb"))?;
    let acfg = model.attention(layer);
    for (tag, state) in [("pre", &pre), ("post", &post)] {
        let dir = a.out.join(tag);
        fs::create_dir_all(&dir).map_err(stage("perturb"))?;
        let cache = &state.blocks[layer].attn;
        for h in 0..model.heads {
            save_tensor(dir.join(format!("full_h{h}.camt")), &arr_tensor(&cache.full_map(h))).map_err(stage("perturb"))?;
            for cv in cache.all_cross_views(&acfg, h) {
                let (i, j) = cv.pair;
                save_tensor(dir.join(format!("A_h{h}_{i}_{j}.camt")), &arr_tensor(&cv.probs)).map_err(stage("perturb"))?;
            }
        }
    }
    let diff = &pre.eps_hat - &post.eps_hat;
    let eps_change_rms = (diff.iter().map(|v| v.f64().powi(2)).sum::<f64>() / diff.len() as f64).sqrt();
    let pairs = if layer == model.supervised_block {
        let tcfg = TrainConfig::default();
        pipeline::perturbation_report(&a.checkpoint.display().to_string(), &model, &params, std::slice::from_ref(&scene), tcfg.top_k, tcfg.rho)
            .map_err(stage("perturb"))?
            .pairs
    } else {
        Vec::new()
    };
    g.log(&format!("perturb: block {layer}, noise prediction RMS change {eps_change_rms:.4e}"));
    write_json(&a.out.join("summary.json"), &PerturbSummary { layer, supervised_block: model.supervised_block, eps_change_rms, pairs }, "perturb")
}

pub fn perturb(g: &Globals, a: PerturbArgs) -> Res {
    if g.precision == 64 {
        perturb_typed::<f64>(g, &a)
    } else {
        perturb_typed::<f32>(g, &a)
    }
}

pub fn report(g: &Globals, a: ReportArgs) -> Res {
    let written = report::write_report(&a.metrics, &a.probe, &a.out).map_err(stage("report"))?;
    for p in written {
        g.log(&format!("wrote {}", p.display()));
    }
    Ok(())
}

pub fn pipeline(g: &Globals, a: PipelineArgs) -> Res {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::preset(&a.preset, g.seed).ok_or_else(|| {
            config(format!("unknown preset '{}' (expected one of {})", a.preset, pipeline::PRESETS.join(", ")))
        })?,
    };
    if a.config.is_none() {
        cfg.precision = g.precision;
    }
    cfg.threads = g.threads;
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
        cfg.train.eval_every = cfg.train.eval_every.min(n.max(1));
    }
    cfg.validate().map_err(config)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.preset, cfg.seed)));
    let started = std::time::Instant::now();
    let r = pipeline::run_pipeline(&cfg, &out, &mut |m| g.log(m)).map_err(|e| match e.stage {
        pipeline::Stage::Config => Failure::Config(e.to_string()),
        _ => Failure::Stage(e.to_string()),
    })?;
    if let Some(c) = &r.comparison {
        g.log(&format!(
            "{} vs {}: precision gap {:+.1} points, denoise ratio {:.3}",
            c.aligned, c.baseline, c.precision_gap_points, c.denoise_ratio
        ));
    }
    g.log(&format!("done in {:.0} s; outputs in {}", started.elapsed().as_secs_f64(), out.display()));
    Ok(())
}
