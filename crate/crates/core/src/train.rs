//! Training data assembly, the training loop and attention-precision evaluation.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::perturb_identity;
use crate::correspondence::{correspondence_set, token_grid, CorrError, TokenCorrespondence, TokenGrid};
use crate::io::{resize_bilinear, substream, Grid, Rng};
use crate::model::{
    denoiser_forward, forward_noise, masked_ce_from_probs, supervised_distributions, total_loss, DenoiserInput,
    DenoiserParams, ForwardOptions, LossBatch, LossParts, LossType, ModelConfig, ModelError, NoiseSchedule,
    PairDistribution, COND_CHANNELS, REF_FLAG_CHANNEL,
};
use crate::nn::Real;
use crate::probe::{match_from_attention, score_matches, select_top, self_matches, MatchCandidate, DEFAULT_RHO, DEFAULT_TOP_K};
use crate::scene::{plucker_embedding, relative_rotation_deg, surface_code, Camera, Pointmap, Scene};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corr(#[from] CorrError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iter}: denoise {denoise}, alignment {cameo}")]
    Diverged { iter: usize, denoise: f64, cameo: f64 },
    #[error("scene '{scene}' has {found} views, model expects {expected}")]
    ViewCount { scene: String, found: usize, expected: usize },
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub cfg_drop_prob: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub loss_type: LossType,
    pub seed: u64,
    /// Checkpoint evaluation period in iterations.
    pub eval_every: usize,
    /// Upper bound on the number of noised target views per sample.
    pub max_targets: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub top_k: usize,
    pub rho: f64,
    /// Decay of the parameter moving average used for checkpoints; 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.02,
            tau: 1.5,
            cfg_drop_prob: 0.1,
            batch_size: 1,
            iterations: 2000,
            learning_rate: 1e-3,
            loss_type: LossType::Ce,
            seed: 0,
            eval_every: 200,
            max_targets: 3,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            top_k: DEFAULT_TOP_K,
            rho: DEFAULT_RHO,
            ema_decay: 0.995,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return bad("cfg_drop_prob must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_targets == 0 || self.top_k == 0 {
            return bad("batch_size, eval_every, max_targets and top_k must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.rho > 0.0 && self.rms_eps > 0.0 && (0.0..1.0).contains(&self.rms_decay)) {
            return bad("learning_rate, rho, rms_eps must be positive and rms_decay in [0, 1)");
        }
        Ok(())
    }
}

/// Per-view training inputs at token resolution.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub grid: TokenGrid,
    /// `hw × channels` clean latent.
    pub latent: Array2<f64>,
    /// `hw × 6` Plücker rays at token centres.
    pub plucker: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub cameras: Vec<Camera>,
    pub views: Vec<ViewData>,
    pub corr: Vec<TokenCorrespondence>,
}

impl SceneData {
    pub fn theta(&self, i: usize, j: usize) -> f64 {
        relative_rotation_deg(&self.cameras[i], &self.cameras[j])
    }
}

/// Token latent of one view: the surface code rendered per pixel (zero on the
/// background) and downsampled like an image. `wavelength` is the longest
/// code wavelength in meters.
pub fn latent_grid(pm: &Pointmap, channels: usize, wavelength: f64, h: usize, w: usize) -> Array2<f64> {
    let mut data = Vec::with_capacity(pm.h * pm.w * channels);
    for (p, &ok) in pm.points.iter().zip(&pm.valid) {
        if ok {
            data.extend(surface_code(p, channels, wavelength));
        } else {
            data.extend(std::iter::repeat_n(0.0, channels));
        }
    }
    let small = resize_bilinear(&Grid::new(pm.h, pm.w, channels, data), h, w);
    Array2::from_shape_vec((h * w, channels), small.data).expect("grid size")
}

pub fn prepare_scene(scene: &Scene, pointmaps: &[Pointmap], cfg: &ModelConfig, tau: f64) -> Result<SceneData> {
    if pointmaps.len() != cfg.views || scene.cameras.len() != cfg.views {
        return Err(TrainError::ViewCount { scene: scene.name.clone(), found: pointmaps.len(), expected: cfg.views });
    }
    let wavelength = 2.0 * scene.bounding_sphere().1;
    let views: Vec<ViewData> = pointmaps
        .iter()
        .zip(&scene.cameras)
        .map(|(pm, cam)| {
            let pl = plucker_embedding(cam, (cfg.h, cfg.w));
            ViewData {
                grid: token_grid(pm, cfg.h, cfg.w),
                latent: latent_grid(pm, cfg.channels, wavelength, cfg.h, cfg.w),
                plucker: Array2::from_shape_vec((cfg.h * cfg.w, 6), pl.values.iter().flatten().copied().collect())
                    .expect("plucker size"),
            }
        })
        .collect();
    let grids: Vec<TokenGrid> = views.iter().map(|v| v.grid.clone()).collect();
    let corr = correspondence_set(&grids, tau)?;
    Ok(SceneData { name: scene.name.clone(), cameras: scene.cameras.clone(), views, corr })
}

fn stack_views<T: Real>(scene: &SceneData, f: impl Fn(&ViewData) -> &Array2<f64>) -> Array2<T> {
    let parts: Vec<_> = scene.views.iter().map(|v| f(v).view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &parts).expect("same widths").mapv(T::of)
}

pub fn clean_latents<T: Real>(scene: &SceneData) -> Array2<T> {
    stack_views(scene, |v| &v.latent)
}

/// Plücker rays and reference flags; camera channels zeroed when `drop`.
pub fn conditioning<T: Real>(scene: &SceneData, targets: &[bool], drop: bool) -> Array2<T> {
    let n = scene.views[0].latent.nrows();
    let mut cond = Array2::zeros((n * scene.views.len(), COND_CHANNELS));
    for (v, view) in scene.views.iter().enumerate() {
        let mut rows = cond.slice_mut(s![v * n..(v + 1) * n, ..]);
        if !drop {
            rows.slice_mut(s![.., ..6]).assign(&view.plucker.mapv(T::of));
        }
        if !targets[v] {
            rows.column_mut(REF_FLAG_CHANNEL).fill(T::one());
        }
    }
    cond
}

fn normal<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

/// Draws timestep, target views, noise and condition dropping for one sample.
pub fn draw_batch<'a, T: Real>(
    scene: &'a SceneData,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossBatch<'a, T>> {
    let views = scene.views.len();
    let n = scene.views[0].latent.nrows();
    let max_m = cfg.max_targets.min(views - 1).max(1);
    let m = rng.random_range(1..=max_m);
    let mut order: Vec<usize> = (0..views).collect();
    order.shuffle(rng);
    let mut targets = vec![false; views];
    for &v in &order[..m] {
        targets[v] = true;
    }
    let t = rng.random_range(1..=sched.steps);
    let drop = rng.random::<f64>() < cfg.cfg_drop_prob;
    let x0: Array2<T> = clean_latents(scene);
    let eps: Array2<T> = normal(rng, x0.nrows(), x0.ncols());
    let mut x = x0.clone();
    for (v, _) in targets.iter().enumerate().filter(|(_, &t)| t) {
        let rows = s![v * n..(v + 1) * n, ..];
        let noised = forward_noise(x0.slice(rows), t, eps.slice(rows), sched)?;
        x.slice_mut(rows).assign(&noised);
    }
    let cond = conditioning(scene, &targets, drop);
    Ok(LossBatch { input: DenoiserInput { x, cond, t }, eps, targets, corr: scene.corr.iter().collect() })
}

/// Evaluation input: clean latents everywhere, view 0 as the reference,
/// timestep 1, full camera conditioning.
pub fn eval_input<T: Real>(scene: &SceneData) -> DenoiserInput<T> {
    let mut targets = vec![true; scene.views.len()];
    targets[0] = false;
    DenoiserInput { x: clean_latents(scene), cond: conditioning(scene, &targets, false), t: 1 }
}

fn candidates_for(map: &Array2<f64>, src: &TokenGrid) -> Vec<MatchCandidate> {
    match_from_attention(map.view()).into_iter().filter(|m| src.valid[m.src]).collect()
}

/// Attention-correspondence precision of one pair map; `None` if the source
/// view has no valid token.
pub fn map_precision(map: &Array2<f64>, src: &TokenGrid, dst: &TokenGrid, k: usize, rho: f64) -> Option<f64> {
    let mut top = select_top(candidates_for(map, src), k);
    score_matches(&mut top, src, dst, rho).ok()
}

/// Precision of matching every token to the token with the same index.
pub fn self_match_floor(src: &TokenGrid, dst: &TokenGrid, k: usize, rho: f64) -> Option<f64> {
    let cands = self_matches(src.len()).into_iter().filter(|m| src.valid[m.src]).collect();
    let mut top = select_top(cands, k);
    score_matches(&mut top, src, dst, rho).ok()
}

fn mean_precision<T: Real>(scene: &SceneData, dists: &[PairDistribution<T>], k: usize, rho: f64) -> f64 {
    let vals: Vec<f64> = dists
        .iter()
        .filter_map(|d| {
            let (i, j) = d.pair();
            map_precision(&d.map(), &scene.views[i].grid, &scene.views[j].grid, k, rho)
        })
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub scene: String,
    pub pair: (usize, usize),
    pub theta_deg: f64,
    pub precision: f64,
    pub masked_ce: Option<f64>,
    pub self_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iter: usize,
    pub median: f64,
    pub mean: f64,
    pub pairs: Vec<PairEval>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Supervised-block precision and masked cross-entropy on held-out scenes. With
/// `perturb`, the supervised block attends every token to itself, so each
/// pair map becomes the identity.
pub fn evaluate<T: Real>(
    model: &ModelConfig,
    params: &DenoiserParams<T>,
    scenes: &[SceneData],
    perturb: bool,
    k: usize,
    rho: f64,
    iter: usize,
) -> Result<EvalResult> {
    let one = |scene: &SceneData| -> Result<Vec<PairEval>> {
        let input = eval_input::<T>(scene);
        let opts = ForwardOptions { perturb_block: perturb.then_some(model.supervised_block) };
        let state = denoiser_forward(model, params, &input, opts)?;
        let pairs: Vec<(usize, usize)> = scene.corr.iter().map(|c| c.pair).collect();
        let dists = supervised_distributions(model, params, &state, &pairs)?;
        let mut out = Vec::new();
        for (d, c) in dists.iter().zip(&scene.corr) {
            let (i, j) = c.pair;
            let (src, dst) = (&scene.views[i].grid, &scene.views[j].grid);
            let map = if perturb { perturb_identity(c.len()) } else { d.map() };
            let Some(precision) = map_precision(&map, src, dst, k, rho) else { continue };
            out.push(PairEval {
                scene: scene.name.clone(),
                pair: c.pair,
                theta_deg: scene.theta(i, j),
                precision,
                masked_ce: masked_ce_from_probs(map.view(), c),
                self_floor: self_match_floor(src, dst, k, rho).unwrap_or(0.0),
            });
        }
        Ok(out)
    };
    #[cfg(feature = "parallel")]
    let nested: Vec<Vec<PairEval>> = {
        use rayon::prelude::*;
        scenes.par_iter().map(one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let nested: Vec<Vec<PairEval>> = scenes.iter().map(one).collect::<Result<_>>()?;
    let pairs: Vec<PairEval> = nested.into_iter().flatten().collect();
    let values: Vec<f64> = pairs.iter().map(|p| p.precision).collect();
    let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
    Ok(EvalResult { iter, median: median(&values), mean, pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub loss_denoise: f64,
    pub loss_cameo: f64,
    pub precision_supervised_layer: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Raw parameters after the last step.
    pub params: DenoiserParams<T>,
    /// Moving-average parameters (equal to `params` when averaging is off).
    pub averaged: DenoiserParams<T>,
    pub log: Vec<MetricRow>,
    pub checkpoints: Vec<EvalResult>,
}

/// Momentum-free adaptive steps: `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
pub struct RmsProp<T> {
    lr: T,
    decay: T,
    eps: T,
    sq: Vec<Array2<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(params: &DenoiserParams<T>, lr: f64, decay: f64, eps: f64) -> Self {
        let sq = params.named().iter().map(|(_, a)| Array2::zeros(a.raw_dim())).collect();
        Self { lr: T::of(lr), decay: T::of(decay), eps: T::of(eps), sq }
    }

    pub fn step(&mut self, params: &mut DenoiserParams<T>, grads: &DenoiserParams<T>) {
        let one = T::one();
        for ((p, (_, g)), v) in params.tensors_mut().into_iter().zip(grads.named()).zip(self.sq.iter_mut()) {
            ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                *v = self.decay * *v + (one - self.decay) * g * g;
                *p -= self.lr * g / (v.sqrt() + self.eps);
            });
        }
    }
}

/// RNG streams derived from the run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;

/// Runs `cfg.iterations` optimizer steps. Every `eval_every`-th step the
/// moving-average parameters are evaluated and handed to `on_checkpoint`.
pub fn train<T: Real>(
    model: &ModelConfig,
    init: DenoiserParams<T>,
    data: &[SceneData],
    eval_scenes: &[SceneData],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_checkpoint: impl FnMut(&EvalResult, &DenoiserParams<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    for s in data.iter().chain(eval_scenes) {
        if s.views.len() != model.views {
            return Err(TrainError::ViewCount { scene: s.name.clone(), found: s.views.len(), expected: model.views });
        }
    }
    let mut params = init;
    let mut opt = RmsProp::new(&params, cfg.learning_rate, cfg.rms_decay, cfg.rms_eps);
    let mut averaged = params.clone();
    let mut rng = substream(cfg.seed, STREAM_DATA);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let inv_b = T::of(1.0 / cfg.batch_size as f64);
    for iter in 1..=cfg.iterations {
        let mut first_scene = 0;
        let batches: Vec<LossBatch<'_, T>> = (0..cfg.batch_size)
            .map(|b| {
                let pick = rng.random_range(0..data.len());
                if b == 0 {
                    first_scene = pick;
                }
                draw_batch(&data[pick], sched, cfg, &mut rng)
            })
            .collect::<Result<_>>()?;
        let run = |b: &LossBatch<'_, T>| total_loss(model, &params, b, cfg.lambda, cfg.loss_type);
        #[cfg(feature = "parallel")]
        let outputs = {
            use rayon::prelude::*;
            batches.par_iter().map(run).collect::<std::result::Result<Vec<_>, _>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let outputs = batches.iter().map(run).collect::<std::result::Result<Vec<_>, _>>()?;

        let mut parts = LossParts::default();
        let mut grads = params.zeros_like();
        for out in &outputs {
            parts.denoise += out.parts.denoise / cfg.batch_size as f64;
            parts.cameo += out.parts.cameo / cfg.batch_size as f64;
            grads.add_scaled(&out.grads, inv_b);
        }
        if !parts.denoise.is_finite() || !parts.cameo.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged { iter, denoise: parts.denoise, cameo: parts.cameo });
        }
        let precision = mean_precision(&data[first_scene], &outputs[0].distributions, cfg.top_k, cfg.rho);
        opt.step(&mut params, &grads);
        if cfg.ema_decay > 0.0 {
            // plain running mean until the window 1/(1 - decay) is filled
            let d = cfg.ema_decay.min(1.0 - 1.0 / (iter as f64 + 1.0));
            let (keep, take) = (T::of(d), T::of(1.0 - d));
            for (a, (_, p)) in averaged.tensors_mut().into_iter().zip(params.named()) {
                ndarray::Zip::from(a).and(p).for_each(|a, &p| *a = keep * *a + take * p);
            }
        } else {
            averaged = params.clone();
        }
        log.push(MetricRow { iter, loss_denoise: parts.denoise, loss_cameo: parts.cameo, precision_supervised_layer: precision });
        if iter % cfg.eval_every == 0 && !eval_scenes.is_empty() {
            let ev = evaluate(model, &averaged, eval_scenes, false, cfg.top_k, cfg.rho, iter)?;
            on_checkpoint(&ev, &averaged)?;
            checkpoints.push(ev);
        }
    }
    Ok(TrainOutcome { params, averaged, log, checkpoints })
}

/// Initial parameters for a run seed.
pub fn init_params<T: Real>(model: &ModelConfig, seed: u64) -> Result<DenoiserParams<T>> {
    Ok(DenoiserParams::init(model, &mut substream(seed, STREAM_INIT))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::seeded_rng;
    use crate::scene::{generate_scene_set, render_pointmap, SceneSetSpec};

    fn small_setup() -> (ModelConfig, Vec<SceneData>) {
        let mut model = ModelConfig::tiny();
        model.h = 8;
        model.w = 8;
        model.dim = 16;
        let spec = SceneSetSpec { scenes: 2, image_width: 32, image_height: 32, size_min: 0.2, size_max: 0.3, ..Default::default() };
        let scenes = generate_scene_set(&spec, &mut seeded_rng(0)).unwrap();
        let data = scenes
            .iter()
            .map(|s| {
                let pms: Vec<_> = (0..2).map(|v| render_pointmap(s, v, (32, 32))).collect();
                prepare_scene(s, &pms, &model, 1.5).unwrap()
            })
            .collect();
        (model, data)
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (model, data) = small_setup();
        let init = init_params::<f64>(&model, 3).unwrap();
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let out = train(&model, init.clone(), &data, &data, &cfg, &NoiseSchedule::default(), |_, _| Ok(())).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data) = small_setup();
        let cfg = TrainConfig { iterations: 6, eval_every: 3, ..Default::default() };
        let sched = NoiseSchedule::default();
        let run = || {
            train(&model, init_params::<f32>(&model, 1).unwrap(), &data, &data, &cfg, &sched, |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.params, b.params);
        assert_eq!(a.checkpoints.len(), 2);
    }

    #[test]
    fn conditioning_layout() {
        let (_, data) = small_setup();
        let c: Array2<f64> = conditioning(&data[0], &[false, true], false);
        assert!(c.slice(s![..64, REF_FLAG_CHANNEL]).iter().all(|&v| v == 1.0));
        assert!(c.slice(s![64.., REF_FLAG_CHANNEL]).iter().all(|&v| v == 0.0));
        let d: Array2<f64> = conditioning(&data[0], &[false, true], true);
        assert!(d.slice(s![.., ..6]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
