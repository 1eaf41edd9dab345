//! Finite-difference verification of the hand-written backward passes.
//!
//! Parameters and inputs are rounded to `f32` first, so the same point can be
//! evaluated exactly in both precisions. Finite differences always run in
//! `f64`; analytic gradients are computed in both precisions and compared
//! against the same reference.

use ndarray::Array2;
use rand::Rng as _;
use serde::Serialize;

use crate::io::{seeded_rng, substream, Rng};
use crate::model::{
    cameo_value, denoise_loss, denoiser_forward, supervised_distributions, total_loss, DenoiserParams,
    ForwardOptions, LossBatch, LossType, ModelConfig, NoiseSchedule,
};
use crate::nn::{self, Real};
use crate::scene::{generate_scene_set, render_pointmap, SceneSetSpec};
use crate::train::{draw_batch, init_params, prepare_scene, SceneData, TrainConfig, TrainError};

/// Which objective a gradient set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Objective {
    /// Denoising term only (`λ = 0`).
    Denoise,
    /// Denoising plus cross-entropy alignment with `λ = 1`.
    Ce,
    /// Denoising plus L1 alignment with `λ = 1`.
    L1,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Denoise, Objective::Ce, Objective::L1];

    fn lambda_and_loss(self) -> (f64, LossType) {
        match self {
            Objective::Denoise => (0.0, LossType::Ce),
            Objective::Ce => (1.0, LossType::Ce),
            Objective::L1 => (1.0, LossType::L1),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub objective: Objective,
    pub tensor: String,
    pub entries: usize,
    pub rel_err_f64: f64,
    pub rel_err_f32: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Largest-magnitude entries checked per tensor and objective.
    pub top: usize,
    /// Additional uniformly drawn entries per tensor, shared by all objectives.
    pub random: usize,
    /// Gaussian jitter added to every parameter so that no gradient is
    /// structurally zero at the check point.
    pub jitter: f64,
    /// Denominator floor, relative to the largest per-tensor gradient norm.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 0, top: 1, random: 1, jitter: 0.05, floor: 1e-3 }
    }
}

/// `‖fd − an‖ / max(‖an‖, ‖fd‖, floor)` over the checked entries.
pub fn relative_error(fd: &[f64], an: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut fd.iter().zip(an).map(|(a, b)| a - b));
    let denom = norm(&mut an.iter().copied()).max(norm(&mut fd.iter().copied())).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// The `top` largest-magnitude entries of `grad`, then `random` further
/// distinct entries.
pub fn select_entries(grad: &Array2<f64>, top: usize, random: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let cols = grad.ncols();
    let mut order: Vec<usize> = (0..grad.len()).collect();
    let flat: Vec<f64> = grad.iter().copied().collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.iter().take(top).copied().collect();
    let want = (top + random).min(grad.len());
    while picked.len() < want {
        let k = rng.random_range(0..grad.len());
        if !picked.contains(&k) {
            picked.push(k);
        }
    }
    picked.into_iter().map(|k| (k / cols, k % cols)).collect()
}

/// One synthetic scene at the token grid of `model`, rendered at 4× resolution.
pub fn check_scene(model: &ModelConfig, seed: u64) -> Result<SceneData, TrainError> {
    let spec = SceneSetSpec {
        scenes: 1,
        views: model.views,
        image_height: 4 * model.h,
        image_width: 4 * model.w,
        ..SceneSetSpec::tiny()
    };
    let scenes = generate_scene_set(&spec, &mut seeded_rng(seed)).map_err(|e| TrainError::Config(e.to_string()))?;
    let scene = &scenes[0];
    let pms: Vec<_> = (0..model.views).map(|v| render_pointmap(scene, v, (spec.image_height, spec.image_width))).collect();
    prepare_scene(scene, &pms, model, crate::correspondence::DEFAULT_TAU)
}

fn round_to_f32(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v as f32 as f64)
}

fn cast_batch<'a, A: Real, B: Real>(b: &LossBatch<'a, A>) -> LossBatch<'a, B> {
    LossBatch {
        input: crate::model::DenoiserInput { x: nn::cast(&b.input.x), cond: nn::cast(&b.input.cond), t: b.input.t },
        eps: nn::cast(&b.eps),
        targets: b.targets.clone(),
        corr: b.corr.clone(),
    }
}

/// Which part of the objective a parameter tensor can influence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reach {
    /// Projection head: alignment term only, the network forward is unchanged.
    Head,
    /// Downstream of the supervised block: denoising term only.
    Denoise,
    All,
}

fn reach(model: &ModelConfig, name: &str) -> Reach {
    if name.starts_with("head.") {
        return Reach::Head;
    }
    if name.starts_with("out.") {
        return Reach::Denoise;
    }
    match name.strip_prefix("block").and_then(|r| r.split('.').next()).and_then(|b| b.parse::<usize>().ok()) {
        Some(b) if b > model.supervised_block => Reach::Denoise,
        _ => Reach::All,
    }
}

/// Denoising value and the CE and L1 alignment values at `params`.
struct Values {
    denoise: f64,
    ce: f64,
    l1: f64,
}

impl Values {
    fn objectives(&self) -> [f64; 3] {
        [self.denoise, self.denoise + self.ce, self.denoise + self.l1]
    }
}

fn objective_values(
    model: &ModelConfig,
    params: &DenoiserParams<f64>,
    batch: &LossBatch<'_, f64>,
    reach: Reach,
    base: Option<(&Values, &crate::model::ForwardState<f64>)>,
) -> Result<Values, TrainError> {
    let pairs: Vec<(usize, usize)> = batch.corr.iter().map(|c| c.pair).collect();
    let align = |state: &crate::model::ForwardState<f64>| -> Result<(f64, f64), TrainError> {
        let dists = supervised_distributions(model, params, state, &pairs)?;
        Ok((cameo_value(model, &dists, &batch.corr, LossType::Ce)?, cameo_value(model, &dists, &batch.corr, LossType::L1)?))
    };
    if let (Reach::Head, Some((b, state))) = (reach, base) {
        let (ce, l1) = align(state)?;
        return Ok(Values { denoise: b.denoise, ce, l1 });
    }
    let state = denoiser_forward(model, params, &batch.input, ForwardOptions::default())?;
    let (denoise, _) = denoise_loss(model, state.eps_hat.view(), batch.eps.view(), &batch.targets)?;
    if let (Reach::Denoise, Some((b, _))) = (reach, base) {
        return Ok(Values { denoise, ce: b.ce, l1: b.l1 });
    }
    let (ce, l1) = align(&state)?;
    Ok(Values { denoise, ce, l1 })
}

/// Checks every parameter tensor of the denoiser, including the projection
/// head, for the denoising, CE and L1 objectives.
pub fn check_denoiser(model: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<TensorCheck>, TrainError> {
    let scene = check_scene(model, opts.seed)?;
    let mut rng = substream(opts.seed, 7);
    let tcfg = TrainConfig { cfg_drop_prob: 0.0, ..TrainConfig::default() };
    let batch32: LossBatch<'_, f32> = draw_batch(&scene, &NoiseSchedule::default(), &tcfg, &mut rng)?;
    let batch: LossBatch<'_, f64> = cast_batch(&batch32);

    let mut params: DenoiserParams<f64> = init_params(model, opts.seed)?;
    for t in params.tensors_mut() {
        *t += &nn::randn::<f64>(&mut rng, t.nrows(), t.ncols(), opts.jitter);
        *t = round_to_f32(t);
    }
    let params32: DenoiserParams<f32> = params.cast();

    let mut analytic64 = Vec::new();
    let mut analytic32 = Vec::new();
    for obj in Objective::ALL {
        let (lambda, loss) = obj.lambda_and_loss();
        analytic64.push(total_loss(model, &params, &batch, lambda, loss)?.grads);
        analytic32.push(total_loss(model, &params32, &batch32, lambda, loss)?.grads.cast::<f64>());
    }

    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    // Each objective nominates its largest entries, random entries are shared,
    // and the union is differenced once since a single forward yields all
    // three objective values.
    let mut tasks: Vec<(usize, (usize, usize))> = Vec::new();
    for ti in 0..names.len() {
        let mut picked = Vec::new();
        for g in &analytic64 {
            picked.extend(select_entries(g.named()[ti].1, opts.top, 0, &mut rng));
        }
        let total = analytic64[0].named()[ti].1.len();
        let want = (picked.len() + opts.random).min(total);
        let cols = analytic64[0].named()[ti].1.ncols();
        while picked.iter().collect::<std::collections::BTreeSet<_>>().len() < want {
            let k = rng.random_range(0..total);
            picked.push((k / cols, k % cols));
        }
        for e in picked {
            if !tasks.contains(&(ti, e)) {
                tasks.push((ti, e));
            }
        }
    }
    let steps: Vec<f64> = params
        .named()
        .iter()
        .map(|(_, a)| {
            let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
            1e-4 * rms.max(0.1)
        })
        .collect();

    let base_state = denoiser_forward(model, &params, &batch.input, ForwardOptions::default())?;
    let base = objective_values(model, &params, &batch, Reach::All, None)?;
    let eval = |&(ti, (r, c)): &(usize, (usize, usize))| -> Result<[f64; 3], TrainError> {
        let h = steps[ti];
        let scope = reach(model, &names[ti]);
        let at = |delta: f64| {
            let mut p = params.clone();
            p.tensors_mut()[ti][[r, c]] += delta;
            Ok::<_, TrainError>(objective_values(model, &p, &batch, scope, Some((&base, &base_state)))?.objectives())
        };
        let (plus, minus) = (at(h)?, at(-h)?);
        Ok(std::array::from_fn(|o| (plus[o] - minus[o]) / (2.0 * h)))
    };
    #[cfg(feature = "parallel")]
    let fd: Vec<[f64; 3]> = {
        use rayon::prelude::*;
        tasks.par_iter().map(eval).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let fd: Vec<[f64; 3]> = tasks.iter().map(eval).collect::<Result<_, _>>()?;

    let mut out = Vec::new();
    for (o, obj) in Objective::ALL.into_iter().enumerate() {
        let g64 = analytic64[o].named();
        let g32 = analytic32[o].named();
        let scale = g64
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let floor = opts.floor * scale;
        for ti in 0..names.len() {
            let ks: Vec<usize> = (0..tasks.len()).filter(|&k| tasks[k].0 == ti).collect();
            let fdv: Vec<f64> = ks.iter().map(|&k| fd[k][o]).collect();
            let pick = |g: &Array2<f64>| -> Vec<f64> { ks.iter().map(|&k| g[tasks[k].1]).collect() };
            out.push(TensorCheck {
                objective: obj,
                tensor: names[ti].clone(),
                entries: ks.len(),
                rel_err_f64: relative_error(&fdv, &pick(g64[ti].1), floor),
                rel_err_f32: relative_error(&fdv, &pick(g32[ti].1), floor),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadMode;
    use crate::attention::{
        attention_backward, attention_forward, project_and_normalize, project_backward, AttentionConfig,
        AttentionParams, ProjectionHead,
    };

    fn fd_tensor(a: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let mut g = Array2::zeros(a.raw_dim());
        for idx in 0..a.len() {
            let (r, c) = (idx / a.ncols(), idx % a.ncols());
            g[[r, c]] = central_difference(
                |h| {
                    let mut b = a.clone();
                    b[[r, c]] += h;
                    f(&b)
                },
                1e-6,
            );
        }
        g
    }

    fn rel(fd: &Array2<f64>, an: &Array2<f64>) -> f64 {
        let v = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        relative_error(&v(fd), &v(an), 1e-12)
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0], 0.0), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0], 0.0), 0.0);
        assert!((relative_error(&[1.0], &[0.0], 0.0) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[1e-9], &[0.0], 1.0) - 1e-9).abs() < 1e-20);
    }

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(|h| (2.0 + h).powi(3), 1e-4);
        assert!((d - 12.0).abs() < 1e-6);
    }

    #[test]
    fn select_entries_takes_largest_first() {
        let g = ndarray::array![[0.1, -5.0, 0.2], [3.0, 0.0, 0.0]];
        let e = select_entries(&g, 2, 2, &mut seeded_rng(1));
        assert_eq!(&e[..2], &[(0, 1), (1, 0)]);
        assert_eq!(e.len(), 4);
        let mut u = e.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 4);
    }

    #[test]
    fn attention_block_gradients() {
        let cfg = AttentionConfig { views: 2, h: 2, w: 2, dim: 8, heads: 2, layer_id: 0 };
        let mut rng = seeded_rng(3);
        let params: AttentionParams<f64> = AttentionParams::init(8, &mut rng, 1.0);
        let x: Array2<f64> = nn::randn(&mut rng, 8, 8, 1.0);
        let w: Array2<f64> = nn::randn(&mut rng, 8, 8, 1.0);
        let extra: Vec<Array2<f64>> = (0..2).map(|_| nn::randn(&mut rng, 8, 8, 1.0)).collect();
        // Loss: <out, w> + Σ_h <logits_h, extra_h>, so both upstream paths are exercised.
        let loss = |p: &AttentionParams<f64>, x: &Array2<f64>| {
            let (out, cache) = attention_forward(&cfg, p, x.view(), false).unwrap();
            (&out * &w).sum() + cache.logits.iter().zip(&extra).map(|(l, e)| (l * e).sum()).sum::<f64>()
        };
        let (_, cache) = attention_forward(&cfg, &params, x.view(), false).unwrap();
        let (dx, g) = attention_backward(&cfg, &params, &cache, w.view(), Some(&extra)).unwrap();
        assert!(rel(&fd_tensor(&x, |x| loss(&params, x)), &dx) < 1e-7);
        let fields: [(&Array2<f64>, fn(&mut AttentionParams<f64>) -> &mut Array2<f64>); 4] = [
            (&g.wq, |p| &mut p.wq),
            (&g.wk, |p| &mut p.wk),
            (&g.wv, |p| &mut p.wv),
            (&g.wo, |p| &mut p.wo),
        ];
        for (an, field) in fields {
            let base = field(&mut params.clone()).clone();
            let fd = fd_tensor(&base, |m| {
                let mut p = params.clone();
                *field(&mut p) = m.clone();
                loss(&p, &x)
            });
            assert!(rel(&fd, an) < 1e-7);
        }
    }

    #[test]
    fn projection_head_gradients() {
        let mut rng = seeded_rng(5);
        let mut head: ProjectionHead<f64> = ProjectionHead::init_mean(3, &mut rng);
        head.w2 += &nn::randn::<f64>(&mut rng, 12, 1, 0.3);
        head.b1 += &nn::randn::<f64>(&mut rng, 1, 12, 0.3);
        let logits: Vec<Array2<f64>> = (0..3).map(|_| nn::randn(&mut rng, 3, 4, 1.0)).collect();
        let up: Array2<f64> = nn::randn(&mut rng, 3, 4, 1.0);
        let loss = |hd: &ProjectionHead<f64>, ls: &[Array2<f64>]| {
            let views: Vec<_> = ls.iter().map(|l| l.view()).collect();
            (&project_and_normalize(&views, hd).unwrap().aggregated * &up).sum()
        };
        let views: Vec<_> = logits.iter().map(|l| l.view()).collect();
        let cache = project_and_normalize(&views, &head).unwrap();
        let (dl, dh) = project_backward(&head, &cache, up.view()).unwrap();
        for k in 0..3 {
            let fd = fd_tensor(&logits[k], |m| {
                let mut ls = logits.clone();
                ls[k] = m.clone();
                loss(&head, &ls)
            });
            assert!(rel(&fd, &dl[k]) < 1e-7);
        }
        let fd_w1 = fd_tensor(&head.w1, |m| loss(&ProjectionHead { w1: m.clone(), ..head.clone() }, &logits));
        let fd_b1 = fd_tensor(&head.b1, |m| loss(&ProjectionHead { b1: m.clone(), ..head.clone() }, &logits));
        let fd_w2 = fd_tensor(&head.w2, |m| loss(&ProjectionHead { w2: m.clone(), ..head.clone() }, &logits));
        let fd_b2 = fd_tensor(&head.b2, |m| loss(&ProjectionHead { b2: m.clone(), ..head.clone() }, &logits));
        for (fd, an) in [(fd_w1, &dh.w1), (fd_b1, &dh.b1), (fd_w2, &dh.w2), (fd_b2, &dh.b2)] {
            assert!(rel(&fd, an) < 1e-7);
        }
    }

    #[test]
    fn small_denoiser_all_objectives() {
        for head_mode in [HeadMode::Mlp, HeadMode::PerHead] {
            let model = ModelConfig { h: 8, w: 8, dim: 16, heads: 2, time_dim: 8, head_mode, ..ModelConfig::tiny() };
            let report = check_denoiser(&model, &GradCheckOptions { seed: 4, ..Default::default() }).unwrap();
            assert_eq!(report.len(), 3 * model_tensor_count(&model));
            for c in &report {
                assert!(c.rel_err_f64 <= 1e-6, "{head_mode:?} {c:?}");
                assert!(c.rel_err_f32 <= 1e-3, "{head_mode:?} {c:?}");
            }
        }
    }

    fn model_tensor_count(model: &ModelConfig) -> usize {
        3 + 10 * model.blocks + 2 + 4
    }
}
