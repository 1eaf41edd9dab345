//! Toy multi-view denoiser: noise schedule, DDIM updates, the attention
//! alignment loss, a stack of multi-view attention blocks with exact gradients,
//! guided sampling and checkpoint files.

use std::ops::AddAssign;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    attention_backward, attention_forward, project_and_normalize, project_backward, AttentionCache,
    AttentionConfig, AttentionError, AttentionParams, CrossViewAttention, ProjectionCache, ProjectionHead,
};
use crate::correspondence::TokenCorrespondence;
use crate::io::{load_tensor, save_tensor, Rng, Tensor, TensorData, TensorError};
use crate::nn::{self, Real};

/// Six Plücker channels plus the reference-view flag.
pub const COND_CHANNELS: usize = 7;
pub const REF_FLAG_CHANNEL: usize = 6;
/// Probability floor used when a cross-entropy is evaluated from probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("timestep {t} outside 0..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("previous timestep {t_prev} must be below {t}")]
    StepOrder { t: usize, t_prev: usize },
    #[error("alpha_bar is zero at t={0}; x0 cannot be recovered")]
    DegenerateAlpha(usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("attention pair {attn:?} does not line up with correspondence pair {corr:?}")]
    PairMismatch { attn: (usize, usize), corr: (usize, usize) },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

fn check_shape(what: &'static str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(ModelError::Shape { what, expected: expected.to_vec(), found: found.to_vec() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Noise schedule and DDIM

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub kind: String,
    pub betas: Vec<f64>,
    /// `alpha_bars[t]` for `t in 0..=steps`; index 0 is the clean-data value 1.
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(ModelError::Schedule("need at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ModelError::Schedule(format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { steps, kind: "linear".into(), betas, alpha_bars })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(ModelError::StepOutOfRange { t, max: self.steps })
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(ModelError::StepOutOfRange { t, max: self.steps });
        }
        Ok(1.0 - self.betas[t - 1])
    }
}

fn check_same<T>(what: &'static str, a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<()> {
    check_shape(what, b.shape(), a.shape())
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit `ᾱ`.
pub fn noise_with_alpha_bar<T: Real>(x0: ArrayView2<T>, eps: ArrayView2<T>, alpha_bar: f64) -> Result<Array2<T>> {
    check_same("noise", &x0, &eps)?;
    let (a, b) = (T::of(alpha_bar.sqrt()), T::of((1.0 - alpha_bar).sqrt()));
    Ok(ndarray::Zip::from(&x0).and(&eps).map_collect(|&x, &e| a * x + b * e))
}

/// `(x_t − √(1−ᾱ)·ε̂)/√ᾱ` for an explicit `ᾱ`.
pub fn x0_with_alpha_bar<T: Real>(x_t: ArrayView2<T>, eps_hat: ArrayView2<T>, alpha_bar: f64) -> Result<Array2<T>> {
    check_same("predicted noise", &x_t, &eps_hat)?;
    if !(alpha_bar > 0.0) {
        return Err(ModelError::DegenerateAlpha(0));
    }
    let (a, b) = (T::of(alpha_bar.sqrt()), T::of((1.0 - alpha_bar).sqrt()));
    Ok(ndarray::Zip::from(&x_t).and(&eps_hat).map_collect(|&x, &e| (x - b * e) / a))
}

pub fn forward_noise<T: Real>(x0: ArrayView2<T>, t: usize, eps: ArrayView2<T>, sched: &NoiseSchedule) -> Result<Array2<T>> {
    noise_with_alpha_bar(x0, eps, sched.alpha_bar(t)?)
}

pub fn predict_x0<T: Real>(x_t: ArrayView2<T>, t: usize, eps_hat: ArrayView2<T>, sched: &NoiseSchedule) -> Result<Array2<T>> {
    let ab = sched.alpha_bar(t)?;
    x0_with_alpha_bar(x_t, eps_hat, ab).map_err(|e| match e {
        ModelError::DegenerateAlpha(_) => ModelError::DegenerateAlpha(t),
        other => other,
    })
}

/// Deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step<T: Real>(
    x_t: ArrayView2<T>,
    t: usize,
    t_prev: usize,
    eps_hat: ArrayView2<T>,
    sched: &NoiseSchedule,
) -> Result<Array2<T>> {
    if t_prev >= t {
        return Err(ModelError::StepOrder { t, t_prev });
    }
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    noise_with_alpha_bar(x0.view(), eps_hat, sched.alpha_bar(t_prev)?)
}

/// Descending `(t, t_prev)` pairs for an evenly strided DDIM trajectory.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > total {
        return Err(ModelError::Schedule(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    let ts: Vec<usize> = (1..=steps).map(|k| (k * total).div_ceil(steps)).collect();
    Ok((0..steps).rev().map(|k| (ts[k], if k == 0 { 0 } else { ts[k - 1] })).collect())
}

/// Sinusoidal timestep embedding as a `1 × dim` row.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut e = Array2::zeros((1, dim));
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[[0, k]] = T::of(arg.sin());
        e[[0, half + k]] = T::of(arg.cos());
    }
    e
}

// ---------------------------------------------------------------------------
// Alignment loss

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    Ce,
    L1,
}

impl FromStr for LossType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossType::Ce),
            "l1" => Ok(LossType::L1),
            other => Err(format!("unknown loss type '{other}' (expected ce or l1)")),
        }
    }
}

fn check_alignment<T>(maps: &[CrossViewAttention<T>], corr: &[&TokenCorrespondence]) -> Result<()> {
    if maps.len() != corr.len() {
        return Err(ModelError::Shape { what: "pair count", expected: vec![corr.len()], found: vec![maps.len()] });
    }
    for (m, c) in maps.iter().zip(corr) {
        if m.pair != c.pair {
            return Err(ModelError::PairMismatch { attn: m.pair, corr: c.pair });
        }
        let n = c.len();
        check_shape("attention pair map", m.logits.shape(), &[n, n])?;
        check_shape("attention pair map", m.probs.shape(), &[n, n])?;
    }
    Ok(())
}

/// Masked alignment loss over a set of pairs: the sum of per-row losses over
/// visible rows divided by the number of visible rows. `logits` of each map
/// are the pre-softmax scores and `probs` their row softmax. Returns the loss
/// and its gradient with respect to each map's logits.
pub fn cameo_loss<T: Real>(
    maps: &[CrossViewAttention<T>],
    corr: &[&TokenCorrespondence],
    loss: LossType,
) -> Result<(f64, Vec<Array2<T>>)> {
    check_alignment(maps, corr)?;
    let visible: usize = corr.iter().map(|c| c.visible_count()).sum();
    let mut grads: Vec<Array2<T>> = maps.iter().map(|m| Array2::zeros(m.logits.raw_dim())).collect();
    if visible == 0 {
        return Ok((0.0, grads));
    }
    let inv_n = 1.0 / visible as f64;
    let mut total = 0.0;
    for ((m, c), g) in maps.iter().zip(corr).zip(grads.iter_mut()) {
        for r in 0..c.len() {
            if c.mask[r] == 0 {
                continue;
            }
            let p = c.matches[r];
            let z = m.logits.row(r);
            let a = m.probs.row(r);
            match loss {
                LossType::Ce => {
                    let zmax = z.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.f64()));
                    let lse = zmax + z.iter().map(|v| (v.f64() - zmax).exp()).sum::<f64>().ln();
                    total += lse - z[p].f64();
                    let mut row = g.row_mut(r);
                    for (k, gv) in row.iter_mut().enumerate() {
                        let target = if k == p { 1.0 } else { 0.0 };
                        *gv = T::of((a[k].f64() - target) * inv_n);
                    }
                }
                LossType::L1 => {
                    let mut upstream = Array2::<T>::zeros((1, a.len()));
                    for (k, &av) in a.iter().enumerate() {
                        let diff = av.f64() - if k == p { 1.0 } else { 0.0 };
                        total += diff.abs();
                        upstream[[0, k]] = T::of(diff.signum() * inv_n);
                    }
                    let a2 = a.insert_axis(Axis(0));
                    let dz = nn::softmax_rows_backward(a2, upstream.view());
                    g.row_mut(r).assign(&dz.row(0));
                }
            }
        }
    }
    Ok((total * inv_n, grads))
}

/// Masked cross-entropy evaluated from row distributions alone, with
/// probabilities floored at [`PROB_FLOOR`]. `None` when every mask is zero.
pub fn masked_ce_from_probs(probs: ArrayView2<f64>, corr: &TokenCorrespondence) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..corr.len() {
        if corr.mask[r] == 1 {
            sum -= probs[[r, corr.matches[r]]].max(PROB_FLOOR).ln();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

// ---------------------------------------------------------------------------
// Denoiser

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Projection head folds all heads into one supervised distribution.
    Mlp,
    /// Every head is supervised on its own; the loss is the mean over heads.
    PerHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub views: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub time_dim: usize,
    pub supervised_block: usize,
    pub head_mode: HeadMode,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            views: 2,
            h: 16,
            w: 16,
            channels: 8,
            dim: 32,
            heads: 4,
            blocks: 2,
            ff_mult: 2,
            time_dim: 16,
            supervised_block: 0,
            head_mode: HeadMode::Mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention(0).validate()?;
        if self.blocks == 0 || self.supervised_block >= self.blocks {
            return Err(ModelError::Config(format!(
                "supervised block {} outside {} blocks",
                self.supervised_block, self.blocks
            )));
        }
        if self.channels == 0 || self.ff_mult == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(ModelError::Config("channels, ff_mult must be positive and time_dim even".into()));
        }
        Ok(())
    }

    pub fn attention(&self, block: usize) -> AttentionConfig {
        AttentionConfig { views: self.views, h: self.h, w: self.w, dim: self.dim, heads: self.heads, layer_id: block }
    }

    pub fn tokens_per_view(&self) -> usize {
        self.h * self.w
    }

    pub fn seq_len(&self) -> usize {
        self.views * self.tokens_per_view()
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub w_t: Array2<T>,
    pub b_t: Array2<T>,
    pub attn: AttentionParams<T>,
    pub w_f1: Array2<T>,
    pub b_f1: Array2<T>,
    pub w_f2: Array2<T>,
    pub b_f2: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    pub w_in: Array2<T>,
    pub w_cond: Array2<T>,
    pub b_in: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub w_out: Array2<T>,
    pub b_out: Array2<T>,
    pub head: ProjectionHead<T>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, d, f, dt) = (cfg.channels, cfg.dim, cfg.ff_dim(), cfg.time_dim);
        let depth = 1.0 / (2.0 * cfg.blocks as f64).sqrt();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let w_in = nn::randn(rng, c, d, inv(c));
        let w_cond = nn::randn(rng, COND_CHANNELS, d, inv(COND_CHANNELS));
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                w_t: nn::randn(rng, dt, d, 0.5 * inv(dt)),
                b_t: Array2::zeros((1, d)),
                attn: AttentionParams::init(d, rng, depth),
                w_f1: nn::randn(rng, d, f, inv(d)),
                b_f1: Array2::zeros((1, f)),
                w_f2: nn::randn(rng, f, d, inv(f) * depth),
                b_f2: Array2::zeros((1, d)),
            })
            .collect();
        let w_out = nn::randn(rng, d, c, inv(d));
        let head = ProjectionHead::init_mean(cfg.heads, rng);
        Ok(Self { w_in, w_cond, b_in: Array2::zeros((1, d)), blocks, w_out, b_out: Array2::zeros((1, c)), head })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|a| Array2::zeros(a.raw_dim()))
    }

    pub fn map<U: Real>(&self, f: impl Fn(&Array2<T>) -> Array2<U>) -> DenoiserParams<U> {
        DenoiserParams {
            w_in: f(&self.w_in),
            w_cond: f(&self.w_cond),
            b_in: f(&self.b_in),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    w_t: f(&b.w_t),
                    b_t: f(&b.b_t),
                    attn: AttentionParams { wq: f(&b.attn.wq), wk: f(&b.attn.wk), wv: f(&b.attn.wv), wo: f(&b.attn.wo) },
                    w_f1: f(&b.w_f1),
                    b_f1: f(&b.b_f1),
                    w_f2: f(&b.w_f2),
                    b_f2: f(&b.b_f2),
                })
                .collect(),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
            head: ProjectionHead { w1: f(&self.head.w1), b1: f(&self.head.b1), w2: f(&self.head.w2), b2: f(&self.head.b2) },
        }
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        self.map(nn::cast)
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![("embed.w_in".to_string(), &self.w_in), ("embed.w_cond".into(), &self.w_cond), ("embed.b_in".into(), &self.b_in)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, a) in [
                ("w_t", &b.w_t),
                ("b_t", &b.b_t),
                ("attn.wq", &b.attn.wq),
                ("attn.wk", &b.attn.wk),
                ("attn.wv", &b.attn.wv),
                ("attn.wo", &b.attn.wo),
                ("ff.w1", &b.w_f1),
                ("ff.b1", &b.b_f1),
                ("ff.w2", &b.w_f2),
                ("ff.b2", &b.b_f2),
            ] {
                out.push((format!("block{i}.{n}"), a));
            }
        }
        out.push(("out.w".into(), &self.w_out));
        out.push(("out.b".into(), &self.b_out));
        for (n, a) in [("w1", &self.head.w1), ("b1", &self.head.b1), ("w2", &self.head.w2), ("b2", &self.head.b2)] {
            out.push((format!("head.{n}"), a));
        }
        out
    }

    /// Mutable view of [`Self::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![&mut self.w_in, &mut self.w_cond, &mut self.b_in];
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.w_t,
                &mut b.b_t,
                &mut b.attn.wq,
                &mut b.attn.wk,
                &mut b.attn.wv,
                &mut b.attn.wo,
                &mut b.w_f1,
                &mut b.b_f1,
                &mut b.w_f2,
                &mut b.b_f2,
            ]);
        }
        out.extend([&mut self.w_out, &mut self.b_out]);
        out.extend([&mut self.head.w1, &mut self.head.b1, &mut self.head.w2, &mut self.head.b2]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let others = other.named();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(others) {
            dst.scaled_add(scale, src);
        }
    }
}

/// One multi-view sample as seen by the network.
#[derive(Clone, Debug)]
pub struct DenoiserInput<T> {
    /// `S × channels`: noisy target latents, clean reference latents.
    pub x: Array2<T>,
    /// `S × 7`: Plücker rays and the reference flag.
    pub cond: Array2<T>,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct BlockState<T> {
    pub attn: AttentionCache<T>,
    h1: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardState<T> {
    x: Array2<T>,
    cond: Array2<T>,
    temb: Array2<T>,
    pub blocks: Vec<BlockState<T>>,
    h_final: Array2<T>,
    pub eps_hat: Array2<T>,
}

/// Which block, if any, has its attention replaced by the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub perturb_block: Option<usize>,
}

pub fn denoiser_forward<T: Real>(
    cfg: &ModelConfig,
    params: &DenoiserParams<T>,
    input: &DenoiserInput<T>,
    opts: ForwardOptions,
) -> Result<ForwardState<T>> {
    let s_len = cfg.seq_len();
    check_shape("latents", input.x.shape(), &[s_len, cfg.channels])?;
    check_shape("conditioning", input.cond.shape(), &[s_len, COND_CHANNELS])?;
    let temb = timestep_embedding::<T>(input.t, cfg.time_dim);
    let mut h = input.x.dot(&params.w_in) + input.cond.dot(&params.w_cond) + &params.b_in;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for (b, bp) in params.blocks.iter().enumerate() {
        let shift = temb.dot(&bp.w_t) + &bp.b_t;
        let h_in = h + &shift;
        let acfg = cfg.attention(b);
        let (a_out, attn) = attention_forward(&acfg, &bp.attn, h_in.view(), opts.perturb_block == Some(b))?;
        let h1 = h_in + &a_out;
        let u = h1.dot(&bp.w_f1) + &bp.b_f1;
        let g = u.mapv(nn::silu);
        h = &h1 + &(g.dot(&bp.w_f2) + &bp.b_f2);
        blocks.push(BlockState { attn, h1, u, g });
    }
    let eps_hat = h.dot(&params.w_out) + &params.b_out;
    Ok(ForwardState { x: input.x.clone(), cond: input.cond.clone(), temb, blocks, h_final: h, eps_hat })
}

/// Backpropagates `d_eps` (gradient w.r.t. the predicted noise) and optional
/// per-head logit gradients injected at the supervised block.
pub fn denoiser_backward<T: Real>(
    cfg: &ModelConfig,
    params: &DenoiserParams<T>,
    state: &ForwardState<T>,
    d_eps: ArrayView2<T>,
    supervised_dlogits: Option<&[Array2<T>]>,
) -> Result<DenoiserParams<T>> {
    check_shape("noise gradient", d_eps.shape(), &[cfg.seq_len(), cfg.channels])?;
    let mut grads = params.zeros_like();
    grads.w_out = state.h_final.t().dot(&d_eps);
    grads.b_out = nn::col_sums(d_eps);
    let mut dh = d_eps.dot(&params.w_out.t());
    for b in (0..cfg.blocks).rev() {
        let (bp, st, gb) = (&params.blocks[b], &state.blocks[b], &mut grads.blocks[b]);
        gb.w_f2 = st.g.t().dot(&dh);
        gb.b_f2 = nn::col_sums(dh.view());
        let mut du = dh.dot(&bp.w_f2.t());
        ndarray::Zip::from(&mut du).and(&st.u).for_each(|g, &u| *g = *g * nn::silu_grad(u));
        gb.w_f1 = st.h1.t().dot(&du);
        gb.b_f1 = nn::col_sums(du.view());
        let dh1 = dh + du.dot(&bp.w_f1.t());
        let extra = if b == cfg.supervised_block { supervised_dlogits } else { None };
        let (dx, ga) = attention_backward(&cfg.attention(b), &bp.attn, &st.attn, dh1.view(), extra)?;
        gb.attn = ga;
        let dh_in = dh1 + dx;
        let col = nn::col_sums(dh_in.view());
        gb.w_t = state.temb.t().dot(&col);
        gb.b_t = col;
        dh = dh_in;
    }
    grads.w_in = state.x.t().dot(&dh);
    grads.w_cond = state.cond.t().dot(&dh);
    grads.b_in = nn::col_sums(dh.view());
    Ok(grads)
}

/// Supervised distribution of one ordered pair at the supervised block.
#[derive(Clone, Debug)]
pub enum PairDistribution<T> {
    Projected { pair: (usize, usize), cache: ProjectionCache<T> },
    PerHead { pair: (usize, usize), heads: Vec<CrossViewAttention<T>> },
}

impl<T: Real> PairDistribution<T> {
    pub fn pair(&self) -> (usize, usize) {
        match self {
            PairDistribution::Projected { pair, .. } | PairDistribution::PerHead { pair, .. } => *pair,
        }
    }

    /// Row-stochastic map used for probing (head mean in per-head mode).
    pub fn map(&self) -> Array2<f64> {
        match self {
            PairDistribution::Projected { cache, .. } => nn::cast(&cache.probs),
            PairDistribution::PerHead { heads, .. } => {
                let mut acc: Array2<f64> = nn::cast(&heads[0].probs);
                for h in &heads[1..] {
                    acc = acc + nn::cast::<T, f64>(&h.probs);
                }
                acc / heads.len() as f64
            }
        }
    }
}

/// Supervised distributions for the given ordered pairs, computed from the
/// per-pair re-normalized logits of the supervised block.
pub fn supervised_distributions<T: Real>(
    cfg: &ModelConfig,
    params: &DenoiserParams<T>,
    state: &ForwardState<T>,
    pairs: &[(usize, usize)],
) -> Result<Vec<PairDistribution<T>>> {
    let acfg = cfg.attention(cfg.supervised_block);
    let cache = &state.blocks[cfg.supervised_block].attn;
    pairs
        .iter()
        .map(|&(i, j)| {
            let logits: Vec<ArrayView2<T>> =
                (0..cfg.heads).map(|h| cache.pair_logits(&acfg, h, i, j)).collect::<std::result::Result<_, _>>()?;
            Ok(match cfg.head_mode {
                HeadMode::Mlp => PairDistribution::Projected { pair: (i, j), cache: project_and_normalize(&logits, &params.head)? },
                HeadMode::PerHead => PairDistribution::PerHead {
                    pair: (i, j),
                    heads: logits
                        .iter()
                        .map(|l| CrossViewAttention { pair: (i, j), logits: l.to_owned(), probs: nn::softmax_rows(*l) })
                        .collect(),
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub denoise: f64,
    pub cameo: f64,
    pub total: f64,
}

/// Everything one loss evaluation needs besides the parameters.
#[derive(Clone, Debug)]
pub struct LossBatch<'a, T> {
    pub input: DenoiserInput<T>,
    /// Sampled noise; only target rows are compared.
    pub eps: Array2<T>,
    /// Per-view flag, `true` for noised target views.
    pub targets: Vec<bool>,
    pub corr: Vec<&'a TokenCorrespondence>,
}

pub struct LossOutput<T> {
    pub parts: LossParts,
    pub grads: DenoiserParams<T>,
    pub state: ForwardState<T>,
    pub distributions: Vec<PairDistribution<T>>,
}

/// Mean squared error over target-view rows and its gradient w.r.t. `eps_hat`.
pub fn denoise_loss<T: Real>(
    cfg: &ModelConfig,
    eps_hat: ArrayView2<T>,
    eps: ArrayView2<T>,
    targets: &[bool],
) -> Result<(f64, Array2<T>)> {
    check_shape("noise", eps.shape(), eps_hat.shape())?;
    if targets.len() != cfg.views {
        return Err(ModelError::Shape { what: "target flags", expected: vec![cfg.views], found: vec![targets.len()] });
    }
    let n = cfg.tokens_per_view();
    let count = targets.iter().filter(|&&t| t).count() * n * cfg.channels;
    let mut grad = Array2::zeros(eps_hat.raw_dim());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    let scale = T::of(2.0 / count as f64);
    for (v, _) in targets.iter().enumerate().filter(|(_, &t)| t) {
        let rows = s![v * n..(v + 1) * n, ..];
        let diff = &eps_hat.slice(rows) - &eps.slice(rows);
        sum += diff.iter().map(|d| d.f64() * d.f64()).sum::<f64>();
        grad.slice_mut(rows).assign(&(diff * scale));
    }
    Ok((sum / count as f64, grad))
}

/// `L_denoise + λ·L_align` and the gradient of every parameter. With `λ = 0`
/// the alignment term is still evaluated for logging but sends no gradient.
pub fn total_loss<T: Real>(
    cfg: &ModelConfig,
    params: &DenoiserParams<T>,
    batch: &LossBatch<'_, T>,
    lambda: f64,
    loss: LossType,
) -> Result<LossOutput<T>> {
    let state = denoiser_forward(cfg, params, &batch.input, ForwardOptions::default())?;
    let (denoise, d_eps) = denoise_loss(cfg, state.eps_hat.view(), batch.eps.view(), &batch.targets)?;
    let pairs: Vec<(usize, usize)> = batch.corr.iter().map(|c| c.pair).collect();
    let distributions = supervised_distributions(cfg, params, &state, &pairs)?;
    let n = cfg.tokens_per_view();
    let s_len = cfg.seq_len();

    let mut head_grads = ProjectionHead::zeros(cfg.heads);
    let mut dlogits: Option<Vec<Array2<T>>> = None;
    let cameo = match cfg.head_mode {
        HeadMode::Mlp => {
            let maps: Vec<CrossViewAttention<T>> = distributions
                .iter()
                .map(|d| match d {
                    PairDistribution::Projected { pair, cache } => {
                        CrossViewAttention { pair: *pair, logits: cache.aggregated.clone(), probs: cache.probs.clone() }
                    }
                    PairDistribution::PerHead { .. } => unreachable!("mlp mode"),
                })
                .collect();
            let (value, dz) = cameo_loss(&maps, &batch.corr, loss)?;
            if lambda != 0.0 {
                let mut full = vec![Array2::zeros((s_len, s_len)); cfg.heads];
                for (d, g) in distributions.iter().zip(dz) {
                    let PairDistribution::Projected { pair: (i, j), cache } = d else { unreachable!() };
                    let (d_heads, d_head) = project_backward(&params.head, cache, (g * T::of(lambda)).view())?;
                    head_grads.w1 += &d_head.w1;
                    head_grads.b1 += &d_head.b1;
                    head_grads.w2 += &d_head.w2;
                    head_grads.b2 += &d_head.b2;
                    for (h, dh) in d_heads.into_iter().enumerate() {
                        full[h].slice_mut(s![i * n..(i + 1) * n, j * n..(j + 1) * n]).add_assign(&dh);
                    }
                }
                dlogits = Some(full);
            }
            value
        }
        HeadMode::PerHead => {
            let mut value = 0.0;
            let mut full = vec![Array2::zeros((s_len, s_len)); cfg.heads];
            let inv_heads = 1.0 / cfg.heads as f64;
            for h in 0..cfg.heads {
                let maps: Vec<CrossViewAttention<T>> = distributions
                    .iter()
                    .map(|d| match d {
                        PairDistribution::PerHead { heads, .. } => heads[h].clone(),
                        PairDistribution::Projected { .. } => unreachable!("per-head mode"),
                    })
                    .collect();
                let (v, dz) = cameo_loss(&maps, &batch.corr, loss)?;
                value += v * inv_heads;
                if lambda != 0.0 {
                    for (m, g) in maps.iter().zip(dz) {
                        let (i, j) = m.pair;
                        full[h]
                            .slice_mut(s![i * n..(i + 1) * n, j * n..(j + 1) * n])
                            .scaled_add(T::of(lambda * inv_heads), &g);
                    }
                }
            }
            if lambda != 0.0 {
                dlogits = Some(full);
            }
            value
        }
    };
    let mut grads = denoiser_backward(cfg, params, &state, d_eps.view(), dlogits.as_deref())?;
    grads.head = head_grads;
    let parts = LossParts { denoise, cameo, total: denoise + lambda * cameo };
    Ok(LossOutput { parts, grads, state, distributions })
}

/// Alignment loss value of supervised distributions against their targets.
pub fn cameo_value<T: Real>(
    cfg: &ModelConfig,
    distributions: &[PairDistribution<T>],
    corr: &[&TokenCorrespondence],
    loss: LossType,
) -> Result<f64> {
    let maps_for = |h: Option<usize>| -> Vec<CrossViewAttention<T>> {
        distributions
            .iter()
            .map(|d| match (d, h) {
                (PairDistribution::Projected { pair, cache }, _) => {
                    CrossViewAttention { pair: *pair, logits: cache.aggregated.clone(), probs: cache.probs.clone() }
                }
                (PairDistribution::PerHead { heads, .. }, Some(h)) => heads[h].clone(),
                (PairDistribution::PerHead { heads, .. }, None) => heads[0].clone(),
            })
            .collect()
    };
    match cfg.head_mode {
        HeadMode::Mlp => Ok(cameo_loss(&maps_for(None), corr, loss)?.0),
        HeadMode::PerHead => {
            let mut value = 0.0;
            for h in 0..cfg.heads {
                value += cameo_loss(&maps_for(Some(h)), corr, loss)?.0 / cfg.heads as f64;
            }
            Ok(value)
        }
    }
}

/// Forward-only counterpart of [`total_loss`].
pub fn loss_value<T: Real>(
    cfg: &ModelConfig,
    params: &DenoiserParams<T>,
    batch: &LossBatch<'_, T>,
    lambda: f64,
    loss: LossType,
) -> Result<LossParts> {
    let state = denoiser_forward(cfg, params, &batch.input, ForwardOptions::default())?;
    let (denoise, _) = denoise_loss(cfg, state.eps_hat.view(), batch.eps.view(), &batch.targets)?;
    let pairs: Vec<(usize, usize)> = batch.corr.iter().map(|c| c.pair).collect();
    let distributions = supervised_distributions(cfg, params, &state, &pairs)?;
    let cameo = cameo_value(cfg, &distributions, &batch.corr, loss)?;
    Ok(LossParts { denoise, cameo, total: denoise + lambda * cameo })
}

// ---------------------------------------------------------------------------
// Sampling

/// Anything that predicts noise for a multi-view sample.
pub trait NoisePredictor<T> {
    fn predict(&self, x: &Array2<T>, cond: &Array2<T>, t: usize) -> Result<Array2<T>>;
}

pub struct Denoiser<'a, T> {
    pub cfg: &'a ModelConfig,
    pub params: &'a DenoiserParams<T>,
}

impl<T: Real> NoisePredictor<T> for Denoiser<'_, T> {
    fn predict(&self, x: &Array2<T>, cond: &Array2<T>, t: usize) -> Result<Array2<T>> {
        let input = DenoiserInput { x: x.clone(), cond: cond.clone(), t };
        Ok(denoiser_forward(self.cfg, self.params, &input, ForwardOptions::default())?.eps_hat)
    }
}

/// `ε_u + w·(ε_c − ε_u)`; with `w = 1` the conditional prediction is returned as is.
pub fn guided_eps<T: Real>(eps_cond: &Array2<T>, eps_uncond: &Array2<T>, weight: f64) -> Array2<T> {
    if weight == 1.0 {
        return eps_cond.clone();
    }
    let w = T::of(weight);
    ndarray::Zip::from(eps_cond).and(eps_uncond).map_collect(|&c, &u| u + w * (c - u))
}

/// Conditioning with the camera channels zeroed and the reference flag kept.
pub fn drop_camera<T: Real>(cond: &Array2<T>) -> Array2<T> {
    let mut out = cond.clone();
    out.slice_mut(s![.., ..REF_FLAG_CHANNEL]).fill(T::zero());
    out
}

#[derive(Clone, Debug)]
pub struct SampleRequest<T> {
    /// `S × channels`; rows of reference views hold their clean latents.
    pub clean: Array2<T>,
    pub cond: Array2<T>,
    pub targets: Vec<bool>,
    pub tokens_per_view: usize,
    pub steps: usize,
    pub cfg_weight: f64,
}

/// DDIM trajectory from pure noise on the target views. Reference rows stay at
/// their clean latents throughout.
pub fn sample<T: Real, P: NoisePredictor<T>>(
    predictor: &P,
    sched: &NoiseSchedule,
    req: &SampleRequest<T>,
    rng: &mut Rng,
) -> Result<Array2<T>> {
    let n = req.tokens_per_view;
    check_shape("target flags", &[req.targets.len() * n], &[req.clean.nrows()])?;
    let mut x = req.clean.clone();
    for (v, _) in req.targets.iter().enumerate().filter(|(_, &t)| t) {
        x.slice_mut(s![v * n..(v + 1) * n, ..]).mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z)
        });
    }
    let uncond = drop_camera(&req.cond);
    for (t, t_prev) in ddim_timesteps(sched.steps, req.steps)? {
        let eps_c = predictor.predict(&x, &req.cond, t)?;
        let eps = if req.cfg_weight == 1.0 { eps_c } else { guided_eps(&eps_c, &predictor.predict(&x, &uncond, t)?, req.cfg_weight) };
        let next = ddim_step(x.view(), t, t_prev, eps.view(), sched)?;
        for (v, _) in req.targets.iter().enumerate().filter(|(_, &t)| t) {
            let rows = s![v * n..(v + 1) * n, ..];
            x.slice_mut(rows).assign(&next.slice(rows));
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT: &str = "cameo-checkpoint";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub precision: u32,
    pub iteration: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn to_tensor<T: Real>(a: &Array2<T>) -> Result<Tensor> {
    let dims = a.shape().to_vec();
    let t = if T::BITS == 32 {
        Tensor::from_f32(dims, a.iter().map(|v| v.f64() as f32).collect())?
    } else {
        Tensor::from_f64(dims, a.iter().map(|v| v.f64()).collect())?
    };
    Ok(t)
}

/// Writes `checkpoint.json` plus one TensorFile per parameter into `dir`.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    cfg: &ModelConfig,
    params: &DenoiserParams<T>,
    iteration: usize,
    extra: serde_json::Value,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, a) in params.named() {
        let file = format!("{name}.camt");
        save_tensor(dir.join(&file), &to_tensor(a)?)?;
        tensors.push(TensorEntry { name, file, shape: a.shape().to_vec() });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        precision: T::BITS,
        iteration,
        model: cfg.clone(),
        tensors,
        extra,
    };
    std::fs::write(dir.join(CHECKPOINT_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Accepts either the manifest path or its directory.
pub fn read_manifest(path: &Path) -> Result<(CheckpointManifest, std::path::PathBuf)> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&file)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("unexpected format '{}'", manifest.format)));
    }
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

/// Loads parameters in precision `T`, converting stored values if needed.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(CheckpointManifest, DenoiserParams<T>)> {
    let (manifest, dir) = read_manifest(path)?;
    manifest.model.validate()?;
    let mut rng = crate::io::seeded_rng(0);
    let mut params = DenoiserParams::<T>::init(&manifest.model, &mut rng)?;
    let names: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|(n, a)| (n, a.shape().to_vec())).collect();
    if names.len() != manifest.tensors.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            names.len(),
            manifest.tensors.len()
        )));
    }
    for ((slot, (name, shape)), entry) in params.tensors_mut().into_iter().zip(names).zip(&manifest.tensors) {
        if entry.name != name {
            return Err(ModelError::Checkpoint(format!("expected tensor '{name}', found '{}'", entry.name)));
        }
        let t = load_tensor(dir.join(&entry.file))?;
        if t.dims() != shape.as_slice() {
            return Err(ModelError::Checkpoint(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.dims())));
        }
        let values: Vec<T> = match t.data() {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            TensorData::U8(_) => return Err(ModelError::Checkpoint(format!("tensor '{name}' is not floating point"))),
        };
        *slot = Array2::from_shape_vec((shape[0], shape[1]), values).expect("checked shape");
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::seeded_rng;
    use ndarray::array;

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bars.len(), 1001);
        assert_eq!(s.alpha_bars[0], 1.0);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!((s.betas[0] - 1e-4).abs() < 1e-18 && (s.betas[999] - 2e-2).abs() < 1e-15);
        assert!(s.alpha_bar(1001).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
    }

    #[test]
    fn noising_examples() {
        let x0 = array![[2.0f64]];
        let e = array![[1.0f64]];
        let xt = noise_with_alpha_bar(x0.view(), e.view(), 0.25).unwrap();
        assert!((xt[[0, 0]] - (1.0 + 0.75f64.sqrt())).abs() < 1e-15);
        assert_eq!(noise_with_alpha_bar(x0.view(), e.view(), 1.0).unwrap(), x0);
        assert_eq!(noise_with_alpha_bar(x0.view(), e.view(), 0.0).unwrap(), e);
        assert!(x0_with_alpha_bar(x0.view(), e.view(), 0.0).is_err());
        let x = x0_with_alpha_bar(xt.view(), Array2::zeros((1, 1)).view(), 0.25).unwrap();
        assert!((x[[0, 0]] - xt[[0, 0]] / 0.5).abs() < 1e-15);
    }

    #[test]
    fn ddim_endpoint_and_order() {
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(2);
        let x0: Array2<f64> = nn::randn(&mut rng, 3, 2, 1.0);
        let e: Array2<f64> = nn::randn(&mut rng, 3, 2, 1.0);
        let xt = forward_noise(x0.view(), 500, e.view(), &s).unwrap();
        let back = ddim_step(xt.view(), 500, 0, e.view(), &s).unwrap();
        assert!((&back - &x0).iter().all(|v| v.abs() < 1e-12));
        assert!(ddim_step(xt.view(), 5, 5, e.view(), &s).is_err());
    }

    #[test]
    fn timesteps_cover_schedule() {
        let full = ddim_timesteps(1000, 1000).unwrap();
        assert_eq!(full.len(), 1000);
        assert_eq!(full[0], (1000, 999));
        assert_eq!(*full.last().unwrap(), (1, 0));
        let fifty = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(fifty[0], (1000, 980));
        assert_eq!(fifty[49], (20, 0));
        assert!(ddim_timesteps(10, 0).is_err());
    }

    fn corr_1row(p: usize, mask: u8, n: usize) -> TokenCorrespondence {
        TokenCorrespondence { pair: (0, 1), h: 1, w: n, matches: vec![p; n], mask: vec![mask; n], valid: vec![true; n], tau: 1.5 }
    }

    #[test]
    fn ce_closed_form() {
        // one visible row with A = [0.7, 0.3], the other row masked
        let z = array![[0.7f64.ln(), 0.3f64.ln()], [5.0, -1.0]];
        let probs = nn::softmax_rows(z.view());
        let mut c = corr_1row(0, 1, 2);
        c.h = 2;
        c.w = 1;
        c.mask = vec![1, 0];
        let m = CrossViewAttention { pair: (0, 1), logits: z, probs: probs.clone() };
        let (l, g) = cameo_loss(&[m], &[&c], LossType::Ce).unwrap();
        let g = &g[0];
        assert!((l - 0.356675).abs() < 1e-6);
        assert!((g[[0, 0]] - (0.7 - 1.0)).abs() < 1e-12 && (g[[0, 1]] - 0.3).abs() < 1e-12);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_masked_loss_is_zero() {
        let z = array![[1.0f64, 2.0], [0.0, 0.0]];
        let m = CrossViewAttention { pair: (0, 1), probs: nn::softmax_rows(z.view()), logits: z };
        let mut c = corr_1row(1, 0, 1);
        c.h = 2;
        c.matches = vec![1, 0];
        c.mask = vec![0, 0];
        c.w = 1;
        for loss in [LossType::Ce, LossType::L1] {
            let (l, g) = cameo_loss(&[m.clone()], &[&c], loss).unwrap();
            assert_eq!(l, 0.0);
            assert!(g[0].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn l1_equals_twice_missing_mass() {
        let z = array![[0.2f64, -0.4, 1.0]];
        let probs = nn::softmax_rows(z.view());
        // rows are shifted copies, so each has the same softmax
        let z3 = Array2::from_shape_fn((3, 3), |(r, k)| z[[0, k]] + r as f64);
        let p3 = nn::softmax_rows(z3.view());
        let c3 = TokenCorrespondence { pair: (0, 1), h: 1, w: 3, matches: vec![2, 2, 2], mask: vec![1, 1, 1], valid: vec![true; 3], tau: 1.5 };
        let m = CrossViewAttention { pair: (0, 1), logits: z3, probs: p3 };
        let (l, _) = cameo_loss(&[m], &[&c3], LossType::L1).unwrap();
        assert!((l - 2.0 * (1.0 - probs[[0, 2]])).abs() < 1e-12);
    }

    #[test]
    fn pair_mismatch_is_rejected() {
        let z = Array2::<f64>::zeros((2, 2));
        let m = CrossViewAttention { pair: (1, 0), probs: z.clone(), logits: z };
        let c = TokenCorrespondence { pair: (0, 1), h: 1, w: 2, matches: vec![0, 1], mask: vec![1, 1], valid: vec![true; 2], tau: 1.5 };
        assert!(matches!(cameo_loss(&[m], &[&c], LossType::Ce), Err(ModelError::PairMismatch { .. })));
    }

    #[test]
    fn forward_preserves_latent_shape() {
        let mut cfg = ModelConfig::tiny();
        cfg.h = 4;
        cfg.w = 4;
        let mut rng = seeded_rng(0);
        let p = DenoiserParams::<f64>::init(&cfg, &mut rng).unwrap();
        let input = DenoiserInput {
            x: nn::randn(&mut rng, cfg.seq_len(), cfg.channels, 1.0),
            cond: nn::randn(&mut rng, cfg.seq_len(), COND_CHANNELS, 1.0),
            t: 10,
        };
        let st = denoiser_forward(&cfg, &p, &input, ForwardOptions::default()).unwrap();
        assert_eq!(st.eps_hat.shape(), &[cfg.seq_len(), cfg.channels]);
    }

    #[test]
    fn guidance_algebra() {
        let c = array![[1.0f64, 2.0]];
        let u = array![[0.5f64, -1.0]];
        assert_eq!(guided_eps(&c, &u, 1.0), c);
        assert_eq!(guided_eps(&c, &u, 2.0), array![[1.5, 5.0]]);
        assert_eq!(guided_eps(&c, &c, 3.0), c);
    }
}
