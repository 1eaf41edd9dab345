//! Multi-view self-attention over the concatenated token sequence of all views,
//! cross-view sub-map extraction, the logit projection head and exact gradients.
//!
//! Row-major `x · W` convention throughout: tokens are rows, features columns.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::Rng;
use crate::nn::{self, Real};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("cross-view extraction needs distinct views, got ({0}, {0})")]
    SameView(usize),
    #[error("view index {index} out of range for {views} views")]
    ViewOutOfRange { index: usize, views: usize },
    #[error("non-finite logits")]
    NonFinite,
}

type Result<T> = std::result::Result<T, AttentionError>;

fn check_shape(what: &'static str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(AttentionError::ShapeMismatch {
            what,
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub views: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub heads: usize,
    pub layer_id: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(AttentionError::Config(format!("need at least 2 views, got {}", self.views)));
        }
        if self.h == 0 || self.w == 0 {
            return Err(AttentionError::Config("token grid must be non-empty".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(AttentionError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        self.h * self.w
    }

    pub fn seq_len(&self) -> usize {
        self.views * self.tokens_per_view()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn scale<T: Real>(&self) -> T {
        T::one() / T::of(self.head_dim() as f64).sqrt()
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        for index in [i, j] {
            if index >= self.views {
                return Err(AttentionError::ViewOutOfRange { index, views: self.views });
            }
        }
        if i == j {
            return Err(AttentionError::SameView(i));
        }
        Ok(())
    }
}

/// Query/key/value/output projections, each `dim × dim`; head `h` owns
/// columns `h·dh .. (h+1)·dh` of Q, K and V.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn init(dim: usize, rng: &mut Rng, out_scale: f64) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            wq: nn::randn(rng, dim, dim, std),
            wk: nn::randn(rng, dim, dim, std),
            wv: nn::randn(rng, dim, dim, std),
            wo: nn::randn(rng, dim, dim, std * out_scale),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        let z = Array2::zeros((dim, dim));
        Self { wq: z.clone(), wk: z.clone(), wv: z.clone(), wo: z }
    }
}

/// Forward state kept for the backward pass and for map inspection.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub x: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Scaled logits `Q_h K_hᵀ / √dh`, one `S × S` matrix per head.
    pub logits: Vec<Array2<T>>,
    /// Jointly normalized maps; empty when the block was perturbed.
    pub probs: Vec<Array2<T>>,
    pub mixed: Array2<T>,
    pub perturbed: bool,
}

impl<T: Real> AttentionCache<T> {
    pub fn heads(&self) -> usize {
        self.logits.len()
    }

    /// Full `S × S` map for one head (the identity when perturbed).
    pub fn full_map(&self, head: usize) -> Array2<T> {
        if self.perturbed {
            perturb_identity(self.x.nrows())
        } else {
            self.probs[head].clone()
        }
    }

    /// Head-averaged full map.
    pub fn mean_full_map(&self) -> Array2<T> {
        let n = self.heads();
        let mut acc = self.full_map(0);
        for h in 1..n {
            acc = acc + self.full_map(h);
        }
        acc / T::of(n as f64)
    }

    /// Per-head logit block for the ordered view pair `(i, j)`.
    pub fn pair_logits(&self, cfg: &AttentionConfig, head: usize, i: usize, j: usize) -> Result<ArrayView2<'_, T>> {
        cfg.check_pair(i, j)?;
        let n = cfg.tokens_per_view();
        Ok(self.logits[head].slice(s![i * n..(i + 1) * n, j * n..(j + 1) * n]))
    }

    /// Sub-block of one head's jointly normalized map for pair `(i, j)`.
    pub fn cross_view(&self, cfg: &AttentionConfig, head: usize, i: usize, j: usize) -> Result<CrossViewAttention<T>> {
        let logits = self.pair_logits(cfg, head, i, j)?.to_owned();
        let probs = extract_cross_view(self.full_map(head).view(), cfg, i, j)?;
        Ok(CrossViewAttention { pair: (i, j), logits, probs })
    }

    /// Cross-view blocks of every ordered pair for one head.
    pub fn all_cross_views(&self, cfg: &AttentionConfig, head: usize) -> Vec<CrossViewAttention<T>> {
        let mut out = Vec::new();
        for i in 0..cfg.views {
            for j in 0..cfg.views {
                if i != j {
                    out.push(self.cross_view(cfg, head, i, j).expect("valid pair"));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewAttention<T> {
    pub pair: (usize, usize),
    pub logits: Array2<T>,
    pub probs: Array2<T>,
}

/// Largest deviation of any row sum from 1, or `None` if an entry is negative
/// or non-finite.
pub fn row_stochastic_error<T: Real>(a: ArrayView2<T>) -> Option<f64> {
    let mut worst = 0.0f64;
    for row in a.rows() {
        let mut sum = 0.0;
        for &v in row {
            let v = v.f64();
            if !v.is_finite() || v < 0.0 {
                return None;
            }
            sum += v;
        }
        worst = worst.max((sum - 1.0).abs());
    }
    Some(worst)
}

/// Multi-head attention over all `F·h·w` tokens. `x` is `S × dim` with view
/// `v` occupying rows `v·hw .. (v+1)·hw`.
pub fn attention_forward<T: Real>(
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    x: ArrayView2<T>,
    perturb: bool,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    cfg.validate()?;
    let (s_len, d) = (cfg.seq_len(), cfg.dim);
    check_shape("tokens", x.shape(), &[s_len, d])?;
    for (what, w) in [("wq", &params.wq), ("wk", &params.wk), ("wv", &params.wv), ("wo", &params.wo)] {
        check_shape(what, w.shape(), &[d, d])?;
    }
    let dh = cfg.head_dim();
    let scale: T = cfg.scale();
    let q = x.dot(&params.wq);
    let k = x.dot(&params.wk);
    let v = x.dot(&params.wv);
    let mut logits = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    let mut mixed = Array2::zeros((s_len, d));
    for h in 0..cfg.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let l = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if l.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
        if perturb {
            mixed.slice_mut(cols).assign(&v.slice(cols));
        } else {
            let p = nn::softmax_rows(l.view());
            mixed.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        logits.push(l);
    }
    let out = mixed.dot(&params.wo);
    let cache = AttentionCache { x: x.to_owned(), q, k, v, logits, probs, mixed, perturbed: perturb };
    Ok((out, cache))
}

/// Backward pass. `extra_dlogits`, if given, holds one `S × S` gradient per head
/// with respect to the scaled logits; it carries the supervised-map path.
pub fn attention_backward<T: Real>(
    cfg: &AttentionConfig,
    params: &AttentionParams<T>,
    cache: &AttentionCache<T>,
    d_out: ArrayView2<T>,
    extra_dlogits: Option<&[Array2<T>]>,
) -> Result<(Array2<T>, AttentionParams<T>)> {
    let (s_len, d) = (cfg.seq_len(), cfg.dim);
    check_shape("upstream gradient", d_out.shape(), &[s_len, d])?;
    if let Some(extra) = extra_dlogits {
        if extra.len() != cfg.heads {
            return Err(AttentionError::ShapeMismatch {
                what: "extra logit gradients",
                expected: vec![cfg.heads],
                found: vec![extra.len()],
            });
        }
        for e in extra {
            check_shape("extra logit gradient", e.shape(), &[s_len, s_len])?;
        }
    }
    let dh = cfg.head_dim();
    let scale: T = cfg.scale();
    let d_wo = cache.mixed.t().dot(&d_out);
    let d_mixed = d_out.dot(&params.wo.t());
    let mut dq = Array2::zeros((s_len, d));
    let mut dk = Array2::zeros((s_len, d));
    let mut dv = Array2::zeros((s_len, d));
    for h in 0..cfg.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_mixed.slice(cols);
        let mut d_logits = if cache.perturbed {
            dv.slice_mut(cols).assign(&d_oh);
            Array2::zeros((s_len, s_len))
        } else {
            let p = &cache.probs[h];
            dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
            let d_p = d_oh.dot(&cache.v.slice(cols).t());
            nn::softmax_rows_backward(p.view(), d_p.view())
        };
        if let Some(extra) = extra_dlogits {
            d_logits += &extra[h];
        }
        d_logits *= scale;
        dq.slice_mut(cols).assign(&d_logits.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_logits.t().dot(&cache.q.slice(cols)));
    }
    let xt = cache.x.t();
    let grads = AttentionParams { wq: xt.dot(&dq), wk: xt.dot(&dk), wv: xt.dot(&dv), wo: d_wo };
    let dx = dq.dot(&params.wq.t()) + dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
    Ok((dx, grads))
}

/// Rows `[i·hw, (i+1)·hw)` and columns `[j·hw, (j+1)·hw)` of a full map. These
/// rows are normalized over all keys, not just those of view `j`.
pub fn extract_cross_view<T: Real>(full: ArrayView2<T>, cfg: &AttentionConfig, i: usize, j: usize) -> Result<Array2<T>> {
    cfg.check_pair(i, j)?;
    let s_len = cfg.seq_len();
    check_shape("full map", full.shape(), &[s_len, s_len])?;
    let n = cfg.tokens_per_view();
    Ok(full.slice(s![i * n..(i + 1) * n, j * n..(j + 1) * n]).to_owned())
}

/// Attention that sends every query to its own position.
pub fn perturb_identity<T: Real>(len: usize) -> Array2<T> {
    Array2::eye(len)
}

/// Two-layer SiLU perceptron folding per-entry head logits into one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    /// `heads × hidden`
    pub w1: Array2<T>,
    /// `1 × hidden`
    pub b1: Array2<T>,
    /// `hidden × 1`
    pub w2: Array2<T>,
    /// `1 × 1`
    pub b2: Array2<T>,
}

impl<T: Real> ProjectionHead<T> {
    pub fn hidden_for(heads: usize) -> usize {
        4 * heads
    }

    pub fn zeros(heads: usize) -> Self {
        let hidden = Self::hidden_for(heads);
        Self {
            w1: Array2::zeros((heads, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, 1)),
            b2: Array2::zeros((1, 1)),
        }
    }

    /// Starts at exactly the mean over heads. Units `2h` and `2h+1` form the pair
    /// `silu(l) − silu(−l) = l`; the remaining units start with random input
    /// weights and zero output weights.
    pub fn init_mean(heads: usize, rng: &mut Rng) -> Self {
        let mut head = Self::zeros(heads);
        let inv = T::one() / T::of(heads as f64);
        for h in 0..heads {
            head.w1[[h, 2 * h]] = T::one();
            head.w1[[h, 2 * h + 1]] = -T::one();
            head.w2[[2 * h, 0]] = inv;
            head.w2[[2 * h + 1, 0]] = -inv;
        }
        let spare: Array2<T> = nn::randn(rng, heads, 2 * heads, 0.5);
        head.w1.slice_mut(s![.., 2 * heads..]).assign(&spare);
        head
    }

    /// Copies the logits of head `which` and ignores the others.
    pub fn identity(heads: usize, which: usize) -> Self {
        let mut head = Self::zeros(heads);
        head.w1[[which, 0]] = T::one();
        head.w1[[which, 1]] = -T::one();
        head.w2[[0, 0]] = T::one();
        head.w2[[1, 0]] = -T::one();
        head
    }

    pub fn heads(&self) -> usize {
        self.w1.nrows()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionCache<T> {
    rows: usize,
    cols: usize,
    stack: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    pub aggregated: Array2<T>,
    pub probs: Array2<T>,
}

/// Aggregates per-head logits of one pair with `head`, then applies a row
/// softmax over the keys of the target view only.
pub fn project_and_normalize<T: Real>(
    per_head: &[ArrayView2<T>],
    head: &ProjectionHead<T>,
) -> Result<ProjectionCache<T>> {
    let heads = head.heads();
    if per_head.len() != heads {
        return Err(AttentionError::ShapeMismatch {
            what: "head logits",
            expected: vec![heads],
            found: vec![per_head.len()],
        });
    }
    let (rows, cols) = per_head[0].dim();
    for l in per_head {
        check_shape("head logits", l.shape(), &[rows, cols])?;
        if l.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
    }
    let mut stack = Array2::zeros((rows * cols, heads));
    for (h, l) in per_head.iter().enumerate() {
        for (dst, &src) in stack.column_mut(h).iter_mut().zip(l.iter()) {
            *dst = src;
        }
    }
    let pre = stack.dot(&head.w1) + &head.b1;
    let act = pre.mapv(nn::silu);
    let z = act.dot(&head.w2) + &head.b2;
    let aggregated = z.into_shape_with_order((rows, cols)).expect("entry count");
    let probs = nn::softmax_rows(aggregated.view());
    Ok(ProjectionCache { rows, cols, stack, pre, act, aggregated, probs })
}

/// Gradients of the head parameters and the per-head logits given the
/// gradient with respect to the aggregated (pre-softmax) logits.
pub fn project_backward<T: Real>(
    head: &ProjectionHead<T>,
    cache: &ProjectionCache<T>,
    d_aggregated: ArrayView2<T>,
) -> Result<(Vec<Array2<T>>, ProjectionHead<T>)> {
    check_shape("aggregated gradient", d_aggregated.shape(), &[cache.rows, cache.cols])?;
    let dz = d_aggregated.to_owned().into_shape_with_order((cache.rows * cache.cols, 1)).expect("entry count");
    let d_w2 = cache.act.t().dot(&dz);
    let d_b2 = nn::col_sums(dz.view());
    let mut d_pre = dz.dot(&head.w2.t());
    ndarray::Zip::from(&mut d_pre).and(&cache.pre).for_each(|g, &u| *g = *g * nn::silu_grad(u));
    let d_w1 = cache.stack.t().dot(&d_pre);
    let d_b1 = nn::col_sums(d_pre.view());
    let d_stack = d_pre.dot(&head.w1.t());
    let d_logits = d_stack
        .axis_iter(Axis(1))
        .map(|c| c.to_owned().into_shape_with_order((cache.rows, cache.cols)).expect("entry count"))
        .collect();
    Ok((d_logits, ProjectionHead { w1: d_w1, b1: d_b1, w2: d_w2, b2: d_b2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::seeded_rng;
    use ndarray::array;

    fn cfg(views: usize, h: usize, w: usize, dim: usize, heads: usize) -> AttentionConfig {
        AttentionConfig { views, h, w, dim, heads, layer_id: 0 }
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let c = cfg(2, 2, 2, 4, 2);
        let mut rng = seeded_rng(1);
        let mut p = AttentionParams::<f64>::init(4, &mut rng, 1.0);
        p.wq.fill(0.0);
        let x: Array2<f64> = nn::randn(&mut rng, 8, 4, 1.0);
        let (_, cache) = attention_forward(&c, &p, x.view(), false).unwrap();
        for h in 0..2 {
            assert!(cache.probs[h].iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-15));
        }
    }

    #[test]
    fn closed_form_two_by_two() {
        // Two tokens per view, dim 1, so the scale is 1 and row 0 sees [1, 0, 1, 0].
        let c = AttentionConfig { views: 2, h: 1, w: 2, dim: 1, heads: 1, layer_id: 0 };
        let x = array![[1.0], [0.0], [1.0], [0.0]];
        let one = array![[1.0]];
        let p = AttentionParams { wq: one.clone(), wk: one.clone(), wv: one.clone(), wo: one };
        let (_, cache) = attention_forward(&c, &p, x.view(), false).unwrap();
        let e = std::f64::consts::E;
        let a = &cache.probs[0];
        assert!((a[[0, 0]] - e / (2.0 * e + 2.0)).abs() < 1e-15);
        assert!((a[[0, 1]] - 1.0 / (2.0 * e + 2.0)).abs() < 1e-15);
        assert!(a.row(1).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn perturbed_output_is_value_passthrough() {
        let c = cfg(2, 2, 2, 4, 2);
        let mut rng = seeded_rng(3);
        let p = AttentionParams::<f64>::init(4, &mut rng, 1.0);
        let x: Array2<f64> = nn::randn(&mut rng, 8, 4, 1.0);
        let (out, cache) = attention_forward(&c, &p, x.view(), true).unwrap();
        let expected = x.dot(&p.wv).dot(&p.wo);
        assert!((&out - &expected).iter().all(|v| v.abs() < 1e-14));
        assert_eq!(cache.full_map(1), Array2::<f64>::eye(8));
    }

    #[test]
    fn extraction_rejects_same_view_and_bad_shape() {
        let c = cfg(2, 2, 2, 4, 2);
        let full = Array2::<f64>::zeros((8, 8));
        assert_eq!(extract_cross_view(full.view(), &c, 1, 1), Err(AttentionError::SameView(1)));
        assert!(extract_cross_view(full.view(), &c, 0, 2).is_err());
        let small = Array2::<f64>::zeros((4, 4));
        assert!(extract_cross_view(small.view(), &c, 0, 1).is_err());
    }

    #[test]
    fn mean_init_aggregates_to_head_mean() {
        let mut rng = seeded_rng(5);
        let head = ProjectionHead::<f64>::init_mean(3, &mut rng);
        let logits: Vec<Array2<f64>> = (0..3).map(|_| nn::randn(&mut rng, 4, 5, 2.0)).collect();
        let views: Vec<_> = logits.iter().map(|l| l.view()).collect();
        let cache = project_and_normalize(&views, &head).unwrap();
        let mean = (&logits[0] + &logits[1] + &logits[2]) / 3.0;
        assert!((&cache.aggregated - &mean).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn hand_computed_projection() {
        // One head, hidden 4; only unit 0 active with w1 = 2, b1 = 0.5, w2 = 3, b2 = -1.
        let mut head = ProjectionHead::<f64>::zeros(1);
        head.w1[[0, 0]] = 2.0;
        head.b1[[0, 0]] = 0.5;
        head.w2[[0, 0]] = 3.0;
        head.b2[[0, 0]] = -1.0;
        // silu(0.5) = 0.5·σ(0.5) for every inactive unit too, but their w2 is 0.
        let l = array![[0.0, 1.0], [-1.0, 0.25]];
        let cache = project_and_normalize(&[l.view()], &head).unwrap();
        let f = |x: f64| {
            let u: f64 = 2.0 * x + 0.5;
            3.0 * u / (1.0 + (-u).exp()) - 1.0
        };
        let z = [[f(0.0), f(1.0)], [f(-1.0), f(0.25)]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((cache.aggregated[[r, c]] - z[r][c]).abs() < 1e-14);
            }
            let denom = z[r][0].exp() + z[r][1].exp();
            assert!((cache.probs[[r, 0]] - z[r][0].exp() / denom).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_rejects_bad_input() {
        let head = ProjectionHead::<f64>::identity(2, 0);
        let a = Array2::<f64>::zeros((2, 2));
        assert!(project_and_normalize(&[a.view()], &head).is_err());
        let mut b = a.clone();
        b[[0, 0]] = f64::NAN;
        assert_eq!(project_and_normalize(&[a.view(), b.view()], &head).unwrap_err(), AttentionError::NonFinite);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let c = cfg(2, 2, 2, 4, 2);
        let mut rng = seeded_rng(9);
        let p = AttentionParams::<f64>::init(4, &mut rng, 1.0);
        let x: Array2<f64> = nn::randn(&mut rng, 8, 4, 1.0);
        let (_, cache) = attention_forward(&c, &p, x.view(), false).unwrap();
        let (dx, g) = attention_backward(&c, &p, &cache, Array2::zeros((8, 4)).view(), None).unwrap();
        assert!(dx.iter().chain(g.wq.iter()).chain(g.wk.iter()).chain(g.wv.iter()).chain(g.wo.iter()).all(|&v| v == 0.0));
    }
}
