//! Randomized structural checks: softmax rows, correspondence one-hots and
//! TensorFile byte round trips.

use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, project_and_normalize, row_stochastic_error, AttentionConfig, AttentionParams, ProjectionHead,
};
use crate::correspondence::{build_correspondence, TokenGrid};
use crate::io::{load_tensor, save_tensor, substream, Tensor, TensorData};
use crate::nn::{self, Real};

/// Allowed deviation of a row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuralReport {
    pub cases: usize,
    pub softmax_checks: usize,
    pub softmax_violations: usize,
    pub onehot_checks: usize,
    pub onehot_violations: usize,
    pub tensor_checks: usize,
    pub tensor_violations: usize,
    /// First few failures, for diagnostics.
    pub failures: Vec<String>,
}

impl StructuralReport {
    pub fn violations(&self) -> usize {
        self.softmax_violations + self.onehot_violations + self.tensor_violations
    }

    fn fail(&mut self, msg: String) {
        if self.failures.len() < 10 {
            self.failures.push(msg);
        }
    }
}

fn rows_ok<T: Real>(a: &Array2<T>) -> bool {
    row_stochastic_error(a.view()).is_some_and(|e| e <= ROW_SUM_TOL)
}

fn logits(rng: &mut crate::io::Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = [1e-3, 1.0, 30.0, 1e3][rng.random_range(0..4)];
    nn::randn(rng, rows, cols, scale)
}

fn softmax_case(rng: &mut crate::io::Rng, report: &mut StructuralReport, case: usize) {
    let (r, c) = (rng.random_range(1..40), rng.random_range(1..40));
    let z = logits(rng, r, c);
    let z32: Array2<f32> = nn::cast(&z);
    let checks = [
        ("softmax f64", rows_ok(&nn::softmax_rows(z.view()))),
        ("softmax f32", rows_ok(&nn::softmax_rows(z32.view()))),
    ];

    let heads = rng.random_range(1..5);
    let mut head = ProjectionHead::<f64>::init_mean(heads, rng);
    head.w1 = &head.w1 + &nn::randn::<f64>(rng, head.w1.nrows(), head.w1.ncols(), 0.3);
    let per_head: Vec<Array2<f64>> = (0..heads).map(|_| logits(rng, r, c)).collect();
    let views: Vec<_> = per_head.iter().map(|l| l.view()).collect();
    let projected = project_and_normalize(&views, &head).map(|p| rows_ok(&p.probs)).unwrap_or(false);

    let heads = [1, 2, 4][rng.random_range(0..3)];
    let cfg = AttentionConfig {
        views: rng.random_range(2..5),
        h: rng.random_range(1..4),
        w: rng.random_range(1..4),
        dim: 4 * heads,
        heads,
        layer_id: 0,
    };
    let params = AttentionParams::<f64>::init(cfg.dim, rng, 1.0);
    let x = logits(rng, cfg.seq_len(), cfg.dim);
    let attended = match attention_forward(&cfg, &params, x.view(), false) {
        Ok((_, cache)) => (0..heads).all(|h| rows_ok(&cache.full_map(h))),
        Err(_) => false,
    };

    for (what, ok) in checks.into_iter().chain([("projection head", projected), ("attention", attended)]) {
        report.softmax_checks += 1;
        if !ok {
            report.softmax_violations += 1;
            report.fail(format!("case {case}: {what} rows not stochastic"));
        }
    }
}

fn random_grid(rng: &mut crate::io::Rng, h: usize, w: usize, p_valid: f64) -> TokenGrid {
    let n = h * w;
    let valid: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p_valid).collect();
    let points = valid
        .iter()
        .map(|&v| if v { [rng.random(), rng.random(), rng.random()] } else { [f64::NAN; 3] })
        .collect();
    TokenGrid { h, w, points, valid }
}

fn onehot_case(rng: &mut crate::io::Rng, report: &mut StructuralReport, case: usize) {
    let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
    let (pi, pj) = (rng.random(), rng.random());
    let gi = random_grid(rng, h, w, pi);
    let gj = random_grid(rng, h, w, pj);
    let tau = [0.0, 1.5, 3.0, f64::INFINITY][rng.random_range(0..4)];
    report.onehot_checks += 1;
    let c = match build_correspondence(&gi, &gj, (0, 1), tau) {
        Ok(c) => c,
        Err(e) => {
            report.onehot_violations += 1;
            report.fail(format!("case {case}: {e}"));
            return;
        }
    };
    let n = c.len();
    let p = c.onehot();
    let ok = p.len() == n * n
        && (0..n).all(|x| {
            let row = &p[x * n..(x + 1) * n];
            let sum: usize = row.iter().map(|&v| v as usize).sum();
            let expect = usize::from(c.valid[x]);
            let masked_ok = c.mask[x] <= 1 && (c.mask[x] == 0 || (gi.valid[x] && gj.valid[c.matches[x]]));
            sum == expect && row.iter().all(|&v| v <= 1) && (!c.valid[x] || row[c.matches[x]] == 1) && masked_ok
        });
    if !ok {
        report.onehot_violations += 1;
        report.fail(format!("case {case}: one-hot rows of a {h}x{w} grid"));
    }
}

fn random_tensor(rng: &mut crate::io::Rng) -> Tensor {
    let rank = rng.random_range(1..5);
    let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..7)).collect();
    let len: usize = dims.iter().product();
    // Raw bit patterns cover NaN payloads, infinities and subnormals.
    let data = match rng.random_range(0..3) {
        0 => TensorData::F32((0..len).map(|_| f32::from_bits(rng.random())).collect()),
        1 => TensorData::F64((0..len).map(|_| f64::from_bits(rng.random())).collect()),
        _ => TensorData::U8((0..len).map(|_| rng.random()).collect()),
    };
    Tensor::new(dims, data).expect("consistent tensor")
}

fn tensor_case(rng: &mut crate::io::Rng, report: &mut StructuralReport, case: usize, dir: Option<&Path>) {
    let t = random_tensor(rng);
    let bytes = t.to_bytes();
    report.tensor_checks += 1;
    let mut ok = Tensor::from_bytes(&bytes).is_ok_and(|back| back.to_bytes() == bytes);
    if let Some(dir) = dir {
        let path = dir.join(format!("case{case}.camt"));
        ok &= save_tensor(&path, &t).is_ok()
            && std::fs::read(&path).is_ok_and(|disk| disk == bytes)
            && load_tensor(&path).is_ok_and(|back| back.to_bytes() == bytes);
        let _ = std::fs::remove_file(&path);
    }
    if !ok {
        report.tensor_violations += 1;
        report.fail(format!("case {case}: tensor {:?} did not round-trip", t.dims()));
    }
}

/// Runs `cases` randomized cases; each case exercises all three families.
/// With `dir`, tensors also round-trip through files there.
pub fn run(cases: usize, seed: u64, dir: Option<&Path>) -> StructuralReport {
    let mut report = StructuralReport { cases, ..Default::default() };
    for case in 0..cases {
        let mut rng = substream(seed, case as u64);
        softmax_case(&mut rng, &mut report, case);
        onehot_case(&mut rng, &mut report, case);
        tensor_case(&mut rng, &mut report, case, dir);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus_is_clean() {
        let dir = tempfile::tempdir().unwrap();
        let r = run(50, 3, Some(dir.path()));
        assert_eq!(r.violations(), 0, "{:?}", r.failures);
        assert_eq!(r.softmax_checks, 200);
        assert_eq!((r.onehot_checks, r.tensor_checks), (50, 50));
    }
}
