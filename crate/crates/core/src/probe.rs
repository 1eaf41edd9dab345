//! Correspondence-precision probe: nearest-neighbour matching from descriptors
//! or attention maps, ratio ranking, top-k filtering and 3D scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{brute_force_knn, dist2, PointIndex, TokenGrid};
use crate::io::Rng;

pub const DEFAULT_TOP_K: usize = 1000;
pub const DEFAULT_RHO: f64 = 0.02;
pub const MAX_THETA_DEG: f64 = 120.0;
pub const BIN_LABELS: [&str; 4] = ["0-30", "30-60", "60-90", "90-120"];

/// Destination size above which l2 matching on 3-vectors uses the voxel index.
const INDEX_MIN_POINTS: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("need at least 2 valid destination tokens, found {0}")]
    TooFewDestinations(usize),
    #[error("descriptor grids disagree: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("match index {index} outside grid of {len} tokens")]
    OutOfGrid { index: usize, len: usize },
    #[error("no matches to score")]
    NoMatches,
    #[error("empty pair list")]
    EmptyPairs,
    #[error("rho must be positive, got {0}")]
    InvalidRho(f64),
    #[error("top-k must be at least 1")]
    InvalidTopK,
}

type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L2,
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(format!("unknown metric '{other}' (expected cosine or l2)")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub src: usize,
    pub dst: usize,
    pub ratio: f64,
    pub distance_3d: Option<f64>,
}

/// First and second neighbour of one source descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighbourPair {
    pub src: usize,
    pub nn1: usize,
    pub nn2: usize,
    pub d1: f64,
    pub d2: f64,
    pub ratio: f64,
}

impl NeighbourPair {
    pub fn candidate(&self) -> MatchCandidate {
        MatchCandidate { src: self.src, dst: self.nn1, ratio: self.ratio, distance_3d: None }
    }
}

/// `1 − d1/d2`, clamped to `[0, 1]`; equal distances (including both zero) give 0.
pub fn ratio_score(d1: f64, d2: f64) -> f64 {
    if !(d2 > 0.0) || d1 >= d2 {
        return 0.0;
    }
    (1.0 - d1 / d2).clamp(0.0, 1.0)
}

fn row_valid(row: ndarray::ArrayView1<f64>) -> bool {
    row.iter().all(|v| v.is_finite())
}

/// Nearest and second-nearest destination descriptor of every valid source
/// row. Rows containing non-finite values are skipped on both sides; ties go
/// to the lower index.
pub fn match_descriptors(a: ArrayView2<f64>, b: ArrayView2<f64>, metric: Metric) -> Result<Vec<NeighbourPair>> {
    if a.ncols() != b.ncols() {
        return Err(ProbeError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let dst_valid: Vec<bool> = b.rows().into_iter().map(row_valid).collect();
    let n_valid = dst_valid.iter().filter(|&&v| v).count();
    if n_valid < 2 {
        return Err(ProbeError::TooFewDestinations(n_valid));
    }
    let mut out = Vec::new();
    match metric {
        Metric::L2 if a.ncols() == 3 => {
            let pts = |m: ArrayView2<f64>| -> Vec<[f64; 3]> {
                m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
            };
            let dst = pts(b);
            let index = (dst.len() >= INDEX_MIN_POINTS).then(|| PointIndex::new(&dst, &dst_valid));
            for (src, p) in pts(a).iter().enumerate() {
                if !p.iter().all(|v| v.is_finite()) {
                    continue;
                }
                let best = match &index {
                    Some(ix) => ix.knn(p, 2),
                    None => brute_force_knn(&dst, &dst_valid, p, 2),
                };
                let (d1, d2) = (best[0].0.sqrt(), best[1].0.sqrt());
                out.push(NeighbourPair { src, nn1: best[0].1, nn2: best[1].1, d1, d2, ratio: ratio_score(d1, d2) });
            }
        }
        _ => {
            let norms: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            for (src, q) in a.rows().into_iter().enumerate() {
                if !row_valid(q) {
                    continue;
                }
                let qn = q.dot(&q).sqrt();
                let mut best: [(f64, usize); 2] = [(f64::INFINITY, usize::MAX); 2];
                for (j, r) in b.rows().into_iter().enumerate() {
                    if !dst_valid[j] {
                        continue;
                    }
                    let d = match metric {
                        Metric::L2 => q.iter().zip(r.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
                        Metric::Cosine => {
                            let denom = qn * norms[j];
                            if denom > 0.0 {
                                1.0 - q.dot(&r) / denom
                            } else {
                                1.0
                            }
                        }
                    };
                    if d < best[0].0 {
                        best[1] = best[0];
                        best[0] = (d, j);
                    } else if d < best[1].0 {
                        best[1] = (d, j);
                    }
                }
                let (d1, d2) = (best[0].0, best[1].0);
                out.push(NeighbourPair { src, nn1: best[0].1, nn2: best[1].1, d1, d2, ratio: ratio_score(d1, d2) });
            }
        }
    }
    Ok(out)
}

/// Argmax of every attention row, ranked with `1 − weight` as the distance.
pub fn match_from_attention(attn: ArrayView2<f64>) -> Vec<MatchCandidate> {
    attn.rows()
        .into_iter()
        .enumerate()
        .map(|(src, row)| {
            let mut top = [(f64::NEG_INFINITY, 0usize); 2];
            for (j, &w) in row.iter().enumerate() {
                if w > top[0].0 {
                    top[1] = top[0];
                    top[0] = (w, j);
                } else if w > top[1].0 {
                    top[1] = (w, j);
                }
            }
            let second = if row.len() > 1 { top[1].0 } else { 0.0 };
            MatchCandidate { src, dst: top[0].1, ratio: ratio_score(1.0 - top[0].0, 1.0 - second), distance_3d: None }
        })
        .collect()
}

/// Each source token matched to the token with the same index.
pub fn self_matches(len: usize) -> Vec<MatchCandidate> {
    (0..len).map(|i| MatchCandidate { src: i, dst: i, ratio: 0.0, distance_3d: None }).collect()
}

/// Valid source tokens matched to uniformly drawn valid destinations.
pub fn random_matches(src: &TokenGrid, dst: &TokenGrid, rng: &mut Rng) -> Vec<MatchCandidate> {
    let targets: Vec<usize> = (0..dst.len()).filter(|&i| dst.valid[i]).collect();
    let sources: Vec<usize> = (0..src.len()).filter(|&i| src.valid[i]).collect();
    if targets.is_empty() {
        return Vec::new();
    }
    let mut pool = targets;
    sources
        .into_iter()
        .enumerate()
        .map(|(n, s)| {
            if n % pool.len() == 0 {
                pool.shuffle(rng);
            }
            MatchCandidate { src: s, dst: pool[n % pool.len()], ratio: 0.0, distance_3d: None }
        })
        .collect()
}

/// The `k` highest-ratio candidates, ties broken by source index.
pub fn select_top(mut candidates: Vec<MatchCandidate>, k: usize) -> Vec<MatchCandidate> {
    candidates.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then(a.src.cmp(&b.src)));
    candidates.truncate(k);
    candidates
}

/// Fills `distance_3d` and returns the fraction within `rho`. Matches touching
/// invalid geometry count as wrong.
pub fn score_matches(matches: &mut [MatchCandidate], a: &TokenGrid, b: &TokenGrid, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(ProbeError::InvalidRho(rho));
    }
    if matches.is_empty() {
        return Err(ProbeError::NoMatches);
    }
    let mut correct = 0usize;
    for m in matches.iter_mut() {
        if m.src >= a.len() {
            return Err(ProbeError::OutOfGrid { index: m.src, len: a.len() });
        }
        if m.dst >= b.len() {
            return Err(ProbeError::OutOfGrid { index: m.dst, len: b.len() });
        }
        let d = if a.valid[m.src] && b.valid[m.dst] {
            dist2(&a.points[m.src], &b.points[m.dst]).sqrt()
        } else {
            f64::INFINITY
        };
        m.distance_3d = Some(d);
        if d <= rho {
            correct += 1;
        }
    }
    Ok(correct as f64 / matches.len() as f64)
}

/// Bin index for a relative rotation, `None` past 120°.
pub fn theta_bin(theta_deg: f64) -> Option<usize> {
    if !(0.0..=MAX_THETA_DEG).contains(&theta_deg) {
        return None;
    }
    Some(((theta_deg / 30.0).floor() as usize).min(3))
}

/// How matches are produced for one pair.
#[derive(Clone, Debug)]
pub enum MatchSource {
    Descriptors { a: Array2<f64>, b: Array2<f64>, metric: Metric },
    Attention(Array2<f64>),
    Given(Vec<MatchCandidate>),
}

#[derive(Clone, Debug)]
pub struct ProbePair {
    pub id: String,
    pub theta_deg: f64,
    pub geom_a: TokenGrid,
    pub geom_b: TokenGrid,
    pub source: MatchSource,
}

/// Matches for a pair restricted to sources with valid geometry, before top-k.
pub fn pair_candidates(pair: &ProbePair) -> Result<Vec<MatchCandidate>> {
    let all = match &pair.source {
        MatchSource::Descriptors { a, b, metric } => {
            match_descriptors(a.view(), b.view(), *metric)?.iter().map(NeighbourPair::candidate).collect()
        }
        MatchSource::Attention(map) => match_from_attention(map.view()),
        MatchSource::Given(m) => m.clone(),
    };
    Ok(all.into_iter().filter(|m| m.src < pair.geom_a.len() && pair.geom_a.valid[m.src]).collect())
}

/// Precision of one pair after top-k filtering.
pub fn pair_precision(pair: &ProbePair, k: usize, rho: f64) -> Result<f64> {
    let mut top = select_top(pair_candidates(pair)?, k);
    score_matches(&mut top, &pair.geom_a, &pair.geom_b, rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub theta_deg: f64,
    pub bin: Option<String>,
    pub precision: Option<f64>,
    pub matches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub overall: f64,
    pub per_bin: BTreeMap<String, f64>,
    pub bin_counts: BTreeMap<String, usize>,
    pub rho: f64,
    pub top_k: usize,
    pub pairs_evaluated: usize,
    pub pairs_excluded: usize,
    pub pairs: Vec<PairResult>,
}

/// Sum in sorted order so the result does not depend on input order.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-pair precision, bucketed into 30° bins. Pairs past 120° or without any
/// scorable match are excluded.
pub fn evaluate_pairs(pairs: &[ProbePair], k: usize, rho: f64) -> Result<PrecisionReport> {
    if pairs.is_empty() {
        return Err(ProbeError::EmptyPairs);
    }
    if k == 0 {
        return Err(ProbeError::InvalidTopK);
    }
    if !(rho > 0.0) {
        return Err(ProbeError::InvalidRho(rho));
    }
    let eval = |p: &ProbePair| -> Result<PairResult> {
        let bin = theta_bin(p.theta_deg);
        let (precision, matches) = match bin {
            None => (None, 0),
            Some(_) => {
                let mut top = select_top(pair_candidates(p)?, k);
                match score_matches(&mut top, &p.geom_a, &p.geom_b, rho) {
                    Ok(v) => (Some(v), top.len()),
                    Err(ProbeError::NoMatches) => (None, 0),
                    Err(e) => return Err(e),
                }
            }
        };
        Ok(PairResult {
            id: p.id.clone(),
            theta_deg: p.theta_deg,
            bin: bin.map(|b| BIN_LABELS[b].to_string()),
            precision,
            matches,
        })
    };
    #[cfg(feature = "parallel")]
    let results: Vec<PairResult> = {
        use rayon::prelude::*;
        pairs.par_iter().map(eval).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<PairResult> = pairs.iter().map(eval).collect::<Result<_>>()?;

    let mut all = Vec::new();
    let mut by_bin: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &results {
        if let (Some(bin), Some(p)) = (&r.bin, r.precision) {
            all.push(p);
            by_bin.entry(bin.clone()).or_default().push(p);
        }
    }
    if all.is_empty() {
        return Err(ProbeError::NoMatches);
    }
    let bin_counts = by_bin.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let per_bin = by_bin.into_iter().map(|(k, mut v)| (k, order_free_mean(&mut v))).collect();
    Ok(PrecisionReport {
        overall: order_free_mean(&mut all),
        per_bin,
        bin_counts,
        rho,
        top_k: k,
        pairs_evaluated: all.len(),
        pairs_excluded: results.len() - all.len(),
        pairs: results,
    })
}

impl PrecisionReport {
    /// Per-bin table in fixed bin order: `bin,pairs,precision`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,pairs,precision\n");
        for label in BIN_LABELS {
            if let Some(p) = self.per_bin.get(label) {
                out.push_str(&format!("{label},{},{p:.6}\n", self.bin_counts[label]));
            }
        }
        out.push_str(&format!("overall,{},{:.6}\n", self.pairs_evaluated, self.overall));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line_grid(n: usize, spacing: f64) -> TokenGrid {
        TokenGrid {
            h: 1,
            w: n,
            points: (0..n).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect(),
            valid: vec![true; n],
        }
    }

    #[test]
    fn ratio_examples() {
        assert!((ratio_score(0.1, 0.5) - 0.8).abs() < 1e-15);
        assert_eq!(ratio_score(0.3, 0.3), 0.0);
        assert_eq!(ratio_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn attention_onehot_and_uniform() {
        let onehot = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let m = match_from_attention(onehot.view());
        assert_eq!((m[0].dst, m[0].ratio), (1, 1.0));
        assert_eq!((m[1].dst, m[1].ratio), (0, 1.0));
        let uniform = Array2::from_elem((3, 4), 0.25);
        assert!(match_from_attention(uniform.view()).iter().all(|c| c.ratio == 0.0 && c.dst == 0));
    }

    #[test]
    fn select_top_orders_and_truncates() {
        let c = |src, ratio| MatchCandidate { src, dst: 0, ratio, distance_3d: None };
        let kept = select_top(vec![c(0, 0.9), c(1, 0.1), c(2, 0.5)], 2);
        assert_eq!(kept.iter().map(|m| m.src).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(select_top(vec![c(3, 0.2), c(1, 0.2)], 1)[0].src, 1);
        assert_eq!(select_top((0..5).map(|i| c(i, 0.0)).collect(), 1000).len(), 5);
    }

    #[test]
    fn cosine_descriptors() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let b = array![[0.0, 1.0], [1.0, 0.1], [1.0, 1.0]];
        let m = match_descriptors(a.view(), b.view(), Metric::Cosine).unwrap();
        assert_eq!((m[0].nn1, m[0].nn2), (1, 2));
        assert_eq!((m[1].nn1, m[1].nn2), (0, 2));
        assert!(match_descriptors(a.view(), b.slice(ndarray::s![..1, ..]), Metric::Cosine).is_err());
    }

    #[test]
    fn oracle_matches_score_one() {
        let g = line_grid(5, 0.1);
        let mut m = self_matches(5);
        assert_eq!(score_matches(&mut m, &g, &g, 0.02).unwrap(), 1.0);
        assert_eq!(m[3].distance_3d, Some(0.0));
        let mut bad = vec![MatchCandidate { src: 9, dst: 0, ratio: 0.0, distance_3d: None }];
        assert!(matches!(score_matches(&mut bad, &g, &g, 0.02), Err(ProbeError::OutOfGrid { .. })));
    }

    #[test]
    fn bins_are_left_closed() {
        assert_eq!(theta_bin(0.0), Some(0));
        assert_eq!(theta_bin(30.0), Some(1));
        assert_eq!(theta_bin(89.999), Some(2));
        assert_eq!(theta_bin(120.0), Some(3));
        assert_eq!(theta_bin(120.01), None);
    }

    #[test]
    fn single_pair_report() {
        let g = line_grid(4, 0.1);
        let pair = ProbePair {
            id: "p".into(),
            theta_deg: 15.0,
            geom_a: g.clone(),
            geom_b: g,
            source: MatchSource::Given(self_matches(4)),
        };
        let r = evaluate_pairs(&[pair], DEFAULT_TOP_K, DEFAULT_RHO).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.per_bin.len(), 1);
        assert_eq!(r.per_bin["0-30"], 1.0);
        assert!(evaluate_pairs(&[], 10, 0.02).is_err());
    }
}
