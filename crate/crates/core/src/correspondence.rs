//! Token-level geometric correspondence from pointmaps.
//!
//! For an ordered view pair `(i, j)` every valid query token of view `i` is
//! matched to its nearest token of view `j` in 3D. Matching back from that
//! token to view `i` gives a cycle index; the token is marked visible when the
//! cycle lands within `tau` token units of where it started.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, resize_bilinear, Tensor, TensorError};
use crate::scene::Pointmap;

/// Default cycle-consistency threshold in token units.
pub const DEFAULT_TAU: f64 = 1.5;

/// Above this many destination points the grid accelerator is used.
const ACCEL_THRESHOLD: usize = 2048;

#[derive(Debug, Error)]
pub enum CorrError {
    #[error("no valid destination tokens")]
    EmptyDestination,
    #[error("query token {0} is invalid or out of range")]
    InvalidQuery(usize),
    #[error("token grids disagree in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
    #[error("tau must be positive, got {0}")]
    InvalidTau(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// World coordinates sampled at token centres.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub points: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(row, col)` token coordinate of a flat index.
    #[inline]
    pub fn coord(&self, index: usize) -> (f64, f64) {
        ((index / self.w) as f64, (index % self.w) as f64)
    }

    pub fn from_pointmap(pm: &Pointmap) -> Self {
        Self {
            h: pm.h,
            w: pm.w,
            points: pm.points.clone(),
            valid: pm.valid.clone(),
        }
    }
}

/// Downsamples a pointmap channel-wise; a token is valid only when every
/// pixel contributing to its interpolation is valid.
pub fn token_grid(pm: &Pointmap, h: usize, w: usize) -> TokenGrid {
    assert!(h >= 1 && w >= 1 && h <= pm.h && w <= pm.w, "token grid must not exceed pointmap size");
    let resized = resize_bilinear(&pm.to_grid(), h, w);
    let mut points = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for c in resized.data.chunks_exact(3) {
        let ok = c.iter().all(|v| v.is_finite());
        valid.push(ok);
        points.push(if ok { [c[0], c[1], c[2]] } else { [f64::NAN; 3] });
    }
    TokenGrid { h, w, points, valid }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// `(squared distance, index)` ordering with ties going to the smaller index.
#[inline]
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn insert_best(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let pos = best.iter().position(|&b| better(cand, b)).unwrap_or(best.len());
    if pos < k {
        best.insert(pos, cand);
        best.truncate(k);
    }
}

/// Exhaustive k-nearest search over the valid points of `dst`.
pub fn brute_force_knn(points: &[[f64; 3]], valid: &[bool], q: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
    let mut best = Vec::with_capacity(k + 1);
    for (idx, p) in points.iter().enumerate() {
        if valid[idx] {
            insert_best(&mut best, k, (dist2(q, p), idx));
        }
    }
    best
}

/// Uniform voxel-bucket index answering exact k-nearest queries; results are
/// identical to [`brute_force_knn`], including tie-breaking.
#[derive(Debug, Clone)]
pub struct PointIndex<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
    count: usize,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [[f64; 3]], valid: &[bool]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut count = 0;
        for (p, _) in points.iter().zip(valid).filter(|(_, &v)| v) {
            count += 1;
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if count == 0 {
            return Self {
                points,
                origin: [0.0; 3],
                cell: 1.0,
                dims: [1, 1, 1],
                buckets: vec![Vec::new()],
                count,
            };
        }
        let ext = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-9);
        let per_axis = ((2 * count) as f64).cbrt().ceil().max(1.0);
        let cell = ext / per_axis;
        let dims: [usize; 3] = std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).max(1));
        let mut index = Self {
            points,
            origin: lo,
            cell,
            dims,
            buckets: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            count,
        };
        for (i, p) in points.iter().enumerate() {
            if valid[i] {
                let c = index.cell_of(p);
                let b = index.flat(c);
                index.buckets[b].push(i as u32);
            }
        }
        index
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        std::array::from_fn(|k| {
            let f = ((p[k] - self.origin[k]) / self.cell).floor();
            if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[k] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn knn(&self, q: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if self.count == 0 {
            return best;
        }
        let c = self.cell_of(q);
        let max_r = (0..3).map(|a| c[a].max(self.dims[a] - 1 - c[a])).max().unwrap();
        for r in 0..=max_r {
            let lo: [usize; 3] = std::array::from_fn(|a| c[a].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|a| (c[a] + r).min(self.dims[a] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let shell = [x.abs_diff(c[0]), y.abs_diff(c[1]), z.abs_diff(c[2])];
                        if shell.into_iter().max().unwrap() != r {
                            continue;
                        }
                        for &i in &self.buckets[self.flat([x, y, z])] {
                            let i = i as usize;
                            insert_best(&mut best, k, (dist2(q, &self.points[i]), i));
                        }
                    }
                }
            }
            // every unvisited cell lies beyond one of the open faces of the visited box
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    let face = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min((q[a] - face).max(0.0));
                }
                if hi[a] + 1 < self.dims[a] {
                    let face = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min((face - q[a]).max(0.0));
                }
            }
            if bound.is_infinite() {
                break;
            }
            if best.len() == k && bound * bound > best[k - 1].0 * (1.0 + 1e-12) {
                break;
            }
        }
        best
    }
}

/// Nearest neighbour search over the valid tokens of one grid, switching to
/// the bucket index for large grids.
pub(crate) enum Nearest<'a> {
    Brute(&'a [[f64; 3]], &'a [bool]),
    Indexed(PointIndex<'a>),
}

impl<'a> Nearest<'a> {
    pub(crate) fn new(points: &'a [[f64; 3]], valid: &'a [bool]) -> Self {
        if points.len() >= ACCEL_THRESHOLD {
            Nearest::Indexed(PointIndex::new(points, valid))
        } else {
            Nearest::Brute(points, valid)
        }
    }

    pub(crate) fn knn(&self, q: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
        match self {
            Nearest::Brute(p, v) => brute_force_knn(p, v, q, k),
            Nearest::Indexed(ix) => ix.knn(q, k),
        }
    }

    fn nearest(&self, q: &[f64; 3]) -> Option<usize> {
        self.knn(q, 1).first().map(|&(_, i)| i)
    }
}

/// Nearest valid token of `dst` to token `query` of `src`: `(index, distance)`.
pub fn nearest_in_3d(src: &TokenGrid, dst: &TokenGrid, query: usize) -> Result<(usize, f64), CorrError> {
    if query >= src.len() || !src.valid[query] {
        return Err(CorrError::InvalidQuery(query));
    }
    brute_force_knn(&dst.points, &dst.valid, &src.points[query], 1)
        .first()
        .map(|&(d2, i)| (i, d2.sqrt()))
        .ok_or(CorrError::EmptyDestination)
}

/// Correspondence targets for one ordered view pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorrespondence {
    pub pair: (usize, usize),
    pub h: usize,
    pub w: usize,
    /// Target token for every query token; `0` for invalid queries.
    pub matches: Vec<usize>,
    /// Visibility mask in `{0, 1}`.
    pub mask: Vec<u8>,
    /// Whether the query token has geometry; rows of `P` are one-hot exactly
    /// for these.
    pub valid: Vec<bool>,
    pub tau: f64,
}

impl TokenCorrespondence {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Dense one-hot map `P`, row-major `(h·w) × (h·w)`. Rows of tokens
    /// without geometry are left all-zero.
    pub fn onehot(&self) -> Vec<u8> {
        let n = self.len();
        let mut p = vec![0u8; n * n];
        for (row, (&ok, &col)) in self.valid.iter().zip(&self.matches).enumerate() {
            if ok {
                p[row * n + col] = 1;
            }
        }
        p
    }

    pub fn onehot_tensor(&self) -> Tensor {
        let n = self.len();
        Tensor::from_u8(vec![n, n], self.onehot()).expect("onehot shape")
    }

    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.len()], self.mask.clone()).expect("mask shape")
    }
}

/// Builds `(match, mask)` for `i → j` with cycle threshold `tau` (token units,
/// `f64::INFINITY` disables the check).
pub fn build_correspondence(
    grid_i: &TokenGrid,
    grid_j: &TokenGrid,
    pair: (usize, usize),
    tau: f64,
) -> Result<TokenCorrespondence, CorrError> {
    if (grid_i.h, grid_i.w) != (grid_j.h, grid_j.w) {
        return Err(CorrError::ShapeMismatch((grid_i.h, grid_i.w), (grid_j.h, grid_j.w)));
    }
    if !(tau >= 0.0) {
        return Err(CorrError::InvalidTau(tau));
    }
    let n = grid_i.len();
    let mut matches = vec![0usize; n];
    let mut mask = vec![0u8; n];
    if grid_i.valid_count() == 0 || grid_j.valid_count() == 0 {
        return Ok(TokenCorrespondence {
            pair,
            h: grid_i.h,
            w: grid_i.w,
            matches,
            mask,
            valid: vec![false; n],
            tau,
        });
    }
    let to_j = Nearest::new(&grid_j.points, &grid_j.valid);
    let to_i = Nearest::new(&grid_i.points, &grid_i.valid);
    for x in 0..n {
        if !grid_i.valid[x] {
            continue;
        }
        let xj = to_j.nearest(&grid_i.points[x]).expect("non-empty destination");
        let back = to_i.nearest(&grid_j.points[xj]).expect("non-empty source");
        matches[x] = xj;
        let (r0, c0) = grid_i.coord(x);
        let (r1, c1) = grid_i.coord(back);
        let cycle = ((r0 - r1).powi(2) + (c0 - c1).powi(2)).sqrt();
        if cycle <= tau {
            mask[x] = 1;
        }
    }
    Ok(TokenCorrespondence {
        pair,
        h: grid_i.h,
        w: grid_i.w,
        matches,
        mask,
        valid: grid_i.valid.clone(),
        tau,
    })
}

/// Exact mutual nearest neighbours between the valid pixels of two pointmaps,
/// as `(pixel_i, pixel_j)` flat indices in ascending `pixel_i` order.
pub fn mutual_nn_pixels(pm_i: &Pointmap, pm_j: &Pointmap) -> Vec<(usize, usize)> {
    let to_j = Nearest::new(&pm_j.points, &pm_j.valid);
    let to_i = Nearest::new(&pm_i.points, &pm_i.valid);
    let mut out = Vec::new();
    for (y, p) in pm_i.points.iter().enumerate() {
        if !pm_i.valid[y] {
            continue;
        }
        let Some(yj) = to_j.nearest(p) else { return out };
        if to_i.nearest(&pm_j.points[yj]) == Some(y) {
            out.push((y, yj));
        }
    }
    out
}

/// Correspondences for all ordered pairs `i ≠ j`, in `(0,1), (0,2), …, (1,0), …` order.
pub fn correspondence_set(grids: &[TokenGrid], tau: f64) -> Result<Vec<TokenCorrespondence>, CorrError> {
    if grids.len() < 2 {
        return Err(CorrError::TooFewViews(grids.len()));
    }
    let pairs: Vec<(usize, usize)> = (0..grids.len())
        .flat_map(|i| (0..grids.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let build = |&(i, j): &(usize, usize)| build_correspondence(&grids[i], &grids[j], (i, j), tau);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pairs.par_iter().map(build).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairs.iter().map(build).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrIndexEntry {
    pub i: usize,
    pub j: usize,
    pub onehot: String,
    pub mask: String,
    pub visible: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrIndex {
    pub h: usize,
    pub w: usize,
    pub tau: f64,
    pub pairs: Vec<CorrIndexEntry>,
}

/// Writes `P_<i>_<j>.camt`, `M_<i>_<j>.camt` and an `index.json` into `dir`.
pub fn write_correspondences(dir: &Path, set: &[TokenCorrespondence]) -> Result<CorrIndex, CorrError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for c in set {
        let (i, j) = c.pair;
        let p_name = format!("P_{i}_{j}.camt");
        let m_name = format!("M_{i}_{j}.camt");
        io::save_tensor(dir.join(&p_name), &c.onehot_tensor())?;
        io::save_tensor(dir.join(&m_name), &c.mask_tensor())?;
        entries.push(CorrIndexEntry {
            i,
            j,
            onehot: p_name,
            mask: m_name,
            visible: c.visible_count(),
        });
    }
    let first = set.first();
    let index = CorrIndex {
        h: first.map_or(0, |c| c.h),
        w: first.map_or(0, |c| c.w),
        tau: first.map_or(DEFAULT_TAU, |c| c.tau),
        pairs: entries,
    };
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(dir.join("index.json"), json)?;
    Ok(index)
}
