//! Binary tensor container, seeded randomness and grid resampling.
//!
//! The on-disk layout of a `.camt` file is fixed and little-endian:
//!
//! | bytes          | field                                   |
//! |----------------|-----------------------------------------|
//! | 4              | magic `CAMT`                            |
//! | 4              | version (`u32`)                         |
//! | 1              | dtype code (0 = f32, 1 = f64, 2 = u8)   |
//! | 1              | rank (`u8`)                             |
//! | 8 × rank       | dims (`u64` each)                       |
//! | rest           | row-major payload                       |

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CAMT";
pub const VERSION: u32 = 1;

/// The one random generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Seeds the repo-wide generator.
pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `seed` for a named sub-task, so
/// adding draws in one stage never shifts the draws of another.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"CAMT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("unknown dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid shape {0:?}: rank and every dim must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("payload holds {found} values but shape needs {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("expected dtype {expected}, found {found}")]
    WrongDtype {
        expected: &'static str,
        found: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::U8(_) => "u8",
        }
    }
}

fn dtype_size(code: u8) -> Option<usize> {
    match code {
        0 => Some(4),
        1 => Some(8),
        2 => Some(1),
        _ => None,
    }
}

/// Dense row-major tensor as stored in a TensorFile.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > u8::MAX as usize || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn from_f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn from_u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Values widened to f64 regardless of the stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], TensorError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(TensorError::WrongDtype {
                expected: "u8",
                found: other.name(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let elem = dtype_size(self.data.code()).expect("known dtype");
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + elem * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 4 {
            return Err(TensorError::TruncatedHeader);
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        if bytes.len() < 10 {
            return Err(TensorError::TruncatedHeader);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::VersionMismatch { found: version });
        }
        let code = bytes[8];
        let elem = dtype_size(code).ok_or(TensorError::UnsupportedDtype(code))?;
        let rank = bytes[9] as usize;
        let header_len = 10 + 8 * rank;
        if bytes.len() < header_len {
            return Err(TensorError::TruncatedHeader);
        }
        let dims: Vec<usize> = bytes[10..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if rank == 0 || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(dims));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::InvalidShape(dims.clone()))?;
        let expected = count
            .checked_mul(elem)
            .ok_or_else(|| TensorError::InvalidShape(dims.clone()))?;
        let payload = &bytes[header_len..];
        if payload.len() < expected {
            return Err(TensorError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(TensorError::TrailingBytes(payload.len() - expected));
        }
        let data = match code {
            0 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorError> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    Tensor::from_bytes(&fs::read(path)?)
}

/// Dense `h × w × c` grid of f64 values, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "grid data length");
        Self { h, w, c, data }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self::new(h, w, c, vec![value; h * w * c])
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.w + col) * self.c;
        &self.data[o..o + self.c]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.w + col) * self.c;
        &mut self.data[o..o + self.c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.h, self.w, self.c], self.data.clone()).expect("grid shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        match t.dims() {
            &[h, w, c] => Ok(Self::new(h, w, c, t.to_f64_vec())),
            &[h, w] => Ok(Self::new(h, w, 1, t.to_f64_vec())),
            other => Err(TensorError::InvalidShape(other.to_vec())),
        }
    }
}

/// Sampling position for one output coordinate: the lower source index, the
/// upper one, and the fractional offset between them (0 means the lower tap
/// alone, so a NaN neighbour never leaks in).
pub(crate) fn linear_taps(out_index: usize, out_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / out_len as f64;
    let x = ((out_index as f64 + 0.5) * scale - 0.5).max(0.0);
    let x0 = (x.floor() as usize).min(src_len - 1);
    let x1 = (x0 + 1).min(src_len - 1);
    let frac = if x0 == x1 { 0.0 } else { x - x0 as f64 };
    (x0, x1, frac)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear resampling with pixel centres at `(k + 0.5) / n` (align-corners false).
/// Coordinates outside the source are clamped to the border.
pub fn resize_bilinear(src: &Grid, out_h: usize, out_w: usize) -> Grid {
    assert!(src.h >= 1 && src.w >= 1, "source grid must be non-empty");
    assert!(out_h >= 1 && out_w >= 1, "output size must be at least 1x1");
    let c = src.c;
    let mut out = Grid::filled(out_h, out_w, c, 0.0);
    let cols: Vec<_> = (0..out_w).map(|j| linear_taps(j, out_w, src.w)).collect();
    for i in 0..out_h {
        let (r0, r1, fy) = linear_taps(i, out_h, src.h);
        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
            let (a0, a1, b0, b1) = (src.at(r0, c0), src.at(r0, c1), src.at(r1, c0), src.at(r1, c1));
            let dst = out.at_mut(i, j);
            for k in 0..c {
                let top = lerp(a0[k], a1[k], fx);
                let bottom = if fy == 0.0 { top } else { lerp(b0[k], b1[k], fx) };
                dst[k] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_payload_encoding() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], b"CAMT");
        assert_eq!(b.len(), 10 + 16 + 16);
        assert_eq!(&b[26..30], &[0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(&b[30..34], &[0x00, 0x00, 0x00, 0x40]);
    }

    #[test]
    fn zero_encoding() {
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[b.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.camt");
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensor(&p, &t).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.dims(), &[2, 2]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = Tensor::from_u8(vec![1], vec![7]).unwrap().to_bytes();
        b[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&b), Err(TensorError::BadMagic(_))));
    }

    #[test]
    fn rejects_version_mismatch() {
        let mut b = Tensor::from_u8(vec![1], vec![7]).unwrap().to_bytes();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Tensor::from_bytes(&b),
            Err(TensorError::VersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let b = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().to_bytes();
        let cut = &b[..b.len() - 8];
        assert!(matches!(
            Tensor::from_bytes(cut),
            Err(TensorError::TruncatedPayload { expected: 16, found: 8 })
        ));
    }

    #[test]
    fn rejects_trailing_bytes_and_bad_dtype() {
        let mut b = Tensor::from_u8(vec![2], vec![1, 2]).unwrap().to_bytes();
        b.push(0);
        assert!(matches!(Tensor::from_bytes(&b), Err(TensorError::TrailingBytes(1))));
        let mut b = Tensor::from_u8(vec![2], vec![1, 2]).unwrap().to_bytes();
        b[8] = 9;
        assert!(matches!(Tensor::from_bytes(&b), Err(TensorError::UnsupportedDtype(9))));
    }

    #[test]
    fn rejects_empty_shapes() {
        assert!(Tensor::from_f32(vec![], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f32(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn resize_constant() {
        let g = Grid::filled(5, 7, 2, 7.0);
        let r = resize_bilinear(&g, 3, 11);
        assert!(r.data.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn resize_symmetric_corners() {
        let g = Grid::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]);
        let r = resize_bilinear(&g, 1, 1);
        assert_eq!(r.data, vec![0.5]);
    }

    /// Closed-form bilinear sample of a single-channel grid at output (i, j).
    fn reference_sample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, i: usize, j: usize) -> f64 {
        let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let v = |y: usize, x: usize| src[y * w + x];
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    }

    #[test]
    fn resize_ramp_matches_reference() {
        let src: Vec<f64> = (0..16).map(|k| (k / 4) as f64 * 10.0 + (k % 4) as f64).collect();
        let g = Grid::new(4, 4, 1, src.clone());
        let r = resize_bilinear(&g, 2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let want = reference_sample(&src, 4, 4, 2, 2, i, j);
                assert!((r.at(i, j)[0] - want).abs() < 1e-12);
            }
        }
        // frozen from the reference: centres land halfway between pixels 0/1 and 2/3
        assert_eq!(r.data, vec![5.5, 7.5, 25.5, 27.5]);
    }

    #[test]
    fn resize_identity_is_exact() {
        let mut rng = seeded_rng(3);
        use rand::Rng as _;
        let data: Vec<f64> = (0..5 * 6 * 3).map(|_| rng.random::<f64>()).collect();
        let g = Grid::new(5, 6, 3, data);
        assert_eq!(resize_bilinear(&g, 5, 6), g);
    }

    #[test]
    fn same_seed_same_stream() {
        use rand::Rng as _;
        let a: Vec<u64> = (0..8).map({
            let mut r = seeded_rng(42);
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = seeded_rng(42);
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
        let mut s0 = substream(42, 0);
        let mut s1 = substream(42, 1);
        assert_ne!(s0.random::<u64>(), s1.random::<u64>());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tensor_roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
                use rand::Rng as _;
                let n: usize = dims.iter().product();
                let mut rng = seeded_rng(seed);
                let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 1e6 - 5e5).collect();
                let t = Tensor::from_f64(dims, vals).unwrap();
                let bytes = t.to_bytes();
                let back = Tensor::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&back, &t);
                prop_assert_eq!(back.to_bytes(), bytes);
            }

            #[test]
            fn resize_within_bounds(h in 1usize..9, w in 1usize..9, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()) {
                use rand::Rng as _;
                let mut rng = seeded_rng(seed);
                let data: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let r = resize_bilinear(&Grid::new(h, w, 1, data), oh, ow);
                for v in r.data {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
