//! Browser bindings: render a synthetic pair, show its token correspondences,
//! and measure probe precision against the 3D tolerance.

use cameo_core::correspondence::{build_correspondence, token_grid, TokenGrid};
use cameo_core::io::seeded_rng;
use cameo_core::probe::{evaluate_pairs, random_matches, MatchSource, Metric, ProbePair};
use cameo_core::scene::{generate_scene_set, relative_rotation_deg, render_pointmap, Pointmap, Scene, SceneSetSpec};
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_RES: usize = 512;

fn scene(seed: u64, res: usize, spread_deg: f64) -> Result<Scene, String> {
    if res == 0 || res > MAX_RES {
        return Err(format!("resolution must lie in 1..={MAX_RES}"));
    }
    let spec = SceneSetSpec { scenes: 1, image_width: res, image_height: res, spread_deg, ..Default::default() };
    let mut set = generate_scene_set(&spec, &mut seeded_rng(seed)).map_err(|e| e.to_string())?;
    Ok(set.remove(0))
}

/// Both views as RGBA, first view then second. Colour encodes the world
/// position of the visible surface, so corresponding points share a colour.
pub fn views_rgba(seed: u64, res: usize, spread_deg: f64) -> Result<Vec<u8>, String> {
    let s = scene(seed, res, spread_deg)?;
    let pms: Vec<Pointmap> = (0..2).map(|v| render_pointmap(&s, v, (res, res))).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for pm in &pms {
        for (p, _) in pm.points.iter().zip(&pm.valid).filter(|(_, &v)| v) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let mut out = Vec::with_capacity(2 * res * res * 4);
    for pm in &pms {
        for (p, &valid) in pm.points.iter().zip(&pm.valid) {
            if valid {
                for k in 0..3 {
                    let t = if hi[k] > lo[k] { (p[k] - lo[k]) / (hi[k] - lo[k]) } else { 0.5 };
                    out.push((40.0 + 215.0 * t).round() as u8);
                }
                out.push(255);
            } else {
                out.extend_from_slice(&[18, 18, 24, 255]);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct CorrView {
    pub theta_deg: f64,
    pub tokens: usize,
    pub tau: f64,
    /// Per source token of view 0: matched token of view 1.
    pub matches: Vec<usize>,
    pub mask: Vec<u8>,
    pub valid: Vec<bool>,
    pub visible: usize,
}

pub fn correspondence_view(seed: u64, res: usize, spread_deg: f64, tokens: usize, tau: f64) -> Result<CorrView, String> {
    if tokens == 0 || tokens > res {
        return Err("token grid must lie in 1..=resolution".into());
    }
    let s = scene(seed, res, spread_deg)?;
    let g: Vec<TokenGrid> = (0..2).map(|v| token_grid(&render_pointmap(&s, v, (res, res)), tokens, tokens)).collect();
    let tau = if tau < 0.0 { f64::INFINITY } else { tau };
    let c = build_correspondence(&g[0], &g[1], (0, 1), tau).map_err(|e| e.to_string())?;
    Ok(CorrView {
        theta_deg: relative_rotation_deg(&s.cameras[0], &s.cameras[1]),
        tokens,
        tau,
        visible: c.visible_count(),
        matches: c.matches,
        mask: c.mask,
        valid: c.valid,
    })
}

#[derive(Serialize)]
pub struct ProbeCurve {
    pub rho: Vec<f64>,
    /// Ground-truth coordinates plus Gaussian noise of the given scale.
    pub noisy: Vec<f64>,
    pub random: Vec<f64>,
    pub noise_m: f64,
    pub pairs: usize,
}

pub fn probe_curve(seed: u64, scenes: usize, res: usize, noise_m: f64) -> Result<ProbeCurve, String> {
    if scenes == 0 || scenes > 50 {
        return Err("scenes must lie in 1..=50".into());
    }
    let noise = Normal::new(0.0, noise_m.max(0.0)).map_err(|e| e.to_string())?;
    let spec = SceneSetSpec { scenes, image_width: res, image_height: res, ..Default::default() };
    let set = generate_scene_set(&spec, &mut seeded_rng(seed)).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9);
    let (mut noisy, mut random) = (Vec::new(), Vec::new());
    for s in &set {
        let g: Vec<TokenGrid> = (0..2).map(|v| TokenGrid::from_pointmap(&render_pointmap(s, v, (res, res)))).collect();
        let theta = relative_rotation_deg(&s.cameras[0], &s.cameras[1]);
        let mut desc = |t: &TokenGrid| {
            Array2::from_shape_fn((t.len(), 3), |(r, c)| if t.valid[r] { t.points[r][c] + noise.sample(&mut rng) } else { f64::NAN })
        };
        let (a, b) = (desc(&g[0]), desc(&g[1]));
        random.push(ProbePair {
            id: s.name.clone(),
            theta_deg: theta,
            geom_a: g[0].clone(),
            geom_b: g[1].clone(),
            source: MatchSource::Given(random_matches(&g[0], &g[1], &mut rng)),
        });
        noisy.push(ProbePair { id: s.name.clone(), theta_deg: theta, geom_a: g[0].clone(), geom_b: g[1].clone(), source: MatchSource::Descriptors { a, b, metric: Metric::L2 } });
    }
    let rho: Vec<f64> = (1..=12).map(|k| 0.005 * k as f64).collect();
    let curve = |pairs: &[ProbePair]| -> Result<Vec<f64>, String> {
        rho.iter().map(|&r| evaluate_pairs(pairs, 1000, r).map(|p| p.overall).map_err(|e| e.to_string())).collect()
    };
    Ok(ProbeCurve { noisy: curve(&noisy)?, random: curve(&random)?, noise_m, pairs: noisy.len(), rho })
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// RGBA bytes of both views, `2 × res × res × 4`.
#[wasm_bindgen(js_name = renderViews)]
pub fn render_views(seed: u32, res: u32, spread_deg: f64) -> Result<Vec<u8>, JsError> {
    views_rgba(seed as u64, res as usize, spread_deg).map_err(|e| JsError::new(&e))
}

/// Token correspondences from view 0 to view 1 as JSON. A negative `tau`
/// disables the cycle check.
#[wasm_bindgen]
pub fn correspondences(seed: u32, res: u32, spread_deg: f64, tokens: u32, tau: f64) -> Result<String, JsError> {
    js(correspondence_view(seed as u64, res as usize, spread_deg, tokens as usize, tau))
}

/// Precision against ρ for noisy ground-truth descriptors and random matches, as JSON.
#[wasm_bindgen(js_name = probeCurve)]
pub fn probe_curve_js(seed: u32, scenes: u32, res: u32, noise_m: f64) -> Result<String, JsError> {
    js(probe_curve(seed as u64, scenes as usize, res as usize, noise_m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_have_two_images() {
        let px = views_rgba(3, 32, 90.0).unwrap();
        assert_eq!(px.len(), 2 * 32 * 32 * 4);
        assert!(px.chunks(4).any(|c| c != [18, 18, 24, 255]));
        assert!(views_rgba(3, 0, 90.0).is_err());
    }

    #[test]
    fn correspondences_are_consistent() {
        let c = correspondence_view(1, 64, 60.0, 16, 1.5).unwrap();
        assert_eq!(c.matches.len(), 256);
        assert_eq!(c.visible, c.mask.iter().filter(|&&m| m == 1).count());
        assert!(c.mask.iter().zip(&c.valid).all(|(&m, &v)| m == 0 || v));
        let loose = correspondence_view(1, 64, 60.0, 16, -1.0).unwrap();
        assert!(loose.visible >= c.visible);
        assert!(loose.tau.is_infinite());
    }

    #[test]
    fn noise_lowers_precision() {
        let clean = probe_curve(0, 2, 96, 0.0).unwrap();
        let noisy = probe_curve(0, 2, 96, 0.05).unwrap();
        assert_eq!(clean.rho.len(), clean.noisy.len());
        assert!(clean.noisy.windows(2).all(|w| w[1] >= w[0]));
        assert!(clean.noisy[3] > noisy.noisy[3]);
        assert!(clean.random.iter().zip(&clean.noisy).all(|(r, n)| r <= n));
    }
}
