use cameo_core::correspondence::*;
use cameo_core::io::seeded_rng;
use cameo_core::scene::*;
use nalgebra::{Point3, Vector3};
use proptest::prelude::*;

fn pair_grids(seed: u64, res: usize, tokens: usize) -> (Scene, Vec<TokenGrid>) {
    let spec = SceneSetSpec { scenes: 1, image_width: res, image_height: res, ..Default::default() };
    let scene = generate_scene_set(&spec, &mut seeded_rng(seed)).unwrap().remove(0);
    let grids = (0..2).map(|v| token_grid(&render_pointmap(&scene, v, (res, res)), tokens, tokens)).collect();
    (scene, grids)
}

/// Cycle mask recomputed with exhaustive searches.
fn brute_mask(gi: &TokenGrid, gj: &TokenGrid, tau: f64) -> (Vec<usize>, Vec<u8>) {
    let nn = |src: &[f64; 3], dst: &TokenGrid| -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..dst.len() {
            if dst.valid[k] {
                let p = dst.points[k];
                let d = (0..3).map(|a| (p[a] - src[a]).powi(2)).sum::<f64>();
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    };
    let mut matches = vec![0; gi.len()];
    let mut mask = vec![0; gi.len()];
    for x in 0..gi.len() {
        if !gi.valid[x] {
            continue;
        }
        let m = nn(&gi.points[x], gj);
        let back = nn(&gj.points[m], gi);
        let (r0, c0) = ((x / gi.w) as f64, (x % gi.w) as f64);
        let (r1, c1) = ((back / gi.w) as f64, (back % gi.w) as f64);
        matches[x] = m;
        mask[x] = u8::from(((r0 - r1).powi(2) + (c0 - c1).powi(2)).sqrt() <= tau);
    }
    (matches, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mask_is_monotone_in_tau(seed in 0u64..10_000, t1 in 0.0f64..6.0, dt in 0.0f64..6.0) {
        let (_, g) = pair_grids(seed, 64, 16);
        for (i, j) in [(0, 1), (1, 0)] {
            let taus = [t1, t1 + dt, 1.5, 3.0, f64::INFINITY];
            let masks: Vec<Vec<u8>> = taus.iter().map(|&t| build_correspondence(&g[i], &g[j], (i, j), t).unwrap().mask).collect();
            for (a, b) in [(0, 1), (2, 3), (3, 4)] {
                prop_assert!(masks[a].iter().zip(&masks[b]).all(|(x, y)| x <= y));
            }
        }
    }

    #[test]
    fn masked_rows_are_valid_one_hot(seed in 0u64..10_000) {
        let (_, g) = pair_grids(seed, 48, 12);
        let c = build_correspondence(&g[0], &g[1], (0, 1), 1.5).unwrap();
        let n = c.len();
        let onehot = c.onehot();
        for x in 0..n {
            let row = &onehot[x * n..(x + 1) * n];
            let sum: u32 = row.iter().map(|&v| v as u32).sum();
            if g[0].valid[x] {
                prop_assert_eq!(sum, 1);
                prop_assert_eq!(row[c.matches[x]], 1);
            } else {
                prop_assert_eq!(c.mask[x], 0);
            }
            if c.mask[x] == 1 {
                prop_assert!(g[0].valid[x] && g[1].valid[c.matches[x]]);
            }
        }
    }
}

#[test]
fn matches_and_masks_equal_exhaustive_recomputation() {
    for seed in 0..4 {
        let (_, g) = pair_grids(seed, 128, 32);
        for tau in [0.0, 1.5, 3.0] {
            let c = build_correspondence(&g[0], &g[1], (0, 1), tau).unwrap();
            let (m, mask) = brute_mask(&g[0], &g[1], tau);
            assert_eq!(c.mask, mask);
            for x in 0..c.len() {
                if g[0].valid[x] {
                    assert_eq!(c.matches[x], m[x]);
                }
            }
        }
    }
}

#[test]
fn strict_cycle_at_pixel_resolution_is_mutual_nn() {
    for seed in 0..3 {
        let spec = SceneSetSpec { scenes: 1, image_width: 28, image_height: 28, ..Default::default() };
        let scene = generate_scene_set(&spec, &mut seeded_rng(seed)).unwrap().remove(0);
        let pms: Vec<Pointmap> = (0..2).map(|v| render_pointmap(&scene, v, (28, 28))).collect();
        let gi = TokenGrid::from_pointmap(&pms[0]);
        let gj = TokenGrid::from_pointmap(&pms[1]);
        let c = build_correspondence(&gi, &gj, (0, 1), 0.0).unwrap();
        let from_mask: Vec<(usize, usize)> = (0..c.len()).filter(|&x| c.mask[x] == 1).map(|x| (x, c.matches[x])).collect();
        assert!(!from_mask.is_empty());
        assert_eq!(from_mask, mutual_nn_pixels(&pms[0], &pms[1]));
    }
}

#[test]
fn reverse_pair_closes_the_cycle() {
    let (_, g) = pair_grids(21, 64, 16);
    let set = correspondence_set(&g, 1.5).unwrap();
    let (fw, bw) = (&set[0], &set[1]);
    assert_eq!((fw.pair, bw.pair), ((0, 1), (1, 0)));
    for x in 0..fw.len() {
        if fw.mask[x] == 1 && bw.mask[fw.matches[x]] == 1 {
            let back = bw.matches[fw.matches[x]];
            let (r0, c0) = ((x / 16) as f64, (x % 16) as f64);
            let (r1, c1) = ((back / 16) as f64, (back % 16) as f64);
            assert!(((r0 - r1).powi(2) + (c0 - c1).powi(2)).sqrt() <= 1.5);
        }
    }
}

#[test]
fn correspondences_are_bitwise_deterministic() {
    let (_, g) = pair_grids(4, 64, 16);
    let a = correspondence_set(&g, 1.5).unwrap();
    let b = correspondence_set(&g, 1.5).unwrap();
    assert_eq!(a, b);
    let bytes: Vec<Vec<u8>> = a.iter().map(|c| c.onehot_tensor().to_bytes()).collect();
    let again: Vec<Vec<u8>> = b.iter().map(|c| c.onehot_tensor().to_bytes()).collect();
    assert_eq!(bytes, again);
}

#[test]
fn downsampled_sphere_stays_on_the_surface() {
    let radius = 0.4;
    let sphere = Primitive::Sphere { center: [0.0, 0.0, 0.0], radius, albedo: 0.5 };
    let eye = Point3::new(1.5, -0.4, 0.6);
    let cam = Camera::look_at(eye, Point3::origin(), Vector3::z(), 40.0, 128, 128).unwrap();
    let cam2 = Camera::look_at(Point3::new(-1.5, 0.2, 0.6), Point3::origin(), Vector3::z(), 40.0, 128, 128).unwrap();
    let scene = Scene::new("sphere", vec![sphere], vec![cam.clone(), cam2]).unwrap();
    let pm = render_pointmap(&scene, 0, (128, 128));
    let grid = token_grid(&pm, 32, 32);
    assert!(grid.valid_count() > 100);
    for (k, p) in grid.points.iter().enumerate() {
        if !grid.valid[k] {
            continue;
        }
        let p = Point3::from(*p);
        let footprint = (p - eye).norm() / cam.fx;
        let off = (p.coords.norm() - radius).abs();
        assert!(off <= footprint, "token {k}: {off} > {footprint}");
    }
}

/// A box standing between the second camera and part of a sphere. Tokens
/// whose surface point is hidden in the second view, and whose nearest
/// surface seen there is far away, are masked out unless they sit on a depth
/// edge of the first view, where the round trip can land on the occluder
/// right next to the query. Tokens visible from both cameras away from
/// occlusion edges are kept.
#[test]
fn occlusion_is_reflected_in_the_mask() {
    let sphere = Primitive::Sphere { center: [0.0, 0.0, 0.0], radius: 0.4, albedo: 0.5 };
    let blocker = Primitive::Cuboid { center: [0.75, 0.55, 0.0], half_extents: [0.08, 0.25, 0.5], albedo: 0.5 };
    let cam_i = Camera::look_at(Point3::new(2.5, -0.8, 0.4), Point3::origin(), Vector3::z(), 40.0, 128, 128).unwrap();
    let cam_j = Camera::look_at(Point3::new(2.0, 1.6, 0.4), Point3::origin(), Vector3::z(), 40.0, 128, 128).unwrap();
    let scene = Scene::new("occluded", vec![sphere, blocker], vec![cam_i.clone(), cam_j.clone()]).unwrap();
    let grids: Vec<TokenGrid> = (0..2).map(|v| token_grid(&render_pointmap(&scene, v, (128, 128)), 32, 32)).collect();
    let c = build_correspondence(&grids[0], &grids[1], (0, 1), 1.5).unwrap();

    let (mut hidden_far, mut hidden_far_masked, mut clear, mut clear_kept) = (0, 0, 0, 0);
    let visible = |p: &Point3<f64>| is_visible(&scene, &cam_j, p, 1e-6 * (1.0 + (p - cam_j.center()).norm()));
    for x in 0..c.len() {
        if !grids[0].valid[x] {
            continue;
        }
        // Exact surface point at the token centre.
        let (u, v) = cam_i.grid_pixel(x / 32, x % 32, 32, 32);
        let d = cam_i.ray_direction(u, v);
        let Some((t, _)) = scene.cast(&cam_i.center(), &d) else { continue };
        let p = cam_i.center() + d * t;
        let token_step = 4.0 * (p - cam_j.center()).norm() / cam_j.fx;
        let nearest = (0..grids[1].len())
            .filter(|&k| grids[1].valid[k])
            .map(|k| (Point3::from(grids[1].points[k]) - p).norm())
            .fold(f64::INFINITY, f64::min);
        if !visible(&p) && nearest > 3.0 * token_step {
            hidden_far += 1;
            hidden_far_masked += usize::from(c.mask[x] == 0);
            if c.mask[x] == 1 {
                assert!(near_depth_edge(&grids[0], x, 4.0 * (p - cam_i.center()).norm() / cam_i.fx), "token {x}");
            }
        }
        // Visible with every neighbouring surface sample visible as well.
        let ring = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)];
        let all_visible = visible(&p)
            && ring.iter().all(|(du, dv)| {
                let d2 = cam_i.ray_direction(u + 8.0 * du, v + 8.0 * dv);
                match scene.cast(&cam_i.center(), &d2) {
                    Some((t2, _)) => visible(&(cam_i.center() + d2 * t2)),
                    None => false,
                }
            });
        if all_visible {
            clear += 1;
            clear_kept += usize::from(c.mask[x] == 1);
        }
    }
    assert!(hidden_far >= 10, "scene must contain well hidden tokens ({hidden_far})");
    assert!(hidden_far_masked as f64 >= 0.9 * hidden_far as f64, "{hidden_far_masked}/{hidden_far}");
    assert!(clear >= 25, "{clear} clear tokens");
    assert!(clear_kept as f64 >= 0.95 * clear as f64, "{clear_kept}/{clear}");
}

/// Whether a token within two steps of `x` is invalid or more than three
/// token footprints away in depth.
fn near_depth_edge(g: &TokenGrid, x: usize, step: f64) -> bool {
    let (r, c) = ((x / g.w) as i64, (x % g.w) as i64);
    let p = Point3::from(g.points[x]);
    for dr in -2..=2 {
        for dc in -2..=2 {
            let (rr, cc) = (r + dr, c + dc);
            if rr < 0 || cc < 0 || rr >= g.h as i64 || cc >= g.w as i64 {
                continue;
            }
            let k = rr as usize * g.w + cc as usize;
            if !g.valid[k] || (Point3::from(g.points[k]) - p).norm() > 3.0 * step {
                return true;
            }
        }
    }
    false
}
