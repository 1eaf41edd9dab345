use cameo_core::attention::perturb_identity;
use cameo_core::correspondence::{token_grid, TokenGrid};
use cameo_core::io::seeded_rng;
use cameo_core::probe::*;
use cameo_core::scene::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn descriptors(g: &TokenGrid) -> Array2<f64> {
    Array2::from_shape_fn((g.len(), 3), |(r, c)| if g.valid[r] { g.points[r][c] } else { f64::NAN })
}

fn scene_pairs(scenes: usize, res: usize, seed: u64) -> Vec<(f64, TokenGrid, TokenGrid)> {
    let spec = SceneSetSpec { scenes, image_width: res, image_height: res, ..Default::default() };
    generate_scene_set(&spec, &mut seeded_rng(seed))
        .unwrap()
        .iter()
        .map(|s| {
            let g: Vec<TokenGrid> = (0..2).map(|v| TokenGrid::from_pointmap(&render_pointmap(s, v, (res, res)))).collect();
            (relative_rotation_deg(&s.cameras[0], &s.cameras[1]), g[0].clone(), g[1].clone())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn neighbours_equal_full_sort(seed in any::<u64>(), d in 1usize..6, cosine in any::<bool>()) {
        let mut rng = seeded_rng(seed);
        let a = Array2::from_shape_simple_fn((256, d), || rng.random::<f64>() - 0.5);
        let b = Array2::from_shape_simple_fn((256, d), || rng.random::<f64>() - 0.5);
        let metric = if cosine { Metric::Cosine } else { Metric::L2 };
        let got = match_descriptors(a.view(), b.view(), metric).unwrap();
        prop_assert_eq!(got.len(), 256);
        for (src, np) in got.iter().enumerate() {
            let q = a.row(src);
            let mut dists: Vec<(f64, usize)> = b
                .rows()
                .into_iter()
                .enumerate()
                .map(|(j, r)| {
                    let dist = match metric {
                        Metric::L2 => q.iter().zip(r).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
                        Metric::Cosine => 1.0 - q.dot(&r) / (q.dot(&q).sqrt() * r.dot(&r).sqrt()),
                    };
                    (dist, j)
                })
                .collect();
            dists.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            prop_assert_eq!((np.nn1, np.nn2), (dists[0].1, dists[1].1));
            prop_assert!((np.d1 - dists[0].0).abs() < 1e-9 && (np.d2 - dists[1].0).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&np.ratio));
        }
    }

    #[test]
    fn attention_argmax_equals_scan(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = seeded_rng(seed);
        let mut map = Array2::from_shape_simple_fn((n, n), || rng.random::<f64>());
        for mut row in map.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        for m in match_from_attention(map.view()) {
            let row = map.row(m.src);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            prop_assert_eq!(m.dst, best);
        }
    }

    #[test]
    fn select_top_is_idempotent(ratios in proptest::collection::vec(0.0f64..1.0, 0..60), k in 1usize..80) {
        let c: Vec<MatchCandidate> = ratios.iter().enumerate().map(|(i, &r)| MatchCandidate { src: i, dst: i, ratio: r, distance_3d: None }).collect();
        let once = select_top(c.clone(), k);
        prop_assert_eq!(once.len(), k.min(c.len()));
        prop_assert_eq!(select_top(once.clone(), k), once);
    }

    #[test]
    fn precision_grows_with_rho(seed in 0u64..1000, r1 in 0.001f64..0.2, dr in 0.0f64..0.2) {
        let spec = SceneSetSpec { scenes: 1, image_width: 64, image_height: 64, ..Default::default() };
        let s = generate_scene_set(&spec, &mut seeded_rng(seed)).unwrap().remove(0);
        let g: Vec<TokenGrid> = (0..2).map(|v| token_grid(&render_pointmap(&s, v, (64, 64)), 16, 16)).collect();
        let pair = ProbePair {
            id: "p".into(),
            theta_deg: 10.0,
            geom_a: g[0].clone(),
            geom_b: g[1].clone(),
            source: MatchSource::Descriptors { a: descriptors(&g[0]), b: descriptors(&g[1]), metric: Metric::L2 },
        };
        prop_assume!(g[0].valid_count() > 0 && g[1].valid_count() >= 2);
        let (p1, p2) = (pair_precision(&pair, 1000, r1).unwrap(), pair_precision(&pair, 1000, r1 + dr).unwrap());
        prop_assert!(p1 <= p2);
    }
}

#[test]
fn identity_map_matches_every_token_to_itself() {
    for n in [1, 7, 256] {
        let m = match_from_attention(perturb_identity::<f64>(n).view());
        assert!(m.iter().all(|c| c.src == c.dst));
        assert!(n == 1 || m.iter().all(|c| c.ratio == 1.0));
    }
}

#[test]
fn report_ignores_pair_order() {
    let mut rng = seeded_rng(3);
    let pairs: Vec<ProbePair> = scene_pairs(12, 64, 5)
        .into_iter()
        .enumerate()
        .map(|(k, (theta, a, b))| {
            let source = if k % 2 == 0 {
                MatchSource::Given(random_matches(&a, &b, &mut rng))
            } else {
                MatchSource::Descriptors { a: descriptors(&a), b: descriptors(&b), metric: Metric::L2 }
            };
            ProbePair { id: format!("pair{k}"), theta_deg: theta, geom_a: a, geom_b: b, source }
        })
        .collect();
    let base = evaluate_pairs(&pairs, 500, 0.05).unwrap();
    for seed in 0..5 {
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut seeded_rng(seed));
        let r = evaluate_pairs(&shuffled, 500, 0.05).unwrap();
        assert!((r.overall - base.overall).abs() <= 1e-12);
        assert_eq!(r.bin_counts, base.bin_counts);
        for (k, v) in &base.per_bin {
            assert!((r.per_bin[k] - v).abs() <= 1e-12);
        }
    }
}

/// Ground-truth coordinates as descriptors at full pixel resolution, and
/// uniformly random matches on the same pairs.
#[test]
fn oracle_and_random_matching_bounds() {
    let mut rng = seeded_rng(1);
    let mut oracle = Vec::new();
    let mut random = Vec::new();
    for (k, (theta, a, b)) in scene_pairs(16, 384, 0).into_iter().enumerate() {
        random.push(ProbePair {
            id: format!("{k}"),
            theta_deg: theta,
            geom_a: a.clone(),
            geom_b: b.clone(),
            source: MatchSource::Given(random_matches(&a, &b, &mut rng)),
        });
        let source = MatchSource::Descriptors { a: descriptors(&a), b: descriptors(&b), metric: Metric::L2 };
        oracle.push(ProbePair { id: format!("{k}"), theta_deg: theta, geom_a: a, geom_b: b, source });
    }
    let good = evaluate_pairs(&oracle, DEFAULT_TOP_K, DEFAULT_RHO).unwrap();
    let bad = evaluate_pairs(&random, DEFAULT_TOP_K, DEFAULT_RHO).unwrap();
    assert!(good.overall >= 0.99, "{good:?}");
    assert!(bad.overall < 0.05, "{}", bad.overall);
    assert!(good.per_bin.keys().all(|k| BIN_LABELS.contains(&k.as_str())));
}
