use ndarray::Array2;
use proptest::prelude::*;

use wsmooth::attack::{flow_pgd_attack, project_l1_ball, AttackConfig};
use wsmooth::certify::{predict_from_counts, radius_from_plower};
use wsmooth::classifier::{randomize, Classifier, Network};
use wsmooth::dataset::{encode_idx_images, encode_idx_labels, normalize, pack_channels, parse_idx_images, parse_idx_labels, IdxData};
use wsmooth::flow::{
    apply_flow, compose, edge_from_flow, flow_adjoint, flow_from_edge, solve_flow_1d, EdgeFlow, GridImage, GridLike,
    Image, ImageShape, LocalFlowPlan, RawGrid,
};
use wsmooth::noise::{NoiseSpec, Scheme};
use wsmooth::rng::SeedStream;
use wsmooth::stats::clopper_pearson_lower;
use wsmooth::transport::{wasserstein_grid_l1, wasserstein_lp, GroundMetric, TransportPlan};

fn grid(max_side: usize) -> impl Strategy<Value = GridImage> {
    (1..=max_side, 1..=max_side)
        .prop_flat_map(|(n, m)| {
            prop::collection::vec(prop_oneof![1 => Just(0.0), 3 => 0.0..1.0f64], n * m)
                .prop_map(move |v| (n, m, v))
        })
        .prop_filter("needs mass", |(_, _, v)| v.iter().sum::<f64>() > 1e-6)
        .prop_map(|(n, m, v)| {
            let total: f64 = v.iter().sum();
            GridImage::new(Array2::from_shape_vec((n, m), v).unwrap() / total).unwrap()
        })
}

fn pair(max_side: usize) -> impl Strategy<Value = (GridImage, GridImage)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(n, m)| {
        let side = move || {
            prop::collection::vec(prop_oneof![1 => Just(0.0), 3 => 0.0..1.0f64], n * m)
                .prop_filter("needs mass", |v| v.iter().sum::<f64>() > 1e-6)
                .prop_map(move |v| {
                    let total: f64 = v.iter().sum();
                    GridImage::new(Array2::from_shape_vec((n, m), v).unwrap() / total).unwrap()
                })
        };
        (side(), side())
    })
}

fn plan_for(n: usize, m: usize, scale: f64) -> impl Strategy<Value = LocalFlowPlan> {
    let len = n.saturating_sub(1) * m + n * m.saturating_sub(1);
    prop::collection::vec(-scale..scale, len).prop_map(move |v| LocalFlowPlan::from_vec(n, m, &v).unwrap())
}

fn grid_and_plans() -> impl Strategy<Value = (GridImage, LocalFlowPlan, LocalFlowPlan)> {
    grid(5).prop_flat_map(|x| {
        let (n, m) = x.values().dim();
        (Just(x), plan_for(n, m, 0.5), plan_for(n, m, 0.5))
    })
}

fn max_gap(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn flow_preserves_mass((x, d, _) in grid_and_plans()) {
        let moved = apply_flow(&x, &d).unwrap();
        prop_assert!((moved.values().sum() - 1.0).abs() <= 1e-12 * (1.0 + d.len() as f64));
    }

    #[test]
    fn flows_compose_additively((x, d1, d2) in grid_and_plans()) {
        let stepwise = apply_flow(&apply_flow(&x, &d1).unwrap(), &d2).unwrap();
        let joint = apply_flow(&x, &compose(&d1, &d2).unwrap()).unwrap();
        prop_assert!(max_gap(stepwise.values(), joint.values()) <= 1e-12);
    }

    #[test]
    fn edge_round_trip_is_exact((_, d, _) in grid_and_plans()) {
        prop_assert_eq!(flow_from_edge(&edge_from_flow(&d)), d);
    }

    #[test]
    fn net_flow_is_dominated_by_gross_flow(
        (n, m, raw) in (1usize..=4, 1usize..=4).prop_flat_map(|(n, m)| {
            (Just(n), Just(m), prop::collection::vec(0.0..1.0f64, 4 * n * m))
        })
    ) {
        let mut g = EdgeFlow::zeros(n, m);
        let mut k = 0;
        for i in 0..n {
            for j in 0..m {
                for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (ti, tj) = (i as i64 + di, j as i64 + dj);
                    if ti >= 0 && tj >= 0 && (ti as usize) < n && (tj as usize) < m {
                        g.set((i, j), (ti as usize, tj as usize), raw[k]).unwrap();
                    }
                    k += 1;
                }
            }
        }
        prop_assert!(flow_from_edge(&g).l1_norm() <= g.total() + 1e-12);
    }

    #[test]
    fn adjoint_matches_linear_action((x, d, _) in grid_and_plans(), seed in any::<u64>()) {
        let (n, m) = x.values().dim();
        let mut rng = SeedStream::new(seed).rng();
        let g = Array2::from_shape_fn((n, m), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let change = apply_flow(&RawGrid::new(x.values().clone()).unwrap(), &d).unwrap().into_inner() - x.values();
        let lhs: f64 = (&g * &change).sum();
        let rhs: f64 = flow_adjoint(&g).iter().zip(d.iter()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn one_dimensional_flow_matches_cdf_distance(
        (a, b) in (2usize..=8).prop_flat_map(|n| (prop::collection::vec(0.01..1.0f64, n), prop::collection::vec(0.01..1.0f64, n)))
    ) {
        let na: f64 = a.iter().sum();
        let nb: f64 = b.iter().sum();
        let a: Vec<f64> = a.iter().map(|v| v / na).collect();
        let b: Vec<f64> = b.iter().map(|v| v / nb).collect();
        let flow = solve_flow_1d(&a, &b).unwrap();
        let (mut fa, mut fb, mut cdf_distance) = (0.0, 0.0, 0.0);
        for (p, q) in a.iter().zip(&b) {
            fa += p;
            fb += q;
            cdf_distance += f64::abs(fa - fb);
        }
        let norm: f64 = flow.iter().map(|f| f.abs()).sum();
        prop_assert!((norm - cdf_distance).abs() <= 1e-9);
        let row = |v: &[f64]| GridImage::new(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()).unwrap();
        let (w, _) = wasserstein_lp(&row(&a), &row(&b), GroundMetric::L1).unwrap();
        prop_assert!((norm - w).abs() <= 1e-9);
    }

    #[test]
    fn flow_norm_bounds_transport((x, d, _) in grid_and_plans()) {
        // Shrink the plan until the moved image is nonnegative.
        let change = apply_flow(&x, &d).unwrap().into_inner() - x.values();
        let s = x
            .values()
            .iter()
            .zip(&change)
            .filter(|(_, c)| **c < 0.0)
            .map(|(v, c)| v / -c)
            .fold(1.0, f64::min);
        let d = d.scale(s);
        let moved = apply_flow(&x, &d).unwrap().into_inner().mapv(|v| v.max(0.0));
        let total = moved.sum();
        let moved = GridImage::new(moved / total).unwrap();
        let (w, _) = wasserstein_grid_l1(&x, &moved).unwrap();
        prop_assert!(w <= d.l1_norm() + 1e-8);
    }

    #[test]
    fn ground_metrics_sandwich((x, t) in pair(4)) {
        let (w1, _) = wasserstein_lp(&x, &t, GroundMetric::L1).unwrap();
        let (w2, _) = wasserstein_lp(&x, &t, GroundMetric::L2).unwrap();
        prop_assert!(w2 <= w1 + 1e-12);
        prop_assert!(w1 <= std::f64::consts::SQRT_2 * w2 + 1e-8);
    }

    #[test]
    fn pixel_distance_is_at_most_twice_transport((x, t) in pair(4)) {
        let l1: f64 = x.values().iter().zip(t.values()).map(|(a, b)| (a - b).abs()).sum();
        for metric in [GroundMetric::L1, GroundMetric::L2] {
            let (w, _) = wasserstein_lp(&x, &t, metric).unwrap();
            prop_assert!(l1 <= 2.0 * w + 1e-12);
        }
    }

    #[test]
    fn product_coupling_is_feasible_and_dominated((x, t) in pair(4)) {
        let (_, m) = x.values().dim();
        let plan = TransportPlan::product(&x, &t).unwrap();
        let (w, _) = wasserstein_lp(&x, &t, GroundMetric::L1).unwrap();
        prop_assert!(w <= plan.cost(GroundMetric::L1, m) + 1e-12);
    }

    #[test]
    fn normalization_is_idempotent(x in grid(5)) {
        let again = normalize(x.values().clone()).unwrap();
        prop_assert!(max_gap(again.values(), x.values()) <= 1e-12);
        let scaled = normalize(x.values() * 7.5).unwrap();
        prop_assert!(max_gap(scaled.values(), x.values()) <= 1e-12);
    }

    #[test]
    fn packing_preserves_unit_mass(
        channels in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 6), 1..4)
    ) {
        let grids: Vec<Array2<f64>> = channels.into_iter().map(|c| Array2::from_shape_vec((2, 3), c).unwrap()).collect();
        let packed = pack_channels(grids).unwrap();
        prop_assert!((packed.masses().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn idx_round_trip_is_byte_exact(
        (rows, cols, images) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(prop::collection::vec(any::<u8>(), r * c), 0..6))
        }),
        label_seed in any::<u64>()
    ) {
        let labels: Vec<u8> = (0..images.len()).map(|i| (label_seed.rotate_left(i as u32 * 7) % 10) as u8).collect();
        let data = IdxData { rows, cols, images, labels };
        let image_bytes = encode_idx_images(&data);
        let label_bytes = encode_idx_labels(&data.labels);
        let (r, c, back) = parse_idx_images(&image_bytes).unwrap();
        prop_assert_eq!((r, c), (rows, cols));
        prop_assert_eq!(&back, &data.images);
        prop_assert_eq!(&parse_idx_labels(&label_bytes).unwrap(), &data.labels);
        let again = IdxData { rows: r, cols: c, images: back, labels: data.labels.clone() };
        prop_assert_eq!(encode_idx_images(&again), image_bytes);
    }

    #[test]
    fn projection_lands_in_ball_and_is_nearest(
        v in prop::collection::vec(-3.0..3.0f64, 1..12),
        radius in 0.0..4.0f64,
        probe_seed in any::<u64>()
    ) {
        let p = project_l1_ball(&v, radius).unwrap();
        let norm: f64 = p.iter().map(|x| x.abs()).sum();
        prop_assert!(norm <= radius + 1e-9);
        let dist = |w: &[f64]| w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut rng = SeedStream::new(probe_seed).rng();
        for _ in 0..20 {
            let w: Vec<f64> = v.iter().map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let w = project_l1_ball(&w, radius).unwrap();
            prop_assert!(dist(&p) <= dist(&w) + 1e-9);
        }
    }

    #[test]
    fn radius_is_monotone_and_linear(p in 0.5001..0.9999f64, dp in 0.00001..0.0001f64, sigma in 0.001..1.0f64) {
        for scheme in [Scheme::WassersteinFlow, Scheme::LaplacePixel] {
            let r = radius_from_plower(p, sigma, scheme, GroundMetric::L2).unwrap().unwrap();
            let higher = radius_from_plower(p + dp, sigma, scheme, GroundMetric::L2).unwrap().unwrap();
            let doubled = radius_from_plower(p, 2.0 * sigma, scheme, GroundMetric::L2).unwrap().unwrap();
            prop_assert!(higher > r);
            prop_assert!((doubled - 2.0 * r).abs() <= 1e-15 * doubled.max(1.0));
        }
    }

    #[test]
    fn lower_bound_is_monotone_in_successes(trials in 1u64..2000, frac in 0.0..1.0f64) {
        let k = ((trials as f64) * frac) as u64;
        let lo = clopper_pearson_lower(k, trials, 0.05).unwrap();
        let hi = clopper_pearson_lower((k + 1).min(trials), trials, 0.05).unwrap();
        prop_assert!(lo <= hi);
        prop_assert!(lo <= k as f64 / trials as f64);
    }

    #[test]
    fn prediction_is_a_strict_maximum(counts in prop::collection::vec(0u64..500, 2..6)) {
        let pred = predict_from_counts(&counts, 0.05);
        if let Some(c) = pred.prediction {
            prop_assert!(counts.iter().enumerate().all(|(i, &v)| i == c || v < counts[c]));
        }
    }

    #[test]
    fn scores_are_probabilities(
        input in prop::collection::vec(-5.0..5.0f64, 9),
        hidden in 0usize..6,
        seed in any::<u64>()
    ) {
        let mut net = Network::init(ImageShape::gray(3, 3), hidden, 4, SeedStream::new(seed));
        randomize(&mut net, 1.0, &mut SeedStream::new(seed).rng_at(1));
        let s = net.scores(&input);
        prop_assert!(s.iter().all(|p| *p >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn flow_noise_preserves_mass(x in grid(5), sigma in 0.0..0.5f64, seed in any::<u64>()) {
        let image: Image = x.into();
        let noisy = NoiseSpec::flow(sigma).unwrap().noised_input(&image, &mut SeedStream::new(seed).rng());
        prop_assert!((noisy.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attack_budgets_bound_transport(x in grid(4).prop_filter("at least 2x2", |g| g.values().nrows() > 1 && g.values().ncols() > 1), seed in any::<u64>()) {
        let (n, m) = x.values().dim();
        let mut net = Network::init(ImageShape::gray(n, m), 0, 2, SeedStream::new(seed));
        randomize(&mut net, 1.0, &mut SeedStream::new(seed).rng_at(2));
        let image: Image = x.clone().into();
        let label = net.predict(&image.flatten());
        let cfg = AttackConfig {
            iterations: 8,
            gradient_samples: 8,
            predict_samples: 40,
            max_radius: 0.5,
            seed,
            ..AttackConfig::default()
        };
        let res = flow_pgd_attack(&net, &image, label, &NoiseSpec::flow(0.01).unwrap(), &cfg).unwrap();
        let moved = image.with_flows(&res.delta).unwrap();
        let Image::Gray(moved) = moved else { unreachable!() };
        let (w, _) = wasserstein_grid_l1(&x, &moved).unwrap();
        prop_assert!(w <= res.budget + 1e-8);
        if let Some(o) = res.oracle_radius {
            prop_assert!((o - w).abs() <= 1e-8);
        }
        prop_assert!(res.budget <= 0.5 + 1e-9);
    }
}
