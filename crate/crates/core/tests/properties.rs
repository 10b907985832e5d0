use proptest::prelude::*;

use smoothgeo::attacks::{pgd_attack, random_perturbation, AttackConfig, AttackKind};
use smoothgeo::attribution::{normalize_map, AttributionConfig, Method};
use smoothgeo::autodiff::{finite_diff_gradient, Graph};
use smoothgeo::geometry::{BallSpec, HessianFactorization, Norm};
use smoothgeo::metrics::*;
use smoothgeo::nn::{Activation, Network};

fn nonzero_map(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len).prop_filter("non-degenerate", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn grid_maps() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (nonzero_map(9), nonzero_map(9), nonzero_map(9))
}

const GRID: GridGeometry = GridGeometry::Grid { height: 3, width: 3 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_positive_scaling((z, w, _) in grid_maps(), a in 0.1..50.0f64, b in 0.1..50.0f64) {
        let zs: Vec<f64> = z.iter().map(|v| v * a).collect();
        let ws: Vec<f64> = w.iter().map(|v| v * a).collect();
        let base = MetricValues::compute(&z, &w, 3, GRID).unwrap();
        let scaled = MetricValues::compute(&zs, &ws, 3, GRID).unwrap();
        prop_assert!((base.k_in - scaled.k_in).abs() < 1e-12);
        prop_assert!((base.cor - scaled.cor).abs() < 1e-12);
        prop_assert!((base.cdl - scaled.cdl).abs() < 1e-9);
        let wb: Vec<f64> = w.iter().map(|v| v * b).collect();
        prop_assert!((cosine_distance(&zs, &wb).unwrap() - base.cosd).abs() < 1e-12);
    }

    #[test]
    fn self_intersection_is_top_mass(z in nonzero_map(9), k in 1usize..=9) {
        let n = normalize_map(&z).unwrap();
        let mass: f64 = top_k_indices(&z, k).unwrap().iter().map(|&i| n[i]).sum();
        prop_assert!((topk_intersection(&z, &z, k).unwrap() - mass).abs() < 1e-12);
        prop_assert!((topk_intersection(&z, &z, 9).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_flips_under_rank_reversal(z in prop::collection::vec(0.0..100.0f64, 6)) {
        let ranks = average_ranks(&z);
        prop_assume!(ranks.iter().any(|r| (r - ranks[0]).abs() > 0.0));
        let ascending: Vec<f64> = (1..=6).map(f64::from).collect();
        let descending: Vec<f64> = ascending.iter().rev().cloned().collect();
        let a = spearman_correlation_with(&z, &ascending, RankBasis::Raw).unwrap();
        let b = spearman_correlation_with(&z, &descending, RankBasis::Raw).unwrap();
        prop_assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn center_dislocation_triangle_inequality((a, b, c) in grid_maps()) {
        let ab = center_dislocation(&a, &b, GRID).unwrap();
        let bc = center_dislocation(&b, &c, GRID).unwrap();
        let ac = center_dislocation(&a, &c, GRID).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn log_auc_respects_domination(lo in prop::collection::vec(0.0..1.0f64, 4), bump in prop::collection::vec(0.0..1.0f64, 4)) {
        let eps = [2.0, 4.0, 8.0, 16.0];
        let low: Vec<(f64, f64)> = eps.iter().zip(&lo).map(|(e, v)| (*e, *v)).collect();
        let high: Vec<(f64, f64)> = eps.iter().zip(lo.iter().zip(&bump)).map(|(e, (v, d))| (*e, v + d)).collect();
        prop_assert!(log_auc(&low).unwrap() <= log_auc(&high).unwrap());
    }

    #[test]
    fn factorization_spectrum_is_psd(w in prop::collection::vec(-2.0..2.0f64, 12), logits in prop::collection::vec(-3.0..3.0f64, 3)) {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let fac = HessianFactorization::from_parts(nalgebra::DMatrix::from_vec(4, 3, w), e.iter().map(|v| v / s).collect()).unwrap();
        let top = fac.top_eigenvalue();
        for v in &fac.eigvals {
            prop_assert!(*v >= -1e-8 * top.max(1.0));
        }
        for r in 0..3 {
            prop_assert!(fac.a.row(r).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn ball_samples_stay_inside(center in prop::collection::vec(-5.0..5.0f64, 5), radius in 0.0..3.0f64, idx in 0u64..1000, l2 in any::<bool>()) {
        let norm = if l2 { Norm::L2 } else { Norm::LInf };
        let ball = BallSpec::new(center.clone(), radius, norm).unwrap();
        let x = ball.sample(9, idx);
        let delta: Vec<f64> = x.iter().zip(&center).map(|(a, b)| a - b).collect();
        prop_assert!(norm.of(&delta) <= radius * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn random_perturbation_respects_budget(x in prop::collection::vec(0.0..1.0f64, 8), eps in 0.0..0.5f64, seed in any::<u64>()) {
        let xr = random_perturbation(&x, eps, (0.0, 1.0), seed);
        for (a, b) in xr.iter().zip(&x) {
            prop_assert!((a - b).abs() <= eps + 1e-15);
            prop_assert!((0.0..=1.0).contains(a));
        }
        if eps == 0.0 {
            prop_assert_eq!(xr, x);
        }
    }

    #[test]
    fn softplus_network_gradient_matches_differences(seed in 0u64..500, beta in 0.5..8.0f64) {
        let net = Network::random(&[4, 6, 3], Activation::Softplus { beta }, seed).unwrap();
        let x = [0.3, -0.2, 0.8, 0.1];
        let (mut g, xv, logits) = net.forward_logits(&x).unwrap();
        let lse = g.log_softmax(logits);
        let q = g.index(lse, 1).unwrap();
        let grad = g.backward(q, &[xv], false).unwrap()[0];
        let fd = finite_diff_gradient(|z| net.probabilities(z).unwrap()[1].ln(), &x, 1e-5);
        for (a, b) in g.value(grad).iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), relu in any::<bool>()) {
        let act = if relu { Activation::Relu } else { Activation::Softplus { beta: 3.0 } };
        let net = Network::random(&[3, 5, 4, 2], act, seed).unwrap();
        prop_assert_eq!(Network::from_bytes(&net.to_bytes()).unwrap(), net);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attacks_keep_budget_range_and_prediction(
        seed in 0u64..200,
        eps in 0.0..0.2f64,
        steps in 0usize..6,
        kind in prop::sample::select(AttackKind::ALL.to_vec()),
        method in prop::sample::select(Method::ALL.to_vec()),
        x in prop::collection::vec(0.0..1.0f64, 9),
    ) {
        let net = Network::random(&[9, 8, 3], Activation::Relu, seed).unwrap();
        let attribution = AttributionConfig { ig_steps: 4, sg_samples: 4, ug_samples: 4, ..Default::default() };
        let target = (kind == AttackKind::Manipulate).then(|| x.iter().rev().cloned().collect::<Vec<f64>>());
        let cfg = AttackConfig { steps, k: 2, target_map: target, attribution, ..AttackConfig::new(kind, eps, method, GRID) };
        let res = pgd_attack(&net, &x, &cfg).unwrap();
        for (a, b) in res.x_adv.iter().zip(&x) {
            prop_assert!((a - b).abs() <= eps + 1e-9);
            prop_assert!((0.0..=1.0).contains(a));
        }
        prop_assert!(res.linf <= eps + 1e-9);
        prop_assert_eq!(res.loss_trace.len(), steps + 1);
        if res.feasible {
            prop_assert_eq!(net.predict(&res.x_adv).unwrap(), net.predict(&x).unwrap());
            prop_assert!(res.loss_trace[res.best_step] <= res.loss_trace[0]);
        }
        if steps == 0 || eps == 0.0 {
            prop_assert_eq!(&res.x_adv, &x);
        }
        prop_assert_eq!(pgd_attack(&net, &x, &cfg).unwrap(), res);
    }
}

#[test]
fn double_backprop_of_gradient_norm() {
    let net = Network::random(&[3, 5, 2], Activation::Softplus { beta: 2.0 }, 4).unwrap();
    let x = [0.2, -0.5, 0.9];
    let grad_norm = |z: &[f64]| -> f64 {
        let (mut g, xv, logits) = net.forward_logits(z).unwrap();
        let q = g.index(logits, 0).unwrap();
        let gx = g.backward(q, &[xv], false).unwrap()[0];
        g.value(gx).iter().map(|v| v * v).sum()
    };
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let xv = g.variable(&x);
    let logits = bound.logits(&mut g, xv).unwrap();
    let q = g.index(logits, 0).unwrap();
    let gx = g.backward(q, &[xv], true).unwrap()[0];
    let sq = g.dot(gx, gx).unwrap();
    let hv = g.backward(sq, &[xv], false).unwrap()[0];
    let fd = finite_diff_gradient(grad_norm, &x, 1e-5);
    for (a, b) in g.value(hv).iter().zip(&fd) {
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
}
