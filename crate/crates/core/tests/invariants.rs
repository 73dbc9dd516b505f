use num_complex::Complex64;
use proptest::prelude::*;

use iicperc::estimators::{estimate_qn_hat, EstimatorAccumulator, WaveVector};
use iicperc::experiments::{accumulate, axis_observables};
use iicperc::ise::{three_point_hat, two_point_hat_closed_form};
use iicperc::lambda::{coefficients_by_recursion, lambda_at};
use iicperc::lattice::{LatticePoint, ModelSpec};
use iicperc::oracle::{exact_backbone, exact_cluster_law, EnumerationDomain};
use iicperc::quadrature::IseEvalConfig;
use iicperc::rng::RngStreamSpec;
use iicperc::sampler::{extract_backbone, grow_cluster, BatchPlan, ClusterGrower};

fn model() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (1usize..=4, 0.05f64..0.45).prop_map(|(d, p)| ModelSpec::nearest_neighbour(d, p / d as f64 * 2.0).unwrap()),
        (2usize..=3, 0.01f64..0.06).prop_map(|(d, p)| ModelSpec::spread_out(d, 2, p).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clusters_are_connected_and_replayable(m in model(), seed in any::<u64>(), stream in 0u64..1_000_000, cap in 1usize..300) {
        let spec = RngStreamSpec::new(seed, stream);
        let c = grow_cluster(&m, spec, cap).unwrap();
        prop_assert!(c.size() <= cap + 1);
        prop_assert_eq!(c.is_truncated(), c.size() > cap);
        prop_assert_eq!(c.site(0), &vec![0i64; m.dimension()][..]);
        for b in c.occupied_bonds() {
            let (x, y) = b.endpoints();
            let diff: Vec<i64> = x.coords().iter().zip(y.coords()).map(|(a, b)| b - a).collect();
            prop_assert!(m.is_bond_vector(&diff));
        }
        if !c.is_truncated() {
            prop_assert!(c.graph_distances(0).iter().all(Option::is_some));
        }
        let mut g = ClusterGrower::new();
        prop_assert_eq!(g.grow(&m, spec, cap, true).fingerprint(), c.fingerprint());
    }

    #[test]
    fn backbone_matches_max_flow(p in 0.3f64..0.6, seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let m = ModelSpec::nearest_neighbour(2, p).unwrap();
        let c = grow_cluster(&m, RngStreamSpec::new(seed, 0), 150).unwrap();
        prop_assume!(!c.is_truncated());
        let sites = c.site_points();
        let bonds: Vec<(LatticePoint, LatticePoint)> = c
            .occupied_bonds()
            .iter()
            .map(|b| { let (x, y) = b.endpoints(); (x.clone(), y.clone()) })
            .collect();
        let x = &sites[(a % sites.len() as u64) as usize];
        let y = &sites[(b % sites.len() as u64) as usize];
        let mut flow = exact_backbone(&sites, &bonds, x, y).unwrap();
        flow.sort();
        prop_assert_eq!(extract_backbone(&c, x, y).unwrap().sites, flow);
    }

    #[test]
    fn accumulators_merge_exactly(m in model(), seed in any::<u64>(), split in 1u64..399, k in 0.1f64..3.0) {
        let d = m.dimension();
        let (waves, pairs) = axis_observables(d, &[k]).unwrap();
        let whole = accumulate(&m, BatchPlan::new(seed, 400), 64, waves.clone(), pairs.clone()).unwrap();
        let left = accumulate(&m, BatchPlan::new(seed, split), 64, waves.clone(), pairs.clone()).unwrap();
        let right_plan = BatchPlan { first_stream: split, count: 400 - split, ..BatchPlan::new(seed, 0) };
        let right = accumulate(&m, right_plan, 64, waves.clone(), pairs).unwrap();
        prop_assert_eq!(&left.merge(&right).unwrap(), &whole);

        let zero = WaveVector::zero(d);
        for (n, _) in whole.sizes() {
            prop_assert_eq!(estimate_qn_hat(&whole, &zero, n).unwrap().value, Complex64::new(1.0, 0.0));
            let two = whole.two_point_sum(&waves[1], n).unwrap();
            let three = whole.three_point_sum(&waves[1], &zero, n).unwrap();
            prop_assert_eq!(three.re, (two.re * n as i128) << 32);
            prop_assert_eq!(three.im, (two.im * n as i128) << 32);
        }
    }

    #[test]
    fn worker_count_does_not_matter(seed in any::<u64>(), workers in 2usize..5) {
        let m = ModelSpec::nearest_neighbour(3, 0.2).unwrap();
        let (waves, pairs) = axis_observables(3, &[0.5, 1.0]).unwrap();
        let one = accumulate(&m, BatchPlan::new(seed, 3000).with_workers(Some(1)), 128, waves.clone(), pairs.clone()).unwrap();
        let many = accumulate(&m, BatchPlan::new(seed, 3000).with_workers(Some(workers)), 128, waves, pairs).unwrap();
        prop_assert_eq!(one, many);
    }

    #[test]
    fn oracle_law_is_normalised(p in 0.0f64..=1.0, d in 1usize..=2, n_max in 1usize..=5) {
        let law = exact_cluster_law(&EnumerationDomain::new(d, n_max).unwrap(), p).unwrap();
        let total: f64 = law.size_distribution().iter().sum::<f64>() + law.overflow();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(law.overflow() >= -1e-12);
        let zero = vec![0.0; d];
        for n in 1..=n_max {
            let t = law.tau_hat(&zero, n).unwrap();
            prop_assert!((t.re - n as f64 * law.size_distribution()[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn ise_two_point_is_a_decreasing_profile(a in 0.0f64..6.0, b in 0.0f64..6.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (f_lo, f_hi) = (two_point_hat_closed_form(lo), two_point_hat_closed_form(hi));
        prop_assert!(f_hi <= f_lo + 1e-15);
        prop_assert!(f_lo <= 1.0 + 1e-15 && f_hi > 0.0);
    }

    #[test]
    fn ise_three_point_symmetric_and_bounded(k in 0.0f64..4.0, l in 0.0f64..4.0) {
        let cfg = IseEvalConfig::default();
        let kl = three_point_hat(&[k], &[l], &cfg).unwrap();
        let lk = three_point_hat(&[l], &[k], &cfg).unwrap();
        prop_assert!((kl - lk).abs() < 1e-10);
        prop_assert!(kl > 0.0 && kl <= 1.0 + 1e-10);
    }

    #[test]
    fn lambda_partial_sums_converge(re in -0.45f64..0.45, im in -0.45f64..0.45, k in 0.0f64..3.0) {
        let z = Complex64::new(re, im);
        let s = coefficients_by_recursion(k, 400);
        let exact = lambda_at(z, k).unwrap();
        prop_assert!((s.partial_sum(z) - exact).norm() < 1e-10 * exact.norm().max(1.0));
    }
}

#[test]
fn accumulator_rejects_foreign_dimension() {
    let mut acc = EstimatorAccumulator::new(2, vec![WaveVector::zero(2)], vec![(0, 0)]).unwrap();
    let m = ModelSpec::nearest_neighbour(3, 0.2).unwrap();
    let c = grow_cluster(&m, RngStreamSpec::new(0, 0), 10).unwrap();
    assert!(acc.add(&c, 0).is_err());
}
