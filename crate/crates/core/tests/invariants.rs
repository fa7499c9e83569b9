use epsoracle_core::bruteforce::{epsilon_star_quadrature, score_finite_difference, GridSpec};
use epsoracle_core::oracle::{self, check_identity};
use epsoracle_core::stats::mixed_error;
use epsoracle_core::{DMatrix, DataDistribution, GaussianMixtureDensity, NoiseSchedule, PointSet};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
}

fn point_set(dim: usize) -> impl Strategy<Value = DataDistribution> {
    prop::collection::vec((prop::collection::vec(-4.0..4.0f64, dim), 0.05..1.0f64), 1..6).prop_map(move |atoms| {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let (points, weights): (Vec<_>, Vec<_>) = atoms.into_iter().map(|(p, w)| (p, w / total)).unzip();
        PointSet::new(points, weights).unwrap().into()
    })
}

fn covariance(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, dim * dim).prop_map(move |a| {
        let a = DMatrix::from_vec(dim, dim, a);
        let mut c = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.05;
        c = (&c + c.transpose()) * 0.5;
        c
    })
}

fn mixture(dim: usize) -> impl Strategy<Value = DataDistribution> {
    prop::collection::vec(
        (prop::collection::vec(-3.0..3.0f64, dim), covariance(dim), 0.05..1.0f64),
        1..4,
    )
    .prop_map(move |comps| {
        let total: f64 = comps.iter().map(|c| c.2).sum();
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for (m, c, w) in comps {
            weights.push(w / total);
            means.push(m);
            covs.push(c);
        }
        GaussianMixtureDensity::new(weights, means, covs).unwrap().into()
    })
}

fn any_distribution(dim: usize) -> impl Strategy<Value = DataDistribution> {
    prop_oneof![point_set(dim), mixture(dim)]
}

fn sum_weights(w: &[f64]) -> f64 {
    w.iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_is_a_decreasing_product(steps in 1usize..400, start in 1e-5..1e-2f64, span in 0.0..0.5f64) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), steps);
        let mut prev = 1.0;
        for t in 1..=steps {
            let cur = s.alpha_bar(t);
            prop_assert!(cur > 0.0 && cur < prev);
            let rec = prev * s.alpha(t);
            prop_assert!((cur - rec).abs() <= 4.0 * f64::EPSILON * cur);
            prev = cur;
        }
    }

    #[test]
    fn forward_then_recover_noise(x0 in prop::collection::vec(-5.0..5.0f64, 1..4), seed in any::<u64>(), t in 1usize..=100) {
        let s = schedule();
        let eps: Vec<f64> = x0.iter().enumerate().map(|(i, v)| ((seed >> i) % 7) as f64 - 3.0 + 0.1 * v).collect();
        let xt = s.forward_from_noise(&x0, &eps, t).unwrap();
        let back = s.noise_from_pair(&x0, &xt, t).unwrap();
        for (a, b) in back.iter().zip(&eps) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()) / (1.0 - s.alpha_bar(t)).sqrt());
        }
    }

    #[test]
    fn responsibilities_form_a_distribution(
        dist in any_distribution(2),
        t in 1usize..=100,
        xt in prop::collection::vec(-30.0..30.0f64, 2),
    ) {
        let post = oracle::posterior(&dist, &schedule(), t, &xt).unwrap();
        prop_assert!(post.responsibilities.iter().all(|r| *r >= 0.0 && r.is_finite()));
        prop_assert!((sum_weights(&post.responsibilities) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_predictor_paths_agree(
        dist in any_distribution(2),
        t in 1usize..=100,
        xt in prop::collection::vec(-8.0..8.0f64, 2),
    ) {
        let report = check_identity(&dist, &schedule(), t, &xt, 1e-9).unwrap();
        prop_assert!(report.pass, "{:?}", report);
    }

    #[test]
    fn tweedie_agrees_with_the_posterior_mean(
        dist in mixture(1),
        t in 1usize..=100,
        xt in -6.0..6.0f64,
    ) {
        let s = schedule();
        let tw = oracle::tweedie_mean(&dist, &s, t, &[xt]).unwrap();
        let post = oracle::posterior(&dist, &s, t, &[xt]).unwrap();
        // Tweedie divides by sqrt(ab); cancellation grows as ab shrinks.
        let tol = 1e-9 / s.alpha_bar(t).sqrt() * (1.0 + xt.abs());
        prop_assert!((tw[0] - post.conditional_mean_x0[0]).abs() <= tol);
    }

    #[test]
    fn posterior_mean_lies_in_the_hull_of_atoms(dist in point_set(1), t in 1usize..=100, xt in -20.0..20.0f64) {
        let DataDistribution::Discrete(ps) = &dist else { unreachable!() };
        let lo = ps.points().iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = ps.points().iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let m = oracle::posterior(&dist, &schedule(), t, &[xt]).unwrap().conditional_mean_x0[0];
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    }

    #[test]
    fn score_matches_central_differences(dist in mixture(2), t in 1usize..=100, xt in prop::collection::vec(-3.0..3.0f64, 2)) {
        let g = dist.marginal_qt(&schedule(), t).unwrap();
        let analytic = g.score(&xt).unwrap();
        let fd = score_finite_difference(&g, &xt, 1e-4).unwrap();
        prop_assert!(mixed_error(&fd, &analytic) < 1e-5, "{:?} vs {:?}", fd, analytic);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quadrature_reproduces_the_closed_form(dist in mixture(1), t in 1usize..=100, xt in -5.0..5.0f64) {
        let s = schedule();
        let q = epsilon_star_quadrature(&dist, &s, t, &[xt], &GridSpec::for_dim(1)).unwrap();
        let exact = oracle::epsilon_star(&dist, &s, t, &[xt]).unwrap();
        prop_assert!(mixed_error(&q.value, &exact) < 1e-8);
    }
}
