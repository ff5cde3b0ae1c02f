use cdp_core::diffusion::{forward_sample, reverse_step, sample, NoiseSchedule, SampleSpec, ScheduleKind, COSINE_OFFSET};
use cdp_core::workspace::Vec2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

proptest! {
    #[test]
    fn schedules_are_monotone(steps in 2usize..300, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(kind, steps).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            let p = s.posterior(t).unwrap();
            prop_assert!(p.sigma >= 0.0 && p.sigma.is_finite());
        }
    }

    #[test]
    fn reverse_step_at_one_returns_prediction(x in prop::collection::vec(-1.0f64..1.0, 6), x0 in prop::collection::vec(-1.0f64..1.0, 6)) {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let noise = vec![3.0; 6];
        let out = reverse_step(&x, 1, &x0, &s, &noise).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_schedule_matches_closed_form() {
    let steps = 100;
    let s = NoiseSchedule::cosine(steps, COSINE_OFFSET).unwrap();
    let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    for t in [1, 10, 50, 90] {
        let want = f(t as f64) / f(0.0);
        assert!((s.alpha_bar(t) - want).abs() < 1e-9, "t={t}: {} vs {want}", s.alpha_bar(t));
    }
}

#[test]
fn forward_marginal_monte_carlo() {
    let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
    let mut rng = cdp_core::seed::rng(3);
    let x0 = [0.6];
    for t in [5, 50, 95] {
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_sample(&x0, t, &[rng.sample(StandardNormal)], &s).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let (want_mean, want_var) = (ab.sqrt() * x0[0], 1.0 - ab);
        // 2% relative, with an absolute floor for means near zero.
        assert!((mean - want_mean).abs() <= 0.02 * want_mean.abs().max(0.5), "t={t} mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() <= 0.02 * want_var, "t={t} var {var} vs {want_var}");
    }
}

#[test]
fn clamped_endpoints_are_exact_on_sampled_plans() {
    let s = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
    // A denoiser that drifts toward a point away from the endpoints.
    let den = |x: &[f64], _t: usize, _b: usize| x.iter().map(|v| 0.5 * v + 0.1).collect::<Vec<f64>>();
    let mut rng = cdp_core::seed::rng(9);
    let specs: Vec<SampleSpec> = (0..100)
        .map(|k| SampleSpec {
            fixed: vec![(0, Vec2::new(rng.random(), rng.random())), (16, Vec2::new(rng.random(), rng.random()))],
            seed: k,
        })
        .collect();
    let plans = sample(&den, &s, 17, &specs, None);
    for (p, spec) in plans.iter().zip(&specs) {
        assert_eq!(p.len(), 17);
        for &(i, q) in &spec.fixed {
            assert_eq!(p[i], q);
        }
    }
}
