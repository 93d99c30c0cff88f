use blaq_core::curvature::{CurvatureState, LrSchedule, Metric};
use blaq_core::optimizers::{
    blaq_refresh, blaq_stage1, blaq_stage2, blaq_step, full_precision_step, laq_step, BlaqConfig,
    CountingOracle, GradientOracle, LayerQuantState, OptimError,
};
use blaq_core::quantizer::{project, QuantGrid, ScaledCode};
use proptest::prelude::*;

/// Gradient of `½ Σ λ_i (w_i − c_i)²` for every group.
fn quadratic(lambda: Vec<Vec<f64>>, center: Vec<Vec<f64>>) -> impl FnMut(&[&[f64]]) -> Result<Vec<Vec<f64>>, OptimError> {
    move |pts: &[&[f64]]| {
        Ok(pts
            .iter()
            .enumerate()
            .map(|(g, p)| p.iter().enumerate().map(|(i, x)| lambda[g][i] * (x - center[g][i])).collect())
            .collect())
    }
}

fn layer(w0: Vec<f64>, bits: Option<u32>, metric: Metric, eta: f64) -> LayerQuantState {
    let curv = CurvatureState::new(w0.len(), 0.999, 1e-8, LrSchedule::constant(eta).unwrap(), metric).unwrap();
    LayerQuantState::new(w0, bits.map(|b| QuantGrid::new(b).unwrap()), curv, 5).unwrap()
}

fn two_groups(metric: Metric) -> Vec<LayerQuantState> {
    vec![
        layer(vec![0.8, -0.3, 0.5], Some(1), metric, 0.05),
        layer(vec![0.2, 0.9], Some(2), metric, 0.05),
        layer(vec![0.1], None, metric, 0.05),
    ]
}

fn two_group_oracle() -> impl FnMut(&[&[f64]]) -> Result<Vec<Vec<f64>>, OptimError> {
    quadratic(
        vec![vec![3.0, 1.0, 2.0], vec![0.5, 4.0], vec![1.0]],
        vec![vec![0.1, -0.4, 0.2], vec![-0.3, 0.7], vec![0.6]],
    )
}

fn assert_code_valid(s: &LayerQuantState) {
    assert!(s.code.alpha > 0.0);
    match &s.grid {
        Some(g) => assert!(s.code.beta.iter().all(|b| g.levels().contains(b))),
        None => {
            assert_eq!(s.code.alpha, 1.0);
            assert_eq!(s.code.beta, s.w);
        }
    }
    assert_eq!(s.w_hat(), s.code.dequantize());
}

#[test]
fn evaluation_counts_per_step() {
    let cfg = BlaqConfig::default();
    let mut oracle = CountingOracle::new(two_group_oracle());

    let mut states = two_groups(Metric::SecondMoment);
    for t in 1..=10 {
        blaq_step(&mut states, &cfg, &mut oracle).unwrap();
        assert_eq!(oracle.calls(), 2 * t);
    }

    let mut oracle = CountingOracle::new(two_group_oracle());
    let mut states = two_groups(Metric::SecondMoment);
    for t in 1..=10 {
        laq_step(&mut states, cfg.m, &mut oracle).unwrap();
        assert_eq!(oracle.calls(), t);
    }

    let mut oracle = CountingOracle::new(two_group_oracle());
    let mut states = two_groups(Metric::SecondMoment);
    for t in 1..=10 {
        full_precision_step(&mut states, &mut oracle).unwrap();
        assert_eq!(oracle.calls(), t);
    }
}

/// Stage 2 with `a` at either end reduces to a proximal step from `ω`
/// using only one of the two gradient/metric pairs.
fn endpoint(a: f64) {
    let cfg = BlaqConfig::new(a, 5).unwrap();
    let mut oracle = two_group_oracle();
    let mut states = two_groups(Metric::SecondMoment);
    for _ in 0..3 {
        blaq_step(&mut states, &cfg, &mut oracle).unwrap();
    }
    blaq_refresh(&mut states, &mut oracle).unwrap();
    let trials = blaq_stage1(&states, &cfg, &mut oracle).unwrap();

    let expected: Vec<(Vec<f64>, ScaledCode)> = states
        .iter()
        .zip(&trials)
        .map(|(s, t)| {
            let (g, d) = if a == 1.0 { (&s.g_hat, &s.d_hat) } else { (&t.g_star, &t.d_star) };
            let w: Vec<f64> = (0..s.dim()).map(|i| s.w[i] - g[i] / d[i]).collect();
            let code = match &s.grid {
                Some(grid) => project(&w, d, grid, cfg.m).unwrap(),
                None => ScaledCode { alpha: 1.0, beta: w.clone() },
            };
            (w, code)
        })
        .collect();

    blaq_stage2(&mut states, &trials, &cfg).unwrap();
    for (s, (w, code)) in states.iter().zip(expected) {
        assert_eq!(s.w, w);
        assert_eq!(s.code, code);
    }
}

#[test]
fn mixing_weight_one_uses_current_pair() {
    endpoint(1.0);
}

#[test]
fn mixing_weight_zero_uses_trial_pair() {
    endpoint(0.0);
}

#[test]
fn trial_does_not_touch_real_curvature() {
    let cfg = BlaqConfig::default();
    let mut oracle = two_group_oracle();
    let mut states = two_groups(Metric::SecondMoment);
    blaq_refresh(&mut states, &mut oracle).unwrap();
    let before: Vec<CurvatureState> = states.iter().map(|s| s.curvature.clone()).collect();
    blaq_stage1(&states, &cfg, &mut oracle).unwrap();
    for (s, b) in states.iter().zip(before) {
        assert_eq!(s.curvature, b);
    }
}

#[test]
fn stage_order_is_enforced() {
    let cfg = BlaqConfig::default();
    let mut oracle = two_group_oracle();
    let mut states = two_groups(Metric::SecondMoment);
    assert!(matches!(blaq_stage1(&states, &cfg, &mut oracle), Err(OptimError::NotRefreshed)));

    blaq_refresh(&mut states, &mut oracle).unwrap();
    let old = blaq_stage1(&states, &cfg, &mut oracle).unwrap();
    blaq_stage2(&mut states, &old, &cfg).unwrap();
    blaq_refresh(&mut states, &mut oracle).unwrap();
    assert!(matches!(blaq_stage2(&mut states, &old, &cfg), Err(OptimError::StaleTrial { .. })));
}

#[test]
fn bad_oracles_are_reported() {
    let cfg = BlaqConfig::default();
    let mut states = two_groups(Metric::SecondMoment);
    let mut short = |pts: &[&[f64]]| Ok(vec![vec![0.0; pts[0].len()]]);
    assert!(matches!(laq_step(&mut states, 5, &mut short), Err(OptimError::GroupCount { .. })));
    let mut wrong_len = |pts: &[&[f64]]| Ok(pts.iter().map(|_| vec![0.0]).collect());
    assert!(matches!(
        blaq_step(&mut states, &cfg, &mut wrong_len),
        Err(OptimError::GradientLength { group: 0, .. })
    ));
}

#[test]
fn zero_gradient_keeps_full_precision_point() {
    let cfg = BlaqConfig::default();
    let mut zero = |pts: &[&[f64]]| Ok(pts.iter().map(|p| vec![0.0; p.len()]).collect());
    let mut states = two_groups(Metric::SecondMoment);
    let w0: Vec<Vec<f64>> = states.iter().map(|s| s.w.clone()).collect();
    blaq_step(&mut states, &cfg, &mut zero).unwrap();
    full_precision_step(&mut states, &mut zero).unwrap();
    for (s, w) in states.iter().zip(w0) {
        assert_eq!(s.w, w);
    }
}

#[test]
fn full_precision_descends_on_isotropic_quadratic() {
    let l = 4.0;
    let mut states = vec![layer(vec![1.0, -2.0, 0.5], None, Metric::Identity, 0.4)];
    let mut oracle = quadratic(vec![vec![l; 3]], vec![vec![0.0; 3]]);
    let loss = |w: &[f64]| 0.5 * l * w.iter().map(|x| x * x).sum::<f64>();
    let mut prev = loss(&states[0].w);
    for _ in 0..30 {
        full_precision_step(&mut states, &mut oracle).unwrap();
        let now = loss(&states[0].w);
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn config_rejects_out_of_range_values() {
    assert!(BlaqConfig::new(1.5, 5).is_err());
    assert!(BlaqConfig::new(-0.1, 5).is_err());
    assert!(BlaqConfig::new(0.5, 0).is_err());
    let d = BlaqConfig::default();
    assert_eq!((d.a, d.m), (0.6, 5));
}

fn run(steps: usize, a: f64, metric: Metric, blaq: bool) -> Vec<LayerQuantState> {
    let cfg = BlaqConfig::new(a, 5).unwrap();
    let mut oracle = two_group_oracle();
    let mut states = two_groups(metric);
    for _ in 0..steps {
        if blaq {
            blaq_step(&mut states, &cfg, &mut oracle).unwrap();
        } else {
            laq_step(&mut states, cfg.m, &mut oracle).unwrap();
        }
    }
    states
}

proptest! {
    #[test]
    fn iterates_stay_on_grid(steps in 1usize..40, a in 0.0f64..=1.0, blaq in any::<bool>(), identity in any::<bool>()) {
        let metric = if identity { Metric::Identity } else { Metric::SecondMoment };
        let cfg = BlaqConfig::new(a, 5).unwrap();
        let mut oracle = two_group_oracle();
        let mut states = two_groups(metric);
        for _ in 0..steps {
            if blaq {
                blaq_step(&mut states, &cfg, &mut oracle).unwrap();
            } else {
                laq_step(&mut states, cfg.m, &mut oracle).unwrap();
            }
            states.iter().for_each(assert_code_valid);
        }
    }

    #[test]
    fn mixed_metric_is_positive(steps in 1usize..30, a in 0.0f64..=1.0) {
        let states = run(steps, a, Metric::SecondMoment, true);
        for s in &states {
            prop_assert!(s.d_hat.iter().all(|&d| d > 0.0 && d.is_finite()));
        }
    }

    #[test]
    fn runs_are_bit_identical(steps in 1usize..30, a in 0.0f64..=1.0, blaq in any::<bool>()) {
        let x = run(steps, a, Metric::SecondMoment, blaq);
        let y = run(steps, a, Metric::SecondMoment, blaq);
        for (p, q) in x.iter().zip(&y) {
            prop_assert_eq!(
                p.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(p.code.alpha.to_bits(), q.code.alpha.to_bits());
            prop_assert_eq!(&p.code.beta, &q.code.beta);
        }
    }
}

#[test]
fn counting_oracle_passes_through() {
    let mut inner = two_group_oracle();
    let direct = inner.gradients(&[&[0.0, 0.0, 0.0], &[0.0, 0.0], &[0.0]]).unwrap();
    let mut counted = CountingOracle::new(two_group_oracle());
    let via = counted.gradients(&[&[0.0, 0.0, 0.0], &[0.0, 0.0], &[0.0]]).unwrap();
    assert_eq!(direct, via);
    assert_eq!(counted.calls(), 1);
}
