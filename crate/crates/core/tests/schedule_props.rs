use proptest::prelude::*;

use cpkd::schedule::{ddim_step, forward_diffuse, inference_grid, NoiseSchedule, ScheduleKind};
use cpkd::tensor_core::Tensor;

fn tensor(frames: usize, classes: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn2(frames, classes, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

proptest! {
    #[test]
    fn lambda_strictly_decreasing(total in 2usize..3000) {
        let s = NoiseSchedule::cosine(total).unwrap();
        let l = s.lambdas();
        prop_assert_eq!(l.len(), total + 1);
        prop_assert_eq!(l[0], 1.0);
        for w in l.windows(2) {
            prop_assert!(w[1] < w[0]);
            prop_assert!(w[1] > 0.0);
        }
    }

    #[test]
    fn grid_descends_to_zero(total in 1usize..2000, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let g = inference_grid(total, steps).unwrap();
        prop_assert_eq!(g.len(), steps);
        prop_assert_eq!(g[0].0, total);
        prop_assert_eq!(g.last().unwrap().1, 0);
        for (i, &(t, p)) in g.iter().enumerate() {
            prop_assert!(p < t);
            if i + 1 < g.len() {
                prop_assert_eq!(g[i + 1].0, p);
            }
        }
    }

    /// With the exact clean estimate and `eta = 0`, a reverse hop lands on
    /// the forward process at `t_prev` with the same noise.
    #[test]
    fn deterministic_hop_is_consistent(t in 2usize..1000, back in 1usize..1000, seed in 0u64..1000) {
        let t_prev = t.saturating_sub(back);
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = tensor(5, 3, seed);
        let eps = tensor(5, 3, seed + 1);
        let y_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let next = ddim_step(&y_t, &x0, t, t_prev, &s, &Tensor::zeros(&[5, 3])).unwrap();
        let expect = forward_diffuse(&x0, t_prev, &eps, &s).unwrap();
        prop_assert!(next.max_abs_diff(&expect) < 1e-7);
    }

    #[test]
    fn stochastic_gamma_is_bounded(t in 1usize..1000, back in 1usize..1000, eta in 0.0f64..=1.0) {
        let t_prev = t.saturating_sub(back);
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine, eta).unwrap();
        let g = s.gamma(t, t_prev);
        prop_assert!(g >= 0.0);
        prop_assert!(1.0 - s.lambda(t_prev) - g * g >= -1e-12);
    }
}

#[test]
fn forward_marginals_match_lambda() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let n = 20_000;
    let x0 = Tensor::full(&[n, 1], 1.0);
    let mut eps = Tensor::zeros(&[n, 1]);
    let mut state = 7u64;
    for v in eps.data_mut() {
        // Box-Muller from a small LCG
        let mut u = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        let (a, b) = (u(), u());
        *v = (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos();
    }
    for t in [1, 250, 500, 900] {
        let y = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let l = s.lambda(t);
        assert!((mean - l.sqrt()).abs() < 0.03, "t={t} mean {mean}");
        assert!((var - (1.0 - l)).abs() < 0.05, "t={t} var {var}");
    }
}
