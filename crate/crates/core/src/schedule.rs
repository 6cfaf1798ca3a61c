//! Noise schedule, forward corruption and the skipped-step reverse update.
//!
//! Label sequences live in `[-1, 1]`: a one-hot row `y` is represented as
//! `2y - 1`, and model probabilities are mapped the same way before they
//! re-enter the reverse update.

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// Offset of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;

/// Lower clamp for `lambda`. Small enough that the schedule stays strictly
/// decreasing for any practical number of steps.
const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Cumulative signal fraction `lambda(t)` for `t = 0..=S`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    lambda: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    pub fn new(total_steps: usize, kind: ScheduleKind, eta: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        let lambda = match kind {
            ScheduleKind::Cosine => {
                let s = total_steps as f64;
                let f = |t: f64| {
                    let angle = (t / s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    angle.cos().powi(2)
                };
                let f0 = f(0.0);
                (0..=total_steps)
                    .map(|t| (f(t as f64) / f0).clamp(LAMBDA_FLOOR, 1.0))
                    .collect()
            }
        };
        Ok(NoiseSchedule {
            total_steps,
            lambda,
            eta,
        })
    }

    pub fn cosine(total_steps: usize) -> Result<Self> {
        Self::new(total_steps, ScheduleKind::Cosine, 0.0)
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    /// `lambda(t)`; panics if `t > S`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(Error::invalid(format!(
                "diffusion step {t} outside [0, {}]",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Stochasticity of the `t -> t_prev` hop.
    pub fn gamma(&self, t: usize, t_prev: usize) -> f64 {
        let (lt, lp) = (self.lambda(t), self.lambda(t_prev));
        self.eta * ((1.0 - lp) / (1.0 - lt)).sqrt() * (1.0 - lt / lp).sqrt()
    }
}

/// A `T x C` label matrix in `[-1, 1]` space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSequence {
    values: Tensor,
}

impl ScaledSequence {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Maps a one-hot `T x C` matrix to `2y - 1`.
pub fn scale_labels(one_hot: &Tensor) -> Result<ScaledSequence> {
    if one_hot.rank() != 2 {
        return Err(Error::invalid(format!("labels must be T x C, got {:?}", one_hot.shape())));
    }
    for i in 0..one_hot.rows() {
        let row = one_hot.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(ScaledSequence {
        values: one_hot.map(|v| 2.0 * v - 1.0),
    })
}

/// Maps probabilities (or a one-hot matrix) into `[-1, 1]` via `2p - 1`.
pub fn unscale(probabilities: &Tensor) -> Tensor {
    probabilities.map(|p| 2.0 * p - 1.0)
}

/// `sqrt(lambda(t)) x0 + sqrt(1 - lambda(t)) eps`.
///
/// `t = 0` is accepted and returns `x0` unchanged.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    same_shape("forward_diffuse", x0, eps)?;
    let l = sched.lambda(t);
    let (a, b) = (l.sqrt(), (1.0 - l).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One reverse hop `t -> t_prev` given a clean-sequence estimate in
/// `[-1, 1]` space. With `eta = 0` the `noise` argument has no effect.
pub fn ddim_step(
    y_t: &Tensor,
    x0_pred: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if t_prev >= t || t == 0 {
        return Err(Error::invalid(format!("reverse hop needs t_prev < t, got {t} -> {t_prev}")));
    }
    same_shape("ddim_step", y_t, x0_pred)?;
    same_shape("ddim_step", y_t, noise)?;
    let (lt, lp) = (sched.lambda(t), sched.lambda(t_prev));
    let gamma = sched.gamma(t, t_prev);
    let residual_var = 1.0 - lp - gamma * gamma;
    if residual_var < 0.0 {
        return Err(Error::Domain {
            op: "ddim_step",
            msg: format!("1 - lambda({t_prev}) - gamma^2 = {residual_var} < 0"),
        });
    }
    let (a, b, sl) = (lp.sqrt(), residual_var.sqrt(), lt.sqrt());
    let denom = (1.0 - lt).sqrt();
    let data = y_t
        .data()
        .iter()
        .zip(x0_pred.data())
        .zip(noise.data())
        .map(|((&y, &x), &n)| {
            let eps = (y - sl * x) / denom;
            a * x + b * eps + gamma * n
        })
        .collect();
    Tensor::new(y_t.shape().to_vec(), data)
}

/// Descending `(t, t_prev)` pairs for `steps` reverse hops: `steps` points
/// spaced uniformly on `[1, S]` from `S` down, followed by a hop to `0`.
pub fn inference_grid(total_steps: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > total_steps {
        return Err(Error::invalid(format!(
            "inference steps must lie in [1, {total_steps}], got {steps}"
        )));
    }
    let points: Vec<usize> = if steps == 1 {
        vec![total_steps]
    } else {
        let span = (total_steps - 1) as f64;
        (0..steps)
            .map(|i| (total_steps as f64 - span * i as f64 / (steps - 1) as f64).round() as usize)
            .collect()
    };
    let mut pairs: Vec<(usize, usize)> = points.windows(2).map(|w| (w[0], w[1])).collect();
    pairs.push((*points.last().expect("steps >= 1"), 0));
    Ok(pairs)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.lambda(0), 1.0);
        assert!(s.lambda(1000) < 1e-3);
        assert!(s.lambdas().windows(2).all(|w| w[1] < w[0]));
        assert!(s.lambdas().iter().all(|&l| l > 0.0 && l <= 1.0));
    }

    #[test]
    fn closed_form_at_last_step() {
        // cos^2 of pi/2 is (numerically) zero, so only the floor survives
        let s = NoiseSchedule::cosine(1000).unwrap();
        let f0 = ((COSINE_OFFSET / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let raw = (std::f64::consts::FRAC_PI_2).cos().powi(2) / f0;
        assert_eq!(s.lambda(1000), raw.max(LAMBDA_FLOOR));
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Cosine, 0.0).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Cosine, 1.5).is_err());
    }

    #[test]
    fn scaling_maps() {
        let y = Tensor::matrix(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(scale_labels(&y).unwrap().values().data(), &[-1.0, 1.0, -1.0]);
        let p = Tensor::matrix(&[vec![0.25; 4]]);
        assert_eq!(unscale(&p).data(), &[-0.5; 4]);
        let bad = Tensor::matrix(&[vec![0.5, 0.5]]);
        assert!(scale_labels(&bad).is_err());
        let two = Tensor::matrix(&[vec![1.0, 1.0]]);
        assert!(scale_labels(&two).is_err());
    }

    #[test]
    fn forward_limits() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = Tensor::matrix(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let eps = Tensor::matrix(&[vec![0.3, 0.1], vec![-2.0, 0.7]]);
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Tensor::zeros(&[2, 2]);
        let out = forward_diffuse(&x0, 40, &zero, &s).unwrap();
        assert_eq!(out, x0.map(|v| v * s.lambda(40).sqrt()));
        assert!(forward_diffuse(&x0, 101, &eps, &s).is_err());
    }

    #[test]
    fn perfect_denoiser_endpoint() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = Tensor::matrix(&[vec![1.0, -1.0, -1.0], vec![-1.0, -1.0, 1.0]]);
        let y = Tensor::matrix(&[vec![0.4, -1.2, 2.0], vec![0.0, 0.9, -0.3]]);
        let noise = Tensor::matrix(&[vec![5.0; 3], vec![-5.0; 3]]);
        let out = ddim_step(&y, &x0, 700, 0, &s, &noise).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn deterministic_step_ignores_noise() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let y = Tensor::matrix(&[vec![0.4, -1.2], vec![0.0, 0.9]]);
        let x = Tensor::matrix(&[vec![0.1, -0.2], vec![0.5, -0.9]]);
        let a = ddim_step(&y, &x, 500, 250, &s, &Tensor::zeros(&[2, 2])).unwrap();
        let b = ddim_step(&y, &x, 500, 250, &s, &Tensor::full(&[2, 2], 3.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stochastic_step_uses_noise() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine, 1.0).unwrap();
        let y = Tensor::matrix(&[vec![0.4, -1.2]]);
        let x = Tensor::matrix(&[vec![0.1, -0.2]]);
        let a = ddim_step(&y, &x, 500, 250, &s, &Tensor::zeros(&[1, 2])).unwrap();
        let b = ddim_step(&y, &x, 500, 250, &s, &Tensor::ones(&[1, 2])).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn ddim_rejects_bad_hops() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        assert!(ddim_step(&z, &z, 3, 3, &s, &z).is_err());
        assert!(ddim_step(&z, &z, 11, 3, &s, &z).is_err());
    }

    #[test]
    fn grid_shapes() {
        let g = inference_grid(1000, 8).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0].0, 1000);
        assert_eq!(g[6].1, 1);
        assert_eq!(g[7], (1, 0));
        assert!(g.iter().all(|&(t, p)| p < t));
        assert_eq!(inference_grid(1000, 1).unwrap(), vec![(1000, 0)]);
        assert!(inference_grid(10, 11).is_err());
        assert!(inference_grid(10, 0).is_err());
    }
}
