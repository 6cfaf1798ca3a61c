//! Training losses on predicted phase probabilities `P` (`T x C`, rows
//! summing to one) and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logic::{logic_loss, Formula};
use crate::tensor_core::{Tensor, Value};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Squared log-ratio clip for the smoothing loss (`4^2`).
pub const SMOOTH_CLIP: f64 = 16.0;
/// Boundary probabilities are kept inside `[EPS, 1 - EPS]`.
pub const BOUNDARY_EPS: f64 = 1e-7;
/// Default Gaussian width (frames) for soft boundary targets.
pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ce: f64,
    pub smo: f64,
    pub bd: f64,
    pub pl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 0.5,
            smo: 0.025,
            bd: 0.1,
            pl: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            ce: 0.0,
            smo: 0.0,
            bd: 0.0,
            pl: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ce", self.ce), ("smo", self.smo), ("bd", self.bd), ("pl", self.pl)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Gaussian-smoothed change indicator between adjacent frames (`T - 1`
/// entries), scaled so an isolated change peaks at exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTargets {
    soft: Vec<f64>,
}

impl BoundaryTargets {
    pub fn soft(&self) -> &[f64] {
        &self.soft
    }
}

fn check_probs(op: &'static str, p: &Value<'_>, min_frames: usize) -> Result<(usize, usize)> {
    let shape = p.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("{op}: probabilities must be T x C, got {shape:?}")));
    }
    if shape[0] < min_frames {
        return Err(Error::invalid(format!("{op}: needs at least {min_frames} frames, got {}", shape[0])));
    }
    Ok((shape[0], shape[1]))
}

/// `(1 / (T C)) Σ_i Σ_c -Y0[i,c] log P[i,c]`.
pub fn ce_loss<'t>(p: Value<'t>, y0: &Tensor) -> Result<Value<'t>> {
    let (t, c) = check_probs("ce_loss", &p, 1)?;
    if y0.shape() != [t, c] {
        return Err(Error::Shape {
            op: "ce_loss",
            lhs: vec![t, c],
            rhs: y0.shape().to_vec(),
        });
    }
    let logp = p.clamp(PROB_FLOOR, 1.0).ln()?;
    let picked = logp.mul(p.tape().constant(y0.clone()))?.sum();
    Ok(picked.scale(-1.0 / (t * c) as f64))
}

/// Mean over `(T - 1) C` of `min((log P[i,c] - log P[i+1,c])^2, 16)`.
pub fn smooth_loss(p: Value<'_>) -> Result<Value<'_>> {
    let (t, _) = check_probs("smooth_loss", &p, 2)?;
    let logp = p.clamp(PROB_FLOOR, 1.0).ln()?;
    let d = logp.slice(0, 0, t - 1)?.sub(logp.slice(0, 1, t)?)?;
    Ok(d.mul(d)?.clamp(0.0, SMOOTH_CLIP).mean())
}

fn reflect(i: isize, n: usize) -> usize {
    // half-sample symmetric: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Soft boundary targets from a label sequence.
pub fn boundary_targets(labels: &[usize], sigma: f64) -> Result<BoundaryTargets> {
    if labels.len() < 2 {
        return Err(Error::invalid("boundary targets need at least 2 frames"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let hard: Vec<f64> = labels.windows(2).map(|w| f64::from(u8::from(w[0] != w[1]))).collect();
    let n = hard.len();
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let soft = (0..n)
        .map(|i| {
            let v: f64 = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, w)| w * hard[reflect(i as isize + d, n)])
                .sum();
            v.min(1.0)
        })
        .collect();
    Ok(BoundaryTargets { soft })
}

/// Binary cross-entropy between `b_i = 1 - <P_i, P_{i+1}>` and the targets.
pub fn boundary_loss<'t>(p: Value<'t>, targets: &BoundaryTargets) -> Result<Value<'t>> {
    let (t, _) = check_probs("boundary_loss", &p, 2)?;
    if targets.soft.len() != t - 1 {
        return Err(Error::Shape {
            op: "boundary_loss",
            lhs: vec![t - 1],
            rhs: vec![targets.soft.len()],
        });
    }
    let dot = p.slice(0, 0, t - 1)?.mul(p.slice(0, 1, t)?)?.sum_axis(1)?;
    let b = dot.neg().add_scalar(1.0).clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS);
    let tape = p.tape();
    let target = tape.constant(Tensor::vector(targets.soft.clone()));
    let not_target = tape.constant(Tensor::vector(targets.soft.iter().map(|v| 1.0 - v).collect()));
    let pos = target.mul(b.ln()?)?;
    let neg = not_target.mul(b.neg().add_scalar(1.0).ln()?)?;
    Ok(pos.add(neg)?.mean().neg())
}

/// Weighted sum of the four losses. Terms with zero weight are skipped.
pub fn total_loss<'t>(
    p: Value<'t>,
    y0: &Tensor,
    targets: &BoundaryTargets,
    formulas: &[Formula],
    weights: &LossWeights,
    gamma: f64,
) -> Result<Value<'t>> {
    weights.validate()?;
    let mut terms = Vec::new();
    if weights.ce > 0.0 {
        terms.push(ce_loss(p, y0)?.scale(weights.ce));
    }
    if weights.smo > 0.0 {
        terms.push(smooth_loss(p)?.scale(weights.smo));
    }
    if weights.bd > 0.0 {
        terms.push(boundary_loss(p, targets)?.scale(weights.bd));
    }
    if weights.pl > 0.0 {
        terms.push(logic_loss(formulas, p, gamma)?.scale(weights.pl));
    }
    sum_terms(p, terms)
}

/// Supervision for the encoder's auxiliary head: cross-entropy, smoothing
/// and logic terms only.
pub fn auxiliary_loss<'t>(
    p: Value<'t>,
    y0: &Tensor,
    formulas: &[Formula],
    weights: &LossWeights,
    gamma: f64,
) -> Result<Value<'t>> {
    let aux = LossWeights { bd: 0.0, ..*weights };
    let dummy = BoundaryTargets { soft: Vec::new() };
    total_loss(p, y0, &dummy, formulas, &aux, gamma)
}

fn sum_terms<'t>(p: Value<'t>, terms: Vec<Value<'t>>) -> Result<Value<'t>> {
    let mut iter = terms.into_iter();
    let Some(mut acc) = iter.next() else {
        return Ok(p.tape().scalar(0.0));
    };
    for t in iter {
        acc = acc.add(t)?;
    }
    Ok(acc)
}
