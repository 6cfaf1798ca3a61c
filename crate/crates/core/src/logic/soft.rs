use std::collections::HashMap;

use super::formula::{Formula, Node, NodeId};
use crate::error::{Error, Result};
use crate::tensor_core::{Tape, Tensor, Value};

/// Score assigned to the constants `True` / `False` (as `+K` / `-K`).
/// Dominates any atom score, which lies in `[-1, 1]`.
pub const CONST_SCORE: f64 = 1e4;

/// Per-frame, per-class satisfaction scores; positive means "asserted".
#[derive(Clone, Copy)]
pub struct ScoreMatrix<'t> {
    scores: Value<'t>,
    frames: usize,
    classes: usize,
}

impl<'t> ScoreMatrix<'t> {
    /// Wraps a `T x C` value of raw scores.
    pub fn from_scores(scores: Value<'t>) -> Result<Self> {
        let shape = scores.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid(format!("scores must be a non-empty T x C matrix, got {shape:?}")));
        }
        Ok(ScoreMatrix {
            scores,
            frames: shape[0],
            classes: shape[1],
        })
    }

    /// `2P - 1`: a class is asserted where its probability exceeds one half.
    pub fn from_probabilities(p: Value<'t>) -> Result<Self> {
        Self::from_scores(p.scale(2.0).add_scalar(-1.0))
    }

    /// `+1` at each frame's label, `-1` elsewhere (a constant).
    pub fn from_labels(tape: &'t Tape, labels: &[usize], classes: usize) -> Result<Self> {
        let t = Tensor::from_fn2(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { -1.0 });
        Self::from_scores(tape.constant(t))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn value(&self) -> Value<'t> {
        self.scores
    }
}

struct SoftEval<'f, 't> {
    formula: &'f Formula,
    scores: ScoreMatrix<'t>,
    gamma: f64,
    memo: HashMap<(NodeId, usize), Value<'t>>,
}

impl<'t> SoftEval<'_, 't> {
    fn tape(&self) -> &'t Tape {
        self.scores.scores.tape()
    }

    /// Smallest `k >= from` with a positive score for `id`.
    fn first_positive(&mut self, id: NodeId, from: usize) -> Result<Option<usize>> {
        for k in from..self.scores.frames {
            if self.eval(id, k)?.item() > 0.0 {
                return Ok(Some(k));
            }
        }
        Ok(None)
    }

    fn window(&mut self, id: NodeId, range: std::ops::Range<usize>) -> Result<Vec<Value<'t>>> {
        range.map(|k| self.eval(id, k)).collect()
    }

    fn eval(&mut self, id: NodeId, t: usize) -> Result<Value<'t>> {
        if let Some(&v) = self.memo.get(&(id, t)) {
            return Ok(v);
        }
        let last = self.scores.frames - 1;
        let tape = self.tape();
        let v = match self.formula.node(id) {
            Node::Const(true) => tape.scalar(CONST_SCORE),
            Node::Const(false) => tape.scalar(-CONST_SCORE),
            Node::Atom(p) => self.scores.scores.element(t * self.scores.classes + p)?,
            Node::Not(a) => self.eval(a, t)?.neg(),
            Node::Or(a, b) => {
                let xs = [self.eval(a, t)?, self.eval(b, t)?];
                tape.soft_max(&xs, self.gamma)?
            }
            Node::And(a, b) => {
                let xs = [self.eval(a, t)?, self.eval(b, t)?];
                tape.soft_min(&xs, self.gamma)?
            }
            Node::Next(a) => {
                if t < last {
                    self.eval(a, t + 1)?
                } else {
                    tape.scalar(-CONST_SCORE)
                }
            }
            Node::Eventually(a) => {
                let xs = self.window(a, t..last + 1)?;
                tape.soft_max(&xs, self.gamma)?
            }
            Node::WeakUntil(a, b) => {
                let k = self.first_positive(b, t)?.unwrap_or(last);
                let xs = self.window(a, t..k + 1)?;
                tape.soft_min(&xs, self.gamma)?
            }
            Node::Since(a, b) => match self.first_positive(b, t)? {
                Some(k) => {
                    let xs = self.window(a, k..last + 1)?;
                    tape.soft_min(&xs, self.gamma)?
                }
                None => tape.scalar(CONST_SCORE),
            },
        };
        self.memo.insert((id, t), v);
        Ok(v)
    }
}

fn check_atoms(formula: &Formula, classes: usize) -> Result<()> {
    if let Some(p) = formula.max_atom() {
        if p >= classes {
            return Err(Error::invalid(format!(
                "formula {formula} references P{} but only {classes} classes exist",
                p + 1
            )));
        }
    }
    Ok(())
}

/// Differentiable satisfaction score of `formula` at frame `t`.
///
/// `W` and `S` pick their window end with a hard sign test on the second
/// operand, so gradients flow only through the first operand's window and
/// the score is not differentiable where that selection flips.
pub fn eval_soft<'t>(formula: &Formula, scores: &ScoreMatrix<'t>, t: usize, gamma: f64) -> Result<Value<'t>> {
    if t >= scores.frames {
        return Err(Error::invalid(format!("frame {t} outside [0, {})", scores.frames)));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {gamma}")));
    }
    check_atoms(formula, scores.classes)?;
    let mut ev = SoftEval {
        formula,
        scores: *scores,
        gamma,
        memo: HashMap::new(),
    };
    ev.eval(formula.root(), t)
}

/// Mean over formulas of `softplus(-f_0(φ, 2P - 1))`.
pub fn logic_loss<'t>(formulas: &[Formula], probabilities: Value<'t>, gamma: f64) -> Result<Value<'t>> {
    if formulas.is_empty() {
        return Err(Error::invalid("logic loss needs at least one formula"));
    }
    let scores = ScoreMatrix::from_probabilities(probabilities)?;
    let mut total: Option<Value<'t>> = None;
    for f in formulas {
        let term = eval_soft(f, &scores, 0, gamma)?.neg().softplus();
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / formulas.len() as f64))
}
