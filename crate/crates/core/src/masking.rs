//! Conditional masks that gate the conditioning features frame by frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor_core::{Tensor, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskKind {
    /// All frames visible.
    NoMask,
    /// All frames hidden.
    Global,
    /// Frames near phase boundaries hidden.
    Transition,
    /// Every frame of one phase hidden.
    Relation,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::NoMask, MaskKind::Global, MaskKind::Transition, MaskKind::Relation];

    /// One-letter code used in configs: `N`, `G`, `T`, `R`.
    pub fn code(self) -> char {
        match self {
            MaskKind::NoMask => 'N',
            MaskKind::Global => 'G',
            MaskKind::Transition => 'T',
            MaskKind::Relation => 'R',
        }
    }

    pub fn from_code(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'N' => Ok(MaskKind::NoMask),
            'G' => Ok(MaskKind::Global),
            'T' => Ok(MaskKind::Transition),
            'R' => Ok(MaskKind::Relation),
            _ => Err(Error::invalid(format!("unknown mask code {c:?} (expected N, G, T or R)"))),
        }
    }

    /// Parses a code string such as `"NGTR"`.
    pub fn parse_set(codes: &str) -> Result<Vec<MaskKind>> {
        let mut out: Vec<MaskKind> = codes
            .chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .map(MaskKind::from_code)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::invalid("empty mask strategy set"));
        }
        Ok(out)
    }
}

/// Per-frame binary gate; `true` keeps the frame's features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
    kind: MaskKind,
}

impl Mask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of hidden frames.
    pub fn masked(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    /// The mask as a `T x 1` column of zeros and ones.
    pub fn column(&self) -> Tensor {
        Tensor::from_fn2(self.bits.len(), 1, |i, _| f64::from(u8::from(self.bits[i])))
    }

    /// `features ⊙ M`, broadcasting the mask over the feature dimension.
    pub fn apply<'t>(&self, features: Value<'t>) -> Result<Value<'t>> {
        let rows = features.shape()[0];
        if rows != self.bits.len() {
            return Err(Error::Shape {
                op: "mask",
                lhs: features.shape(),
                rhs: vec![self.bits.len()],
            });
        }
        match self.kind {
            MaskKind::NoMask => Ok(features),
            _ => features.mul(features.tape().constant(self.column())),
        }
    }

    /// Same as [`Mask::apply`] on a plain tensor.
    pub fn apply_tensor(&self, features: &Tensor) -> Result<Tensor> {
        if features.rows() != self.bits.len() {
            return Err(Error::Shape {
                op: "mask",
                lhs: features.shape().to_vec(),
                rhs: vec![self.bits.len()],
            });
        }
        let c = features.cols();
        Ok(Tensor::from_fn2(features.rows(), c, |i, j| {
            if self.bits[i] {
                features.at(i, j)
            } else {
                0.0
            }
        }))
    }
}

fn check_len(frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::invalid("mask length must be >= 1"));
    }
    Ok(())
}

pub fn mask_none(frames: usize) -> Result<Mask> {
    check_len(frames)?;
    Ok(Mask {
        bits: vec![true; frames],
        kind: MaskKind::NoMask,
    })
}

pub fn mask_global(frames: usize) -> Result<Mask> {
    check_len(frames)?;
    Ok(Mask {
        bits: vec![false; frames],
        kind: MaskKind::Global,
    })
}

/// Keeps frame `i` iff `soft_boundary[i] < 0.5`.
pub fn mask_transition(soft_boundary: &[f64]) -> Result<Mask> {
    check_len(soft_boundary.len())?;
    if let Some(bad) = soft_boundary.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("soft boundary value {bad} outside [0, 1]")));
    }
    Ok(Mask {
        bits: soft_boundary.iter().map(|&b| b < 0.5).collect(),
        kind: MaskKind::Transition,
    })
}

/// Hides exactly the frames labelled `chosen`.
pub fn mask_relation(labels: &[usize], classes: usize, chosen: usize) -> Result<Mask> {
    check_len(labels.len())?;
    if chosen >= classes {
        return Err(Error::invalid(format!("class {chosen} out of range for {classes} classes")));
    }
    Ok(Mask {
        bits: labels.iter().map(|&l| l != chosen).collect(),
        kind: MaskKind::Relation,
    })
}

/// Per-frame boundary strength from the `T - 1` pairwise targets: frame
/// `i` takes the larger of the targets on its left and right edges.
pub fn frame_boundary(pairwise: &[f64]) -> Vec<f64> {
    let frames = pairwise.len() + 1;
    (0..frames)
        .map(|i| {
            let left = if i > 0 { pairwise[i - 1] } else { 0.0 };
            let right = pairwise.get(i).copied().unwrap_or(0.0);
            left.max(right)
        })
        .collect()
}

/// Draws a mask kind uniformly from `allowed`; relation masks pick a class
/// uniformly among those present in `labels`.
pub fn sample_mask<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    soft_boundary: &[f64],
    allowed: &[MaskKind],
    rng: &mut R,
) -> Result<Mask> {
    if allowed.is_empty() {
        return Err(Error::invalid("no mask strategies to sample from"));
    }
    if soft_boundary.len() != labels.len() {
        return Err(Error::invalid(format!(
            "soft boundary has {} frames, labels have {}",
            soft_boundary.len(),
            labels.len()
        )));
    }
    match allowed[rng.random_range(0..allowed.len())] {
        MaskKind::NoMask => mask_none(labels.len()),
        MaskKind::Global => mask_global(labels.len()),
        MaskKind::Transition => mask_transition(soft_boundary),
        MaskKind::Relation => {
            let mut present: Vec<usize> = labels.to_vec();
            present.sort_unstable();
            present.dedup();
            let chosen = present[rng.random_range(0..present.len())];
            mask_relation(labels, classes, chosen)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::Tape;

    #[test]
    fn fixed_masks() {
        assert_eq!(mask_none(5).unwrap().bits(), &[true; 5]);
        assert_eq!(mask_global(3).unwrap().bits(), &[false; 3]);
        assert!(mask_none(0).is_err());
    }

    #[test]
    fn transition_thresholds() {
        let m = mask_transition(&[0.0, 0.0, 0.9, 0.2]).unwrap();
        assert_eq!(m.bits(), &[true, true, false, true]);
        assert_eq!(mask_transition(&[0.0; 4]).unwrap().bits(), &[true; 4]);
        assert!(mask_transition(&[0.0, 1.2]).is_err());
        assert!(mask_transition(&[-0.1]).is_err());
        // exactly 0.5 is a boundary frame
        assert_eq!(mask_transition(&[0.5]).unwrap().bits(), &[false]);
    }

    #[test]
    fn relation_masks() {
        let labels = [0, 0, 1, 1];
        assert_eq!(mask_relation(&labels, 3, 1).unwrap().bits(), &[true, true, false, false]);
        assert_eq!(mask_relation(&labels, 3, 2).unwrap().bits(), &[true; 4]);
        assert_eq!(mask_relation(&[1, 1], 3, 1).unwrap().bits(), &[false, false]);
        assert!(mask_relation(&labels, 3, 3).is_err());
    }

    #[test]
    fn gating_values() {
        let tape = Tape::new();
        let f = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let none = mask_none(2).unwrap().apply(f).unwrap();
        assert_eq!(*none.data(), *f.data());
        let global = mask_global(2).unwrap().apply(f).unwrap();
        assert!(global.data().data().iter().all(|&v| v == 0.0));
        let wrong = mask_none(3).unwrap();
        assert!(wrong.apply(f).is_err());
    }

    #[test]
    fn codes_round_trip() {
        assert_eq!(MaskKind::parse_set("ngtr").unwrap(), MaskKind::ALL.to_vec());
        assert_eq!(MaskKind::parse_set("N,G").unwrap(), vec![MaskKind::NoMask, MaskKind::Global]);
        assert!(MaskKind::parse_set("X").is_err());
        assert!(MaskKind::parse_set("").is_err());
    }

    #[test]
    fn frame_boundary_takes_both_edges() {
        assert_eq!(frame_boundary(&[0.0, 1.0, 0.2]), vec![0.0, 1.0, 1.0, 0.2]);
    }
}
