//! Temporal-logic constraints over phase sequences.
//!
//! Formulas use `True`, `False`, phase atoms, `!`, `|`, `&`, and the
//! temporal operators `X` (next), `F` (eventually), `W` (weak until) and
//! `S` (since). [`eval_soft`] gives a differentiable score whose sign tracks
//! satisfaction; [`eval_hard`] is the exact boolean semantics.

mod formula;
mod hard;
mod parser;
mod soft;

use rand::Rng;

pub use formula::{Formula, FormulaBuilder, Node, NodeId};
pub use hard::eval_hard;
pub use parser::{parse_formula, parse_formula_file};
pub use soft::{eval_soft, logic_loss, ScoreMatrix, CONST_SCORE};

use crate::error::{Error, Result};

/// Default temperature for the soft evaluator during training.
pub const DEFAULT_GAMMA: f64 = 0.5;

/// The bundled ESD rule file.
pub const DEFAULT_RULES_TEXT: &str = include_str!("../../rules/esd_default.cpkl");

/// Ordered phase names; phase `i` is written `P{i+1}` in formulas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseTable {
    names: Vec<String>,
}

const RESERVED: [&str; 6] = ["X", "F", "W", "S", "True", "False"];

impl PhaseTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            let ok = !n.is_empty()
                && n.bytes().next().is_some_and(|c| c.is_ascii_alphabetic() || c == b'_')
                && n.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'_');
            if !ok || RESERVED.contains(&n.as_str()) {
                return Err(Error::invalid(format!("invalid phase name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate phase name {n:?}")));
            }
        }
        Ok(PhaseTable { names })
    }

    /// The eight ESD phases.
    pub fn esd() -> Self {
        Self::new([
            "Preparation",
            "Estimation",
            "Marking",
            "Injection",
            "Incision",
            "ESD",
            "Vessel_treatment",
            "Clips",
        ])
        .expect("valid names")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::invalid(format!("phase table has no phase named {name:?}")))
    }
}

/// The three clinical ordering rules as formulas over `table`.
///
/// I: no Injection/Incision/ESD/Vessel_treatment/Clips until Marking and
/// until Estimation. II: no Vessel_treatment/Clips until each of
/// Injection/Incision/ESD. III: any of Marking/Injection/Incision/ESD
/// occurring implies each of the others occurs.
pub fn default_rules(table: &PhaseTable) -> Result<Vec<Formula>> {
    let idx = |names: &[&str]| names.iter().map(|n| table.require(n)).collect::<Result<Vec<_>>>();
    let mut out = Vec::new();
    let precedence = |q: usize, r: usize| {
        let mut b = FormulaBuilder::new();
        let (q, r) = (b.atom(q), b.atom(r));
        let nq = b.not(q);
        let root = b.weak_until(nq, r);
        b.finish(root)
    };
    for q in idx(&["Injection", "Incision", "ESD", "Vessel_treatment", "Clips"])? {
        for r in idx(&["Marking", "Estimation"])? {
            out.push(precedence(q, r));
        }
    }
    for q in idx(&["Vessel_treatment", "Clips"])? {
        for r in idx(&["Injection", "Incision", "ESD"])? {
            out.push(precedence(q, r));
        }
    }
    let group = idx(&["Marking", "Injection", "Incision", "ESD"])?;
    for &a in &group {
        for &c in &group {
            if a == c {
                continue;
            }
            let mut b = FormulaBuilder::new();
            let (pa, pc) = (b.atom(a), b.atom(c));
            let (fa, fc) = (b.eventually(pa), b.eventually(pc));
            let nfa = b.not(fa);
            let root = b.or(nfa, fc);
            out.push(b.finish(root));
        }
    }
    Ok(out)
}

/// Parses the bundled rule file against `table`.
pub fn bundled_rules(table: &PhaseTable) -> Result<Vec<Formula>> {
    parse_formula_file(DEFAULT_RULES_TEXT, Some(table))
}

/// Random formula of depth at most `max_depth` over `classes` atoms.
pub fn random_formula<R: Rng + ?Sized>(rng: &mut R, max_depth: usize, classes: usize) -> Formula {
    fn go<R: Rng + ?Sized>(b: &mut FormulaBuilder, rng: &mut R, depth: usize, classes: usize) -> NodeId {
        if depth == 0 || rng.random_bool(0.25) {
            return if rng.random_bool(0.1) {
                b.constant(rng.random_bool(0.5))
            } else {
                b.atom(rng.random_range(0..classes))
            };
        }
        match rng.random_range(0..8) {
            0 => {
                let a = go(b, rng, depth - 1, classes);
                b.not(a)
            }
            1 => {
                let a = go(b, rng, depth - 1, classes);
                b.next(a)
            }
            2 => {
                let a = go(b, rng, depth - 1, classes);
                b.eventually(a)
            }
            k => {
                let l = go(b, rng, depth - 1, classes);
                let r = go(b, rng, depth - 1, classes);
                match k {
                    3 | 4 => b.or(l, r),
                    5 => b.and(l, r),
                    6 => b.weak_until(l, r),
                    _ => b.since(l, r),
                }
            }
        }
    }
    let mut b = FormulaBuilder::new();
    let root = go(&mut b, rng, max_depth, classes);
    b.finish(root)
}

/// Indices of formulas not satisfied at frame 0 by `labels`.
pub fn violated(formulas: &[Formula], labels: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, f) in formulas.iter().enumerate() {
        if !eval_hard(f, labels, 0)? {
            out.push(i);
        }
    }
    Ok(out)
}
