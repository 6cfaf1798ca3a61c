//! Finite-difference checks of the training objective, one component at a
//! time, on small random instances (`T <= 20`, `C <= 4`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{DenoiserConfig, DenoiserParams, ParamVars};
use crate::error::{Error, Result};
use crate::logic::{logic_loss, random_formula, Formula};
use crate::losses::{boundary_loss, boundary_targets, ce_loss, smooth_loss, total_loss, LossWeights};
use crate::labels::one_hot;
use crate::tensor_core::{grad_check, Tensor};

/// Central-difference step used by the suite.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Ce,
    Smooth,
    Boundary,
    Logic,
    Total,
    Denoiser,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Ce,
        Component::Smooth,
        Component::Boundary,
        Component::Logic,
        Component::Total,
        Component::Denoiser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Ce => "ce",
            Component::Smooth => "smooth",
            Component::Boundary => "boundary",
            Component::Logic => "logic",
            Component::Total => "total",
            Component::Denoiser => "denoiser",
        }
    }

    /// Accepts a component name, or `losses` / `all` for groups.
    pub fn parse_group(name: &str) -> Result<Vec<Component>> {
        match name {
            "all" => Ok(Self::ALL.to_vec()),
            "losses" => Ok(Self::ALL[..5].to_vec()),
            _ => Self::ALL
                .iter()
                .copied()
                .find(|c| c.name() == name)
                .map(|c| vec![c])
                .ok_or_else(|| Error::invalid(format!("unknown grad-check component {name:?}"))),
        }
    }
}

struct Instance {
    frames: usize,
    classes: usize,
    labels: Vec<usize>,
    logits: Vec<f64>,
    formulas: Vec<Formula>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(2..=20);
    let classes = rng.random_range(2..=4);
    let mut labels = Vec::with_capacity(frames);
    let mut current = rng.random_range(0..classes);
    for _ in 0..frames {
        if rng.random_bool(0.2) {
            current = rng.random_range(0..classes);
        }
        labels.push(current);
    }
    let logits = (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
    let formulas = (0..3).map(|_| random_formula(&mut rng, 3, classes)).collect();
    Instance {
        frames,
        classes,
        labels,
        logits,
        formulas,
    }
}

/// Largest relative gradient error for `component` on the instance drawn
/// from `seed`.
pub fn check(component: Component, seed: u64) -> Result<f64> {
    if component == Component::Denoiser {
        return check_denoiser(seed);
    }
    let inst = instance(seed);
    let (t, c) = (inst.frames, inst.classes);
    let y0 = one_hot(&inst.labels, c)?;
    let targets = boundary_targets(&inst.labels, 2.0)?;
    let weights = LossWeights {
        ce: 0.5,
        smo: 0.25,
        bd: 0.1,
        pl: 0.1,
    };
    grad_check(
        |_, x| {
            let p = x.reshape(&[t, c])?.softmax(1)?;
            match component {
                Component::Ce => ce_loss(p, &y0),
                Component::Smooth => smooth_loss(p),
                Component::Boundary => boundary_loss(p, &targets),
                Component::Logic => logic_loss(&inst.formulas, p, 0.5),
                _ => total_loss(p, &y0, &targets, &inst.formulas, &weights, 0.5),
            }
        },
        &inst.logits,
        FD_STEP,
    )
}

fn check_denoiser(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DenoiserConfig {
        feat_dim: 4,
        classes: 3,
        enc_layers: 2,
        dec_layers: 2,
        hidden: 4,
        dec_hidden: 4,
        total_steps: 100,
    };
    let frames = 8;
    let params = DenoiserParams::init(cfg, seed)?;
    let features = Tensor::from_fn2(frames, 4, |_, _| rng.random_range(-1.0..1.0));
    let y_t = Tensor::from_fn2(frames, 3, |_, _| rng.random_range(-1.5..1.5));
    let labels: Vec<usize> = (0..frames).map(|i| (i * 3) / frames).collect();
    let y0 = one_hot(&labels, 3)?;
    let targets = boundary_targets(&labels, 2.0)?;
    let step = rng.random_range(1..=100);
    let keep: Vec<f64> = (0..frames).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect();
    let keep = Tensor::new(vec![frames, 1], keep)?;
    grad_check(
        |tape, x| {
            let vars = ParamVars::from_flat_value(cfg, x)?;
            let (cond, aux) = vars.encode(tape.constant(features.clone()))?;
            let masked = cond.mul(tape.constant(keep.clone()))?;
            let p = vars.decode(tape.constant(y_t.clone()), step, masked)?;
            let main = total_loss(p, &y0, &targets, &[], &LossWeights { pl: 0.0, ..LossWeights::default() }, 0.5)?;
            main.add(ce_loss(aux, &y0)?)
        },
        &params.flatten(),
        FD_STEP,
    )
}
