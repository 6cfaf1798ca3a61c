//! Step-aware conditional denoiser.
//!
//! The encoder turns frame features into a conditioning sequence and an
//! auxiliary phase prediction. The decoder maps a noisy scaled label
//! sequence, a diffusion step and the (masked) condition to per-frame
//! phase probabilities. Both stacks are residual blocks of gated dilated
//! temporal convolutions; block `l` uses dilation `2^l`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::{Tape, Tensor, Value};

const KERNEL: usize = 3;
const CKPT_MAGIC: &[u8; 8] = b"CPKDCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub feat_dim: usize,
    pub classes: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub dec_hidden: usize,
    pub total_steps: usize,
}

impl DenoiserConfig {
    /// Desk-scale defaults: 6 encoder blocks, 4 decoder blocks, 32 channels.
    pub fn new(feat_dim: usize, classes: usize, total_steps: usize) -> Self {
        DenoiserConfig {
            feat_dim,
            classes,
            enc_layers: 6,
            dec_layers: 4,
            hidden: 32,
            dec_hidden: 32,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feat_dim", self.feat_dim),
            ("classes", self.classes),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("hidden", self.hidden),
            ("dec_hidden", self.dec_hidden),
            ("total_steps", self.total_steps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("denoiser {name} must be >= 1")));
            }
        }
        if self.enc_layers > 24 || self.dec_layers > 24 {
            return Err(Error::invalid("at most 24 blocks per stack"));
        }
        Ok(())
    }

    /// Parameter names and shapes in declaration (and checkpoint) order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, c, h, hd) = (self.feat_dim, self.classes, self.hidden, self.dec_hidden);
        let mut out = vec![("enc.in_w".into(), vec![d, h]), ("enc.in_b".into(), vec![h])];
        for l in 0..self.enc_layers {
            out.extend(block_layout(&format!("enc.{l}"), h));
        }
        out.push(("aux_w".into(), vec![h, c]));
        out.push(("aux_b".into(), vec![c]));
        out.push(("dec.y_w".into(), vec![c, hd]));
        out.push(("dec.y_b".into(), vec![hd]));
        out.push(("dec.in_w".into(), vec![hd + h, hd]));
        out.push(("dec.in_b".into(), vec![hd]));
        out.push(("dec.step_w".into(), vec![hd, hd]));
        out.push(("dec.step_b".into(), vec![hd]));
        for l in 0..self.dec_layers {
            out.extend(block_layout(&format!("dec.{l}"), hd));
        }
        out.push(("dec.out_w".into(), vec![hd, c]));
        out.push(("dec.out_b".into(), vec![c]));
        out
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, c, h, hd) = (self.feat_dim, self.classes, self.hidden, self.dec_hidden);
        let block = |w: usize| KERNEL * w * 2 * w + 2 * w + w * w + w;
        (d + 1) * h
            + self.enc_layers * block(h)
            + (h + 1) * c
            + (c + 1) * hd
            + (hd + h + 1) * hd
            + (hd + 1) * hd
            + self.dec_layers * block(hd)
            + (hd + 1) * c
    }

    /// Frames on each side of `i` that can influence encoder output `i`.
    pub fn encoder_reach(&self) -> usize {
        (0..self.enc_layers).map(|l| (KERNEL / 2) << l).sum()
    }
}

fn block_layout(prefix: &str, w: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.conv_w"), vec![KERNEL, w, 2 * w]),
        (format!("{prefix}.conv_b"), vec![2 * w]),
        (format!("{prefix}.out_w"), vec![w, w]),
        (format!("{prefix}.out_b"), vec![w]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    tensors: Vec<Tensor>,
}

impl DenoiserParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("layout shape")
            })
            .collect();
        Ok(DenoiserParams { config, tensors })
    }

    /// Every parameter set to zero (degenerate but valid).
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.layout().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Ok(DenoiserParams { config, tensors })
    }

    pub fn from_flat(config: DenoiserConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        let mut tensors = Vec::new();
        for (_, shape) in config.layout() {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[at..at + n].to_vec())?);
            at += n;
        }
        Ok(DenoiserParams { config, tensors })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Index of the first decoder-side tensor in declaration order.
    pub fn decoder_start(&self) -> usize {
        2 + 4 * self.config.enc_layers + 2
    }

    /// Places every tensor on `tape` as a trainable leaf.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            config: self.config,
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Non-differentiable forward helpers.
    pub fn encode(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.constants(&tape);
        let (cond, aux) = p.encode(tape.constant(features.clone()))?;
        let out = (cond.data().clone(), aux.data().clone());
        Ok(out)
    }

    pub fn decode(&self, y_t: &Tensor, t: usize, cond_masked: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.constants(&tape);
        let out = p.decode(tape.constant(y_t.clone()), t, tape.constant(cond_masked.clone()))?;
        let data = out.data().clone();
        Ok(data)
    }

    fn constants<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            config: self.config,
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let c = &self.config;
        let mut bytes = Vec::with_capacity(8 + 4 * 8 + 8 + 8 * self.param_count());
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for dim in [c.feat_dim, c.classes, c.enc_layers, c.dec_layers, c.hidden, c.dec_hidden, c.total_steps] {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for v in self.tensors.iter().flat_map(|t| t.data()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            msg,
        };
        let header = 8 + 4 + 7 * 4 + 8;
        if bytes.len() < header || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("missing CPKDCKPT header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dims: Vec<usize> = (0..7).map(|k| u32_at(12 + 4 * k) as usize).collect();
        let config = DenoiserConfig {
            feat_dim: dims[0],
            classes: dims[1],
            enc_layers: dims[2],
            dec_layers: dims[3],
            hidden: dims[4],
            dec_hidden: dims[5],
            total_steps: dims[6],
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
        if count != config.param_count() {
            return Err(bad(format!("parameter count {count} does not match dims ({})", config.param_count())));
        }
        if bytes.len() != header + 8 * count {
            return Err(bad(format!("expected {} bytes, found {}", header + 8 * count, bytes.len())));
        }
        let flat: Vec<f64> = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        DenoiserParams::from_flat(config, &flat)
    }
}

/// Sinusoidal embedding of step `t` with `dim` channels.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let arg = t as f64 * freq;
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// Parameters living on a tape, in declaration order.
#[derive(Clone)]
pub struct ParamVars<'t> {
    config: DenoiserConfig,
    vars: Vec<Value<'t>>,
}

impl<'t> ParamVars<'t> {
    /// Splits one flat vector (e.g. a finite-difference probe point) into
    /// parameter views.
    pub fn from_flat_value(config: DenoiserConfig, flat: Value<'t>) -> Result<Self> {
        config.validate()?;
        if flat.shape() != [config.param_count()] {
            return Err(Error::Shape {
                op: "from_flat_value",
                lhs: vec![config.param_count()],
                rhs: flat.shape(),
            });
        }
        let mut at = 0;
        let mut vars = Vec::new();
        for (_, shape) in config.layout() {
            let n: usize = shape.iter().product();
            vars.push(flat.slice(0, at, at + n)?.reshape(&shape)?);
            at += n;
        }
        Ok(ParamVars { config, vars })
    }

    pub fn vars(&self) -> &[Value<'t>] {
        &self.vars
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn tape(&self) -> &'t Tape {
        self.vars[0].tape()
    }

    fn block(&self, x: Value<'t>, first: usize, dilation: usize) -> Result<Value<'t>> {
        let w = x.shape()[1];
        let v = &self.vars[first..first + 4];
        let a = self.tape().conv1d(x, v[0], dilation)?.add(v[1])?;
        let gate = a.slice(1, 0, w)?.tanh().mul(a.slice(1, w, 2 * w)?.sigmoid())?;
        x.add(gate.matmul(v[2])?.add(v[3])?)
    }

    /// Returns `(cond: T x H, aux_probs: T x C)`.
    pub fn encode(&self, features: Value<'t>) -> Result<(Value<'t>, Value<'t>)> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.config.feat_dim || shape[0] == 0 {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![0, self.config.feat_dim],
                rhs: shape,
            });
        }
        if !features.data().all_finite() {
            return Err(Error::NonFinite("encoder input features".into()));
        }
        let mut h = features.matmul(self.vars[0])?.add(self.vars[1])?;
        for l in 0..self.config.enc_layers {
            h = self.block(h, 2 + 4 * l, 1 << l)?;
        }
        let aux_at = 2 + 4 * self.config.enc_layers;
        let aux = h.matmul(self.vars[aux_at])?.add(self.vars[aux_at + 1])?.softmax(1)?;
        Ok((h, aux))
    }

    /// Phase probabilities `T x C` for noisy labels `y_t` at step `t`.
    pub fn decode(&self, y_t: Value<'t>, t: usize, cond_masked: Value<'t>) -> Result<Value<'t>> {
        let c = &self.config;
        if t == 0 || t > c.total_steps {
            return Err(Error::invalid(format!("step {t} outside [1, {}]", c.total_steps)));
        }
        let (ys, cs) = (y_t.shape(), cond_masked.shape());
        if ys.len() != 2 || ys[1] != c.classes || cs.len() != 2 || cs[1] != c.hidden || cs[0] != ys[0] {
            return Err(Error::Shape {
                op: "decode",
                lhs: ys,
                rhs: cs,
            });
        }
        let base = 2 + 4 * c.enc_layers + 2;
        let v = &self.vars;
        let y_proj = y_t.matmul(v[base])?.add(v[base + 1])?;
        let joined = self.tape().concat(&[y_proj, cond_masked], 1)?;
        let emb = self
            .tape()
            .constant(Tensor::new(vec![1, c.dec_hidden], step_embedding(t, c.dec_hidden))?);
        let step = emb.matmul(v[base + 4])?.add(v[base + 5])?;
        let mut h = joined.matmul(v[base + 2])?.add(v[base + 3])?.add(step)?;
        let blocks = base + 6;
        for l in 0..c.dec_layers {
            h = self.block(h, blocks + 4 * l, 1 << l)?;
        }
        let out = blocks + 4 * c.dec_layers;
        h.matmul(v[out])?.add(v[out + 1])?.softmax(1)
    }
}
