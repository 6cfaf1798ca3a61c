//! Training, sampling and experiment orchestration.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::labels::one_hot;
use crate::logic::{default_rules, Formula, PhaseTable, DEFAULT_GAMMA};
use crate::losses::{auxiliary_loss, boundary_targets, total_loss, BoundaryTargets, LossWeights, DEFAULT_SIGMA};
use crate::masking::{frame_boundary, mask_global, mask_none, sample_mask, MaskKind};
use crate::metrics::{EvalReport, KvReport, Ribbon};
use crate::schedule::{ddim_step, forward_diffuse, inference_grid, scale_labels, unscale, NoiseSchedule};
use crate::synth::{gen_dataset, read_features, read_labels, Manifest, Split, SplitSizes, WorkflowSpec, MANIFEST_NAME};
use crate::tensor_core::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 4,
            hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn denoiser(&self, feat_dim: usize, classes: usize, total_steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            feat_dim,
            classes,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            hidden: self.hidden,
            dec_hidden: self.hidden,
            total_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without a validation Jaccard improvement before stopping.
    pub patience: usize,
    pub weights: LossWeights,
    pub gamma: f64,
    pub sigma_boundary: f64,
    pub seed: u64,
    /// Mask codes drawn from during training, e.g. `"NGTR"`.
    pub mask_strategies: String,
    pub aux_supervision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            lr: 5e-4,
            batch: 4,
            epochs: 60,
            patience: 10,
            weights: LossWeights::default(),
            gamma: DEFAULT_GAMMA,
            sigma_boundary: DEFAULT_SIGMA,
            seed: 0,
            mask_strategies: "NGTR".into(),
            aux_supervision: true,
        }
    }
}

impl TrainConfig {
    pub fn masks(&self) -> Result<Vec<MaskKind>> {
        MaskKind::parse_set(&self.mask_strategies)
    }

    pub fn validate(&self, infer_steps: usize) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if self.total_steps < infer_steps {
            return Err(Error::invalid(format!(
                "total_steps {} is smaller than inference steps {infer_steps}",
                self.total_steps
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.gamma > 0.0) || !(self.sigma_boundary > 0.0) {
            return Err(Error::invalid("gamma and sigma_boundary must be > 0"));
        }
        self.weights.validate()?;
        self.masks()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    /// `"N"` normally; `"G"` runs the global-mask analysis.
    pub mask: String,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            steps: 8,
            eta: 0.0,
            seed: 0,
            mask: "N".into(),
        }
    }
}

impl InferConfig {
    pub fn mask_kind(&self) -> Result<MaskKind> {
        match MaskKind::parse_set(&self.mask)?.as_slice() {
            [k @ (MaskKind::NoMask | MaskKind::Global)] => Ok(*k),
            _ => Err(Error::invalid(format!(
                "inference mask must be N or G, got {:?}",
                self.mask
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("inference steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        self.mask_kind()?;
        Ok(())
    }
}

/// One labelled sequence ready for training.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub labels: Vec<usize>,
    pub y0: Tensor,
    pub features: Tensor,
    pub targets: BoundaryTargets,
    /// Per-frame soft boundary used by the transition mask.
    pub frame_boundary: Vec<f64>,
}

impl Sample {
    pub fn new(id: impl Into<String>, labels: Vec<usize>, classes: usize, features: Tensor, sigma: f64) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid("labels and features disagree on frame count"));
        }
        let targets = boundary_targets(&labels, sigma)?;
        let frame_boundary = frame_boundary(targets.soft());
        Ok(Sample {
            id: id.into(),
            y0: one_hot(&labels, classes)?,
            labels,
            features,
            targets,
            frame_boundary,
        })
    }
}

/// A dataset directory read through its manifest. Every file opened is
/// recorded so callers can audit which splits were touched.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    log: Mutex<Vec<PathBuf>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_NAME))?;
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn access_log(&self) -> Vec<PathBuf> {
        self.log.lock().expect("log lock").clone()
    }

    fn touch(&self, path: &Path) {
        self.log.lock().expect("log lock").push(path.to_path_buf());
    }

    pub fn load(&self, split: Split, sigma: f64) -> Result<Vec<Sample>> {
        let m = &self.manifest;
        self.manifest
            .split(split)
            .map(|e| {
                let fp = self.root.join(&e.features);
                let lp = self.root.join(&e.labels);
                self.touch(&fp);
                self.touch(&lp);
                let features = read_features(&fp)?;
                let (labels, classes) = read_labels(&lp)?;
                if classes != m.classes || features.cols() != m.feat_dim {
                    return Err(Error::Format {
                        kind: "dataset",
                        path: fp,
                        msg: format!(
                            "expected {} classes and {} features, found {classes} and {}",
                            m.classes,
                            m.feat_dim,
                            features.cols()
                        ),
                    });
                }
                Sample::new(e.id.clone(), labels, classes, features, sigma)
            })
            .collect()
    }
}

/// Loss and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Mean loss over `batch` and its gradient. Each sample draws a diffusion
/// step, noise and a mask from `rng` in sample order.
pub fn train_step<R: Rng + ?Sized>(
    params: &DenoiserParams,
    batch: &[&Sample],
    config: &TrainConfig,
    formulas: &[Formula],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let masks = config.masks()?;
    let n = batch.len() as f64;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    for sample in batch {
        let (loss, g) = sample_grad(params, sample, config, formulas, sched, &masks, 1.0 / n, rng)?;
        total += loss;
        for (acc, g) in grads.iter_mut().zip(g) {
            acc.add_assign(&g);
        }
    }
    Ok(StepOutput { loss: total, grads })
}

#[allow(clippy::too_many_arguments)]
fn sample_grad<R: Rng + ?Sized>(
    params: &DenoiserParams,
    sample: &Sample,
    config: &TrainConfig,
    formulas: &[Formula],
    sched: &NoiseSchedule,
    masks: &[MaskKind],
    scale: f64,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    let classes = params.config().classes;
    let frames = sample.labels.len();
    let step = rng.random_range(1..=sched.total_steps());
    let eps = Tensor::from_fn2(frames, classes, |_, _| rng.sample(StandardNormal));
    let mask = sample_mask(&sample.labels, classes, &sample.frame_boundary, masks, rng)?;
    let x0 = scale_labels(&sample.y0)?.into_tensor();
    let y_t = forward_diffuse(&x0, step, &eps, sched)?;

    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let (cond, aux) = vars.encode(tape.constant(sample.features.clone()))?;
    let p = vars.decode(tape.constant(y_t), step, mask.apply(cond)?)?;
    let mut loss = total_loss(p, &sample.y0, &sample.targets, formulas, &config.weights, config.gamma)?;
    if config.aux_supervision {
        loss = loss.add(auxiliary_loss(aux, &sample.y0, formulas, &config.weights, config.gamma)?)?;
    }
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {value} on sample {} at step {step} with mask {}",
            sample.id,
            mask.kind().code()
        )));
    }
    let loss = loss.scale(scale);
    loss.backward()?;
    let grads = vars
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value * scale, grads))
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid("optimizer state, parameters and gradients disagree in count"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: params[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let mh = md[k] / b1t;
                let vh = vd[k] / b2t;
                pd[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Output of [`sample`]: final probabilities, the final scaled sequence
/// and the probabilities predicted at every reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub probs: Tensor,
    pub y0: Tensor,
    pub trajectory: Vec<Tensor>,
}

/// Reverse sampling with an arbitrary predictor `(y_t, t) -> P`.
pub fn sample<F>(mut predict: F, frames: usize, classes: usize, sched: &NoiseSchedule, config: &InferConfig) -> Result<Sampled>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    config.validate()?;
    if sched.eta() != config.eta {
        return Err(Error::invalid(format!(
            "schedule eta {} differs from inference eta {}",
            sched.eta(),
            config.eta
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| Tensor::from_fn2(frames, classes, |_, _| rng.sample(StandardNormal));
    let mut y = normal(&mut rng);
    let mut trajectory = Vec::new();
    for (t, t_prev) in inference_grid(sched.total_steps(), config.steps)? {
        let p = predict(&y, t)?;
        if !p.all_finite() {
            return Err(Error::NonFinite(format!("prediction at step {t}")));
        }
        let noise = if config.eta > 0.0 {
            normal(&mut rng)
        } else {
            Tensor::zeros(&[frames, classes])
        };
        y = ddim_step(&y, &unscale(&p), t, t_prev, sched, &noise)?;
        if !y.all_finite() {
            return Err(Error::NonFinite(format!("trajectory after step {t} -> {t_prev}")));
        }
        trajectory.push(p);
    }
    Ok(Sampled {
        probs: trajectory.last().expect("at least one step").clone(),
        y0: y,
        trajectory,
    })
}

/// Model inference on one feature sequence.
pub fn infer(params: &DenoiserParams, features: &Tensor, sched: &NoiseSchedule, config: &InferConfig) -> Result<Sampled> {
    let (cond, _) = params.encode(features)?;
    let frames = features.rows();
    let mask = match config.mask_kind()? {
        MaskKind::Global => mask_global(frames)?,
        _ => mask_none(frames)?,
    };
    let cond = mask.apply_tensor(&cond)?;
    sample(
        |y, t| params.decode(y, t, &cond),
        frames,
        params.config().classes,
        sched,
        config,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_jaccard: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: DenoiserParams,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Mean macro Jaccard of model predictions over `samples`.
pub fn mean_jaccard(params: &DenoiserParams, samples: &[Sample], sched: &NoiseSchedule, config: &InferConfig) -> Result<f64> {
    let pairs = predict_all(params, samples, sched, config)?
        .into_iter()
        .zip(samples)
        .map(|(r, s)| (r.pred, s.labels.clone()))
        .collect::<Vec<_>>();
    Ok(EvalReport::evaluate(&pairs, &[], 0)?.strict.macro_jaccard)
}

pub fn predict_all(params: &DenoiserParams, samples: &[Sample], sched: &NoiseSchedule, config: &InferConfig) -> Result<Vec<Ribbon>> {
    samples
        .iter()
        .map(|s| Ribbon::new(Some(s.labels.clone()), infer(params, &s.features, sched, config)?.probs))
        .collect()
}

/// Trains from a seeded initialization, keeping the parameters with the
/// best validation Jaccard and stopping after `patience` flat epochs.
pub fn train(
    model: &ModelConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    infer_config: &InferConfig,
    formulas: &[Formula],
) -> Result<Trained> {
    config.validate(infer_config.steps)?;
    infer_config.validate()?;
    let first = train_set.first().ok_or_else(|| Error::invalid("empty training set"))?;
    if val_set.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let dcfg = model.denoiser(first.features.cols(), first.y0.cols(), config.total_steps);
    let mut params = DenoiserParams::init(dcfg, config.seed)?;
    let sched = NoiseSchedule::cosine(config.total_steps)?;
    let val_sched = NoiseSchedule::new(config.total_steps, crate::schedule::ScheduleKind::Cosine, infer_config.eta)?;
    let mut adam = Adam::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let out = train_step(&params, &batch, config, formulas, &sched, &mut rng)?;
            adam.step(params.tensors_mut(), &out.grads, config.lr)?;
            loss_sum += out.loss;
            batches += 1;
        }
        let val_jaccard = mean_jaccard(&params, val_set, &val_sched, infer_config)?;
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_jaccard,
        });
        if val_jaccard > best.0 {
            best = (val_jaccard, epoch, params.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    Ok(Trained {
        params: best.2,
        best_epoch: best.1,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory, relative to the config file.
    pub dir: PathBuf,
    /// Generate the dataset into `dir` before running.
    pub generate: bool,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub calibrate: bool,
    pub spec: WorkflowSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let sizes = SplitSizes::default();
        DataConfig {
            dir: "data".into(),
            generate: true,
            seed: 0,
            train: sizes.train,
            val: sizes.val,
            test: sizes.test,
            calibrate: true,
            spec: WorkflowSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    /// Output directory, relative to the config file.
    pub out_dir: PathBuf,
    /// Mask strategy sets to train, one cell each (e.g. `["N", "NG"]`).
    pub mask_grid: Vec<String>,
    /// Logic-loss weights to train, one cell each.
    pub lambda_pl: Vec<f64>,
    /// Inference step counts evaluated on the base model.
    pub infer_steps: Vec<usize>,
    pub relaxed_window: usize,
    /// Rule file; the bundled ESD rules when empty.
    pub rules: Option<PathBuf>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            out_dir: "runs".into(),
            mask_grid: Vec::new(),
            lambda_pl: Vec::new(),
            infer_steps: Vec::new(),
            relaxed_window: 10,
            rules: None,
        }
    }
}

/// Full run description, read from TOML with sections `[data]`,
/// `[model]`, `[train]` (with `[train.weights]`), `[infer]` and
/// `[experiment]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub experiment: ExperimentGrid,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start),
            msg: e.message().to_string(),
        })?;
        cfg.train.validate(cfg.infer.steps)?;
        cfg.infer.validate()?;
        cfg.data.spec.validate()?;
        for s in &cfg.experiment.mask_grid {
            MaskKind::parse_set(s)?;
        }
        for &l in &cfg.experiment.lambda_pl {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("lambda_pl values must be >= 0, got {l}")));
            }
        }
        for &s in &cfg.experiment.infer_steps {
            if s == 0 || s > cfg.train.total_steps {
                return Err(Error::invalid(format!("infer step count {s} outside [1, {}]", cfg.train.total_steps)));
            }
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn formulas(&self, base: &Path) -> Result<Vec<Formula>> {
        let table = PhaseTable::esd();
        match &self.experiment.rules {
            Some(p) => {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                crate::logic::parse_formula_file(&text, Some(&table))
            }
            None => default_rules(&table),
        }
    }
}

/// Evaluates `params` on `samples`, returning the report and ribbons.
pub fn evaluate(
    params: &DenoiserParams,
    samples: &[Sample],
    infer_config: &InferConfig,
    formulas: &[Formula],
    window: usize,
) -> Result<(EvalReport, Vec<Ribbon>)> {
    let sched = NoiseSchedule::new(params.config().total_steps, crate::schedule::ScheduleKind::Cosine, infer_config.eta)?;
    let ribbons = predict_all(params, samples, &sched, infer_config)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = ribbons
        .iter()
        .zip(samples)
        .map(|(r, s)| (r.pred.clone(), s.labels.clone()))
        .collect();
    Ok((EvalReport::evaluate(&pairs, formulas, window)?, ribbons))
}

/// Summary of one experiment cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub name: String,
    pub report: KvReport,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub summary: KvReport,
}

fn write_cell(
    dir: &Path,
    trained: &Trained,
    report: &EvalReport,
    ribbons: &[Ribbon],
    samples: &[Sample],
) -> Result<KvReport> {
    let rib_dir = dir.join("ribbons");
    std::fs::create_dir_all(&rib_dir).map_err(|e| Error::io(&rib_dir, e))?;
    trained.params.save(&dir.join("model.ckpt"))?;
    for (r, s) in ribbons.iter().zip(samples) {
        r.write(&rib_dir.join(format!("{}.csv", s.id)))?;
    }
    let mut kv = report.to_report();
    kv.set("best_epoch", trained.best_epoch);
    kv.set("epochs_run", trained.history.len());
    if let Some(last) = trained.history.last() {
        kv.set_f64("final_train_loss", last.train_loss);
    }
    kv.write(&dir.join("report.txt"))?;
    Ok(kv)
}

/// Runs the configured experiment rooted at `base` (paths in the config
/// are relative to it). Training reads only the train and validation
/// splits; the test split is loaded once training has finished.
pub fn run_experiment(config: &ExperimentConfig, base: &Path) -> Result<ExperimentResult> {
    let data_dir = base.join(&config.data.dir);
    if config.data.generate {
        let d = &config.data;
        let sizes = SplitSizes {
            train: d.train,
            val: d.val,
            test: d.test,
        };
        gen_dataset(&d.spec, sizes, d.seed, d.calibrate, &data_dir)?;
    }
    let dataset = Dataset::open(&data_dir)?;
    let formulas = config.formulas(base)?;
    let sigma = config.train.sigma_boundary;
    let train_set = dataset.load(Split::Train, sigma)?;
    let val_set = dataset.load(Split::Val, sigma)?;
    let out = base.join(&config.experiment.out_dir);
    let window = config.experiment.relaxed_window;

    let mut jobs: Vec<(String, TrainConfig)> = vec![("base".into(), config.train.clone())];
    for set in &config.experiment.mask_grid {
        let codes: String = MaskKind::parse_set(set)?.iter().map(|k| k.code()).collect();
        let mut c = config.train.clone();
        c.mask_strategies = codes.clone();
        jobs.push((format!("mask_{codes}"), c));
    }
    for &l in &config.experiment.lambda_pl {
        let mut c = config.train.clone();
        c.weights.pl = l;
        jobs.push((format!("lambda_{l}"), c));
    }
    let mut trained = Vec::new();
    for (name, tc) in &jobs {
        trained.push((name.clone(), train(&config.model, &train_set, &val_set, tc, &config.infer, &formulas)?));
    }

    let test_set = dataset.load(Split::Test, sigma)?;
    let mut cells = Vec::new();
    let mut summary = KvReport::default();
    for (name, t) in &trained {
        let (report, ribbons) = evaluate(&t.params, &test_set, &config.infer, &formulas, window)?;
        let dir = out.join(name);
        let kv = write_cell(&dir, t, &report, &ribbons, &test_set)?;
        for key in ["accuracy", "macro_jaccard", "relaxed_accuracy", "relaxed_macro_jaccard", "violations_mean"] {
            if let Some(v) = kv.get(key) {
                summary.set(&format!("{name}.{key}"), v);
            }
        }
        cells.push(CellResult {
            name: name.clone(),
            report: kv,
            dir,
        });
    }

    if !config.experiment.infer_steps.is_empty() {
        let base_params = &trained[0].1.params;
        let mut timing = KvReport::default();
        for &steps in &config.experiment.infer_steps {
            let ic = InferConfig {
                steps,
                ..config.infer.clone()
            };
            let start = Instant::now();
            let (report, _) = evaluate(base_params, &test_set, &ic, &formulas, window)?;
            timing.set_f64(&format!("steps_{steps}.seconds"), start.elapsed().as_secs_f64());
            summary.set_f64(&format!("steps_{steps}.macro_jaccard"), report.strict.macro_jaccard);
            summary.set_f64(&format!("steps_{steps}.accuracy"), report.strict.accuracy);
        }
        // wall-clock lives apart from the reproducible reports
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        timing.write(&out.join("timing.txt"))?;
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    summary.write(&out.join("summary.txt"))?;
    Ok(ExperimentResult { cells, summary })
}
