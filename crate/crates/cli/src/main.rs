use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cpkd::denoiser::DenoiserParams;
use cpkd::gradsuite::{self, Component};
use cpkd::logic::{default_rules, eval_hard, parse_formula_file, Formula, PhaseTable};
use cpkd::metrics::{EvalReport, Ribbon};
use cpkd::pipeline::{infer, run_experiment, train, Dataset, ExperimentConfig, InferConfig};
use cpkd::schedule::{NoiseSchedule, ScheduleKind};
use cpkd::synth::{gen_dataset, read_features, read_labels, Split, SplitSizes, WorkflowSpec};

/// Surgical phase labeling by conditional diffusion with rule constraints.
#[derive(Debug, Parser)]
#[command(name = "cpkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenData {
        /// Workflow spec (TOML); defaults to the built-in benchmark spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Dataset seed.
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of training sequences.
        #[arg(long, default_value_t = 200)]
        train: usize,
        /// Number of validation sequences.
        #[arg(long, default_value_t = 20)]
        val: usize,
        /// Number of test sequences.
        #[arg(long, default_value_t = 40)]
        test: usize,
        /// Keep the spec's mean_scale instead of calibrating it.
        #[arg(long)]
        no_calibrate: bool,
    },
    /// Train a model on the train/val splits of a dataset.
    Train {
        /// Experiment config (TOML); its [model], [train] and [infer] sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory containing manifest.txt.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample phase probabilities for one feature file.
    Infer {
        /// Model checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Feature file.
        #[arg(long)]
        features: PathBuf,
        /// Reverse sampling steps.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stochasticity of the reverse update (0 is deterministic).
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        /// Condition mask: N (features visible) or G (features hidden).
        #[arg(long, default_value = "N")]
        mask: String,
        /// Label file whose classes fill the CSV's true column.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction CSVs against labels.
    Eval {
        /// Prediction CSV (repeatable).
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Label file per prediction; defaults to each CSV's true column.
        #[arg(long)]
        labels: Vec<PathBuf>,
        /// Rule file; defaults to the bundled ESD rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Relaxed-boundary window in frames.
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-formula satisfaction of a label file or prediction CSV.
    CheckLogic {
        /// Rule file, or "default" for the bundled ESD rules.
        rules: String,
        /// Label file (.lab) or prediction CSV (.csv).
        input: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// ce, smooth, boundary, logic, total, denoiser, losses or all.
        component: String,
        /// Instance seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Run a full experiment described by a config file.
    Experiment {
        /// Experiment config (TOML); relative paths resolve against its directory.
        #[arg(long)]
        config: PathBuf,
    },
}

/// Returned for results that are valid runs but fail a check.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn load_rules(spec: Option<&str>) -> Result<Vec<Formula>> {
    let table = PhaseTable::esd();
    match spec {
        None | Some("default") => Ok(default_rules(&table)?),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| cpkd::Error::Io {
                path: path.into(),
                source: e,
            })?;
            Ok(parse_formula_file(&text, Some(&table)).with_context(|| format!("parsing {path}"))?)
        }
    }
}

fn read_sequence_labels(path: &Path) -> Result<Vec<usize>> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(Ribbon::read(path)?.pred)
    } else {
        Ok(read_labels(path)?.0)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            spec,
            seed,
            out,
            train,
            val,
            test,
            no_calibrate,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| cpkd::Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    toml::from_str::<WorkflowSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => WorkflowSpec::default(),
            };
            let m = gen_dataset(&spec, SplitSizes { train, val, test }, seed, !no_calibrate, &out)?;
            println!(
                "wrote {} train, {} val, {} test sequences to {} (mean_scale={:.6})",
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test),
                out.display(),
                m.mean_scale
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            epochs,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::read(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let dataset = Dataset::open(&data)?;
            let formulas = load_rules(None)?;
            let tr = dataset.load(Split::Train, cfg.train.sigma_boundary)?;
            let va = dataset.load(Split::Val, cfg.train.sigma_boundary)?;
            let trained = train(&cfg.model, &tr, &va, &cfg.train, &cfg.infer, &formulas)?;
            for h in &trained.history {
                println!(
                    "epoch={} train_loss={:.6} val_jaccard={:.6}",
                    h.epoch, h.train_loss, h.val_jaccard
                );
            }
            trained.params.save(&out)?;
            println!("best_epoch={} checkpoint={}", trained.best_epoch, out.display());
        }
        Command::Infer {
            ckpt,
            features,
            steps,
            seed,
            eta,
            mask,
            labels,
            out,
        } => {
            let params = DenoiserParams::load(&ckpt)?;
            let feats = read_features(&features)?;
            let config = InferConfig { steps, eta, seed, mask };
            let sched = NoiseSchedule::new(params.config().total_steps, ScheduleKind::Cosine, eta)?;
            let result = infer(&params, &feats, &sched, &config)?;
            let truth = labels.map(|p| read_labels(&p).map(|l| l.0)).transpose()?;
            Ribbon::new(truth, result.probs)?.write(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            pred,
            labels,
            rules,
            window,
            out,
        } => {
            if !labels.is_empty() && labels.len() != pred.len() {
                bail!(cpkd::Error::InvalidArgument(format!(
                    "{} prediction files but {} label files",
                    pred.len(),
                    labels.len()
                )));
            }
            let formulas = load_rules(rules.as_ref().and_then(|p| p.to_str()))?;
            let mut pairs = Vec::new();
            for (i, p) in pred.iter().enumerate() {
                let ribbon = Ribbon::read(p)?;
                let truth = match labels.get(i) {
                    Some(l) => read_labels(l)?.0,
                    None => ribbon.truth.clone().ok_or_else(|| {
                        cpkd::Error::InvalidArgument(format!("{} has no true column; pass --labels", p.display()))
                    })?,
                };
                pairs.push((ribbon.pred, truth));
            }
            let report = EvalReport::evaluate(&pairs, &formulas, window)?.to_report();
            match out {
                Some(path) => {
                    report.write(&path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{}", report.to_text()),
            }
        }
        Command::CheckLogic { rules, input } => {
            let formulas = load_rules(Some(&rules))?;
            let labels = read_sequence_labels(&input)?;
            let table = PhaseTable::esd();
            let mut unsat = 0;
            for f in &formulas {
                let ok = eval_hard(f, &labels, 0)?;
                unsat += usize::from(!ok);
                println!("{}\t{}", if ok { "SAT" } else { "UNSAT" }, f.display_with(&table));
            }
            println!("violations={unsat}");
        }
        Command::GradCheck { component, seed, count } => {
            let comps = Component::parse_group(&component)?;
            let mut worst = 0.0f64;
            for c in comps {
                let mut err = 0.0f64;
                for s in seed..seed + count.max(1) {
                    err = err.max(gradsuite::check(c, s)?);
                }
                println!("{} max_rel_error={err:.3e}", c.name());
                worst = worst.max(err);
            }
            println!("max_rel_error={worst:.3e}");
            if worst >= 1e-4 {
                bail!(CheckFailed(format!("gradient error {worst:.3e} exceeds 1e-4")));
            }
        }
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::read(&config)?;
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let result = run_experiment(&cfg, &base)?;
            print!("{}", result.summary.to_text());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cpkd::Error>() {
        Some(e) if e.is_io() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
