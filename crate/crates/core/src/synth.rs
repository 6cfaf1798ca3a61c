//! Synthetic ESD-like workflows: rule-complete phase sequences with
//! Gaussian frame features whose class means blur across boundaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{change_points, one_hot};
use crate::tensor_core::Tensor;

pub const PREPARATION: usize = 0;
pub const ESTIMATION: usize = 1;
pub const MARKING: usize = 2;
pub const INJECTION: usize = 3;
pub const INCISION: usize = 4;
pub const DISSECTION: usize = 5;
pub const VESSEL: usize = 6;
pub const CLIPS: usize = 7;
/// The workflow grammar is written for the eight ESD phases.
pub const ESD_CLASSES: usize = 8;

const FEAT_MAGIC: &[u8; 8] = b"CPKDFEAT";
const LABEL_MAGIC: &[u8; 8] = b"CPKDLABL";
const FILE_VERSION: u32 = 1;
const MAX_ATTEMPTS: usize = 100;
/// Nearest-class-mean accuracy aimed for by [`calibrate_mean_scale`].
pub const CALIBRATION_TARGET: f64 = 0.78;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowSpec {
    pub classes: usize,
    pub frames_range: [usize; 2],
    /// `(mu, sigma)` of the log-duration, one pair per phase.
    pub duration_lognormal: Vec<[f64; 2]>,
    pub repeat_block: f64,
    pub skip_marking_block: f64,
    pub feat_dim: usize,
    pub boundary_blur_w: usize,
    pub noise_std: f64,
    /// Multiplier on the unit-variance class means.
    pub mean_scale: f64,
}

/// Lognormal `(mu, sigma)` with the given arithmetic mean.
pub fn lognormal_with_mean(mean: f64, sigma: f64) -> [f64; 2] {
    [mean.ln() - sigma * sigma / 2.0, sigma]
}

impl Default for WorkflowSpec {
    fn default() -> Self {
        let means = [20.0, 18.0, 16.0, 14.0, 18.0, 52.0, 18.0, 24.0];
        WorkflowSpec {
            classes: ESD_CLASSES,
            frames_range: [150, 300],
            duration_lognormal: means.iter().map(|&m| lognormal_with_mean(m, 0.3)).collect(),
            repeat_block: 0.2,
            skip_marking_block: 0.0,
            feat_dim: 16,
            boundary_blur_w: 6,
            noise_std: 0.6,
            mean_scale: 1.0,
        }
    }
}

impl WorkflowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes != ESD_CLASSES {
            return Err(Error::invalid(format!(
                "the workflow grammar needs {ESD_CLASSES} classes, got {}",
                self.classes
            )));
        }
        let [lo, hi] = self.frames_range;
        if lo < self.classes || lo > hi {
            return Err(Error::invalid(format!("frames_range [{lo}, {hi}] needs {} <= T_min <= T_max", self.classes)));
        }
        if self.duration_lognormal.len() != self.classes {
            return Err(Error::invalid(format!(
                "need {} duration pairs, got {}",
                self.classes,
                self.duration_lognormal.len()
            )));
        }
        for (i, [mu, s]) in self.duration_lognormal.iter().enumerate() {
            if !mu.is_finite() || !(s.is_finite() && *s > 0.0) {
                return Err(Error::invalid(format!("phase {i}: bad lognormal ({mu}, {s})")));
            }
        }
        for (name, p) in [("repeat_block", self.repeat_block), ("skip_marking_block", self.skip_marking_block)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.feat_dim == 0 {
            return Err(Error::invalid("feat_dim must be >= 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::invalid(format!("mean_scale must be >= 0, got {}", self.mean_scale)));
        }
        Ok(())
    }

    /// Arithmetic mean duration of each phase.
    pub fn mean_durations(&self) -> Vec<f64> {
        self.duration_lognormal.iter().map(|[mu, s]| (mu + s * s / 2.0).exp()).collect()
    }
}

/// One generated sequence before features are scaled and noised.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub labels: Vec<usize>,
    /// Blurred class means, unscaled (`T x D`).
    pub means: Tensor,
    /// Standard-normal noise (`T x D`).
    pub noise: Tensor,
}

impl RawSequence {
    pub fn features(&self, mean_scale: f64, noise_std: f64) -> Tensor {
        let data = self
            .means
            .data()
            .iter()
            .zip(self.noise.data())
            .map(|(m, n)| mean_scale * m + noise_std * n)
            .collect();
        Tensor::new(self.means.shape().to_vec(), data).expect("same shape")
    }
}

/// A labelled sequence: one-hot `Y0` and features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub y0: Tensor,
    pub features: Tensor,
}

/// Draws the unit-variance class-mean vectors (`C x D`).
pub fn class_means<R: Rng + ?Sized>(classes: usize, feat_dim: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn2(classes, feat_dim, |_, _| rng.sample(StandardNormal))
}

/// Phase order with one block repeat count and whether the
/// Marking-to-Clips part is present.
pub fn phase_order(repeats: usize, with_marking_block: bool) -> Vec<usize> {
    let mut order = vec![PREPARATION, ESTIMATION];
    if with_marking_block {
        order.push(MARKING);
        for _ in 0..repeats {
            order.extend([INJECTION, INCISION, DISSECTION]);
        }
        order.extend([VESSEL, CLIPS]);
    }
    order
}

fn draw_labels<R: Rng + ?Sized>(spec: &WorkflowSpec, rng: &mut R) -> Result<Vec<usize>> {
    let dists: Vec<LogNormal<f64>> = spec
        .duration_lognormal
        .iter()
        .map(|&[mu, s]| LogNormal::new(mu, s).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let [lo, hi] = spec.frames_range;
    for _ in 0..MAX_ATTEMPTS {
        let with_block = !rng.random_bool(spec.skip_marking_block);
        let repeats = if rng.random_bool(spec.repeat_block) { 2 } else { 1 };
        let order = phase_order(repeats, with_block);
        let mut labels = Vec::new();
        for &phase in &order {
            let d = dists[phase].sample(rng).round().max(1.0) as usize;
            labels.extend(std::iter::repeat_n(phase, d));
        }
        if (lo..=hi).contains(&labels.len()) {
            return Ok(labels);
        }
    }
    Err(Error::invalid(format!(
        "no sequence length within [{lo}, {hi}] after {MAX_ATTEMPTS} attempts"
    )))
}

/// Per-frame class means, linearly interpolated within `w` frames of the
/// nearest label change.
fn blurred_means(labels: &[usize], means: &Tensor, w: usize) -> Tensor {
    let cps = change_points(labels);
    let d = means.cols();
    let mut out = Tensor::zeros(&[labels.len(), d]);
    for (i, &l) in labels.iter().enumerate() {
        let row: Vec<f64> = match nearest_change(&cps, i) {
            Some(c) if w > 0 => {
                // boundary sits between frames c and c+1
                let offset = i as f64 - (c as f64 + 0.5);
                if offset.abs() < w as f64 {
                    let after = (offset / w as f64 + 1.0) / 2.0;
                    let (a, b) = (labels[c], labels[c + 1]);
                    (0..d).map(|j| (1.0 - after) * means.at(a, j) + after * means.at(b, j)).collect()
                } else {
                    means.row(l).to_vec()
                }
            }
            _ => means.row(l).to_vec(),
        };
        for (j, v) in row.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

fn nearest_change(cps: &[usize], i: usize) -> Option<usize> {
    cps.iter()
        .copied()
        .min_by(|&a, &b| {
            let da = (i as f64 - (a as f64 + 0.5)).abs();
            let db = (i as f64 - (b as f64 + 0.5)).abs();
            da.total_cmp(&db)
        })
}

/// Labels, blurred means and raw noise for one sequence.
pub fn gen_raw<R: Rng + ?Sized>(spec: &WorkflowSpec, means: &Tensor, rng: &mut R) -> Result<RawSequence> {
    spec.validate()?;
    if means.shape() != [spec.classes, spec.feat_dim] {
        return Err(Error::Shape {
            op: "gen_raw",
            lhs: vec![spec.classes, spec.feat_dim],
            rhs: means.shape().to_vec(),
        });
    }
    let labels = draw_labels(spec, rng)?;
    let blurred = blurred_means(&labels, means, spec.boundary_blur_w);
    let noise = Tensor::from_fn2(labels.len(), spec.feat_dim, |_, _| rng.sample(StandardNormal));
    Ok(RawSequence {
        labels,
        means: blurred,
        noise,
    })
}

/// One sequence with features at `spec.mean_scale` and `spec.noise_std`.
pub fn gen_sequence<R: Rng + ?Sized>(spec: &WorkflowSpec, means: &Tensor, rng: &mut R) -> Result<Sequence> {
    let raw = gen_raw(spec, means, rng)?;
    Ok(Sequence {
        y0: one_hot(&raw.labels, spec.classes)?,
        features: raw.features(spec.mean_scale, spec.noise_std),
    })
}

/// Per-frame nearest-class-mean classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestClassMean {
    means: Vec<Option<Vec<f64>>>,
}

impl NearestClassMean {
    pub fn fit<'a>(classes: usize, data: impl IntoIterator<Item = (&'a [usize], &'a Tensor)>) -> Result<Self> {
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; classes];
        for (labels, feats) in data {
            if labels.len() != feats.rows() {
                return Err(Error::invalid("labels and features disagree on frame count"));
            }
            for (i, &l) in labels.iter().enumerate() {
                let slot = sums
                    .get_mut(l)
                    .ok_or_else(|| Error::invalid(format!("label {l} >= {classes}")))?;
                let (s, n) = slot.get_or_insert_with(|| (vec![0.0; feats.cols()], 0));
                for (a, b) in s.iter_mut().zip(feats.row(i)) {
                    *a += b;
                }
                *n += 1;
            }
        }
        let means = sums
            .into_iter()
            .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        Ok(NearestClassMean { means })
    }

    pub fn predict(&self, features: &Tensor) -> Vec<usize> {
        (0..features.rows())
            .map(|i| {
                let row = features.row(i);
                let mut best = (f64::INFINITY, 0);
                for (c, m) in self.means.iter().enumerate() {
                    if let Some(m) = m {
                        let d: f64 = row.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d < best.0 {
                            best = (d, c);
                        }
                    }
                }
                best.1
            })
            .collect()
    }
}

/// Frame accuracy of a nearest-class-mean classifier fit on `train` and
/// scored on `eval`.
pub fn ncm_accuracy(classes: usize, train: &[(Vec<usize>, Tensor)], eval: &[(Vec<usize>, Tensor)]) -> Result<f64> {
    let model = NearestClassMean::fit(classes, train.iter().map(|(l, f)| (l.as_slice(), f)))?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (labels, feats) in eval {
        let pred = model.predict(feats);
        hit += pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::invalid("no frames to score"));
    }
    Ok(hit as f64 / total as f64)
}

/// Bisects the mean scale so the nearest-class-mean accuracy (fit on
/// `train`, scored on `eval`) lands near `target`.
pub fn calibrate_mean_scale(
    classes: usize,
    noise_std: f64,
    train: &[RawSequence],
    eval: &[RawSequence],
    target: f64,
) -> Result<f64> {
    let score = |scale: f64| -> Result<f64> {
        let build = |s: &[RawSequence]| -> Vec<(Vec<usize>, Tensor)> {
            s.iter().map(|r| (r.labels.clone(), r.features(scale, noise_std))).collect()
        };
        ncm_accuracy(classes, &build(train), &build(eval))
    };
    let (mut lo, mut hi) = (0.0f64, 8.0f64);
    if score(hi)? < target {
        return Ok(hi);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if score(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub classes: usize,
    pub feat_dim: usize,
    pub mean_scale: f64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# cpkd dataset manifest v1\n");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "feat_dim={}", self.feat_dim);
        let _ = writeln!(s, "mean_scale={:?}", self.mean_scale);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                e.split.name(),
                e.id,
                e.features.display(),
                e.labels.display()
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = std::collections::HashMap::new();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [split, id, feat, lab] = parts[..] else {
                return Err(Error::invalid(format!("manifest line {}: expected 4 fields", n + 1)));
            };
            entries.push(ManifestEntry {
                split: Split::parse(split)?,
                id: id.to_string(),
                features: feat.into(),
                labels: lab.into(),
            });
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::invalid(format!("manifest missing {k}")))
        };
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::invalid(format!("manifest: bad {k}"))) };
        Ok(Manifest {
            seed: num("seed")?,
            classes: num("classes")? as usize,
            feat_dim: num("feat_dim")? as usize,
            mean_scale: get("mean_scale")?
                .parse()
                .map_err(|_| Error::invalid("manifest: bad mean_scale"))?,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text).map_err(|e| Error::Format {
            kind: "manifest",
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 200,
            val: 20,
            test: 40,
        }
    }
}

impl SplitSizes {
    fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates all splits in memory. Stream 0 of `seed` draws the class
/// means; sequence `k` (counted across splits) uses stream `k + 1`.
pub fn gen_raw_dataset(spec: &WorkflowSpec, sizes: SplitSizes, seed: u64) -> Result<Vec<(Split, RawSequence)>> {
    spec.validate()?;
    let means = class_means(spec.classes, spec.feat_dim, &mut rng_for(seed, 0));
    let mut out = Vec::new();
    let mut k = 0u64;
    for split in Split::ALL {
        for _ in 0..sizes.of(split) {
            k += 1;
            out.push((split, gen_raw(spec, &means, &mut rng_for(seed, k))?));
        }
    }
    Ok(out)
}

/// Writes feature and label files plus `manifest.txt` under `out_dir`.
/// With `calibrate`, the mean scale is first fitted on the train and
/// validation splits; otherwise `spec.mean_scale` is used.
pub fn gen_dataset(spec: &WorkflowSpec, sizes: SplitSizes, seed: u64, calibrate: bool, out_dir: &Path) -> Result<Manifest> {
    let raw = gen_raw_dataset(spec, sizes, seed)?;
    let mean_scale = if calibrate {
        let pick = |s: Split| -> Vec<RawSequence> { raw.iter().filter(|(x, _)| *x == s).map(|(_, r)| r.clone()).collect() };
        let (train, val) = (pick(Split::Train), pick(Split::Val));
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("calibration needs non-empty train and val splits"));
        }
        calibrate_mean_scale(spec.classes, spec.noise_std, &train, &val, CALIBRATION_TARGET)?
    } else {
        spec.mean_scale
    };
    let mut entries = Vec::new();
    let mut index = [0usize; 3];
    for (split, r) in &raw {
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = &mut index[*split as usize];
        let id = format!("seq_{:04}", *n);
        *n += 1;
        let feat_rel = PathBuf::from(split.name()).join(format!("{id}.feat"));
        let lab_rel = PathBuf::from(split.name()).join(format!("{id}.lab"));
        write_features(&out_dir.join(&feat_rel), &r.features(mean_scale, spec.noise_std))?;
        write_labels(&out_dir.join(&lab_rel), &r.labels, spec.classes)?;
        entries.push(ManifestEntry {
            split: *split,
            id,
            features: feat_rel,
            labels: lab_rel,
        });
    }
    let manifest = Manifest {
        seed,
        classes: spec.classes,
        feat_dim: spec.feat_dim,
        mean_scale,
        entries,
    };
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn header(magic: &[u8; 8], a: u32, b: u32) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    out
}

fn read_header(bytes: &[u8], magic: &[u8; 8], kind: &'static str, path: &Path) -> Result<(usize, usize)> {
    let bad = |msg: String| Error::Format {
        kind,
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(bad(format!("missing {} header", String::from_utf8_lossy(magic))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(8) != FILE_VERSION {
        return Err(bad(format!("unsupported version {}", word(8))));
    }
    Ok((word(12) as usize, word(16) as usize))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::invalid("features must be T x D"));
    }
    let mut bytes = header(FEAT_MAGIC, features.rows() as u32, features.cols() as u32);
    for &v in features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, d) = read_header(&bytes, FEAT_MAGIC, "feature", path)?;
    let body = &bytes[20..];
    if body.len() != 4 * t * d {
        return Err(Error::Format {
            kind: "feature",
            path: path.to_path_buf(),
            msg: format!("expected {} bytes of data for {t} x {d}, found {}", 4 * t * d, body.len()),
        });
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_labels(path: &Path, labels: &[usize], classes: usize) -> Result<()> {
    if classes > 256 || labels.iter().any(|&l| l >= classes) {
        return Err(Error::invalid(format!("labels must lie in [0, {classes}) with at most 256 classes")));
    }
    let mut bytes = header(LABEL_MAGIC, labels.len() as u32, classes as u32);
    bytes.extend(labels.iter().map(|&l| l as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns `(labels, classes)`.
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, c) = read_header(&bytes, LABEL_MAGIC, "label", path)?;
    let body = &bytes[20..];
    let bad = |msg: String| Error::Format {
        kind: "label",
        path: path.to_path_buf(),
        msg,
    };
    if body.len() != t {
        return Err(bad(format!("expected {t} label bytes, found {}", body.len())));
    }
    let labels: Vec<usize> = body.iter().map(|&b| b as usize).collect();
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(bad(format!("label {l} outside [0, {c})")));
    }
    Ok((labels, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{default_rules, eval_hard, PhaseTable};

    fn means(seed: u64) -> Tensor {
        class_means(8, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sequences_satisfy_rules() {
        let rules = default_rules(&PhaseTable::esd()).unwrap();
        let spec = WorkflowSpec {
            repeat_block: 0.5,
            ..WorkflowSpec::default()
        };
        let m = means(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let raw = gen_raw(&spec, &m, &mut rng).unwrap();
            assert!((150..=300).contains(&raw.labels.len()));
            for f in &rules {
                assert!(eval_hard(f, &raw.labels, 0).unwrap(), "{f}");
            }
        }
    }

    #[test]
    fn skipped_block_is_rule_complete() {
        let rules = default_rules(&PhaseTable::esd()).unwrap();
        let spec = WorkflowSpec {
            skip_marking_block: 1.0,
            frames_range: [8, 300],
            ..WorkflowSpec::default()
        };
        let raw = gen_raw(&spec, &means(1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(raw.labels.iter().all(|&l| l <= ESTIMATION));
        for f in &rules {
            assert!(eval_hard(f, &raw.labels, 0).unwrap());
        }
    }

    #[test]
    fn repeat_block_appears_twice() {
        let spec = WorkflowSpec {
            repeat_block: 1.0,
            frames_range: [8, 1000],
            ..WorkflowSpec::default()
        };
        let raw = gen_raw(&spec, &means(1), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let runs: Vec<usize> = crate::labels::segments(&raw.labels).iter().map(|s| s.0).collect();
        assert_eq!(runs, phase_order(2, true));
    }

    #[test]
    fn degenerate_features_are_class_means() {
        let spec = WorkflowSpec {
            boundary_blur_w: 0,
            noise_std: 0.0,
            ..WorkflowSpec::default()
        };
        let m = means(5);
        let s = gen_sequence(&spec, &m, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let labels = crate::labels::from_one_hot(&s.y0).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(s.features.row(i), m.row(l));
        }
    }

    #[test]
    fn blur_interpolates() {
        let m = Tensor::matrix(&[vec![0.0], vec![1.0]]);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let b = blurred_means(&labels, &m, 2);
        let got: Vec<f64> = (0..8).map(|i| b.at(i, 0)).collect();
        assert_eq!(got, vec![0.0, 0.0, 0.125, 0.375, 0.625, 0.875, 1.0, 1.0]);
    }

    #[test]
    fn infeasible_range_errors() {
        let spec = WorkflowSpec {
            frames_range: [5000, 6000],
            ..WorkflowSpec::default()
        };
        assert!(gen_raw(&spec, &means(1), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(WorkflowSpec::default().validate().is_ok());
        let bad = [
            WorkflowSpec { classes: 7, ..WorkflowSpec::default() },
            WorkflowSpec { frames_range: [4, 300], ..WorkflowSpec::default() },
            WorkflowSpec { repeat_block: 1.5, ..WorkflowSpec::default() },
            WorkflowSpec { noise_std: -1.0, ..WorkflowSpec::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::matrix(&[vec![0.5, -1.25], vec![3.0, 0.0]]);
        let p = dir.path().join("a.feat");
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        let l = dir.path().join("a.lab");
        write_labels(&l, &[0, 3, 7], 8).unwrap();
        assert_eq!(read_labels(&l).unwrap(), (vec![0, 3, 7], 8));
        assert!(matches!(read_labels(&p), Err(Error::Format { .. })));
        assert!(read_labels(&dir.path().join("nope")).unwrap_err().is_io());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            seed: 3,
            classes: 8,
            feat_dim: 16,
            mean_scale: 0.4321,
            entries: vec![ManifestEntry {
                split: Split::Val,
                id: "seq_0000".into(),
                features: "val/seq_0000.feat".into(),
                labels: "val/seq_0000.lab".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }
}
