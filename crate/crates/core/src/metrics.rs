//! Frame-wise evaluation: accuracy, macro precision / recall / Jaccard,
//! the relaxed boundary protocol, rule-violation counts, and the text
//! formats for reports and prediction ribbons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::change_points;
use crate::logic::{eval_hard, Formula};
use crate::tensor_core::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_jaccard: f64,
    /// Classes present in truth or prediction, ascending.
    pub per_class: Vec<ClassMetrics>,
}

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} frames, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("cannot score an empty sequence"));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Strict frame metrics. Macro averages run over classes that occur in
/// the truth or the prediction.
pub fn frame_metrics(pred: &[usize], truth: &[usize]) -> Result<FrameMetrics> {
    check_pair(pred, truth)?;
    let classes = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fn_) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| ClassMetrics {
            class: c,
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            jaccard: ratio(tp[c], tp[c] + fp[c] + fn_[c]),
        })
        .collect();
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    Ok(FrameMetrics {
        accuracy: ratio(tp.iter().sum(), pred.len()),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_jaccard: mean(|m| m.jaccard),
        per_class,
    })
}

/// Prediction with boundary-tolerant corrections applied: a frame lying
/// within `window` frames of a true boundary counts as correct when its
/// predicted label is some true label within `±window`.
pub fn relax_prediction(pred: &[usize], truth: &[usize], window: usize) -> Result<Vec<usize>> {
    check_pair(pred, truth)?;
    let n = truth.len();
    let mut near = vec![false; n];
    if window > 0 {
        for c in change_points(truth) {
            // boundary between c and c + 1
            let lo = (c + 1).saturating_sub(window);
            let hi = (c + window).min(n - 1);
            near[lo..=hi].iter_mut().for_each(|v| *v = true);
        }
    }
    Ok((0..n)
        .map(|i| {
            if near[i] && pred[i] != truth[i] {
                let lo = i.saturating_sub(window);
                let hi = (i + window).min(n - 1);
                if truth[lo..=hi].contains(&pred[i]) {
                    return truth[i];
                }
            }
            pred[i]
        })
        .collect())
}

pub fn relaxed_metrics(pred: &[usize], truth: &[usize], window: usize) -> Result<FrameMetrics> {
    frame_metrics(&relax_prediction(pred, truth, window)?, truth)
}

/// Number of formulas not satisfied at frame 0 of `pred`.
pub fn count_violations(pred: &[usize], formulas: &[Formula]) -> Result<usize> {
    if pred.is_empty() {
        return Err(Error::invalid("cannot check rules on an empty sequence"));
    }
    let mut n = 0;
    for f in formulas {
        if !eval_hard(f, pred, 0)? {
            n += 1;
        }
    }
    Ok(n)
}

/// Metrics averaged over sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sequences: usize,
    pub window: usize,
    pub strict: Summary,
    pub relaxed: Summary,
    pub violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_jaccard: f64,
    /// Per class: `(precision, recall, jaccard)` averaged over the
    /// sequences in which the class was scored.
    pub per_class: BTreeMap<usize, [f64; 3]>,
}

fn summarize(all: &[FrameMetrics]) -> Summary {
    let n = all.len() as f64;
    let mut sums: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
    for m in all {
        for c in &m.per_class {
            let e = sums.entry(c.class).or_insert(([0.0; 3], 0));
            e.0[0] += c.precision;
            e.0[1] += c.recall;
            e.0[2] += c.jaccard;
            e.1 += 1;
        }
    }
    Summary {
        accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / n,
        macro_precision: all.iter().map(|m| m.macro_precision).sum::<f64>() / n,
        macro_recall: all.iter().map(|m| m.macro_recall).sum::<f64>() / n,
        macro_jaccard: all.iter().map(|m| m.macro_jaccard).sum::<f64>() / n,
        per_class: sums
            .into_iter()
            .map(|(c, (s, k))| (c, s.map(|v| v / k as f64)))
            .collect(),
    }
}

impl EvalReport {
    /// Scores `(prediction, truth)` pairs and, when `formulas` is
    /// non-empty, counts rule violations of each prediction.
    pub fn evaluate(pairs: &[(Vec<usize>, Vec<usize>)], formulas: &[Formula], window: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no sequences to evaluate"));
        }
        let mut strict = Vec::new();
        let mut relaxed = Vec::new();
        let mut violations = Vec::new();
        for (pred, truth) in pairs {
            strict.push(frame_metrics(pred, truth)?);
            relaxed.push(relaxed_metrics(pred, truth, window)?);
            violations.push(count_violations(pred, formulas)?);
        }
        Ok(EvalReport {
            sequences: pairs.len(),
            window,
            strict: summarize(&strict),
            relaxed: summarize(&relaxed),
            violations,
        })
    }

    pub fn mean_violations(&self) -> f64 {
        self.violations.iter().sum::<usize>() as f64 / self.violations.len().max(1) as f64
    }

    pub fn to_report(&self) -> KvReport {
        let mut r = KvReport::default();
        r.set("sequences", self.sequences);
        r.set("relaxed_window", self.window);
        for (prefix, s) in [("", &self.strict), ("relaxed_", &self.relaxed)] {
            r.set_f64(&format!("{prefix}accuracy"), s.accuracy);
            r.set_f64(&format!("{prefix}macro_precision"), s.macro_precision);
            r.set_f64(&format!("{prefix}macro_recall"), s.macro_recall);
            r.set_f64(&format!("{prefix}macro_jaccard"), s.macro_jaccard);
        }
        for (c, [p, rc, j]) in &self.strict.per_class {
            r.set_f64(&format!("class.{c}.precision"), *p);
            r.set_f64(&format!("class.{c}.recall"), *rc);
            r.set_f64(&format!("class.{c}.jaccard"), *j);
        }
        r.set_f64("violations_mean", self.mean_violations());
        r.set("violations_total", self.violations.iter().sum::<usize>());
        let list: Vec<String> = self.violations.iter().map(usize::to_string).collect();
        r.set("violations_per_sequence", list.join(","));
        r
    }
}

/// Ordered `key=value` report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvReport {
    entries: Vec<(String, String)>,
}

impl KvReport {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Stores a float in shortest round-trip form.
    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:?}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::invalid(format!("report has no key {key:?}")))?;
        v.parse()
            .map_err(|_| Error::invalid(format!("report key {key:?} is not a number: {v:?}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvReport) {
        for (k, v) in &other.entries {
            self.set(&format!("{prefix}{k}"), v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = KvReport::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("report line {} has no '='", n + 1)))?;
            if k.trim().is_empty() {
                return Err(Error::invalid(format!("report line {} has an empty key", n + 1)));
            }
            r.set(k.trim(), v.trim());
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvReport::parse(&text).map_err(|e| Error::Format {
            kind: "report",
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Per-frame predictions as written to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Ribbon {
    pub truth: Option<Vec<usize>>,
    pub pred: Vec<usize>,
    /// `T x C` probabilities.
    pub probs: Tensor,
}

impl Ribbon {
    pub fn new(truth: Option<Vec<usize>>, probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 || probs.rows() == 0 {
            return Err(Error::invalid("ribbon probabilities must be a non-empty T x C matrix"));
        }
        if let Some(t) = &truth {
            if t.len() != probs.rows() {
                return Err(Error::invalid("ribbon truth and probabilities disagree on frame count"));
            }
        }
        Ok(Ribbon {
            truth,
            pred: probs.argmax_rows(),
            probs,
        })
    }

    pub fn to_csv(&self) -> String {
        let c = self.probs.cols();
        let mut s = String::from("frame,true,pred");
        for k in 0..c {
            let _ = write!(s, ",prob_{k}");
        }
        s.push('\n');
        for i in 0..self.pred.len() {
            let truth = self.truth.as_ref().map_or(String::new(), |t| t[i].to_string());
            let _ = write!(s, "{i},{truth},{}", self.pred[i]);
            for v in self.probs.row(i) {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::invalid("empty CSV"))?;
        let cols: Vec<&str> = head.split(',').map(str::trim).collect();
        if cols.len() < 4 || cols[..3] != ["frame", "true", "pred"] {
            return Err(Error::invalid("CSV header must start with frame,true,pred,prob_0"));
        }
        for (k, name) in cols[3..].iter().enumerate() {
            if *name != format!("prob_{k}") {
                return Err(Error::invalid(format!("unexpected CSV column {name:?}")));
            }
        }
        let c = cols.len() - 3;
        let (mut truth, mut pred, mut probs) = (Vec::new(), Vec::new(), Vec::new());
        let mut any_truth = None;
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| Error::invalid(format!("CSV row {}: {what}", n + 1));
            if f.len() != cols.len() {
                return Err(bad("wrong number of fields"));
            }
            if f[0].parse::<usize>().ok() != Some(n) {
                return Err(bad("frame index out of sequence"));
            }
            let has = !f[1].is_empty();
            if *any_truth.get_or_insert(has) != has {
                return Err(bad("true column must be filled on every row or none"));
            }
            if has {
                truth.push(f[1].parse::<usize>().map_err(|_| bad("bad true label"))?);
            }
            let p: usize = f[2].parse().map_err(|_| bad("bad predicted label"))?;
            if p >= c {
                return Err(bad("predicted label outside the probability columns"));
            }
            pred.push(p);
            for v in &f[3..] {
                probs.push(v.parse::<f64>().map_err(|_| bad("bad probability"))?);
            }
        }
        if pred.is_empty() {
            return Err(Error::invalid("CSV has no rows"));
        }
        Ok(Ribbon {
            truth: any_truth.filter(|&t| t).map(|_| truth),
            probs: Tensor::new(vec![pred.len(), c], probs)?,
            pred,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ribbon::parse_csv(&text).map_err(|e| Error::Format {
            kind: "CSV",
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
