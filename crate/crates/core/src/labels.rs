//! Conversions between class-index sequences and one-hot matrices.

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

/// `T x C` one-hot matrix for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(Tensor::from_fn2(labels.len(), classes, |i, c| f64::from(u8::from(labels[i] == c))))
}

/// Class indices of a one-hot matrix; rejects rows that are not one-hot.
pub fn from_one_hot(y: &Tensor) -> Result<Vec<usize>> {
    (0..y.rows())
        .map(|i| {
            let row = y.row(i);
            let hot: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1.0).collect();
            if hot.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("row {i} is not one-hot")));
            }
            Ok(hot[0])
        })
        .collect()
}

/// Indices `i` with `labels[i] != labels[i + 1]`.
pub fn change_points(labels: &[usize]) -> Vec<usize> {
    labels
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(i, _)| i)
        .collect()
}

/// Collapses runs: `[a, a, b, a] -> [(a, 2), (b, 1), (a, 1)]`.
pub fn segments(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some((c, n)) if *c == l => *n += 1,
            _ => out.push((l, 1)),
        }
    }
    out
}
