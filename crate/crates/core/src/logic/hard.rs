use super::formula::{Formula, Node};
use crate::error::{Error, Result};

/// Exact boolean satisfaction of `formula` at frame `t` of a label sequence.
///
/// Evaluates every node over all frames, children first, so it shares no
/// code path with the soft evaluator.
pub fn eval_hard(formula: &Formula, labels: &[usize], t: usize) -> Result<bool> {
    let n = labels.len();
    if t >= n {
        return Err(Error::invalid(format!("frame {t} outside [0, {n})")));
    }
    let mut truth: Vec<Vec<bool>> = Vec::with_capacity(formula.len());
    for node in formula.nodes() {
        let row: Vec<bool> = match *node {
            Node::Const(b) => vec![b; n],
            Node::Atom(p) => labels.iter().map(|&l| l == p).collect(),
            Node::Not(a) => truth[a.index()].iter().map(|v| !v).collect(),
            Node::Or(a, b) => zip(&truth[a.index()], &truth[b.index()], |x, y| x || y),
            Node::And(a, b) => zip(&truth[a.index()], &truth[b.index()], |x, y| x && y),
            Node::Next(a) => (0..n).map(|i| i + 1 < n && truth[a.index()][i + 1]).collect(),
            Node::Eventually(a) => {
                let a = &truth[a.index()];
                (0..n).map(|i| a[i..].iter().any(|&v| v)).collect()
            }
            Node::WeakUntil(a, b) => {
                let (a, b) = (&truth[a.index()], &truth[b.index()]);
                (0..n)
                    .map(|i| {
                        let k = (i..n).find(|&k| b[k]).unwrap_or(n - 1);
                        a[i..=k].iter().all(|&v| v)
                    })
                    .collect()
            }
            Node::Since(a, b) => {
                let (a, b) = (&truth[a.index()], &truth[b.index()]);
                (0..n)
                    .map(|i| match (i..n).find(|&k| b[k]) {
                        Some(k) => a[k..].iter().all(|&v| v),
                        None => true,
                    })
                    .collect()
            }
        };
        truth.push(row);
    }
    Ok(truth[formula.root().index()][t])
}

fn zip(a: &[bool], b: &[bool], f: impl Fn(bool, bool) -> bool) -> Vec<bool> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
