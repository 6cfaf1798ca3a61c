//! Every primitive op against central finite differences on random shapes.

use cpkd::tensor_core::{grad_check, Tape, Tensor, Value};
use cpkd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-6;
const SEEDS: u64 = 100;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Contracts `v` with fixed random weights so every output element matters.
fn project<'t>(tape: &'t Tape, v: Value<'t>, seed: u64) -> Result<Value<'t>> {
    let shape = v.shape();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = tape.constant(Tensor::new(shape, random_vec(&mut rng, n, -1.0, 1.0))?);
    Ok(v.mul(w)?.sum())
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl for<'t> Fn(Value<'t>) -> Result<Value<'t>>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
        let point = random_vec(&mut rng, r * c, lo, hi);
        let err = grad_check(
            |tape, x| {
                let x = x.reshape(&[r, c])?;
                project(tape, op(x)?, seed)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn elementwise_unary_ops() {
    check_unary("neg", -2.0, 2.0, |x| Ok(x.neg()));
    check_unary("scale", -2.0, 2.0, |x| Ok(x.scale(-1.7)));
    check_unary("add_scalar", -2.0, 2.0, |x| Ok(x.add_scalar(0.3)));
    check_unary("exp", -2.0, 2.0, |x| Ok(x.exp()));
    check_unary("log", 0.2, 3.0, |x| x.ln());
    check_unary("tanh", -2.0, 2.0, |x| Ok(x.tanh()));
    check_unary("sigmoid", -3.0, 3.0, |x| Ok(x.sigmoid()));
    check_unary("softplus", -3.0, 3.0, |x| Ok(x.softplus()));
    // stay clear of the kinks at the clamp bounds
    check_unary("clamp", -2.0, 2.0, |x| Ok(x.add_scalar(1e-3).clamp(-1.0, 1.0)));
    check_unary("max_scalar", -2.0, 2.0, |x| Ok(x.add_scalar(1e-3).max_scalar(0.0)));
}

#[test]
fn reductions_and_normalizers() {
    check_unary("sum", -2.0, 2.0, |x| Ok(x.sum()));
    check_unary("mean", -2.0, 2.0, |x| Ok(x.mean()));
    check_unary("sum_axis0", -2.0, 2.0, |x| x.sum_axis(0));
    check_unary("mean_axis1", -2.0, 2.0, |x| x.mean_axis(1));
    check_unary("softmax0", -2.0, 2.0, |x| x.softmax(0));
    check_unary("softmax1", -2.0, 2.0, |x| x.softmax(1));
    check_unary("logsumexp0", -2.0, 2.0, |x| x.logsumexp(0));
    check_unary("logsumexp1", -2.0, 2.0, |x| x.logsumexp(1));
}

#[test]
fn softmax_on_a_five_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = random_vec(&mut rng, 5, -2.0, 2.0);
    let err = grad_check(|tape, x| project(tape, x.softmax(0)?, 5), &point, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn structural_ops() {
    check_unary("slice_rows", -2.0, 2.0, |x| {
        let r = x.shape()[0];
        x.slice(0, r / 2, r)
    });
    check_unary("slice_cols", -2.0, 2.0, |x| {
        let c = x.shape()[1];
        x.slice(1, 0, c.div_ceil(2))
    });
    check_unary("concat_self", -2.0, 2.0, |x| {
        let y = x.exp();
        x.tape().concat(&[x, y, x], 1)
    });
    check_unary("element", -2.0, 2.0, |x| {
        let n: usize = x.shape().iter().product();
        x.element(n - 1)?.mul(x.element(0)?)
    });
    check_unary("reshape", -2.0, 2.0, |x| {
        let n: usize = x.shape().iter().product();
        x.reshape(&[n])?.softmax(0)
    });
}

#[test]
fn binary_ops_with_broadcasting() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
        // a: [r, c]; b: [1, c] row vector broadcast over rows
        let n = r * c + c;
        let point = random_vec(&mut rng, n, 0.5, 2.0);
        for op in ["add", "sub", "mul", "div"] {
            let err = grad_check(
                |tape, x| {
                    let a = x.slice(0, 0, r * c)?.reshape(&[r, c])?;
                    let b = x.slice(0, r * c, n)?.reshape(&[1, c])?;
                    let y = match op {
                        "add" => a.add(b)?,
                        "sub" => a.sub(b)?,
                        "mul" => a.mul(b)?,
                        _ => a.div(b)?,
                    };
                    project(tape, y, seed)
                },
                &point,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "{op} seed {seed}: {err}");
        }
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let point = random_vec(&mut rng, m * k + k * n, -1.0, 1.0);
        let err = grad_check(
            |tape, x| {
                let a = x.slice(0, 0, m * k)?.reshape(&[m, k])?;
                let b = x.slice(0, m * k, m * k + k * n)?.reshape(&[k, n])?;
                project(tape, a.matmul(b)?, seed)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn dilated_conv_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1..9);
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let dilation = rng.random_range(1..5);
        let nx = t * cin;
        let point = random_vec(&mut rng, nx + k * cin * cout, -1.0, 1.0);
        let err = grad_check(
            |tape, p| {
                let x = p.slice(0, 0, nx)?.reshape(&[t, cin])?;
                let w = p.slice(0, nx, nx + k * cin * cout)?.reshape(&[k, cin, cout])?;
                project(tape, tape.conv1d(x, w, dilation)?, seed)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn soft_min_and_max_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..8);
        let gamma = [0.05, 0.5, 2.0][rng.random_range(0..3)];
        let point = random_vec(&mut rng, n, -1.0, 1.0);
        for min in [true, false] {
            let err = grad_check(
                |tape, x| {
                    let xs = (0..n).map(|i| x.element(i)).collect::<Result<Vec<_>>>()?;
                    let y = if min { tape.soft_min(&xs, gamma)? } else { tape.soft_max(&xs, gamma)? };
                    Ok(y.scale(1.3))
                },
                &point,
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} min={min}: {err}");
        }
    }
}
