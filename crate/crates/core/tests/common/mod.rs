//! Test-only oracles: central finite differences and small dense helpers.
#![allow(dead_code)]

use ndarray::Array2;
use plml::diffmath::{Array, Gradients, Tape, Var};
use plml::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[i, j]];
        xp[[i, j]] = orig + FD_STEP;
        let up = f(&xp);
        xp[[i, j]] = orig - FD_STEP;
        let down = f(&xp);
        xp[[i, j]] = orig;
        g[[i, j]] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Largest elementwise relative error, `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Gauss-Jordan inverse, independent of the LU path under test.
pub fn dense_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[[x, c]].abs().total_cmp(&m[[y, c]].abs())).unwrap();
        for j in 0..n {
            m.swap([c, j], [p, j]);
            inv.swap([c, j], [p, j]);
        }
        let d = m[[c, c]];
        for j in 0..n {
            m[[c, j]] /= d;
            inv[[c, j]] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = m[[i, c]];
                for j in 0..n {
                    m[[i, j]] -= f * m[[c, j]];
                    inv[[i, j]] -= f * inv[[c, j]];
                }
            }
        }
    }
    inv
}

/// Double-loop squared distances.
pub fn brute_sq_dist(z: &Array2<f64>) -> Array2<f64> {
    let n = z.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..z.ncols() {
                s += (z[[i, k]] - z[[j, k]]).powi(2);
            }
            d[[i, j]] = s;
        }
    }
    d
}

/// Label propagation written out with explicit dense inverses:
/// A from population variance of off-diagonal d², L = D^{-1/2} A D^{-1/2},
/// P = (I − αL)⁻¹, Z̄ = P Z, then the same on Z̄ and P̄ [Y_s; 0].
pub fn brute_ep_scores(z: &Array2<f64>, support: &[usize], ways: usize, alpha: f64) -> Array2<f64> {
    let propagator = |z: &Array2<f64>| {
        let n = z.nrows();
        let d = brute_sq_dist(z);
        let off: Vec<f64> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| d[[i, j]]).collect();
        let mean = off.iter().sum::<f64>() / off.len() as f64;
        let var = off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / off.len() as f64;
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a[[i, j]] = if var < 1e-12 { 1.0 } else { (-d[[i, j]] / var).exp() };
                }
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum() + 1e-12).collect();
        let mut sys = Array2::<f64>::eye(n);
        for i in 0..n {
            for j in 0..n {
                sys[[i, j]] -= alpha * a[[i, j]] / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
        dense_inverse(&sys)
    };
    let z_bar = propagator(z).dot(z);
    let p_bar = propagator(&z_bar);
    let mut y = Array2::zeros((z.nrows(), ways));
    for (i, &l) in support.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    p_bar.dot(&y)
}

/// Contracts an op output with fixed random weights so every output entry
/// reaches the scalar loss with a distinct coefficient.
pub fn contract(tape: &Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = random(&mut rng(seed ^ 0xabc), r, c);
    let prod = tape.mul(out, tape.constant(w)).unwrap();
    tape.sum(prod).unwrap()
}

/// Worst relative error between reverse-mode and numeric gradients over
/// all inputs.
pub fn gradcheck(build: &dyn Fn(&Tape, &[Var]) -> Var, inputs: &[Array]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, a)| tape.param(&format!("in{i}"), a.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let f = |xi: &Array| {
            let t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| t.constant(if j == i { xi.clone() } else { a.clone() }))
                .collect();
            let l = build(&t, &vs);
            t.scalar(l)
        };
        let numeric = numeric_grad(&f, x);
        let analytic = grads.by_name(&format!("in{i}")).unwrap();
        worst = worst.max(max_rel_err(analytic, &numeric));
    }
    worst
}

/// Gradient of `f(model)` with respect to every named parameter, by central differences.
pub fn model_fd_error(model: &Model, loss: &dyn Fn(&Model) -> (f64, Gradients)) -> f64 {
    let (_, grads) = loss(model);
    let mut worst = 0.0f64;
    for (name, value) in model.params() {
        let f = |v: &Array| {
            let mut m = model.clone();
            for (n, p) in m.params_mut() {
                if n == name {
                    p.assign(v);
                }
            }
            loss(&m).0
        };
        let numeric = numeric_grad(&f, value);
        worst = worst.max(max_rel_err(grads.by_name(&name).unwrap(), &numeric));
    }
    worst
}
