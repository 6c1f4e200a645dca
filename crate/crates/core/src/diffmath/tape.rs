//! Tape-based reverse-mode differentiation over dense 2-D arrays.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute the vector-Jacobian product later. Nodes can only
//! reference earlier nodes, so the recorded graph is acyclic by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use plml::diffmath::{Array, Tape};
//! use ndarray::array;
//!
//! let tape = Tape::new();
//! let w = tape.param("w", array![[1.0, 2.0]]);
//! let c = tape.constant(array![[3.0, -1.0]]);
//! let loss = tape.sum(tape.mul(w, c).unwrap()).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.by_name("w").unwrap(), &array![[3.0, -1.0]]);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

use super::linalg::LuFactors;
use super::MathError;

pub type Array = Array2<f64>;

/// Floor applied to probabilities before taking logs in [`Tape::cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;
/// Added to node degrees before the inverse square root in [`Tape::sym_normalize`].
pub const DEGREE_EPS: f64 = 1e-12;
/// Variances below this switch [`Tape::gaussian_adjacency`] to the complete graph.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Handle to a differentiable value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    DivRows { x: Var, v: Var },
    PairwiseSqDist(Var),
    CrossSqDist(Var, Var),
    RowSoftmax(Var),
    CrossEntropy { probs: Var, targets: Array, weights: Vec<f64> },
    LinearSolve { a: Var, b: Var, lu: LuFactors },
    GaussianAdjacency { d2: Var, sigma2: Option<f64>, mean: f64 },
    SymNormalize { a: Var, inv_sqrt_deg: Vec<f64> },
    IdentityMinusScaled(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Records a computation for later differentiation.
///
/// Forward values are immutable once recorded. A tape is single-threaded;
/// build one per episode or minibatch.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
}

fn ensure_finite(op: &'static str, value: &Array) -> Result<(), MathError> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MathError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> MathError {
    MathError::Shape { op, detail }
}

fn accumulate(slot: &mut Option<Array>, g: Array) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Softmax of each row, stabilized by subtracting the row maximum.
pub fn softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Squared Euclidean distance between every row of `x` and every row of `y`.
pub fn cross_sq_dist(x: &Array, y: &Array) -> Array {
    let mut out = Array::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.rows().into_iter().enumerate() {
        for (j, yj) in y.rows().into_iter().enumerate() {
            out[[i, j]] = xi.iter().zip(yj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    out
}

/// Pairwise squared distances; exactly symmetric with an exact-zero diagonal.
pub fn pairwise_sq_dist(z: &Array) -> Array {
    let n = z.nrows();
    let mut out = Array::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

/// Population mean and variance of the off-diagonal entries.
fn off_diagonal_moments(d2: &Array) -> (f64, f64) {
    let n = d2.nrows();
    let count = (n * (n - 1)) as f64;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += d2[[i, j]];
            }
        }
    }
    let mean = sum / count;
    let mut var = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e = d2[[i, j]] - mean;
                var += e * e;
            }
        }
    }
    (mean, var / count)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Array, name: &'static str) -> Result<Var, MathError> {
        ensure_finite(name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    /// Borrow the forward value of `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Array> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Records a leaf that is not tracked by name. Gradients still reach it.
    pub fn constant(&self, value: Array) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf });
        Var(nodes.len() - 1)
    }

    /// Records a named parameter leaf. Names are unique per tape; a second
    /// registration under the same name returns the original handle.
    pub fn param(&self, name: &str, value: Array) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let v = self.constant(value);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, MathError> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.ncols() != vb.nrows() {
                return Err(shape_err("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
            }
            va.dot(&*vb)
        };
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// `x · wᵀ + b` with `w` stored as out×in and `b` as 1×out.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, MathError> {
        let value = {
            let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
            if vx.ncols() != vw.ncols() || vb.dim() != (1, vw.nrows()) {
                return Err(shape_err(
                    "linear",
                    format!("input {:?}, weight {:?}, bias {:?}", vx.dim(), vw.dim(), vb.dim()),
                ));
            }
            vx.dot(&vw.t()) + &*vb
        };
        self.push(Op::Linear { x, w, b }, value, "linear")
    }

    pub fn relu(&self, x: Var) -> Result<Var, MathError> {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(Op::Relu(x), value, "relu")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), MathError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, MathError> {
        self.same_shape("add", a, b)?;
        let value = &*self.value(a) + &*self.value(b);
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, MathError> {
        self.same_shape("sub", a, b)?;
        let value = &*self.value(a) - &*self.value(b);
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, MathError> {
        self.same_shape("mul", a, b)?;
        let value = &*self.value(a) * &*self.value(b);
        self.push(Op::Mul(a, b), value, "mul")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var, MathError> {
        let value = self.value(x).mapv(|v| v * c);
        self.push(Op::Scale(x, c), value, "scale")
    }

    /// Sum of all elements as a 1x1 value.
    pub fn sum(&self, x: Var) -> Result<Var, MathError> {
        let value = Array::from_elem((1, 1), self.value(x).sum());
        self.push(Op::Sum(x), value, "sum")
    }

    pub fn sum_squares(&self, x: Var) -> Result<Var, MathError> {
        let value = Array::from_elem((1, 1), self.value(x).iter().map(|v| v * v).sum());
        self.push(Op::SumSquares(x), value, "sum_squares")
    }

    pub fn transpose(&self, x: Var) -> Result<Var, MathError> {
        let value = self.value(x).t().to_owned();
        self.push(Op::Transpose(x), value, "transpose")
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var, MathError> {
        let value = {
            let vx = self.value(x);
            if start > end || end > vx.nrows() {
                return Err(shape_err("slice_rows", format!("{start}..{end} of {} rows", vx.nrows())));
            }
            vx.slice(s![start..end, ..]).to_owned()
        };
        self.push(Op::SliceRows { x, start }, value, "slice_rows")
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, MathError> {
        let value = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views)
                .map_err(|e| shape_err("concat_rows", e.to_string()))?
        };
        self.push(Op::ConcatRows(parts.to_vec()), value, "concat_rows")
    }

    /// Divides row `i` of `x` by `v[i, 0]`.
    pub fn div_rows(&self, x: Var, v: Var) -> Result<Var, MathError> {
        let value = {
            let (vx, vv) = (self.value(x), self.value(v));
            if vv.dim() != (vx.nrows(), 1) {
                return Err(shape_err("div_rows", format!("{:?} / {:?}", vx.dim(), vv.dim())));
            }
            &*vx / &*vv
        };
        self.push(Op::DivRows { x, v }, value, "div_rows")
    }

    /// n×n matrix of squared Euclidean distances between rows of `z`.
    pub fn pairwise_sq_dist(&self, z: Var) -> Result<Var, MathError> {
        let value = {
            let vz = self.value(z);
            if vz.nrows() == 0 || vz.ncols() == 0 {
                return Err(shape_err("pairwise_sq_dist", format!("{:?}", vz.dim())));
            }
            ensure_finite("pairwise_sq_dist", &vz)?;
            pairwise_sq_dist(&vz)
        };
        self.push(Op::PairwiseSqDist(z), value, "pairwise_sq_dist")
    }

    /// Squared distances between rows of `x` (n×d) and rows of `y` (m×d).
    pub fn cross_sq_dist(&self, x: Var, y: Var) -> Result<Var, MathError> {
        let value = {
            let (vx, vy) = (self.value(x), self.value(y));
            if vx.ncols() != vy.ncols() {
                return Err(shape_err("cross_sq_dist", format!("{:?} vs {:?}", vx.dim(), vy.dim())));
            }
            cross_sq_dist(&vx, &vy)
        };
        self.push(Op::CrossSqDist(x, y), value, "cross_sq_dist")
    }

    pub fn row_softmax(&self, x: Var) -> Result<Var, MathError> {
        let value = {
            let vx = self.value(x);
            ensure_finite("row_softmax", &vx)?;
            softmax_rows(&vx)
        };
        self.push(Op::RowSoftmax(x), value, "row_softmax")
    }

    /// Mean over rows of `-log p_target`, with `p` floored at [`LOG_FLOOR`].
    pub fn cross_entropy(&self, probs: Var, targets: &Array) -> Result<Var, MathError> {
        let n = targets.nrows();
        self.weighted_cross_entropy(probs, targets, &vec![1.0; n])
    }

    /// `(1/n) Σ_i w_i · (−Σ_j t_ij log p_ij)`. Rows with zero weight (or an
    /// all-zero target row) contribute nothing to value or gradient.
    pub fn weighted_cross_entropy(
        &self,
        probs: Var,
        targets: &Array,
        weights: &[f64],
    ) -> Result<Var, MathError> {
        let value = {
            let p = self.value(probs);
            if p.dim() != targets.dim() || weights.len() != p.nrows() || p.nrows() == 0 {
                return Err(shape_err(
                    "cross_entropy",
                    format!("probs {:?}, targets {:?}, weights {}", p.dim(), targets.dim(), weights.len()),
                ));
            }
            let mut total = 0.0;
            for (i, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for j in 0..p.ncols() {
                    let t = targets[[i, j]];
                    if t != 0.0 {
                        total -= w * t * p[[i, j]].max(LOG_FLOOR).ln();
                    }
                }
            }
            Array::from_elem((1, 1), total / p.nrows() as f64)
        };
        self.push(
            Op::CrossEntropy { probs, targets: targets.clone(), weights: weights.to_vec() },
            value,
            "cross_entropy",
        )
    }

    /// Solves `A X = B` by LU with partial pivoting.
    pub fn linear_solve(&self, a: Var, b: Var) -> Result<Var, MathError> {
        let (value, lu) = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.nrows() != vb.nrows() {
                return Err(shape_err("linear_solve", format!("{:?} \\ {:?}", va.dim(), vb.dim())));
            }
            ensure_finite("linear_solve", &va)?;
            let lu = LuFactors::factor(&va)?;
            (lu.solve(&vb), lu)
        };
        self.push(Op::LinearSolve { a, b, lu }, value, "linear_solve")
    }

    /// Gaussian affinities `exp(-d²/σ²)` off the diagonal, zero on it, where
    /// σ² is the population variance of the off-diagonal entries of `d2`.
    /// When σ² < [`VARIANCE_FLOOR`] every off-diagonal entry is 1.
    pub fn gaussian_adjacency(&self, d2: Var) -> Result<Var, MathError> {
        let (value, sigma2, mean) = {
            let vd = self.value(d2);
            let n = vd.nrows();
            if n < 2 || vd.ncols() != n {
                return Err(shape_err("gaussian_adjacency", format!("{:?}", vd.dim())));
            }
            let (mean, var) = off_diagonal_moments(&vd);
            let sigma2 = (var >= VARIANCE_FLOOR).then_some(var);
            let mut a = Array::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        a[[i, j]] = match sigma2 {
                            Some(s) => (-vd[[i, j]] / s).exp(),
                            None => 1.0,
                        };
                    }
                }
            }
            (a, sigma2, mean)
        };
        self.push(Op::GaussianAdjacency { d2, sigma2, mean }, value, "gaussian_adjacency")
    }

    /// `D^{-1/2} A D^{-1/2}` with `D_ii = Σ_j A_ij + DEGREE_EPS`.
    pub fn sym_normalize(&self, a: Var) -> Result<Var, MathError> {
        let (value, inv_sqrt_deg) = {
            let va = self.value(a);
            let n = va.nrows();
            if va.ncols() != n {
                return Err(shape_err("sym_normalize", format!("{:?}", va.dim())));
            }
            let r: Vec<f64> = va.rows().into_iter().map(|row| (row.sum() + DEGREE_EPS).powf(-0.5)).collect();
            let mut l = va.to_owned();
            for i in 0..n {
                for j in 0..n {
                    l[[i, j]] *= r[i] * r[j];
                }
            }
            (l, r)
        };
        self.push(Op::SymNormalize { a, inv_sqrt_deg }, value, "sym_normalize")
    }

    /// `I - alpha · L` for square `L`.
    pub fn identity_minus_scaled(&self, l: Var, alpha: f64) -> Result<Var, MathError> {
        let value = {
            let vl = self.value(l);
            let n = vl.nrows();
            if vl.ncols() != n {
                return Err(shape_err("identity_minus_scaled", format!("{:?}", vl.dim())));
            }
            Array::eye(n) - &vl.mapv(|v| alpha * v)
        };
        self.push(Op::IdentityMinusScaled(l, alpha), value, "identity_minus_scaled")
    }

    /// Reverse sweep from a scalar `loss`. Every named parameter appears in
    /// the result; those the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, MathError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.dim();
        if shape != (1, 1) {
            return Err(MathError::NonScalar { shape });
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones((1, 1)));
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    leaves.insert(idx, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Linear { x, w, b } => {
                    accumulate(&mut grads[x.0], g.dot(val(*w)));
                    accumulate(&mut grads[w.0], g.t().dot(val(*x)));
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Relu(x) => {
                    let mask = val(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads[x.0], g * mask);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.mapv(|v| -v));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(x, c) => accumulate(&mut grads[x.0], g.mapv(|v| v * c)),
                Op::Sum(x) => {
                    let gx = Array::from_elem(val(*x).dim(), g[[0, 0]]);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SumSquares(x) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads[x.0], val(*x).mapv(|v| 2.0 * s * v));
                }
                Op::Transpose(x) => accumulate(&mut grads[x.0], g.t().to_owned()),
                Op::SliceRows { x, start } => {
                    let mut gx = Array::zeros(val(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = val(*p).nrows();
                        accumulate(&mut grads[p.0], g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::DivRows { x, v } => {
                    let (vx, vv) = (val(*x), val(*v));
                    let gx = &g / vv;
                    let mut gv = Array::zeros(vv.dim());
                    for i in 0..vx.nrows() {
                        let d = vv[[i, 0]];
                        let dot: f64 = g.row(i).iter().zip(vx.row(i).iter()).map(|(a, b)| a * b).sum();
                        gv[[i, 0]] = -dot / (d * d);
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::PairwiseSqDist(z) => {
                    let vz = val(*z);
                    let n = vz.nrows();
                    let mut gz = Array::zeros(vz.dim());
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let c = 2.0 * (g[[i, j]] + g[[j, i]]);
                            if c == 0.0 {
                                continue;
                            }
                            for k in 0..vz.ncols() {
                                gz[[i, k]] += c * (vz[[i, k]] - vz[[j, k]]);
                            }
                        }
                    }
                    accumulate(&mut grads[z.0], gz);
                }
                Op::CrossSqDist(x, y) => {
                    let (vx, vy) = (val(*x), val(*y));
                    let mut gx = Array::zeros(vx.dim());
                    let mut gy = Array::zeros(vy.dim());
                    for i in 0..vx.nrows() {
                        for j in 0..vy.nrows() {
                            let c = 2.0 * g[[i, j]];
                            for k in 0..vx.ncols() {
                                let d = c * (vx[[i, k]] - vy[[j, k]]);
                                gx[[i, k]] += d;
                                gy[[j, k]] -= d;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[y.0], gy);
                }
                Op::RowSoftmax(x) => {
                    let sm = &node.value;
                    let mut gx = Array::zeros(sm.dim());
                    for i in 0..sm.nrows() {
                        let dot: f64 = g.row(i).iter().zip(sm.row(i).iter()).map(|(a, b)| a * b).sum();
                        for j in 0..sm.ncols() {
                            gx[[i, j]] = sm[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::CrossEntropy { probs, targets, weights } => {
                    let p = val(*probs);
                    let scale = g[[0, 0]] / p.nrows() as f64;
                    let mut gp = Array::zeros(p.dim());
                    for (i, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        for j in 0..p.ncols() {
                            let t = targets[[i, j]];
                            if t != 0.0 && p[[i, j]] > LOG_FLOOR {
                                gp[[i, j]] = -scale * w * t / p[[i, j]];
                            }
                        }
                    }
                    accumulate(&mut grads[probs.0], gp);
                }
                Op::LinearSolve { a, b, lu } => {
                    // X = A⁻¹B  ⇒  dB = A⁻ᵀ G,  dA = −dB Xᵀ
                    let gb = lu.solve_transposed(&g);
                    let ga = -gb.dot(&node.value.t());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::GaussianAdjacency { d2, sigma2, mean } => {
                    let vd = val(*d2);
                    let n = vd.nrows();
                    let mut gd = Array::zeros((n, n));
                    if let Some(s) = *sigma2 {
                        let a = &node.value;
                        let count = (n * (n - 1)) as f64;
                        let mut g_sigma = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                if i != j {
                                    gd[[i, j]] = -g[[i, j]] * a[[i, j]] / s;
                                    g_sigma += g[[i, j]] * a[[i, j]] * vd[[i, j]] / (s * s);
                                }
                            }
                        }
                        for i in 0..n {
                            for j in 0..n {
                                if i != j {
                                    gd[[i, j]] += g_sigma * 2.0 * (vd[[i, j]] - mean) / count;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[d2.0], gd);
                }
                Op::SymNormalize { a, inv_sqrt_deg: r } => {
                    let va = val(*a);
                    let n = va.nrows();
                    let mut ga = Array::zeros((n, n));
                    let mut gr = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g[[i, j]];
                            ga[[i, j]] = gij * r[i] * r[j];
                            gr[i] += gij * va[[i, j]] * r[j];
                            gr[j] += gij * va[[i, j]] * r[i];
                        }
                    }
                    for i in 0..n {
                        let gdeg = gr[i] * -0.5 * r[i].powi(3);
                        for j in 0..n {
                            ga[[i, j]] += gdeg;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::IdentityMinusScaled(l, alpha) => {
                    accumulate(&mut grads[l.0], g.mapv(|v| -alpha * v));
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, v) in self.params.borrow().iter() {
            let g = leaves
                .remove(&v.0)
                .unwrap_or_else(|| Array::zeros(nodes[v.0].value.dim()));
            by_name.insert(name.clone(), (*v, g));
        }
        Ok(Gradients { leaves, by_name })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Array>,
    by_name: BTreeMap<String, (Var, Array)>,
}

impl Gradients {
    /// Gradient reaching a leaf; `None` for leaves the loss does not touch
    /// and for non-leaf nodes. Named parameters are looked up by handle too.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.leaves
            .get(&v.0)
            .or_else(|| self.by_name.values().find(|(p, _)| *p == v).map(|(_, g)| g))
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.by_name.get(name).map(|(_, g)| g)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.by_name.iter().map(|(k, (_, g))| (k.as_str(), g))
    }
}

/// Plain gradient descent: `param ← param − lr · grad`.
pub fn sgd_step(param: &mut Array, grad: &Array, lr: f64) -> Result<(), MathError> {
    if param.dim() != grad.dim() {
        return Err(shape_err("sgd_step", format!("param {:?}, grad {:?}", param.dim(), grad.dim())));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(MathError::InvalidArgument(format!("learning rate {lr}")));
    }
    param.scaled_add(-lr, grad);
    ensure_finite("sgd_step", param)
}
