//! Reverse-mode differentiation over a Wengert tape.
//!
//! Operations are recorded in execution order as they are evaluated. The
//! backward pass walks the tape in exact reverse and accumulates gradients
//! additively wherever a value fans out.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Tanh(Var),
    Transpose(Var),
    Sum(Var),
    RowSum(Var),
    Diag(Var),
    DiagEmbed(Var),
    Skew(Var),
    Inverse(Var),
    LogDet { a: Var, inv_t: Tensor },
    BceLogits { logits: Var, target: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded value; zero when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.nodes[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite output from {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Gradients with respect to it are still available.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `x + b` with the `1 x c` row `b` added to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies column `j` of `x` by `v[j]`, i.e. `x · diag(v)`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.rows() != 1 || vv.cols() != xv.cols() {
            return Err(Error::dim("row scale does not broadcast"));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, e) in out.data_mut().iter_mut().enumerate() {
            *e *= vv.data()[i % c];
        }
        self.push(out, Op::MulRow(x, v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums each row into a `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).row_sums();
        self.push(out, Op::RowSum(a))
    }

    /// Diagonal of a square matrix as a `1 x n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(Error::dim("diag of a non-square matrix"));
        }
        let out = Tensor::row(&av.diagonal());
        self.push(out, Op::Diag(a))
    }

    /// Square diagonal matrix from a `1 x n` row.
    pub fn diag_embed(&mut self, v: Var) -> Result<Var> {
        let vv = self.value(v);
        if vv.rows() != 1 {
            return Err(Error::dim("diag_embed expects a row vector"));
        }
        let out = Tensor::diag(vv.data());
        self.push(out, Op::DiagEmbed(v))
    }

    /// Skew-symmetric `n x n` matrix from its strictly-upper entries, taken
    /// row by row from a `1 x n(n-1)/2` row.
    pub fn skew(&mut self, params: Var, n: usize) -> Result<Var> {
        let pv = self.value(params);
        let need = n * n.saturating_sub(1) / 2;
        if pv.rows() != 1 || pv.cols() != need {
            return Err(Error::dim(format!(
                "skew matrix of order {n} needs {need} parameters, got {:?}",
                pv.shape()
            )));
        }
        let mut out = Tensor::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let a = pv.data()[k];
                out.set(i, j, a);
                out.set(j, i, -a);
                k += 1;
            }
        }
        self.push(out, Op::Skew(params))
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let out = linalg::inverse(self.value(a))?;
        self.push(out, Op::Inverse(a))
    }

    /// `ln det(a)` for a matrix with positive determinant.
    pub fn log_det(&mut self, a: Var) -> Result<Var> {
        let lu = linalg::Lu::factor(self.value(a))?;
        let (sign, ld) = lu.log_det();
        if sign <= 0.0 {
            return Err(Error::Precondition("log_det of a matrix with non-positive determinant".into()));
        }
        let inv_t = lu.inverse()?.transpose();
        self.push(Tensor::scalar(ld), Op::LogDet { a, inv_t })
    }

    /// Per-row Bernoulli negative log-likelihood of `target` under `logits`,
    /// summed over columns. Output is `rows x 1`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (lv, tv) = (self.value(logits), self.value(target));
        same_shape(lv, tv, "bce_with_logits")?;
        let out = bce_logits_rows(lv, tv);
        self.push(out, Op::BceLogits { logits, target })
    }

    /// Per-row categorical cross-entropy of integer labels under `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::dim("label count differs from logit rows"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::dim(format!("label {bad} out of range for {} classes", lv.cols())));
        }
        let mut out = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row_slice(i);
            out.push(log_sum_exp(row) - row[l]);
        }
        let out = Tensor::new(labels.len(), 1, out)?;
        self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Runs the backward pass from a scalar. The tape can be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called on a consumed tape".into()));
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = gemm(&g, false, val(*b), true)?;
                    let gb = gemm(val(*a), true, &g, false)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    accumulate(&mut grads, *b, g.col_sums());
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |x, y| x * y)?;
                    let gb = g.zip_map(val(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRow(x, v) => {
                    let (xv, vv) = (val(*x), val(*v));
                    let c = xv.cols();
                    let mut gx = g.clone();
                    for (k, e) in gx.data_mut().iter_mut().enumerate() {
                        *e *= vv.data()[k % c];
                    }
                    let gv = g.zip_map(xv, |p, q| p * q)?.col_sums();
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let [r, c] = val(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let [r, c] = val(*a).shape();
                    let ga = Tensor::from_fn(r, c, |i, _| g.data()[i]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Diag(a) => accumulate(&mut grads, *a, Tensor::diag(g.data())),
                Op::DiagEmbed(v) => accumulate(&mut grads, *v, Tensor::row(&g.diagonal())),
                Op::Skew(p) => {
                    let nn = g.rows();
                    let mut gp = Vec::with_capacity(nn * nn.saturating_sub(1) / 2);
                    for r in 0..nn {
                        for c in r + 1..nn {
                            gp.push(g.get(r, c) - g.get(c, r));
                        }
                    }
                    accumulate(&mut grads, *p, Tensor::row(&gp));
                }
                Op::Inverse(a) => {
                    // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  ∂L/∂A = -A⁻ᵀ G A⁻ᵀ
                    let y = &node.value;
                    let tmp = gemm(y, true, &g, false)?;
                    let ga = gemm(&tmp, false, y, true)?.scale(-1.0);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogDet { a, inv_t } => accumulate(&mut grads, *a, inv_t.scale(g.item())),
                Op::BceLogits { logits, target } => {
                    let (lv, tv) = (val(*logits), val(*target));
                    let c = lv.cols();
                    let mut gl = Tensor::zeros(lv.rows(), c);
                    for (k, e) in gl.data_mut().iter_mut().enumerate() {
                        *e = g.data()[k / c] * (sigmoid(lv.data()[k]) - tv.data()[k]);
                    }
                    let gt = Tensor::from_fn(lv.rows(), c, |r, j| -g.data()[r] * lv.get(r, j));
                    accumulate(&mut grads, *logits, gl);
                    accumulate(&mut grads, *target, gt);
                }
                Op::SoftmaxXent { logits, labels } => {
                    let lv = val(*logits);
                    let c = lv.cols();
                    let mut gl = Tensor::zeros(lv.rows(), c);
                    for (r, &label) in labels.iter().enumerate() {
                        let row = lv.row_slice(r);
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl.set(r, j, g.data()[r] * (p - onehot));
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
            grads[i] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let [r, c] = node.value.shape();
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(r, c));
                match params.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(id, g);
                    }
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(_) => "relu",
        Op::Exp(_) => "exp",
        Op::Tanh(_) => "tanh",
        Op::Transpose(_) => "transpose",
        Op::Sum(_) => "sum",
        Op::RowSum(_) => "row_sum",
        Op::Diag(_) => "diag",
        Op::DiagEmbed(_) => "diag_embed",
        Op::Skew(_) => "skew",
        Op::Inverse(_) => "inverse",
        Op::LogDet { .. } => "log_det",
        Op::BceLogits { .. } => "bce_with_logits",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable per-row `sum_j [max(l,0) - l t + ln(1 + e^{-|l|})]`.
pub fn bce_logits_rows(logits: &Tensor, target: &Tensor) -> Tensor {
    let c = logits.cols();
    let data = (0..logits.rows())
        .map(|i| {
            logits.data()[i * c..(i + 1) * c]
                .iter()
                .zip(&target.data()[i * c..(i + 1) * c])
                .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
                .sum()
        })
        .collect();
    Tensor::new(logits.rows(), 1, data).expect("row count matches")
}

/// Maximum over all parameter entries of
/// `|analytic - central| / max(1, |central|)`.
///
/// `f` builds a scalar from leaves holding `params`; it is re-run on fresh
/// tapes for the finite differences.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Usage(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let central = (up - down) / (2.0 * eps);
            let err = (analytic.data()[k] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
