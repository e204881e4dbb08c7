use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    LogSumExp(Var),
    Max(Var, usize),
    Broadcast(Var),
    Sum(Var),
    Mask(Var, Vec<f64>),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive applications in topological order and replays their
/// pullbacks in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    consumed: bool,
    tanh_pullback_scale: Option<f64>,
}

/// Gradients of a scalar root with respect to every leaf on the tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`] only.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// A named leaf whose gradient is reported by [`Gradients::param`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.params.push((name.into(), v));
        Ok(v)
    }

    /// Scales the tanh pullback; used to check that the gradient checker
    /// notices a broken derivative.
    #[doc(hidden)]
    pub fn inject_tanh_pullback_fault(&mut self, scale: f64) {
        self.tanh_pullback_scale = Some(scale);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    /// `[m, n] x [n] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.shape().len() != 2 || vw.shape()[1] != vx.len() {
            return Err(Error::shape(
                "matvec",
                format!("{:?} x {:?}", vw.shape(), vx.shape()),
            ));
        }
        let n = vx.len();
        let xs = vx.data();
        let out: Vec<f64> = vw
            .data()
            .chunks_exact(n)
            .map(|row| row.iter().zip(xs).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Tensor::vector(out), Op::MatVec(w, x), "matvec")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        let bd = vb.data();
        for (i, arow) in va.data().chunks_exact(k).enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aval) in arow.iter().enumerate() {
                if aval == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aval * bv;
                }
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    /// Adds the vector `row` to every row of the matrix `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vm.shape().len() != 2 || vm.shape()[1] != vr.len() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", vm.shape(), vr.shape()),
            ));
        }
        let n = vr.len();
        let mut data = vm.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (o, r) in chunk.iter_mut().zip(vr.data()) {
                *o += r;
            }
        }
        let value = Tensor::new(vm.shape().to_vec(), data)?;
        self.push(value, Op::AddRow(m, row), "add_row")
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat")
    }

    /// Flat slice `[offset, offset + len)` as a vector.
    pub fn slice(&mut self, a: Var, offset: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if len == 0 || offset + len > va.len() {
            return Err(Error::shape(
                "slice",
                format!("[{offset}, {}) of {} values", offset + len, va.len()),
            ));
        }
        let data = va.data()[offset..offset + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice(a, offset), "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a), "ln", f64::ln)
    }

    /// `ln Σ exp(a_i)` over all elements, computed with the max shift.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = log_sum_exp(self.value(a).data());
        self.push(Tensor::scalar(v), Op::LogSumExp(a), "log_sum_exp")
    }

    /// Maximum over all elements and its position; ties go to the lowest index.
    pub fn max(&mut self, a: Var) -> Result<(Var, usize)> {
        let data = self.value(a).data();
        let mut best = 0;
        for (i, &x) in data.iter().enumerate() {
            if x > data[best] {
                best = i;
            }
        }
        let v = data[best];
        let out = self.push(Tensor::scalar(v), Op::Max(a, best), "max")?;
        Ok((out, best))
    }

    /// Repeats a one-element tensor `n` times.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Result<Var> {
        let va = self.value(a);
        if !va.is_scalar() || n == 0 {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} to {n}", va.shape()),
            ));
        }
        let value = Tensor::vector(vec![va.item(); n]);
        self.push(value, Op::Broadcast(a), "broadcast")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Multiplies by a fixed mask (entries `0` or `1 / (1 - rate)`).
    pub fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(Error::shape(
                "apply_mask",
                format!("mask of {} for {} values", mask.len(), va.len()),
            ));
        }
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Mask(a, mask), "apply_mask")
    }

    /// Inverted dropout with a mask drawn from `rng`; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.apply_mask(a, mask)
    }

    /// Reverse pass from a scalar root. A tape supports one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::RootNotScalar(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    leaves.insert(Var(i), t);
                }
                Op::Add(a, b) => {
                    for (d, gi) in accumulate(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += gi;
                    }
                    for (d, gi) in accumulate(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, gi) in accumulate(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += gi;
                    }
                    for (d, gi) in accumulate(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    let da = accumulate(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(vb) {
                        *d += gi * y;
                    }
                    let db = accumulate(&mut grads, *b, g.len());
                    for ((d, gi), x) in db.iter_mut().zip(&g).zip(va) {
                        *d += gi * x;
                    }
                }
                Op::Scale(a, c) => {
                    for (d, gi) in accumulate(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                }
                Op::MatVec(w, x) => {
                    let vw = &self.nodes[w.0].value;
                    let vx = self.nodes[x.0].value.data();
                    let n = vx.len();
                    let dw = accumulate(&mut grads, *w, vw.len());
                    for (drow, gi) in dw.chunks_exact_mut(n).zip(&g) {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (d, xj) in drow.iter_mut().zip(vx) {
                            *d += gi * xj;
                        }
                    }
                    let dx = accumulate(&mut grads, *x, n);
                    for (row, gi) in vw.data().chunks_exact(n).zip(&g) {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (d, wij) in dx.iter_mut().zip(row) {
                            *d += gi * wij;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (k, n) = (va.shape()[1], vb.shape()[1]);
                    let bd = vb.data();
                    let da = accumulate(&mut grads, *a, va.len());
                    for (darow, grow) in da.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
                        for (p, d) in darow.iter_mut().enumerate() {
                            *d += grow
                                .iter()
                                .zip(&bd[p * n..(p + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                    let db = accumulate(&mut grads, *b, vb.len());
                    for (arow, grow) in va.data().chunks_exact(k).zip(g.chunks_exact(n)) {
                        for (p, &aval) in arow.iter().enumerate() {
                            if aval == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aval * gv;
                            }
                        }
                    }
                }
                Op::AddRow(m, row) => {
                    let n = self.nodes[row.0].value.len();
                    for (d, gi) in accumulate(&mut grads, *m, g.len()).iter_mut().zip(&g) {
                        *d += gi;
                    }
                    let dr = accumulate(&mut grads, *row, n);
                    for chunk in g.chunks_exact(n) {
                        for (d, gi) in dr.iter_mut().zip(chunk) {
                            *d += gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let dp = accumulate(&mut grads, *p, len);
                        for (d, gi) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += gi;
                        }
                        off += len;
                    }
                }
                Op::Slice(a, offset) => {
                    let len = self.nodes[a.0].value.len();
                    let da = accumulate(&mut grads, *a, len);
                    for (d, gi) in da[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Reshape(a) => {
                    for (d, gi) in accumulate(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let da = accumulate(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let fault = self.tanh_pullback_scale.unwrap_or(1.0);
                    let da = accumulate(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(out) {
                        *d += fault * gi * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    let da = accumulate(&mut grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(out) {
                        *d += gi * y;
                    }
                }
                Op::Ln(a) => {
                    let va = self.nodes[a.0].value.data();
                    let da = accumulate(&mut grads, *a, g.len());
                    for ((d, gi), x) in da.iter_mut().zip(&g).zip(va) {
                        *d += gi / x;
                    }
                }
                Op::LogSumExp(a) => {
                    let va = self.nodes[a.0].value.data();
                    let lse = out[0];
                    let da = accumulate(&mut grads, *a, va.len());
                    for (d, x) in da.iter_mut().zip(va) {
                        *d += g[0] * (x - lse).exp();
                    }
                }
                Op::Max(a, arg) => {
                    let len = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, len)[*arg] += g[0];
                }
                Op::Broadcast(a) => {
                    accumulate(&mut grads, *a, 1)[0] += g.iter().sum::<f64>();
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    for d in accumulate(&mut grads, *a, len).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mask(a, mask) => {
                    let da = accumulate(&mut grads, *a, g.len());
                    for ((d, gi), m) in da.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            let grad = leaves
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            if !grad.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            params
                .entry(name.clone())
                .and_modify(|acc: &mut Tensor| {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                })
                .or_insert(grad);
        }
        Ok(Gradients { leaves, params })
    }
}
