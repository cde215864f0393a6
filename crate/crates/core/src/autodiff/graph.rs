use std::sync::atomic::{AtomicU64, Ordering};

use smallvec::smallvec;

use super::tensor::{Shape, Tensor};
use super::AutodiffError;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node of a [`Graph`]. Only valid for the graph generation that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: u32,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(u32, u32),
    AddBias(u32, u32),
    LeakyRelu(u32, f64),
    MaskedLogSoftmax(u32, Vec<bool>),
    Index(u32, usize),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Scale(u32, f64),
    AddScalar(u32),
    Exp(u32),
    Log(u32),
    Square(u32),
    ClampMin(u32, f64),
    Min(u32, u32),
    Sum(Vec<u32>),
    WeightedSum(Vec<(u32, f64)>),
    SumAll(u32),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Tape of tensor operations recorded in topological order.
///
/// Nodes are appended as operations run, so node ids already form a
/// topological order and [`Graph::grad`] walks them once in reverse. Calling
/// `grad` consumes the tape: the graph is cleared and every previously issued
/// [`Var`] becomes stale.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    generation: u64,
    first_nan: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: fresh_generation(),
            first_nan: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.id_of(v)].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Fails if any recorded forward value was NaN or `+inf`.
    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.first_nan {
            Some((node, op)) => Err(AutodiffError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    fn id_of(&self, v: Var) -> usize {
        assert_eq!(
            v.generation, self.generation,
            "variable belongs to a different or already consumed graph"
        );
        v.id as usize
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Var {
        let id = self.nodes.len();
        // -inf is the masked log-probability sentinel; NaN and +inf are errors.
        if self.first_nan.is_none()
            && value.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY)
        {
            self.first_nan = Some((id, name));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            id: id as u32,
            generation: self.generation,
        }
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        op: impl FnOnce(u32) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Var {
        let ia = self.id_of(a);
        let node = &self.nodes[ia];
        let shape = node.value.shape().into();
        let data = node.value.data().iter().map(|&x| f(x)).collect();
        let needs_grad = node.needs_grad;
        self.push(op(ia as u32), Tensor::from_parts(shape, data), needs_grad, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: impl FnOnce(u32, u32) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var {
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        assert_eq!(
            na.value.shape(),
            nb.value.shape(),
            "{name}: operand shapes differ"
        );
        let shape: Shape = na.value.shape().into();
        let data = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs_grad = na.needs_grad || nb.needs_grad;
        self.push(
            op(ia as u32, ib as u32),
            Tensor::from_parts(shape, data),
            needs_grad,
            name,
        )
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert_eq!(ta.shape().len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, m) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), (k, 1), tb.data(), (m, 1), &mut out, false);
        let needs_grad = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        self.push(
            Op::MatMul(ia as u32, ib as u32),
            Tensor::from_parts(smallvec![n, m], out),
            needs_grad,
            "matmul",
        )
    }

    /// Adds a `[m]` bias to every row of a `[n, m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ia, ib) = (self.id_of(a), self.id_of(bias));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, m) = ta.rows_cols();
        assert_eq!(tb.len(), m, "add_bias: bias length must match columns");
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        debug_assert_eq!(out.len(), n * m);
        let shape = ta.shape().into();
        let needs_grad = self.nodes[ia].needs_grad || self.nodes[ib].needs_grad;
        self.push(
            Op::AddBias(ia as u32, ib as u32),
            Tensor::from_parts(shape, out),
            needs_grad,
            "add_bias",
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            "leaky_relu",
            |i| Op::LeakyRelu(i, slope),
            |x| if x > 0.0 { x } else { slope * x },
        )
    }

    /// Row-wise log-softmax restricted to `mask`.
    ///
    /// Works on a vector or on each row of a matrix. Masked-out entries hold
    /// `-inf` and receive no gradient. Every row needs at least one valid
    /// entry.
    pub fn masked_log_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let ia = self.id_of(logits);
        let t = &self.nodes[ia].value;
        let (n, m) = t.rows_cols();
        if mask.len() != n * m {
            return Err(AutodiffError::ShapeMismatch {
                expected: t.shape().to_vec(),
                len: mask.len(),
            });
        }
        let mut out = vec![f64::NEG_INFINITY; n * m];
        for (row, (x, mk)) in t.data().chunks(m).zip(mask.chunks(m)).enumerate() {
            let max = x
                .iter()
                .zip(mk)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::EmptyMask { row });
            }
            let sum: f64 = x
                .iter()
                .zip(mk)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + sum.ln();
            for j in 0..m {
                if mk[j] {
                    out[row * m + j] = x[j] - lse;
                }
            }
        }
        let shape = t.shape().into();
        let needs_grad = self.nodes[ia].needs_grad;
        Ok(self.push(
            Op::MaskedLogSoftmax(ia as u32, mask.to_vec()),
            Tensor::from_parts(shape, out),
            needs_grad,
            "masked_log_softmax",
        ))
    }

    /// Scalar at flat row-major position `flat`.
    pub fn pick(&mut self, a: Var, flat: usize) -> Var {
        let ia = self.id_of(a);
        let node = &self.nodes[ia];
        let v = node.value.data()[flat];
        let needs_grad = node.needs_grad;
        self.push(Op::Index(ia as u32, flat), Tensor::scalar(v), needs_grad, "index")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    /// Elementwise minimum; ties select `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "min", Op::Min, |x, y| if x <= y { x } else { y })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, "neg", Op::Neg, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "scale", |i| Op::Scale(i, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "add_scalar", Op::AddScalar, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, "ln", Op::Log, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", Op::Square, |x| x * x)
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, "clamp_min", |i| Op::ClampMin(i, floor), |x| x.max(floor))
    }

    /// Sum of equally shaped nodes. An empty list yields the scalar 0.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        if terms.is_empty() {
            return self.scalar(0.0);
        }
        let ids: Vec<u32> = terms.iter().map(|&v| self.id_of(v) as u32).collect();
        let first = &self.nodes[ids[0] as usize].value;
        let shape: Shape = first.shape().into();
        let mut acc = first.data().to_vec();
        let mut needs_grad = self.nodes[ids[0] as usize].needs_grad;
        for &id in &ids[1..] {
            let node = &self.nodes[id as usize];
            assert_eq!(node.value.shape(), &shape[..], "sum: operand shapes differ");
            for (a, x) in acc.iter_mut().zip(node.value.data()) {
                *a += x;
            }
            needs_grad |= node.needs_grad;
        }
        self.push(Op::Sum(ids), Tensor::from_parts(shape, acc), needs_grad, "sum")
    }

    /// `sum_k w_k * x_k` over scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut ids = Vec::with_capacity(terms.len());
        let mut acc = 0.0;
        let mut needs_grad = false;
        for &(v, w) in terms {
            let id = self.id_of(v);
            let node = &self.nodes[id];
            acc += w * node.value.item();
            needs_grad |= node.needs_grad;
            ids.push((id as u32, w));
        }
        self.push(Op::WeightedSum(ids), Tensor::scalar(acc), needs_grad, "weighted_sum")
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ia = self.id_of(a);
        let node = &self.nodes[ia];
        let s = node.value.data().iter().sum();
        let needs_grad = node.needs_grad;
        self.push(Op::SumAll(ia as u32), Tensor::scalar(s), needs_grad, "sum_all")
    }

    /// Reverse-mode gradients of scalar `loss` with respect to `params`.
    ///
    /// Consumes the tape: on return (success or not) the graph is empty and
    /// all outstanding [`Var`]s are stale.
    pub fn grad(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>, AutodiffError> {
        let result = self.grad_inner(loss, params);
        self.nodes.clear();
        self.first_nan = None;
        self.generation = fresh_generation();
        result
    }

    fn grad_inner(&mut self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>, AutodiffError> {
        if loss.generation != self.generation || loss.id as usize >= self.nodes.len() {
            return Err(AutodiffError::StaleGraph);
        }
        for (k, p) in params.iter().enumerate() {
            if p.generation != self.generation || p.id as usize >= self.nodes.len() {
                return Err(AutodiffError::ParamNotInGraph(k));
            }
        }
        let root = loss.id as usize;
        let lv = &self.nodes[root].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.check_finite()?;
        if !lv.item().is_finite() {
            return Err(AutodiffError::NonFinite {
                node: root,
                op: "loss",
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(params.len());
        for p in params {
            let node = &self.nodes[p.id as usize];
            let data = grads
                .get(p.id as usize)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            if data.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    node: p.id as usize,
                    op: "gradient",
                });
            }
            out.push(Tensor::from_parts(node.value.shape().into(), data));
        }
        Ok(out)
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |target: u32, f: &mut dyn FnMut(&mut [f64])| {
            let t = target as usize;
            if !nodes[t].needs_grad {
                return;
            }
            let slot = grads[t].get_or_insert_with(|| vec![0.0; nodes[t].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a as usize].value, &nodes[*b as usize].value);
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                // dA = dC * B^T
                acc(*a, &mut |s| {
                    gemm(n, m, k, g, (m, 1), tb.data(), (1, m), s, true)
                });
                // dB = A^T * dC
                acc(*b, &mut |s| {
                    gemm(k, n, m, ta.data(), (1, k), g, (m, 1), s, true)
                });
            }
            Op::AddBias(a, b) => {
                let m = nodes[*b as usize].value.len();
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(m) {
                        add_into(s, row);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = nodes[*a as usize].value.data();
                acc(*a, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        *si += if xi > 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let y = node.value.data();
                let m = node.value.rows_cols().1;
                acc(*a, &mut |s| {
                    for ((srow, (grow, yrow)), mrow) in s
                        .chunks_mut(m)
                        .zip(g.chunks(m).zip(y.chunks(m)))
                        .zip(mask.chunks(m))
                    {
                        let gsum: f64 = grow
                            .iter()
                            .zip(mrow)
                            .filter(|(_, &ok)| ok)
                            .map(|(&gi, _)| gi)
                            .sum();
                        for j in 0..m {
                            if mrow[j] {
                                srow[j] += grow[j] - yrow[j].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Index(a, flat) => acc(*a, &mut |s| s[*flat] += g[0]),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (nodes[*a as usize].value.data(), nodes[*b as usize].value.data());
                acc(*a, &mut |s| {
                    for ((si, gi), yi) in s.iter_mut().zip(g).zip(xb) {
                        *si += gi * yi;
                    }
                });
                acc(*b, &mut |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(xa) {
                        *si += gi * xi;
                    }
                });
            }
            Op::Min(a, b) => {
                let (xa, xb) = (nodes[*a as usize].value.data(), nodes[*b as usize].value.data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if xa[i] <= xb[i] {
                            s[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        if xa[i] > xb[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si -= gi;
                }
            }),
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += c * gi;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((si, gi), yi) in s.iter_mut().zip(g).zip(y) {
                        *si += gi * yi;
                    }
                });
            }
            Op::Log(a) => {
                let x = nodes[*a as usize].value.data();
                acc(*a, &mut |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        *si += gi / xi;
                    }
                });
            }
            Op::Square(a) => {
                let x = nodes[*a as usize].value.data();
                acc(*a, &mut |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        *si += 2.0 * xi * gi;
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = nodes[*a as usize].value.data();
                acc(*a, &mut |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        if *xi > *floor {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Sum(ids) => {
                for &t in ids {
                    acc(t, &mut |s| add_into(s, g));
                }
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    acc(t, &mut |s| s[0] += w * g[0]);
                }
            }
            Op::SumAll(a) => acc(*a, &mut |s| {
                for si in s.iter_mut() {
                    *si += g[0];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c (+)= a * b` with `a: [m, k]`, `b: [k, n]` given by (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row-major or
    // transposed views of those buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
