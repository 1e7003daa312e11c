//! Define-by-run tensor graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. [`Graph::backward`]
//! replays the record in reverse, accumulating adjoints into every node that
//! requires a gradient. Graphs are single-use: build one per forward pass.

mod gradcheck;
mod kernels;
mod tensor;

pub use gradcheck::{finite_difference_check, grad_check, relative_error, GradCheckReport};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{Error, Result};
use kernels::{axis_split, gemm_nn, gemm_nt, gemm_tn};

/// Additive logit sentinel for masked attention keys.
pub const MASK_SENTINEL: f64 = -1.0e9;

/// Logits at or below this value are treated as masked by [`Graph::softmax`].
const MASKED_THRESHOLD: f64 = 0.5 * MASK_SENTINEL;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train or eval behaviour for stochastic primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, dims: MatDims },
    Transpose { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Affine { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    MaskKeys { x: Var },
    Reduce { x: Var, local_grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    p: usize,
    q: usize,
    r: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present after `backward` for nodes that require one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    /// Batched matrix product over the last two axes. Leading extents must
    /// match, or one operand's leading extents must all be 1 (broadcast).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (dims, out_shape) = matmul_dims(sa, sb)?;
        let MatDims { batch, a_batched, b_batched, p, q, r } = dims;
        let mut out = vec![0.0; batch * p * r];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ao = if a_batched { i * p * q } else { 0 };
                let bo = if b_batched { i * q * r } else { 0 };
                gemm_nn(&av[ao..ao + p * q], &bv[bo..bo + q * r], &mut out[i * p * r..(i + 1) * p * r], p, q, r);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push_checked(value, &[a, b], Op::MatMul { a, b, dims }, "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.value(x).len() / (rows * cols);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let o = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = src[o + i * cols + j];
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let value = Tensor::new(out_shape, out)?;
        self.push_checked(value, &[x], Op::Transpose { x }, "transpose")
    }

    /// Numerically stable softmax along `axis`. Entries at or below the mask
    /// sentinel come out exactly zero; a slice with no unmasked entry is an error.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                if !(max > MASKED_THRESHOLD) {
                    return Err(Error::DegenerateRow { axis });
                }
                let mut total = 0.0;
                for k in 0..len {
                    let v = src[at(k)];
                    let e = if v <= MASKED_THRESHOLD { 0.0 } else { (v - max).exp() };
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, &[x], Op::Softmax { x, axis }, "softmax")
    }

    /// Normalizes each last-axis slice to zero mean and unit variance
    /// (`1/sqrt(var + epsilon)`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = self.value(x).last_dim();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).shape() != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} shape {:?} does not match last axis of {shape:?}",
                    self.value(v).shape()
                )));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, inv_std }, "layer_norm")
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p_drop)` in train
    /// mode; eval mode (or `p_drop == 0`) is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p_drop: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(Error::Parameter(format!("dropout probability {p_drop} outside [0, 1)")));
        }
        if mode == Mode::Eval || p_drop == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p_drop);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { keep_scale })
            .collect();
        let out = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push_checked(value, &[x], Op::Dropout { x, mask }, "dropout")
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        let n_in = self.value(x).last_dim();
        if xs.is_empty() || ws.len() != 2 || ws[0] != n_in || bs != [ws[1]] {
            return Err(Error::Dimension(format!(
                "affine: x {xs:?}, w {ws:?}, b {bs:?} are incompatible"
            )));
        }
        let n_out = ws[1];
        let rows = self.value(x).len() / n_in;
        let mut out = Vec::with_capacity(rows * n_out);
        let bv = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bv);
        }
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, n_in, n_out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, &[x, w, b], Op::Affine { x, w, b }, "affine")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.value(p).shape()[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, parts, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push_checked(value, &[a, b], Op::Add { a, b }, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push_checked(value, &[a, b], Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push_checked(value, &[x], Op::Scale { x, c }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push_checked(Tensor::scalar(total), &[x], Op::Sum { x }, "sum")
    }

    /// Adds [`MASK_SENTINEL`] to every logit whose key is invalid.
    ///
    /// `x` has shape `[.., n_q, n_k]`; `key_valid` holds one flag per
    /// (leading-batch, key) pair, i.e. `batch * n_k` entries.
    pub fn mask_keys(&mut self, x: Var, key_valid: &[bool]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("mask_keys needs rank >= 2, got {shape:?}")));
        }
        let (n_q, n_k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.value(x).len() / (n_q * n_k);
        if key_valid.len() != batch * n_k {
            return Err(Error::Dimension(format!(
                "key mask of length {} for logits {shape:?}",
                key_valid.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for bi in 0..batch {
            for k in 0..n_k {
                if !key_valid[bi * n_k + k] {
                    for qi in 0..n_q {
                        out[(bi * n_q + qi) * n_k + k] += MASK_SENTINEL;
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, &[x], Op::MaskKeys { x }, "mask_keys")
    }

    /// Scalar reduction whose value and local gradient were computed by the
    /// caller (fused losses). `local_grad` is `d value / d x`.
    pub fn reduce_with_grad(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "local gradient of length {} for input of {} values",
                local_grad.len(),
                self.value(x).len()
            )));
        }
        if local_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("reduce_with_grad"));
        }
        self.push_checked(Tensor::scalar(value), &[x], Op::Reduce { x, local_grad }, "reduce_with_grad")
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// Populates `grad` for every node that requires one, seeded with
    /// `d loss / d loss = 1`. May only run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; run a fresh forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![0.0; n.value.len()]))
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let upstream = self.grads[idx].take().expect("grad allocated");
            self.propagate(idx, &upstream);
            if upstream.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => {
                let MatDims { batch, a_batched, b_batched, p, q, r } = *dims;
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = grads[a.0].as_mut() {
                    for i in 0..batch {
                        let ao = if a_batched { i * p * q } else { 0 };
                        let bo = if b_batched { i * q * r } else { 0 };
                        gemm_nt(&dy[i * p * r..(i + 1) * p * r], &bv[bo..bo + q * r], &mut ga[ao..ao + p * q], p, q, r);
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for i in 0..batch {
                        let ao = if a_batched { i * p * q } else { 0 };
                        let bo = if b_batched { i * q * r } else { 0 };
                        gemm_tn(&av[ao..ao + p * q], &dy[i * p * r..(i + 1) * p * r], &mut gb[bo..bo + q * r], p, q, r);
                    }
                }
            }
            Op::Transpose { x } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    // node.value has the transposed shape [.., cols, rows]
                    let s = node.value.shape();
                    let (cols, rows) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = dy.len() / (rows * cols);
                    for bi in 0..batch {
                        let o = bi * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[o + i * cols + j] += dy[o + j * rows + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (dy[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.last_dim();
                let rows = dy.len() / d;
                let g = nodes[gain.0].value.data();
                if let Some(gg) = grads[gain.0].as_mut() {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = grads[bias.0].as_mut() {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += dy[r * d + j];
                        }
                    }
                }
                if let Some(gx) = grads[x.0].as_mut() {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let o = r * d;
                        for j in 0..d {
                            dxhat[j] = dy[o + j] * g[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = (0..d).map(|j| dxhat[j] * xhat[o + j]).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[o + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[o + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for ((g, d), m) in gx.iter_mut().zip(dy).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let n_in = nodes[x.0].value.last_dim();
                let n_out = node.value.last_dim();
                let rows = dy.len() / n_out;
                if let Some(gx) = grads[x.0].as_mut() {
                    gemm_nt(dy, nodes[w.0].value.data(), gx, rows, n_in, n_out);
                }
                if let Some(gw) = grads[w.0].as_mut() {
                    gemm_tn(nodes[x.0].value.data(), dy, gw, rows, n_in, n_out);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for r in 0..rows {
                        for j in 0..n_out {
                            gb[j] += dy[r * n_out + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(gp) = grads[p.0].as_mut() {
                        for o in 0..outer {
                            let src = &dy[o * total * inner + offset..o * total * inner + offset + len];
                            for (g, d) in gp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = grads[v.0].as_mut() {
                        for (g, d) in gv.iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d * c;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for g in gx.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::MaskKeys { x } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Reduce { x, local_grad } => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for (g, l) in gx.iter_mut().zip(local_grad) {
                        *g += dy[0] * l;
                    }
                }
            }
        }
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(MatDims, Vec<usize>)> {
    let mismatch = || Error::Dimension(format!("matmul: shapes {sa:?} and {sb:?} are incompatible"));
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch());
    }
    let (lead_a, lead_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if q != q2 {
        return Err(mismatch());
    }
    let (ba, bb): (usize, usize) = (lead_a.iter().product(), lead_b.iter().product());
    let lead = if lead_a == lead_b || bb == 1 {
        lead_a
    } else if ba == 1 {
        lead_b
    } else {
        return Err(mismatch());
    };
    let batch = lead.iter().product();
    let mut out = lead.to_vec();
    out.extend([p, r]);
    let dims = MatDims { batch, a_batched: ba == batch && batch > 1, b_batched: bb == batch && batch > 1, p, q, r };
    Ok((dims, out))
}
