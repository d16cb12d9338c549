//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to replay the chain rule. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients (summing over every reuse of a node) for
//! all nodes that transitively depend on a `requires_grad` leaf.

use crate::error::{NumError, Result};
use crate::gemm::gemm;
use crate::tensor::{check_shape, permute_data, split_axis, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Concat(Vec<Var>),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    ConvTranspose { x: Var, weight: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as data: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, value: Tensor, op: Op, x: Var) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    // ----- linear algebra -------------------------------------------------

    /// Matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched product: `a` is [B, m, k]; `b` is [B, k, n], or [B, n, k] when
    /// `trans_b` is set (then each batch computes `a_i · b_iᵀ`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(NumError::dim(
                "batch_matmul",
                format!("incompatible shapes {sa:?} and {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new([batch, m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    // ----- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds `bias` (shape [n]) to every length-n row along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        let n = *sx.last().expect("non-empty shape");
        if sb.len() != 1 || sb[0] != n {
            return Err(NumError::dim(
                "add_bias",
                format!("bias {sb:?} does not match trailing axis of {sx:?}"),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.map(x, |v| v * factor);
        self.unary(value, Op::Scale { x, factor }, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v * v);
        self.unary(value, Op::Square(x), x)
    }

    /// `max(0, x)`; the subgradient at exactly zero is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.unary(value, Op::Relu(x), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.unary(value, Op::Sigmoid(x), x)
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF evaluated through `erf`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, gelu);
        self.unary(value, Op::Gelu(x), x)
    }

    // ----- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(x), x)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`; the result drops that axis (rank-1 inputs give shape [1]).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::dim(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for (acc, v) in out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&src[base..base + inner])
                {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary(value, Op::SumAxis { x, axis }, x))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    // ----- shape manipulation ----------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape("reshape", &shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(NumError::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.unary(value, Op::Reshape(x), x))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(NumError::dim(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            x,
        ))
    }

    /// Gathers slices `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(NumError::dim(
                "index_select",
                format!("indices {indices:?} invalid for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &idx in indices {
                let base = (o * n + idx) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary(
            value,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            x,
        ))
    }

    /// Stacks `parts` along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumError::invalid("concat", "no inputs"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(NumError::dim(
                    "concat",
                    format!("trailing extents {:?} vs {tail:?}", &s[1..]),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    // ----- normalization ----------------------------------------------------

    /// Row-wise softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(shape, out).expect("same shape");
        self.unary(value, Op::Softmax(x), x)
    }

    /// Layer normalization over the trailing axis (population variance).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [d] {
                return Err(NumError::dim(
                    "layernorm",
                    format!("{name} {:?} does not match width {d}", self.shape(p)),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(NumError::invalid("layernorm", "eps must be positive"));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ----- convolution ------------------------------------------------------

    /// Stride-2 transposed convolution with a 4×4 kernel and padding 1, which
    /// exactly doubles both spatial extents.
    ///
    /// `x` is channels-last [B, H, W, Ci]; `weight` is [Ci, 4, 4, Co]. Output
    /// is [B, 2H, 2W, Co] with
    /// `out[b, 2i-1+ky, 2j-1+kx, o] += x[b, i, j, c] · w[c, ky, kx, o]`.
    pub fn conv_transpose2x(&mut self, x: Var, weight: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[3] || sw[1] != 4 || sw[2] != 4 {
            return Err(NumError::dim(
                "conv_transpose2x",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        let (b, h, w, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[3];
        let rows = b * h * w;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; b * 4 * h * w * co];
        let mut cols = vec![0.0; CONV_CHUNK.min(rows) * 16 * co];
        for start in (0..rows).step_by(CONV_CHUNK) {
            let n = CONV_CHUNK.min(rows - start);
            let cols = &mut cols[..n * 16 * co];
            gemm(n, ci, 16 * co, &xd[start * ci..(start + n) * ci], false, wd, false, cols, false);
            for_each_tap(h, w, start..start + n, |row, tap, out_pix| {
                let at = ((row - start) * 16 + tap) * co;
                for (o, s) in out[out_pix * co..(out_pix + 1) * co].iter_mut().zip(&cols[at..at + co]) {
                    *o += s;
                }
            });
        }
        let value = Tensor::new([b, 2 * h, 2 * w, co], out)?;
        let rg = self.any_grad(&[x, weight]);
        Ok(self.push(value, Op::ConvTranspose { x, weight }, rg))
    }

    // ----- backward ---------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add_into(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// [`Self::add_into`] for a freshly computed buffer, which becomes the
    /// slot itself when the slot is empty.
    fn add_owned(&mut self, v: Var, g: Vec<f64>) {
        if self.nodes[v.0].requires_grad && self.grads[v.0].is_none() {
            self.grads[v.0] = Some(g);
        } else {
            self.add_into(v, &g);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops hold only indices of earlier nodes, so cloning the op is cheap
        // except for the layernorm caches which are borrowed below instead.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, false);
                    self.add_owned(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, false);
                    self.add_owned(*b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    let bd = self.value(*b).data();
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        let dat = &mut da[t * m * k..(t + 1) * m * k];
                        // trans_b: dA = dC·B_stored; else dA = dC·Bᵀ
                        gemm(m, n, k, gt, false, bt, !*trans_b, dat, false);
                    }
                    self.add_owned(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    let ad = self.value(*a).data();
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gt, true, at, false, dbt, false);
                        } else {
                            gemm(k, m, n, at, true, gt, false, dbt, false);
                        }
                    }
                    self.add_owned(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.add_into(*a, g);
                self.add_into(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(*a, g);
                self.accumulate(*b, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.add_owned(*a, d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.add_owned(*b, d);
                }
            }
            Op::AddBias { x, bias } => {
                self.add_into(*x, g);
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.add_owned(*bias, db);
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(*x, |acc| {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * f;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |acc| acc.iter_mut().for_each(|a| *a += g0));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                self.accumulate(*x, |acc| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for (a, v) in acc[base..base + inner].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.add_into(*x, g),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (d, _) = permute_data(g, &out_shape, &inverse);
                self.add_owned(*x, d);
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let m = indices.len();
                self.accumulate(*x, |acc| {
                    for o in 0..outer {
                        for (j, &idx) in indices.iter().enumerate() {
                            let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
                            let base = (o * n + idx) * inner;
                            for (a, v) in acc[base..base + inner].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.add_into(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let n = *self.nodes[i].value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_owned(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.add_owned(*gain, dg);
                    self.add_owned(*bias, db);
                }
                if self.requires_grad(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gain_v[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gain_v[j];
                            dxr[j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.add_owned(*x, dx);
                }
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * gelu_derivative(v))
                    .collect();
                self.add_owned(*x, d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, gv)| gv * y * (1.0 - y))
                    .collect();
                self.add_owned(*x, d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_owned(*x, d);
            }
            Op::Square(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| 2.0 * v * gv)
                    .collect();
                self.add_owned(*x, d);
            }
            Op::ConvTranspose { x, weight } => {
                let sx = self.shape(*x).to_vec();
                let (b, h, w, ci) = (sx[0], sx[1], sx[2], sx[3]);
                let co = self.shape(*weight)[3];
                let rows = b * h * w;
                let (need_x, need_w) = (self.requires_grad(*x), self.requires_grad(*weight));
                let mut dx = if need_x { vec![0.0; rows * ci] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; ci * 16 * co] } else { Vec::new() };
                let mut dcols = vec![0.0; CONV_CHUNK.min(rows) * 16 * co];
                let (xd, wd) = (self.value(*x).data(), self.value(*weight).data());
                for start in (0..rows).step_by(CONV_CHUNK) {
                    let n = CONV_CHUNK.min(rows - start);
                    let dcols = &mut dcols[..n * 16 * co];
                    for_each_tap(h, w, start..start + n, |row, tap, out_pix| {
                        let at = ((row - start) * 16 + tap) * co;
                        dcols[at..at + co].copy_from_slice(&g[out_pix * co..(out_pix + 1) * co]);
                    });
                    if need_x {
                        let dst = &mut dx[start * ci..(start + n) * ci];
                        gemm(n, 16 * co, ci, dcols, false, wd, true, dst, false);
                    }
                    if need_w {
                        let src = &xd[start * ci..(start + n) * ci];
                        gemm(ci, n, 16 * co, src, true, dcols, false, &mut dw, true);
                    }
                }
                if need_x {
                    self.add_owned(*x, dx);
                }
                if need_w {
                    self.add_owned(*weight, dw);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

/// Input rows per block of a transposed convolution; bounds the scratch
/// buffer at `CONV_CHUNK·16·c_out` values.
const CONV_CHUNK: usize = 256;

/// Visits every (input pixel row, kernel tap, output pixel) triple of a
/// stride-2, pad-1, 4×4 transposed convolution that lands inside the output,
/// for input rows in `rows` (rows are `(batch, y, x)` row-major).
fn for_each_tap(h: usize, w: usize, rows: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (2 * h as isize, 2 * w as isize);
    for row in rows {
        let (bi, iy, ix) = (row / (h * w), (row / w) % h, row % w);
        for ky in 0..4 {
            let oy = 2 * iy as isize - 1 + ky as isize;
            if oy < 0 || oy >= oh {
                continue;
            }
            for kx in 0..4 {
                let ox = 2 * ix as isize - 1 + kx as isize;
                if ox < 0 || ox >= ow {
                    continue;
                }
                let out_pix = (bi * oh as usize + oy as usize) * ow as usize + ox as usize;
                f(row, ky * 4 + kx, out_pix);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
