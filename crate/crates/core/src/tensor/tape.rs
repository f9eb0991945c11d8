use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, split_axis};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{GroupSet, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    BroadcastRows { a: Var },
    Scale { a: Var, c: f64 },
    Softmax { a: Var },
    Log { a: Var },
    ClampMin { a: Var, lo: f64 },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reduce { a: Var, axis: usize, scale: f64 },
    SumAll { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    StraightThrough { soft: Var },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. Parameters are attached at most once per tape: reading
/// the same parameter twice returns the same leaf and both uses accumulate
/// into one gradient.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    trainable: GroupSet,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    retained: Vec<usize>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            trainable: GroupSet::NONE,
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
            retained: Vec::new(),
        }
    }
}

impl<'p> Tape<'p> {
    /// Tape that reads parameters from `store`; parameters outside
    /// `trainable` are attached as constants and receive no gradient.
    pub fn with_params(store: &'p ParamStore, trainable: GroupSet) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            trainable,
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
            retained: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Attaches a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let p = store.param(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Leaf,
            requires_grad: self.trainable.contains(p.group),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf or retained node, if any backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Accumulated gradients of every trainable parameter read on this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, v)| self.grad(*v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- linear algebra ----

    /// `a[..×k] · b[k×n] → [..×n]`; leading axes of `a` are batch rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.len() < 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim(format!("matmul shapes {sa:?} and {sb:?} do not align")));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; rows * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, rows, k, n }, rg))
    }

    /// Batched `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!("bmm shapes {sa:?} and {sb:?} do not align")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, batch, m, k, n },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::dim("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let (s, d) = kernels::permute(self.value(a).data(), shape, perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(s, d), Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(s, out), Op::Slice { a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat shapes {base:?} and {s:?} differ off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut s = base;
        s[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(s, out), Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds the vector `row` to every slice along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(Error::dim(format!(
                "add_row: row of {} entries against last axis {n}",
                self.value(row).numel()
            )));
        }
        let r = self.value(row).data();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow { a, row }, rg))
    }

    /// Repeats a vector (any shape, read flat) as `rows` rows.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(Error::dim("broadcast to zero rows"));
        }
        let src = self.value(a).data();
        let n = src.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::BroadcastRows { a }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numerical("softmax input contains NaN".into()));
        }
        let n = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        kernels::softmax_rows(ta.data(), &mut out, n);
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log { a }, rg)
    }

    /// `max(a, lo)`; no gradient where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let t = self.value(a).map(|x| x.max(lo));
        let rg = self.rg(a);
        self.push(t, Op::ClampMin { a, lo }, rg)
    }

    /// Gaussian-error linear unit, tanh form:
    /// `0.5·x·(1 + tanh(0.7978845608028654·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm over {d} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let tx = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    // ---- reductions ----

    fn reduce(&mut self, a: Var, axis: usize, scale: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (y, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *y += x;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|y| *y *= scale);
        }
        let mut s = shape;
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(s, out), Op::Reduce { a, axis, scale }, rg))
    }

    /// Arithmetic mean over `axis`; the axis is removed.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("axis {axis} out of range")))?;
        self.reduce(a, axis, 1.0 / len as f64)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, 1.0)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    /// Forward value is `hard`; the gradient is routed to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim(format!(
                "straight-through hard {:?} vs soft {:?}",
                hard.shape(),
                self.shape(soft)
            )));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    // ---- reverse pass ----

    /// Keeps the gradient reaching an interior node so [`Tape::grad`]
    /// reports it after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        if !self.retained.contains(&v.0) {
            self.retained.push(v.0);
        }
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a
    /// gradient. Calling it again adds a second copy.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if self.retained.contains(&i) {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Returns the zero-initialised accumulator for `v`.
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, n: usize) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let numel = |v: Var| nodes[v.0].value.numel();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                if wants(a) {
                    let ga = slot(grads, a, rows * k);
                    gemm_nt(g, val(b), ga, rows, n, k);
                }
                if wants(b) {
                    let gb = slot(grads, b, k * n);
                    gemm_tn(val(a), g, gb, rows, k, n);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                if wants(a) {
                    let ga = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &val(b)[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        gemm_tn(
                            &val(a)[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(b) {
                    slot(grads, b, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let vb = val(b);
                    let ga = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if wants(b) {
                    let va = val(a);
                    let gb = slot(grads, b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(row) {
                    let n = numel(row);
                    let gr = slot(grads, row, n);
                    for chunk in g.chunks_exact(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::BroadcastRows { a } => {
                if wants(a) {
                    let n = numel(a);
                    let ga = slot(grads, a, n);
                    for chunk in g.chunks_exact(n) {
                        ga.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            &Op::Softmax { a } => {
                if wants(a) {
                    let y = nodes[i].value.data();
                    let n = nodes[i].value.cols();
                    let ga = slot(grads, a, g.len());
                    for r in 0..g.len() / n {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::Log { a } => {
                if wants(a) {
                    let va = val(a);
                    let ga = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] / va[j];
                    }
                }
            }
            &Op::ClampMin { a, lo } => {
                if wants(a) {
                    let va = val(a);
                    let ga = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        if va[j] >= lo {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::Gelu { a } => {
                if wants(a) {
                    let va = val(a);
                    let ga = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * kernels::gelu_grad(va[j]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = numel(gain);
                let rows = g.len() / d;
                if wants(gain) {
                    let gg = slot(grads, gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(bias) {
                    let gb = slot(grads, bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(x) {
                    let gv = val(gain);
                    let gx = slot(grads, x, g.len());
                    let mut gh = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut sum = 0.0;
                        let mut sum_h = 0.0;
                        for j in 0..d {
                            gh[j] = g[r * d + j] * gv[j];
                            sum += gh[j];
                            sum_h += gh[j] * h[j];
                        }
                        let c = rstd[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += c * (d as f64 * gh[j] - sum - h[j] * sum_h);
                        }
                    }
                }
            }
            &Op::Reduce { a, axis, scale } => {
                if wants(a) {
                    let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), axis);
                    let ga = slot(grads, a, outer * len * inner);
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(gr).for_each(|(x, y)| *x += scale * y);
                        }
                    }
                }
            }
            &Op::SumAll { a } => {
                if wants(a) {
                    let n = numel(a);
                    slot(grads, a, n).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if wants(p) {
                        let gp = slot(grads, p, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Permute { a, perm } => {
                let a = *a;
                if wants(a) {
                    let inv = kernels::inverse_perm(perm);
                    let (_, back) = kernels::permute(g, nodes[i].value.shape(), &inv);
                    slot(grads, a, back.len()).iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Reshape { a } => {
                if wants(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Slice { a, axis, start } => {
                if wants(a) {
                    let (outer, full, inner) = split_axis(nodes[a.0].value.shape(), axis);
                    let len = nodes[i].value.shape()[axis];
                    let ga = slot(grads, a, outer * full * inner);
                    for o in 0..outer {
                        let dst = &mut ga[(o * full + start) * inner..(o * full + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::StraightThrough { soft } => {
                if wants(soft) {
                    slot(grads, soft, g.len()).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_direct() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2).unwrap());
        let r = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(r), &Tensor::identity(2).unwrap());

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let r = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(Error::Numerical(_))));
    }

    #[test]
    fn layer_norm_constant_slice_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[5.0; 4]));
        let g = tape.constant(Tensor::ones(vec![4]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![4]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn mean_axis_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = tape.mean_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let m = tape.mean_axis(s, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0]);
        assert!(tape.mean_axis(s, 2).is_err());
    }

    #[test]
    fn concat_and_hadamard_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2, 5]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);

        let x = tape.constant(t(&[3], &[1.5, -2.0, 3.0]));
        let ones = tape.constant(Tensor::ones(vec![3]).unwrap());
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 10.0]));
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn reused_tensor_sums_contributions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        // second call accumulates
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_mask_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let m = tape.constant(t(&[2], &[1.0, 0.0]));
        let y = tape.mul(x, m).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
        assert!(tape.grad(m).is_none());
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut tape = Tape::new();
        let soft = tape.leaf(t(&[2], &[0.3, 0.7]));
        let st = tape.straight_through(t(&[2], &[0.0, 1.0]), soft).unwrap();
        assert_eq!(tape.value(st).data(), &[0.0, 1.0]);
        let w = tape.constant(t(&[2], &[2.0, 5.0]));
        let y = tape.mul(st, w).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(soft).unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn retained_interior_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]));
        let h = tape.scale(x, 3.0);
        let y = tape.mul(h, h).unwrap();
        let s = tape.sum_all(y);
        tape.retain_grad(h);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(h).unwrap(), &[6.0, -12.0]);
        assert_eq!(tape.grad(x).unwrap(), &[18.0, -36.0]);
        assert!(tape.grad(y).is_none());
    }
}
