use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::instrumentation::OpCounter;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent attention problem: every query row attends over
/// exactly the listed key rows.
#[derive(Clone, Debug)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Describes a (possibly block-sparse) multi-head scaled dot-product
/// attention. Query rows not covered by any group produce zero output.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub scale: f64,
    pub groups: Vec<AttnGroup>,
    /// Additive logit offset per key row; constant, never differentiated.
    pub key_bias: Option<Vec<f64>>,
}

/// Sparse linear row mixing: output row `i` is `Σ w · src[j]` over the
/// `(j, w)` pairs of `rows[i]`.
pub type MixRows = Vec<Vec<(usize, f64)>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mix { src: Var, rows: Rc<MixRows> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, probs: Vec<Vec<f64>> },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, probs: Vec<f64> },
}

/// Reverse-mode differentiation tape over dense row-major matrices.
///
/// Nodes are appended in evaluation order, so the reverse of insertion
/// order is a valid topological order and the graph is acyclic by
/// construction. Values are immutable once recorded; only gradient
/// buffers change during [`Graph::backward`].
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    bound: BTreeMap<String, Var>,
    counter: Option<OpCounter>,
    site: String,
    track_kinks: bool,
    relu_signs: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into(a: &[f64], a_shape: (usize, usize), ta: bool, b: &[f64], b_shape: (usize, usize), tb: bool, out: &mut [f64]) {
    let av = ArrayView2::from_shape(a_shape, a).expect("matmul lhs shape");
    let bv = ArrayView2::from_shape(b_shape, b).expect("matmul rhs shape");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), out).expect("matmul out shape");
    general_mat_mul(1.0, &av, &bv, 1.0, &mut cv);
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            bound: BTreeMap::new(),
            counter: None,
            site: String::from("unlabeled"),
            track_kinks: false,
            relu_signs: Vec::new(),
        }
    }

    /// A graph that tallies multiply-adds per call site.
    pub fn with_counter() -> Self {
        Self { counter: Some(OpCounter::default()), ..Self::new() }
    }

    /// Records the sign pattern of every ReLU input, so that callers can
    /// detect when a perturbation crossed a kink.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn set_site(&mut self, site: impl Into<String>) {
        self.site = site.into();
    }

    pub fn counter(&self) -> Option<&OpCounter> {
        self.counter.as_ref()
    }

    pub fn take_counter(&mut self) -> Option<OpCounter> {
        self.counter.take()
    }

    pub fn relu_signs(&self) -> &[bool] {
        &self.relu_signs
    }

    fn tally(&mut self, macs: u64) {
        if let Some(c) = &mut self.counter {
            c.add(&self.site, macs);
        }
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf. Binding the same name twice
    /// returns the same node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
        let v = self.push(p.value.clone(), !p.frozen, Op::Leaf);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.values[v.0];
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {:?} by {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.values[a.0].data(), (m, k), false, self.values[b.0].data(), (k, n), false, &mut out);
        self.tally((m * k * n) as u64);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::matrix(m, n, out)?, req, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(t, req, Op::Add(a, b)))
    }

    fn row_broadcast(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(a);
        if self.values[b.0].numel() != n {
            return Err(Error::shape(format!(
                "{what} of {:?} with row {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok((m, n))
    }

    /// `a[i, j] + b[j]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast(a, b, "add_row")?;
        let (ta, tb) = (self.values[a.0].data(), self.values[b.0].data());
        let data = (0..m * n).map(|idx| ta[idx] + tb[idx % n]).collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::matrix(m, n, data)?, req, Op::AddRow(a, b)))
    }

    /// `a[i, j] * b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast(a, b, "mul_row")?;
        let (ta, tb) = (self.values[a.0].data(), self.values[b.0].data());
        let data = (0..m * n).map(|idx| ta[idx] * tb[idx % n]).collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::matrix(m, n, data)?, req, Op::MulRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = &self.values[a.0];
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).expect("shape");
        let req = self.requires[a.0];
        self.push(t, req, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        if self.track_kinks {
            self.relu_signs.extend(ta.data().iter().map(|&x| x > 0.0));
        }
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect()).expect("shape");
        let req = self.requires[a.0];
        self.push(t, req, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        if ta.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN entering softmax".into()));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let req = self.requires[a.0];
        Ok(self.push(Tensor::matrix(m, n, data)?, req, Op::SoftmaxRows(a)))
    }

    /// Zero-mean, unit-variance normalization of every row (the
    /// parameter-free part of LayerNorm).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = &self.values[x.0];
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mean) * is));
        }
        let req = self.requires[x.0];
        Ok(self.push(Tensor::matrix(m, n, data)?, req, Op::NormalizeRows { x, inv_std }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        let req = self.requires[a.0];
        self.push(Tensor::scalar(s), req, Op::Sum(a))
    }

    /// Sparse row mixing; see [`MixRows`].
    pub fn mix_rows(&mut self, src: Var, rows: Rc<MixRows>) -> Result<Var> {
        let (n_src, c) = self.dims2(src);
        if rows.is_empty() {
            return Err(Error::shape("mix_rows with no output rows"));
        }
        let ts = self.values[src.0].data();
        let mut out = vec![0.0; rows.len() * c];
        let mut nnz = 0u64;
        for (i, row) in rows.iter().enumerate() {
            let dst = &mut out[i * c..(i + 1) * c];
            for &(j, w) in row {
                if j >= n_src {
                    return Err(Error::shape(format!("mix_rows source row {j} out of {n_src}")));
                }
                for (d, s) in dst.iter_mut().zip(&ts[j * c..(j + 1) * c]) {
                    *d += w * s;
                }
                nnz += 1;
            }
        }
        self.tally(nnz * c as u64);
        let req = self.requires[src.0];
        Ok(self.push(Tensor::matrix(rows.len(), c, out)?, req, Op::Mix { src, rows }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.dims2(p);
            if c2 != c {
                return Err(Error::shape(format!("concat_rows width {c2} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.values[p.0].data());
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(Tensor::matrix(rows, c, data)?, req, Op::ConcatRows(parts.to_vec())))
    }

    /// Multi-head scaled dot-product attention restricted to the groups of
    /// `layout`. Head `h` uses columns `h*dk..(h+1)*dk` of `q`/`k` and the
    /// matching slice of `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let (nq, dq) = self.dims2(q);
        let (nk, dk) = self.dims2(k);
        let (nv, dv) = self.dims2(v);
        let heads = layout.heads;
        if dq != dk || nk != nv || heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(Error::shape(format!(
                "attention with q {nq}x{dq}, k {nk}x{dk}, v {nv}x{dv}, {heads} heads"
            )));
        }
        if let Some(b) = &layout.key_bias {
            if b.len() != nk {
                return Err(Error::shape("attention key bias length"));
            }
        }
        let mut seen = vec![false; nq];
        for g in &layout.groups {
            if g.keys.is_empty() {
                return Err(Error::contract("attention group without keys"));
            }
            if g.keys.iter().any(|&j| j >= nk) {
                return Err(Error::shape("attention key index out of range"));
            }
            for &i in &g.queries {
                if i >= nq || seen[i] {
                    return Err(Error::contract("attention query row out of range or in two groups"));
                }
                seen[i] = true;
            }
        }
        let (dh, dvh) = (dq / heads, dv / heads);
        let (tq, tk, tv) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let mut out = vec![0.0; nq * dv];
        let mut probs = Vec::with_capacity(layout.groups.len() * heads);
        let mut macs = 0u64;
        for g in &layout.groups {
            let nkg = g.keys.len();
            for h in 0..heads {
                let mut p = vec![0.0; g.queries.len() * nkg];
                for (a, &qi) in g.queries.iter().enumerate() {
                    let qrow = &tq[qi * dq + h * dh..qi * dq + (h + 1) * dh];
                    let prow = &mut p[a * nkg..(a + 1) * nkg];
                    for (b, &kj) in g.keys.iter().enumerate() {
                        let krow = &tk[kj * dk + h * dh..kj * dk + (h + 1) * dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        prow[b] = layout.scale * s + layout.key_bias.as_ref().map_or(0.0, |kb| kb[kj]);
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                    for (b, &kj) in g.keys.iter().enumerate() {
                        let w = prow[b];
                        for (o, x) in orow.iter_mut().zip(&tv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh]) {
                            *o += w * x;
                        }
                    }
                }
                macs += (g.queries.len() * nkg * (dh + dvh)) as u64;
                probs.push(p);
            }
        }
        self.tally(macs);
        let req = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        Ok(self.push(Tensor::matrix(nq, dv, out)?, req, Op::Attention { q, k, v, layout, probs }))
    }

    /// Attention probabilities of an attention node, indexed by
    /// `group * heads + head`, each row-major `|queries| x |keys|`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnLayout, &[Vec<f64>])> {
        match &self.ops[v.0] {
            Op::Attention { layout, probs, .. } => Some((layout.as_ref(), probs.as_slice())),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.dims2(logits);
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} outside [0, {c})")));
        }
        let tl = self.values[logits.0].data();
        if tl.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = tl.to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels.iter()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let req = self.requires[logits.0];
        Ok(self.push(Tensor::scalar(loss / n as f64), req, Op::CrossEntropy { logits, labels, probs }))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them. Node gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &gout);
            self.grads[i] = Some(gout);
            for (parent, g) in contributions {
                if !self.requires[parent.0] {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Runs [`Graph::backward`] and adds the gradient of every bound
    /// trainable parameter into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for (name, v) in &self.bound {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.values[v.0];
        let req = |v: Var| self.requires[v.0];
        let mut out = Vec::new();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if req(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, (m, n), false, val(*b).data(), (k, n), true, &mut ga);
                    out.push((*a, ga));
                }
                if req(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_into(val(*a).data(), (m, k), true, g, (m, n), false, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRow(a, b) => {
                let n = val(*b).numel();
                let mut gb = vec![0.0; n];
                for (idx, x) in g.iter().enumerate() {
                    gb[idx % n] += x;
                }
                out.push((*a, g.to_vec()));
                out.push((*b, gb));
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let n = tb.len();
                let ga = g.iter().enumerate().map(|(idx, x)| x * tb[idx % n]).collect();
                let mut gb = vec![0.0; n];
                for (idx, x) in g.iter().enumerate() {
                    gb[idx % n] += x * ta[idx];
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &inp)| if inp > 0.0 { *x } else { 0.0 })
                    .collect();
                out.push((*a, ga));
            }
            Op::SoftmaxRows(a) => {
                let y = self.values[i].data();
                let n = self.values[i].cols();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::NormalizeRows { x, inv_std } => {
                let y = self.values[i].data();
                let n = self.values[i].cols();
                let mut gx = vec![0.0; y.len()];
                for (r, ((gr, yr), dst)) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                out.push((*x, gx));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).numel()])),
            Op::Mix { src, rows } => {
                let c = self.dims2(*src).1;
                let mut gs = vec![0.0; val(*src).numel()];
                for (r, row) in rows.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    for &(j, w) in row {
                        for (d, x) in gs[j * c..(j + 1) * c].iter_mut().zip(gr) {
                            *d += w * x;
                        }
                    }
                }
                out.push((*src, gs));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    out.push((*p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                out.extend(self.attention_backward(*q, *k, *v, layout, probs, g));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.dims2(*logits).1;
                let n = labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| g[0] * p / n).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= g[0] / n;
                }
                out.push((*logits, gl));
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[Vec<f64>],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (tq, tk, tv) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let dq = self.values[q.0].cols();
        let dv = self.values[v.0].cols();
        let heads = layout.heads;
        let (dh, dvh) = (dq / heads, dv / heads);
        let mut gq = vec![0.0; tq.len()];
        let mut gk = vec![0.0; tk.len()];
        let mut gv = vec![0.0; tv.len()];
        let mut ds = Vec::new();
        for (gi, grp) in layout.groups.iter().enumerate() {
            let nkg = grp.keys.len();
            for h in 0..heads {
                let p = &probs[gi * heads + h];
                for (a, &qi) in grp.queries.iter().enumerate() {
                    let go = &g[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                    let prow = &p[a * nkg..(a + 1) * nkg];
                    ds.clear();
                    for &kj in &grp.keys {
                        let vrow = &tv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                        ds.push(go.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>());
                    }
                    let dot: f64 = prow.iter().zip(&ds).map(|(a, b)| a * b).sum();
                    for (d, pv) in ds.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * layout.scale;
                    }
                    let qrow = &tq[qi * dq + h * dh..qi * dq + (h + 1) * dh];
                    for (b, &kj) in grp.keys.iter().enumerate() {
                        let krow = &tk[kj * dq + h * dh..kj * dq + (h + 1) * dh];
                        let gq_row = &mut gq[qi * dq + h * dh..qi * dq + (h + 1) * dh];
                        for (d, x) in gq_row.iter_mut().zip(krow) {
                            *d += ds[b] * x;
                        }
                        let gk_row = &mut gk[kj * dq + h * dh..kj * dq + (h + 1) * dh];
                        for (d, x) in gk_row.iter_mut().zip(qrow) {
                            *d += ds[b] * x;
                        }
                        let gv_row = &mut gv[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                        for (d, x) in gv_row.iter_mut().zip(go) {
                            *d += prow[b] * x;
                        }
                    }
                }
            }
        }
        vec![(q, gq), (k, gk), (v, gv)]
    }
}
