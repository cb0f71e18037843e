//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every recorded value is a `rows × cols` matrix (vectors are `1 × n`).
//! Parameter leaves borrow their values from a [`ParamStore`] instead of
//! copying them, so one graph per sample is cheap. Frozen parameters and
//! constants do not require gradients, and backward skips every node that
//! cannot reach a trainable parameter.

use super::kernels::{self, matmul, matmul_bt};
use super::params::{ParamId, ParamStore, Trainable};
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NormalizeRows { x: Var, norms: Vec<T> },
    AdjustedCe { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Floor applied to vector norms before division.
pub const NORM_FLOOR: f64 = 1e-12;

pub struct Graph<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    track: bool,
}

/// Gradients of a scalar output with respect to the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    by_param: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self { by_param: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.by_param.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (mine, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, &b) in m.iter_mut().zip(t) {
                            *a += b;
                        }
                    }
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A graph that records gradients for trainable parameters.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()], track: true }
    }

    /// A forward-only graph; nothing requires gradients.
    pub fn no_grad(store: &'s ParamStore<T>) -> Self {
        Self { track: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => self.store.value(id).data(),
            _ => &n.value,
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op, requires_grad: requires_grad && self.track });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "constant {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Constant, false))
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let (rows, cols) = (p.value.rows(), p.value.cols());
        let rg = p.trainable.is_trainable();
        let v = self.push(rows, cols, Vec::new(), Op::Param(id), rg);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let out = matmul(self.value(a), self.value(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_bt {n}x{k} by ({m}x{k2})^T")));
        }
        let out = matmul_bt(self.value(a), self.value(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(n, m, out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::shape(format!("add_row {r}x{c} with {:?}", self.shape(b))));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::AddRow(a, b), rg))
    }

    /// Affine map `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (r, cols) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, cols, out, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape(format!("scale_by needs a 1x1 scalar, got {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let out = self.value(a).iter().map(|&x| x * sv).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, c, out, Op::Relu(a), rg)
    }

    /// Row-wise layer normalization with learnable `1 × cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape(format!(
                "layer_norm over {c} columns with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        for (src, dst) in self.value(x).chunks(c).zip(xhat.chunks_mut(c)) {
            let (_, inv) = kernels::normalize_into(src, eps, dst);
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(r, c, out, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            kernels::log_softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(r, c, out, Op::LogSoftmax(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {r} rows")));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {c} cols")));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(Error::shape(format!("concat_rows with {pc} vs {c} columns")));
            }
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::shape(format!("concat_cols with {pr} vs {r} rows")));
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Scales every row to unit L2 norm (norms floored at [`NORM_FLOOR`]).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let floor = T::of(NORM_FLOOR);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            let n = kernels::l2_norm(row).max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(a);
        self.push(r, c, out, Op::NormalizeRows { x: a, norms }, rg)
    }

    /// Mean over rows of `-log softmax(z_i + offsets)[labels_i]`.
    pub fn adjusted_cross_entropy(&mut self, logits: Var, offsets: &[T], labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if offsets.len() != c || labels.len() != r {
            return Err(Error::shape(format!(
                "cross entropy over {r}x{c} logits with {} offsets and {} labels",
                offsets.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::domain(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = T::zero();
        for (row, &y) in self.value(logits).chunks(c).zip(labels) {
            let mut shifted: Vec<T> = row.iter().zip(offsets).map(|(&z, &o)| z + o).collect();
            kernels::log_softmax_in_place(&mut shifted);
            total += -shifted[y];
            probs.extend(shifted.iter().map(|v| v.exp()));
        }
        let loss = total / T::of(r as f64);
        let rg = self.rg(logits);
        Ok(self.push(1, 1, vec![loss], Op::AdjustedCe { logits, probs, labels: labels.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// Smallest `|input|` over every recorded ReLU, i.e. the distance of the
    /// current point from the nearest kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => self.value(a).iter().map(|v| v.abs().as_f64()).reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what} {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Back-propagates from the `1 × 1` node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.shape(out) != (1, 1) {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(out))));
        }
        let mut result = Gradients::empty(self.store.len());
        if !self.rg(out) {
            return Ok(result);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let mut g = g;
                    if let Trainable::Masked(mask) = &self.store.get(*id).trainable {
                        for (v, &keep) in g.iter_mut().zip(mask) {
                            if !keep {
                                *v = T::zero();
                            }
                        }
                    }
                    result.by_param[id.index()] = Some(g);
                }
                &Op::MatMul(a, b) => {
                    let (n, k) = self.shape(a);
                    let m = node.cols;
                    if self.rg(a) {
                        let da = matmul_bt(&g, self.value(b), n, m, k);
                        accumulate(&mut grads, a, da);
                    }
                    if self.rg(b) {
                        let av = self.value(a);
                        let mut db = vec![T::zero(); k * m];
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == T::zero() {
                                    continue;
                                }
                                for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                &Op::MatMulBt(a, b) => {
                    let (n, k) = self.shape(a);
                    let m = node.cols;
                    if self.rg(a) {
                        let da = matmul(&g, self.value(b), n, m, k);
                        accumulate(&mut grads, a, da);
                    }
                    if self.rg(b) {
                        let av = self.value(a);
                        let mut db = vec![T::zero(); m * k];
                        for r in 0..n {
                            let arow = &av[r * k..(r + 1) * k];
                            for j in 0..m {
                                let gv = g[r * m + j];
                                for (d, &x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                    *d += gv * x;
                                }
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                &Op::Add(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::AddRow(a, b) => {
                    if self.rg(b) {
                        let c = node.cols;
                        let mut db = vec![T::zero(); c];
                        for row in g.chunks(c) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::Mul(a, b) => {
                    if self.rg(a) {
                        let da = g.iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, a, da);
                    }
                    if self.rg(b) {
                        let db = g.iter().zip(self.value(a)).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, b, db);
                    }
                }
                &Op::Scale(a, c) => {
                    accumulate(&mut grads, a, g.iter().map(|&x| x * c).collect());
                }
                &Op::ScaleBy(a, s) => {
                    if self.rg(s) {
                        let ds = kernels::dot(&g, self.value(a));
                        accumulate(&mut grads, s, vec![ds]);
                    }
                    if self.rg(a) {
                        let sv = self.scalar(s);
                        accumulate(&mut grads, a, g.iter().map(|&x| x * sv).collect());
                    }
                }
                &Op::Relu(a) => {
                    let da = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, a, da);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = node.cols;
                    if self.rg(*beta) {
                        let mut db = vec![T::zero(); c];
                        for row in g.chunks(c) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *beta, db);
                    }
                    if self.rg(*gamma) {
                        let mut dg = vec![T::zero(); c];
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                                *d += gv * h;
                            }
                        }
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if self.rg(*x) {
                        let gam = self.value(*gamma);
                        let n = T::of(c as f64);
                        let mut dx = Vec::with_capacity(g.len());
                        for ((grow, hrow), &inv) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                            let dh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                            let mean_dh = dh.iter().copied().sum::<T>() / n;
                            let mean_dh_h = kernels::dot(&dh, hrow) / n;
                            dx.extend(
                                dh.iter().zip(hrow).map(|(&d, &h)| inv * (d - mean_dh - h * mean_dh_h)),
                            );
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                &Op::Softmax(a) => {
                    let c = node.cols;
                    let mut da = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(c).zip(node.value.chunks(c)) {
                        let s = kernels::dot(grow, yrow);
                        da.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - s)));
                    }
                    accumulate(&mut grads, a, da);
                }
                &Op::LogSoftmax(a) => {
                    let c = node.cols;
                    let mut da = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(c).zip(node.value.chunks(c)) {
                        let s: T = grow.iter().copied().sum();
                        da.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * s));
                    }
                    accumulate(&mut grads, a, da);
                }
                &Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(a);
                    let mut da = vec![T::zero(); r * c];
                    da[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, a, da);
                }
                &Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(a);
                    let len = node.cols;
                    let mut da = vec![T::zero(); r * c];
                    for (i, grow) in g.chunks(len).enumerate() {
                        da[i * c + start..i * c + start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value_len(p);
                        if self.rg(p) {
                            accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let mut col = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        if self.rg(p) {
                            let mut dp = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                dp.extend_from_slice(&g[i * total + col..i * total + col + pc]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        col += pc;
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let c = node.cols;
                    let floor = T::of(NORM_FLOOR);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, yrow), &n) in g.chunks(c).zip(node.value.chunks(c)).zip(norms) {
                        if n > floor {
                            let s = kernels::dot(grow, yrow);
                            dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| (gv - y * s) / n));
                        } else {
                            dx.extend(grow.iter().map(|&gv| gv / n));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::AdjustedCe { logits, probs, labels } => {
                    let c = self.shape(*logits).1;
                    let scale = g[0] / T::of(labels.len() as f64);
                    let mut dz = probs.clone();
                    for (row, &y) in dz.chunks_mut(c).zip(labels) {
                        row[y] -= T::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                &Op::Sum(a) => {
                    let n = self.value_len(a);
                    accumulate(&mut grads, a, vec![g[0]; n]);
                }
            }
        }
        Ok(result)
    }

    fn value_len(&self, v: Var) -> usize {
        let (r, c) = self.shape(v);
        r * c
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
