use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hrr::{self, PermutationSet};
use crate::real::Real;

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    MaxScalar(Var, T),
    Sum(Var),
    Mean(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CMul(Var, Var),
    Conj(Var),
    Bound(Var),
    MemRead {
        mem: Var,
        key: Var,
        perms: Arc<PermutationSet>,
    },
    MemWrite {
        mem: Var,
        key: Var,
        value: Var,
        perms: Arc<PermutationSet>,
    },
    MaskRows {
        new: Var,
        old: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of every primitive evaluated during a forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Reverse-mode derivatives of a scalar with respect to every node that
/// required gradients.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn same_shape<T: Real>(context: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            context,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn zip(
        &mut self,
        context: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(context, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a (m x k) · b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = Tensor::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(Error::ShapeMismatch {
                context: "add_bias",
                left: (m, n),
                right: self.shape(bias),
            });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for r in 0..m {
            for (o, &bv) in out.row_slice_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    context: "concat",
                    left: self.shape(first),
                    right: (r, c),
                });
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + c].copy_from_slice(t.row_slice(r));
            }
            offset += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(rows, len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice(a, start), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// Elementwise `max(a, c)`.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| if x > c { x } else { c }, Op::MaxScalar(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if labels.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "softmax_cross_entropy labels",
                expected: rows,
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let t = self.value(logits);
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            loss += z.ln() + max - row[label];
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor::scalar(loss / T::lit(rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(ids.len(), t.cols(), data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    fn complex_width(&self, context: &'static str, a: Var) -> Result<usize> {
        let cols = self.shape(a).1;
        if cols == 0 || cols % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{context}: complex rows need an even column count (got {cols})"
            )));
        }
        Ok(cols)
    }

    /// Row-wise complex product `a ⊛ b` on `[re; im]` rows.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cmul", self.value(a), self.value(b))?;
        self.complex_width("cmul", a)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for r in 0..ta.rows() {
            hrr::bind_acc(ta.row_slice(r), tb.row_slice(r), out.row_slice_mut(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::CMul(a, b), rg))
    }

    /// Row-wise complex conjugate.
    pub fn conj(&mut self, a: Var) -> Result<Var> {
        let cols = self.complex_width("conj", a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for v in &mut out.row_slice_mut(r)[cols / 2..] {
                *v = -*v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Conj(a), rg))
    }

    /// Row-wise `bound`: each complex element divided by `max(1, modulus)`.
    pub fn bound(&mut self, a: Var) -> Result<Var> {
        let cols = self.complex_width("bound", a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            hrr::bound_in_place(out.row_slice_mut(r), cols / 2);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Bound(a), rg))
    }

    fn check_memory(
        &self,
        context: &'static str,
        mem: Var,
        key: Var,
        perms: &PermutationSet,
    ) -> Result<usize> {
        let width = 2 * perms.dim();
        let (rows, cols) = self.shape(mem);
        if self.shape(key) != (rows, width) {
            return Err(Error::ShapeMismatch {
                context,
                left: (rows, width),
                right: self.shape(key),
            });
        }
        if cols != width * perms.count() {
            return Err(Error::DimensionMismatch {
                context,
                expected: width * perms.count(),
                found: cols,
            });
        }
        Ok(width)
    }

    /// Redundant retrieval `(1/N_c) Σ_s (P_s r̄) ⊛ m_s` for each row.
    ///
    /// `mem` rows hold the `N_c` copies back to back; `key` rows are keys.
    pub fn mem_read(&mut self, mem: Var, key: Var, perms: &Arc<PermutationSet>) -> Result<Var> {
        let width = self.check_memory("mem_read", mem, key, perms)?;
        let (tm, tk) = (self.value(mem), self.value(key));
        let scale = T::one() / T::lit(perms.count() as f64);
        let mut out = Tensor::zeros(tm.rows(), width);
        let mut pr = vec![T::zero(); width];
        for r in 0..tm.rows() {
            let (mrow, krow) = (tm.row_slice(r), tk.row_slice(r));
            let orow = out.row_slice_mut(r);
            for (s, perm) in perms.perms().iter().enumerate() {
                hrr::permute_into(perm, krow, &mut pr);
                hrr::unbind_acc(&pr, &mrow[s * width..(s + 1) * width], scale, orow);
            }
        }
        let rg = self.rg(&[mem, key]);
        Ok(self.push(
            out,
            Op::MemRead {
                mem,
                key,
                perms: perms.clone(),
            },
            rg,
        ))
    }

    /// Returns `m` with `(P_s r) ⊛ x` added to every copy `s`, row-wise.
    pub fn mem_write(
        &mut self,
        mem: Var,
        key: Var,
        value: Var,
        perms: &Arc<PermutationSet>,
    ) -> Result<Var> {
        let width = self.check_memory("mem_write", mem, key, perms)?;
        same_shape("mem_write value", self.value(key), self.value(value))?;
        let (tk, tx) = (self.value(key), self.value(value));
        let mut out = self.value(mem).clone();
        let mut pr = vec![T::zero(); width];
        for r in 0..out.rows() {
            let (krow, xrow) = (tk.row_slice(r), tx.row_slice(r));
            let orow = out.row_slice_mut(r);
            for (s, perm) in perms.perms().iter().enumerate() {
                hrr::permute_into(perm, krow, &mut pr);
                hrr::bind_acc(&pr, xrow, &mut orow[s * width..(s + 1) * width]);
            }
        }
        let rg = self.rg(&[mem, key, value]);
        Ok(self.push(
            out,
            Op::MemWrite {
                mem,
                key,
                value,
                perms: perms.clone(),
            },
            rg,
        ))
    }

    /// Row `i` taken from `new` where `mask[i]`, otherwise from `old`.
    pub fn mask_rows(&mut self, new: Var, old: Var, mask: &[bool]) -> Result<Var> {
        same_shape("mask_rows", self.value(new), self.value(old))?;
        let rows = self.shape(new).0;
        if mask.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "mask_rows",
                expected: rows,
                found: mask.len(),
            });
        }
        if mask.iter().all(|&m| m) {
            return Ok(new);
        }
        let mut out = self.value(new).clone();
        let to = self.value(old);
        for (r, &keep_new) in mask.iter().enumerate() {
            if !keep_new {
                out.row_slice_mut(r).copy_from_slice(to.row_slice(r));
            }
        }
        let rg = self.rg(&[new, old]);
        Ok(self.push(
            out,
            Op::MaskRows {
                new,
                old,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            if let Some(g) = upper[0].as_ref() {
                self.propagate(i, g, lower);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let (r, c) = node.value.shape();
        Some(
            lower[v.0]
                .get_or_insert_with(|| Tensor::zeros(r, c))
                .data_mut(),
        )
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, lower: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if let Some(ga) = self.slot(lower, *a) {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = self.slot(lower, *b) {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        T::one(),
                        gb,
                        (n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(lower, v) {
                        acc(gv, gd);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.slot(lower, *a) {
                    acc(ga, gd);
                }
                if let Some(gb) = self.slot(lower, *bias) {
                    for row in gd.chunks(gb.len()) {
                        acc(gb, row);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(lower, *a) {
                    acc(ga, gd);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for (x, &gv) in gb.iter_mut().zip(gd) {
                        *x -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    for ((x, &gv), &bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *x += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for ((x, &gv), &av) in gb.iter_mut().zip(gd).zip(va) {
                        *x += gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if let Some(ga) = self.slot(lower, *a) {
                    for ((x, &gv), &bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *x += gv / bv;
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for (((x, &gv), &bv), &ov) in gb.iter_mut().zip(gd).zip(vb).zip(out.data()) {
                        *x -= gv * ov / bv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(lower, *a) {
                    for (x, &gv) in ga.iter_mut().zip(gd) {
                        *x += gv * *c;
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if let Some(gp) = self.slot(lower, p) {
                        for r in 0..rows {
                            acc(&mut gp[r * c..(r + 1) * c], &g.row_slice(r)[offset..offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice(a, start) => {
                let cols = self.shape(*a).1;
                let len = out.cols();
                if let Some(ga) = self.slot(lower, *a) {
                    for r in 0..out.rows() {
                        acc(
                            &mut ga[r * cols + start..r * cols + start + len],
                            g.row_slice(r),
                        );
                    }
                }
            }
            Op::Sigmoid(a) => self.pointwise(lower, *a, gd, out.data(), |_, y| y * (T::one() - y)),
            Op::Tanh(a) => self.pointwise(lower, *a, gd, out.data(), |_, y| T::one() - y * y),
            Op::Relu(a) => self.pointwise(lower, *a, gd, out.data(), |x, _| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Abs(a) => self.pointwise(lower, *a, gd, out.data(), |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            // d sqrt(x) is unbounded at 0; treated as 0 there like the other kinks.
            Op::Sqrt(a) => self.pointwise(lower, *a, gd, out.data(), |_, y| {
                if y > T::zero() {
                    T::lit(0.5) / y
                } else {
                    T::zero()
                }
            }),
            Op::MaxScalar(a, c) => {
                let c = *c;
                self.pointwise(lower, *a, gd, out.data(), move |x, _| {
                    if x > c {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    let gv = gd[0];
                    ga.iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    let gv = gd[0] / T::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.slot(lower, *logits) {
                    let cols = self.shape(*logits).1;
                    let scale = gd[0] / T::lit(labels.len() as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(lower, *table) {
                    let cols = out.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        acc(&mut gt[id * cols..(id + 1) * cols], g.row_slice(r));
                    }
                }
            }
            Op::CMul(a, b) => {
                let cols = out.cols();
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(lower, *a) {
                    for r in 0..out.rows() {
                        hrr::unbind_acc(
                            vb.row_slice(r),
                            g.row_slice(r),
                            T::one(),
                            &mut ga[r * cols..(r + 1) * cols],
                        );
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for r in 0..out.rows() {
                        hrr::unbind_acc(
                            va.row_slice(r),
                            g.row_slice(r),
                            T::one(),
                            &mut gb[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::Conj(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    let cols = out.cols();
                    for r in 0..out.rows() {
                        let gr = g.row_slice(r);
                        let dst = &mut ga[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            if j < cols / 2 {
                                dst[j] += gr[j];
                            } else {
                                dst[j] -= gr[j];
                            }
                        }
                    }
                }
            }
            Op::Bound(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    let va = self.value(*a);
                    let cols = out.cols();
                    let d = cols / 2;
                    for r in 0..out.rows() {
                        let (x, o, gr) = (va.row_slice(r), out.row_slice(r), g.row_slice(r));
                        let dst = &mut ga[r * cols..(r + 1) * cols];
                        for j in 0..d {
                            let m = (x[j] * x[j] + x[d + j] * x[d + j]).sqrt();
                            if m > T::one() {
                                // (I - o oᵀ) g / |x|
                                let dot = gr[j] * o[j] + gr[d + j] * o[d + j];
                                dst[j] += (gr[j] - o[j] * dot) / m;
                                dst[d + j] += (gr[d + j] - o[d + j] * dot) / m;
                            } else {
                                dst[j] += gr[j];
                                dst[d + j] += gr[d + j];
                            }
                        }
                    }
                }
            }
            Op::MemRead { mem, key, perms } => {
                let width = 2 * perms.dim();
                let nc = perms.count();
                let scale = T::one() / T::lit(nc as f64);
                let (vm, vk) = (self.value(*mem), self.value(*key));
                let mut pr = vec![T::zero(); width];
                let mut gs = vec![T::zero(); width];
                let mut gp = vec![T::zero(); width];
                let rows = out.rows();
                if let Some(gm) = self.slot(lower, *mem) {
                    for r in 0..rows {
                        gs.iter_mut()
                            .zip(g.row_slice(r))
                            .for_each(|(x, &v)| *x = v * scale);
                        for (s, perm) in perms.perms().iter().enumerate() {
                            hrr::permute_into(perm, vk.row_slice(r), &mut pr);
                            let base = r * width * nc + s * width;
                            hrr::bind_acc(&pr, &gs, &mut gm[base..base + width]);
                        }
                    }
                }
                if let Some(gk) = self.slot(lower, *key) {
                    for r in 0..rows {
                        gs.iter_mut()
                            .zip(g.row_slice(r))
                            .for_each(|(x, &v)| *x = v * scale);
                        let mrow = vm.row_slice(r);
                        for (s, perm) in perms.perms().iter().enumerate() {
                            gp.iter_mut().for_each(|x| *x = T::zero());
                            // gradient w.r.t. P_s r is m_s ⊛ conj(g)
                            hrr::unbind_acc(&gs, &mrow[s * width..(s + 1) * width], T::one(), &mut gp);
                            hrr::unpermute_acc(perm, &gp, &mut gk[r * width..(r + 1) * width]);
                        }
                    }
                }
            }
            Op::MemWrite {
                mem,
                key,
                value,
                perms,
            } => {
                let width = 2 * perms.dim();
                let nc = perms.count();
                if let Some(gm) = self.slot(lower, *mem) {
                    acc(gm, gd);
                }
                let (vk, vx) = (self.value(*key), self.value(*value));
                let mut pr = vec![T::zero(); width];
                let mut gp = vec![T::zero(); width];
                let rows = out.rows();
                if let Some(gx) = self.slot(lower, *value) {
                    for r in 0..rows {
                        let grow = g.row_slice(r);
                        for (s, perm) in perms.perms().iter().enumerate() {
                            hrr::permute_into(perm, vk.row_slice(r), &mut pr);
                            hrr::unbind_acc(
                                &pr,
                                &grow[s * width..(s + 1) * width],
                                T::one(),
                                &mut gx[r * width..(r + 1) * width],
                            );
                        }
                    }
                }
                if let Some(gk) = self.slot(lower, *key) {
                    for r in 0..rows {
                        let grow = g.row_slice(r);
                        for (s, perm) in perms.perms().iter().enumerate() {
                            gp.iter_mut().for_each(|x| *x = T::zero());
                            hrr::unbind_acc(
                                vx.row_slice(r),
                                &grow[s * width..(s + 1) * width],
                                T::one(),
                                &mut gp,
                            );
                            hrr::unpermute_acc(perm, &gp, &mut gk[r * width..(r + 1) * width]);
                        }
                    }
                }
                debug_assert_eq!(out.cols(), width * nc);
            }
            Op::MaskRows { new, old, mask } => {
                let cols = out.cols();
                for (target, take) in [(*new, true), (*old, false)] {
                    if let Some(gt) = self.slot(lower, target) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == take {
                                acc(&mut gt[r * cols..(r + 1) * cols], g.row_slice(r));
                            }
                        }
                    }
                }
            }
        }
    }

    /// `ga += g * f(x, y)` for elementwise ops with input `x`, output `y`.
    fn pointwise(
        &self,
        lower: &mut [Option<Tensor<T>>],
        a: Var,
        gd: &[T],
        out: &[T],
        f: impl Fn(T, T) -> T,
    ) {
        let input = self.value(a).data();
        if let Some(ga) = self.slot(lower, a) {
            for (((x, &gv), &xv), &yv) in ga.iter_mut().zip(gd).zip(input).zip(out) {
                *x += gv * f(xv, yv);
            }
        }
    }
}

#[inline]
fn acc<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
