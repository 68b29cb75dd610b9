use super::kernels;
use super::{Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    FrobeniusNorm(Var),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(T, T)>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

/// Computation tape. Nodes are appended in topological order, so the
/// backward pass is a single reverse sweep.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, other, &[0, 0])),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient accumulated by the last backward pass, if `v` is on a
    /// differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// `a @ b` for `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `[m, k] x [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (br, bc) = matrix_dims("matmul", self.value(b))?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    /// Adds a `[n]` bias to every trailing-dimension row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(bias).numel();
        let xs = self.value(x).shape();
        if self.value(bias).rank() != 1 || xs.last() != Some(&n) {
            return Err(shape_err("add_bias", xs, self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = xs.to_vec();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), needs))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, c), needs)
    }

    /// Multiplies a tensor by a single-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", self.value(x).shape(), self.value(s).shape()));
        }
        let c = self.value(s).item();
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(&[x, s]);
        Ok(self.push(Tensor { shape, data }, Op::MulScalar(x, s), needs))
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).frobenius_norm();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(n), Op::FrobeniusNorm(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| kernels::gelu(e)).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Gelu(x), needs)
    }

    /// Row softmax of a matrix. With `causal`, the input must be square
    /// and row `i` is normalized over columns `0..=i` only.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var, TensorError> {
        let (r, c) = matrix_dims("softmax", self.value(x))?;
        if causal && r != c {
            return Err(shape_err("causal softmax", &[r, c], &[r, r]));
        }
        let data = kernels::softmax_rows(self.value(x).data(), c, causal);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::Softmax(x), needs))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = matrix_dims("layer_norm", self.value(x))?;
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(shape_err("layer_norm", &[r, c], self.value(gain).shape()));
        }
        let mut out = vec![T::zero(); r * c];
        let stats = kernels::layer_norm_rows(
            self.value(x).data(),
            c,
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
        );
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm { x, gain, bias, stats },
            needs,
        ))
    }

    /// Gathers rows of `table` (`[rows, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, d) = matrix_dims("embedding", self.value(table))?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { id, rows });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rotary embedding over `[L, heads * head_dim]`; row `r` is rotated
    /// by `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var, TensorError> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(TensorError::OddHeadDim(head_dim));
        }
        let (r, c) = matrix_dims("rope", self.value(x))?;
        if r != positions.len() || c % head_dim != 0 {
            return Err(shape_err("rope", &[r, c], &[positions.len(), head_dim]));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::rope_rows(&mut data, c, positions, head_dim, base, false);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], data)?,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > c {
            return Err(shape_err("slice_cols", &[r, c], &[start, len]));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err("concat_cols", &[rows.unwrap_or(0)], &[r]));
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Mean over rows with `mask[r]` of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, TensorError> {
        let (r, c) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != r || mask.len() != r {
            return Err(shape_err("cross_entropy", &[r, c], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), c, false);
        let mut total = T::zero();
        for (row, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= c {
                return Err(TensorError::TargetOutOfRange { id: t, classes: c });
            }
            // log-softmax directly from logits for accuracy at saturation
            let lg = &self.value(logits).data()[row * c..(row + 1) * c];
            let max = lg.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = lg.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - lg[t];
        }
        let loss = total / T::from_usize(count).unwrap();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar node. Clears gradients from any
    /// previous sweep first.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() > 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let Graph {
            values,
            ops,
            needs_grad,
            grads,
        } = self;
        let values = &*values;
        let needs_grad = &*needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, needs_grad, values, $v)
            };
        }
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = values[a.0].dims2();
                let n = values[i].shape()[1];
                let av = values[a.0].data();
                let bv = values[b.0].data();
                if let Some(da) = acc!(*a) {
                    // dA = G op(B)^T
                    T::gemm(m, n, k, g, false, bv, !*trans_b, T::one(), da);
                }
                if let Some(db) = acc!(*b) {
                    if *trans_b {
                        // B is [n, k]: dB = G^T A
                        T::gemm(n, m, k, g, true, av, false, T::one(), db);
                    } else {
                        // B is [k, n]: dB = A^T G
                        T::gemm(k, m, n, av, true, g, false, T::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                if let Some(d) = acc!(*a) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(d) = acc!(*b) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let n = values[bias.0].numel();
                if let Some(d) = acc!(*bias) {
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::MulScalar(x, s) => {
                let c = values[s.0].item();
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
                }
                let dot: T = g.iter().zip(values[x.0].data()).map(|(&g, &v)| g * v).sum();
                if let Some(d) = acc!(*s) {
                    d[0] += dot;
                }
            }
            Op::FrobeniusNorm(x) => {
                let norm = values[i].item();
                if norm > T::zero() {
                    let f = g[0] / norm;
                    if let Some(d) = acc!(*x) {
                        d.iter_mut().zip(values[x.0].data()).for_each(|(d, &v)| *d += f * v);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu(x) => {
                if let Some(d) = acc!(*x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(values[x.0].data()) {
                        *d += g * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = values[i].data();
                let c = values[i].shape()[1];
                if let Some(d) = acc!(*x) {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let c = values[i].shape()[1];
                let xv = values[x.0].data();
                let gv = values[gain.0].data();
                let xhat: Vec<T> = xv
                    .chunks_exact(c)
                    .zip(stats)
                    .flat_map(|(row, &(mean, rstd))| row.iter().map(move |&v| (v - mean) * rstd))
                    .collect();
                if let Some(dg) = acc!(*gain) {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &g), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += g * h;
                        }
                    }
                }
                if let Some(db) = acc!(*bias) {
                    for grow in g.chunks_exact(c) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    let inv_c = T::one() / T::from_usize(c).unwrap();
                    for (((drow, grow), hrow), &(_, rstd)) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .zip(stats)
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            drow[j] += rstd * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = values[table.0].shape()[1];
                if let Some(dt) = acc!(*table) {
                    for (grow, &id) in g.chunks_exact(d).zip(ids) {
                        dt[id * d..(id + 1) * d].iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let c = values[i].shape()[1];
                if let Some(d) = acc!(*x) {
                    let mut back = g.to_vec();
                    kernels::rope_rows(&mut back, c, positions, *head_dim, *base, true);
                    d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g);
                }
            }
            Op::SliceCols { x, start } => {
                let w = values[i].shape()[1];
                let c = values[x.0].shape()[1];
                if let Some(d) = acc!(*x) {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        drow[*start..*start + w].iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = values[i].shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = values[p.0].shape()[1];
                    if let Some(d) = acc!(p) {
                        for (drow, grow) in d.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            drow.iter_mut().zip(&grow[offset..offset + w]).for_each(|(d, &g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let c = values[logits.0].shape()[1];
                let f = g[0] / T::from_usize(*count).unwrap();
                if let Some(d) = acc!(*logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let drow = &mut d[r * c..(r + 1) * c];
                        for (d, &p) in drow.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *d += f * p;
                        }
                        drow[t] -= f;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    needs_grad: &[bool],
    values: &[Tensor<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !needs_grad[v.0] {
        return None;
    }
    let n = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}
