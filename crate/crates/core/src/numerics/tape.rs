use super::{gemm, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    BatchedMatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Softmax(usize),
    CausalSoftmax(usize),
    LayerNorm { x: usize, gain: usize, xhat: Vec<T>, rstd: Vec<T> },
    Embed { table: usize, tokens: Vec<usize> },
    Concat(Vec<usize>),
    Permute { a: usize, perm: Vec<usize> },
    Reshape(usize),
    Rope { a: usize, cos: Vec<T>, sin: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<usize>, probs: Vec<T> },
    Sum(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is a topological order of
/// the computation graph; [`Tape::backward`] walks it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    // With the last axis in place, whole rows move as contiguous runs.
    let (run, outer) = if rank > 0 && perm[rank - 1] == rank - 1 { (shape[rank - 1], rank - 1) } else { (1, rank) };
    if run == 0 || data.is_empty() {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; outer];
    let mut off = 0usize;
    for _ in 0..data.len() / run {
        out.extend_from_slice(&data[off..off + run]);
        let mut ax = outer;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Cosine/sine tables for rotary embeddings: one row per position, one column
/// per rotated pair, frequency `theta^(-2i/head_dim)`.
pub(crate) fn rope_tables<T: Scalar>(positions: &[usize], head_dim: usize, theta: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for i in 0..half {
            let freq = theta.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every `[.., T, head_dim]` slice.
/// With `inverse` the rotation angle is negated.
pub(crate) fn rope_rotate<T: Scalar>(data: &mut [T], seq: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_exact_mut(head_dim).enumerate() {
        let t = r % seq;
        for i in 0..half {
            let c = cos[t * half + i];
            let s = if inverse { -sin[t * half + i] } else { sin[t * half + i] };
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[.., K] x [K, M] -> [.., M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.shape().len() != 2 || av.shape().is_empty() || av.cols() != bv.shape()[0] {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![T::zero(); n * m];
        gemm(false, false, n, k, m, T::one(), av.data(), bv.data(), T::zero(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched product `[G, M, K] x [G, K, N] -> [G, M, N]`; with `trans_b`
    /// the right operand is stored as `[G, N, K]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batched_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("batched_matmul", sa, sb));
        }
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            gemm(
                false,
                trans_b,
                m,
                k,
                n,
                T::one(),
                &av.data()[i * m * k..],
                &bv.data()[i * k * n..],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::from_vec(&[g, m, n], out)?, Op::BatchedMatMul { a: a.0, b: b.0, trans_b }, rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let av = &self.nodes[a.0].value;
        let out = Tensor { shape: av.shape.clone(), data: av.data.iter().map(|&v| v * s).collect() };
        let rg = self.rg(a.0);
        self.push(out, Op::Scale(a.0, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let out = Tensor { shape: av.shape.clone(), data: av.data.iter().map(|&v| v.max(T::zero())).collect() };
        let rg = self.rg(a.0);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data.iter().copied().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(total), Op::Sum(a.0), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor { shape: av.shape.clone(), data };
        let rg = self.rg(a.0);
        self.push(out, Op::Softmax(a.0), rg)
    }

    /// Softmax over the last axis of `[.., T, T]` restricted to keys `j <= i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let s = av.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(TensorError::Invalid { op: "causal_softmax", msg: format!("needs [.., T, T], got {s:?}") });
        }
        let t = av.cols();
        let mut data = av.data.clone();
        for (r, row) in data.chunks_exact_mut(t).enumerate() {
            let i = r % t;
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
        }
        let out = Tensor { shape: av.shape.clone(), data };
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::CausalSoftmax(a.0), rg))
    }

    /// Normalizes the last axis and multiplies by `gain`; no bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let d = xv.cols();
        if gv.shape() != [d] {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data[j];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(x.0) || self.rg(gain.0);
        Ok(self.push(out, Op::LayerNorm { x: x.0, gain: gain.0, xhat, rstd }, rg))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embed(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 {
            return Err(TensorError::Invalid { op: "embed", msg: format!("table must be 2-D, got {:?}", tv.shape()) });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= v {
                return Err(TensorError::OutOfRange { index: t, size: v });
            }
            out.extend_from_slice(tv.row(t));
        }
        let out = Tensor::from_vec(&[tokens.len(), d], out)?;
        let rg = self.rg(table.0);
        Ok(self.push(out, Op::Embed { table: table.0, tokens: tokens.to_vec() }, rg))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let lead = self.nodes[first.0].value.shape().split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows = self.nodes[first.0].value.rows();
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.nodes[first.0].value.shape(), s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let rank = av.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid { op: "permute", msg: format!("bad axes {perm:?} for rank {rank}") });
        }
        let (shape, data) = permute_data(av.data(), av.shape(), perm);
        let rg = self.rg(a.0);
        Ok(self.push(Tensor { shape, data }, Op::Permute { a: a.0, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::Invalid { op: "transpose", msg: "needs rank >= 2".into() });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Rotary position embedding over `[.., T, head_dim]`, with `positions`
    /// giving the absolute position of each of the `T` rows.
    pub fn rope(&mut self, a: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let s = av.shape();
        if s.len() < 2 || s[s.len() - 2] != positions.len() {
            return Err(mismatch("rope", s, &[positions.len()]));
        }
        let hd = av.cols();
        if hd % 2 != 0 {
            return Err(TensorError::Invalid { op: "rope", msg: format!("head dimension {hd} is odd") });
        }
        let (cos, sin) = rope_tables::<T>(positions, hd, theta);
        let mut data = av.data.clone();
        rope_rotate(&mut data, positions.len(), hd, &cos, &sin, false);
        let out = Tensor { shape: av.shape.clone(), data };
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Rope { a: a.0, cos, sin }, rg))
    }

    /// Mean negative log-likelihood over the rows listed in `mask`.
    ///
    /// `targets` has one entry per row of `logits`; entries outside the mask
    /// are ignored.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (rows, v) = (lv.rows(), lv.cols());
        if mask.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        if targets.len() != rows {
            return Err(mismatch("masked_cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(mask.len() * v);
        let mut total = 0.0f64;
        for &r in mask {
            if r >= rows {
                return Err(TensorError::OutOfRange { index: r, size: rows });
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::OutOfRange { index: t, size: v });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            total += (log_z - row[t]).as_f64();
            probs.extend(row.iter().map(|&x| (x - log_z).exp()));
        }
        let loss = T::of(total / mask.len() as f64);
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor { shape: n.value.shape.clone(), data: g }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |i: usize| nodes[i].requires_grad;
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> &'a mut Vec<T> {
            grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()])
        }
        // Hands over a whole gradient buffer, adding only if one exists.
        fn give<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, g: Vec<T>) {
            match &mut grads[i] {
                Some(d) => d.iter_mut().zip(g).for_each(|(d, v)| *d += v),
                None => grads[i] = Some(g),
            }
        }
        let g = g.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
                if want(*a) {
                    gemm(false, true, n, m, k, T::one(), g, bv.data(), T::one(), slot(grads, nodes, *a));
                }
                if want(*b) {
                    gemm(true, false, k, n, m, T::one(), av.data(), g, T::one(), slot(grads, nodes, *b));
                }
            }
            Op::BatchedMatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if want(*a) {
                    let da = slot(grads, nodes, *a);
                    for i in 0..bs {
                        gemm(
                            false,
                            !*trans_b,
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..],
                            &bv.data()[i * k * n..],
                            T::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if want(*b) {
                    let db = slot(grads, nodes, *b);
                    for i in 0..bs {
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(true, false, n, m, k, T::one(), &g[i * m * n..], &av.data()[i * m * k..], T::one(), out);
                        } else {
                            gemm(true, false, k, m, n, T::one(), &av.data()[i * m * k..], &g[i * m * n..], T::one(), out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &src in [a, b] {
                    if want(src) {
                        give(grads, src, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let other = nodes[*b].value.data();
                    let d = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        d[j] += g[j] * other[j];
                    }
                }
                if want(*b) {
                    let other = nodes[*a].value.data();
                    let d = slot(grads, nodes, *b);
                    for j in 0..g.len() {
                        d[j] += g[j] * other[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    give(grads, *a, g.iter().map(|&v| v * *s).collect());
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let x = nodes[*a].value.data();
                    let d = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        if x[j] > T::zero() {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    slot(grads, nodes, *a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                if want(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let d = slot(grads, nodes, *a);
                    for ((yr, gr), dr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(d.chunks_exact_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, xhat, rstd } => {
                let gv = nodes[*gain].value.data();
                let d = gv.len();
                if want(*gain) {
                    let dg = slot(grads, nodes, *gain);
                    for (hr, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if want(*x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let dx = slot(grads, nodes, *x);
                    let mut dh = vec![T::zero(); d];
                    for (r, (hr, gr)) in xhat.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embed { table, tokens } => {
                if want(*table) {
                    let d = nodes[*table].value.cols();
                    let dt = slot(grads, nodes, *table);
                    for (r, &t) in tokens.iter().enumerate() {
                        for j in 0..d {
                            dt[t * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    if want(p) {
                        let dp = slot(grads, nodes, p);
                        for r in 0..rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Permute { a, perm } => {
                if want(*a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(g, node.value.shape(), &inv);
                    give(grads, *a, back);
                }
            }
            Op::Reshape(a) => {
                if want(*a) {
                    give(grads, *a, g.to_vec());
                }
            }
            Op::Rope { a, cos, sin } => {
                if want(*a) {
                    let s = node.value.shape();
                    let (seq, hd) = (s[s.len() - 2], s[s.len() - 1]);
                    let mut back = g.to_vec();
                    rope_rotate(&mut back, seq, hd, cos, sin, true);
                    give(grads, *a, back);
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                if want(*logits) {
                    let v = nodes[*logits].value.cols();
                    let scale = g[0] / T::of(mask.len() as f64);
                    let dl = slot(grads, nodes, *logits);
                    for (m, &r) in mask.iter().enumerate() {
                        let pr = &probs[m * v..(m + 1) * v];
                        let out = &mut dl[r * v..(r + 1) * v];
                        for j in 0..v {
                            out[j] += pr[j] * scale;
                        }
                        out[targets[r]] -= scale;
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let inv = T::one() / z;
    row.iter_mut().for_each(|v| *v *= inv);
}
