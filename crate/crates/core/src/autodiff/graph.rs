use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        /// number of independent products; `b` is shared when `b_batched` is false
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Gelu {
        a: Var,
        /// d gelu / dx at each input; empty when no gradient flows
        slope: Vec<f64>,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// per-row (mean, 1/std)
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
        /// softmax of each active row, in row order
        probs: Vec<(usize, Vec<f64>)>,
        active: f64,
    },
    WeightedSum {
        a: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, which
/// is a topological order, and `backward` walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, or `[b,m,k]·[k,n]` with a shared right operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, b_batched, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, false, *m, *k, *n),
            ([bs, m, k], [bs2, k2, n]) if bs == bs2 && k == k2 => (*bs, true, *m, *k, *n),
            ([bs, m, k], [k2, n]) if k == k2 => (*bs, false, *m, *k, *n),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if b_batched {
            for i in 0..batch {
                kernels::matmul_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            kernels::matmul_acc(av, bv, &mut out, batch * m, k, n);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                b_batched,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let blen = bv.len();
        let mut out = av.to_vec();
        if blen > 0 {
            for chunk in out.chunks_exact_mut(blen) {
                for (o, &x) in chunk.iter_mut().zip(bv) {
                    *o += x;
                }
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale { a, c }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        // the local slope is kept so the reverse pass skips a second tanh
        let (out, slope) = if rg {
            t.data().iter().map(|&x| kernels::gelu_with_grad(x)).unzip()
        } else {
            (t.data().iter().map(|&x| kernels::gelu(x)).collect(), Vec::new())
        };
        self.push(Tensor::from_parts(shape, out), Op::Gelu { a, slope }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let width = *t.shape().last().ok_or_else(|| mismatch("softmax_rows", t.shape(), &[]))?;
        let mut out = t.data().to_vec();
        if width > 0 {
            for row in out.chunks_exact_mut(width) {
                kernels::softmax_in_place(row);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows { a }, rg))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("layer_norm eps must be positive, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        let width = *sx.last().ok_or_else(|| mismatch("layer_norm_rows", &sx, &[]))?;
        if self.shape(gain) != [width] {
            return Err(mismatch("layer_norm_rows", &sx, self.shape(gain)));
        }
        if self.shape(bias) != [width] {
            return Err(mismatch("layer_norm_rows", &sx, self.shape(bias)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / width.max(1));
        for (row, orow) in xv.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
            stats.push(kernels::layer_norm_row(row, gv, bv, eps, orow));
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Rows of a `[V,d]` table selected by `indices`, giving `[len,d]`.
    pub fn embedding_gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let [rows, d] = st[..] else {
            return Err(mismatch("embedding_gather", &st, &[]));
        };
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(mismatch("embedding_gather", &st, &[i]));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, r, c) = match s[..] {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(mismatch("transpose", &s, &[])),
        };
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(av.len());
        for i in 0..batch {
            out.extend(kernels::transpose(&av[i * r * c..(i + 1) * r * c], r, c));
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose { a }, rg))
    }

    /// `[B,T,H·dh]` to `[B·H,T,dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [b, t, d] = s[..] else {
            return Err(mismatch("split_heads", &s, &[heads]));
        };
        if heads == 0 || d % heads != 0 {
            return Err(mismatch("split_heads", &s, &[heads]));
        }
        let dh = d / heads;
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            for ti in 0..t {
                let src = &av[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![b * heads, t, dh], out),
            Op::SplitHeads { a, heads },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [bh, t, dh] = s[..] else {
            return Err(mismatch("merge_heads", &s, &[heads]));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(mismatch("merge_heads", &s, &[heads]));
        }
        let b = bh / heads;
        let d = dh * heads;
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![b, t, d], out),
            Op::MergeHeads { a, heads },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose mask is nonzero.
    /// `logits` is `[N,V]` or `[B,T,V]` (flattened to `N = B·T` rows).
    /// Targets at masked-out rows are never read.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().ok_or_else(|| mismatch("cross_entropy_masked", &s, &[]))?;
        let rows = if v == 0 { 0 } else { self.value(logits).len() / v };
        if targets.len() != rows || mask.len() != rows {
            return Err(mismatch("cross_entropy_masked", &s, &[targets.len(), mask.len()]));
        }
        let active: f64 = mask.iter().sum();
        if !(active > 0.0) {
            return Err(Error::AllMasked);
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        let mut probs = Vec::new();
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m == 0.0 {
                continue;
            }
            if t >= v {
                return Err(mismatch("cross_entropy_masked", &s, &[t]));
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            total += m * (lse - row[t]);
            let mut p = row.to_vec();
            kernels::softmax_in_place(&mut p);
            probs.push((r, p));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / active),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                active,
            },
            rg,
        ))
    }

    /// `Σ a_i · w_i` with constant weights, giving a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let av = self.value(a).data();
        if av.len() != weights.len() {
            return Err(mismatch("weighted_sum", self.shape(a), &[weights.len()]));
        }
        let s = kernels::dot(av, weights);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                a,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::AlreadyConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                b_batched,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if rg(a) {
                    let da = accumulate(grads, av.len(), a);
                    if b_batched {
                        for i in 0..batch {
                            kernels::matmul_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    } else {
                        kernels::matmul_nt_acc(g, bv, da, batch * m, n, k);
                    }
                }
                if rg(b) {
                    let db = accumulate(grads, bv.len(), b);
                    if b_batched {
                        for i in 0..batch {
                            kernels::matmul_tn_acc(
                                &av[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        kernels::matmul_tn_acc(av, g, db, batch * m, k, n);
                    }
                }
            }
            &Op::Add { a, b } => {
                if rg(a) {
                    let da = accumulate(grads, g.len(), a);
                    kernels::axpy(1.0, g, da);
                }
                if rg(b) {
                    let blen = val(b).len();
                    let db = accumulate(grads, blen, b);
                    if blen > 0 {
                        for chunk in g.chunks_exact(blen) {
                            kernels::axpy(1.0, chunk, db);
                        }
                    }
                }
            }
            &Op::Scale { a, c } => {
                if rg(a) {
                    let da = accumulate(grads, g.len(), a);
                    kernels::axpy(c, g, da);
                }
            }
            Op::Gelu { a, slope } => {
                if rg(*a) {
                    let da = accumulate(grads, g.len(), *a);
                    for ((d, &gv), &s) in da.iter_mut().zip(g).zip(slope) {
                        *d += gv * s;
                    }
                }
            }
            &Op::SoftmaxRows { a } => {
                if rg(a) {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    let da = accumulate(grads, g.len(), a);
                    if width > 0 {
                        for ((yr, gr), dr) in y
                            .chunks_exact(width)
                            .zip(g.chunks_exact(width))
                            .zip(da.chunks_exact_mut(width))
                        {
                            let s = kernels::dot(yr, gr);
                            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d += yv * (gv - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = val(x).data();
                let gv = val(gain).data();
                let width = gv.len();
                let wf = width as f64;
                if rg(gain) || rg(bias) {
                    let mut dgain = vec![0.0; width];
                    let mut dbias = vec![0.0; width];
                    for ((xr, gr), &(mean, rstd)) in
                        xv.chunks_exact(width).zip(g.chunks_exact(width)).zip(stats)
                    {
                        for j in 0..width {
                            dgain[j] += gr[j] * (xr[j] - mean) * rstd;
                            dbias[j] += gr[j];
                        }
                    }
                    if rg(gain) {
                        kernels::axpy(1.0, &dgain, accumulate(grads, width, gain));
                    }
                    if rg(bias) {
                        kernels::axpy(1.0, &dbias, accumulate(grads, width, bias));
                    }
                }
                if rg(x) {
                    let dx = accumulate(grads, xv.len(), x);
                    let mut dxhat = vec![0.0; width];
                    for (((xr, gr), dr), &(mean, rstd)) in xv
                        .chunks_exact(width)
                        .zip(g.chunks_exact(width))
                        .zip(dx.chunks_exact_mut(width))
                        .zip(stats)
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..width {
                            dxhat[j] = gr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * (xr[j] - mean) * rstd;
                        }
                        let mean_d = sum_d / wf;
                        let mean_dx = sum_dx / wf;
                        for j in 0..width {
                            let xhat = (xr[j] - mean) * rstd;
                            dr[j] += rstd * (dxhat[j] - mean_d - xhat * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let table = *table;
                if rg(table) {
                    let tv = val(table);
                    let d = tv.shape()[1];
                    let dt = accumulate(grads, tv.len(), table);
                    for (r, &i) in indices.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                    }
                }
            }
            &Op::Reshape { a } => {
                if rg(a) {
                    kernels::axpy(1.0, g, accumulate(grads, g.len(), a));
                }
            }
            &Op::Transpose { a } => {
                if rg(a) {
                    // output is [.., c, r]; transposing it back gives [.., r, c]
                    let s = node.value.shape();
                    let (batch, r, c) = match *s {
                        [r, c] => (1, r, c),
                        [b, r, c] => (b, r, c),
                        _ => unreachable!(),
                    };
                    let da = accumulate(grads, g.len(), a);
                    for i in 0..batch {
                        let back = kernels::transpose(&g[i * r * c..(i + 1) * r * c], r, c);
                        kernels::axpy(1.0, &back, &mut da[i * r * c..(i + 1) * r * c]);
                    }
                }
            }
            &Op::SplitHeads { a, heads } => {
                if rg(a) {
                    let s = val(a).shape();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let dh = d / heads;
                    let da = accumulate(grads, g.len(), a);
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let src = ((bi * heads + h) * t + ti) * dh;
                                let dst = (bi * t + ti) * d + h * dh;
                                kernels::axpy(1.0, &g[src..src + dh], &mut da[dst..dst + dh]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { a, heads } => {
                if rg(a) {
                    let s = val(a).shape();
                    let (bh, t, dh) = (s[0], s[1], s[2]);
                    let b = bh / heads;
                    let d = dh * heads;
                    let da = accumulate(grads, g.len(), a);
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                let src = (bi * t + ti) * d + h * dh;
                                kernels::axpy(1.0, &g[src..src + dh], &mut da[dst..dst + dh]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                active,
            } => {
                let logits = *logits;
                if rg(logits) {
                    let lv = val(logits);
                    let v = *lv.shape().last().unwrap();
                    let scale = g[0] / active;
                    let dl = accumulate(grads, lv.len(), logits);
                    for (r, p) in probs {
                        let w = scale * mask[*r];
                        let drow = &mut dl[r * v..(r + 1) * v];
                        kernels::axpy(w, p, drow);
                        drow[targets[*r]] -= w;
                    }
                }
            }
            Op::WeightedSum { a, weights } => {
                let a = *a;
                if rg(a) {
                    kernels::axpy(g[0], weights, accumulate(grads, weights.len(), a));
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`. Leaves created
    /// with [`Graph::param`] always have one after backward (zeros if the loss
    /// does not depend on them).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::op_cases;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            for (name, rep) in op_cases(seed, 1e-5, 1e-4, 1e-6).unwrap() {
                assert!(rep.passes(0.99, 1e-3), "{name} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut g = Graph::new();
        let l = g.param(&Tensor::zeros(&[3, 4]));
        let loss = g.cross_entropy_masked(l, &[0, 2, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_targets_are_inert() {
        let logits = Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = |t1: usize| {
            let mut g = Graph::new();
            let l = g.param(&logits);
            let loss = g.cross_entropy_masked(l, &[2, t1, 0], &[1.0, 0.0, 1.0]).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item().to_bits(), g.grad(l).unwrap().to_vec())
        };
        assert_eq!(run(0), run(1));
        assert_eq!(run(0), run(usize::MAX));
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut g = Graph::new();
        let l = g.param(&Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy_masked(l, &[0, 0], &[0.0, 0.0]), Err(Error::AllMasked)));
    }

    #[test]
    fn backward_runs_once_on_scalars() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
        let s = g.weighted_sum(a, &[1.0, 2.0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]);
        assert!(matches!(g.backward(s), Err(Error::AlreadyConsumed)));
    }

    #[test]
    fn disconnected_params_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::full(&[2], 3.0));
        let unused = g.param(&Tensor::zeros(&[3]));
        let c = g.constant(Tensor::full(&[2], 1.0));
        let s = g.weighted_sum(a, &[1.0, 1.0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::zeros(&[2, 3]));
        let b = g.param(&Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { op: "matmul", .. })));
        let c = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(g.embedding_gather(a, &[2]).is_err());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // d/dx of sum(x + x + x) = 3
        let mut g = Graph::new();
        let x = g.param(&Tensor::full(&[2], 0.5));
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let s = g.weighted_sum(y, &[1.0, 1.0]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }
}
