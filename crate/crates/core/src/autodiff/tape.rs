use super::kernels::{gelu, gelu_grad, gemm};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
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
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Reshape(Var),
    SwapMiddle {
        x: Var,
        dims: [usize; 4],
    },
    Transpose(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_tracked(value, op, tracked)
    }

    fn push_tracked(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_tracked(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_tracked(value, Op::Leaf, false)
    }

    /// Copies `x`'s value into an untracked leaf (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value")
        })
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward ops ----

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[g,m,k]·[g,k,n]`, or `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(mismatch(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let bview = if trans_b {
                (bi, 1, k as isize)
            } else {
                (bi, n as isize, 1)
            };
            gemm(
                m,
                k,
                n,
                (ai, k as isize, 1),
                bview,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Adds `bias` to every trailing block of `x`; `bias`'s shape must equal
    /// the trailing extents of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.is_empty() || sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(mismatch("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = self.value(bias).data();
        let bl = b.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % bl])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.map(x, |a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(mismatch(
                "scale_by",
                format!("scale shape {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let v = self.map(x, |a| a * k);
        Ok(self.push(v, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| T::one() / (T::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = v.width();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(w) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes every last-axis row to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = v.width();
        let mut xhat = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        let wn = T::from_f64(w as f64);
        for row in v.data().chunks_exact(w) {
            let mean = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / wn;
            let inv = T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&a| (a - mean) * inv));
        }
        let value = Tensor::new(v.shape().to_vec(), xhat.clone()).expect("same shape");
        self.push(value, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// Scales every last-axis row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = v.width();
        let mut out = Vec::with_capacity(v.len());
        let mut norms = Vec::with_capacity(v.rows());
        for row in v.data().chunks_exact(w) {
            let n = row
                .iter()
                .map(|&a| a * a)
                .sum::<T>()
                .sqrt()
                .max(T::from_f64(NORMALIZE_EPS));
            norms.push(n);
            out.extend(row.iter().map(|&a| a / n));
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Normalize { x, norms }, &[x])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("mean_pool", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(len as f64);
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let s = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &a) in dst.iter_mut().zip(s) {
                    *d = *d + a;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Mean {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `[a,b,c,d] -> [a,c,b,d]` (splitting or merging attention heads).
    pub fn swap_middle(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(mismatch("swap_middle", format!("{s:?} is not 4-d")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_middle(self.value(x).data(), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        Ok(self.push(value, Op::SwapMiddle { x, dims }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("{s:?} is not 2-d")));
        }
        let (r, c) = (s[0], s[1]);
        let out = permute_middle(self.value(x).data(), [1, r, c, 1]);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_last", "no inputs".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch(
                    "concat_last",
                    format!("{s:?} vs leading {lead:?}"),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let w = v.width();
        if len == 0 || start + len > w {
            return Err(mismatch(
                "slice_last",
                format!("{start}+{len} of width {w}"),
            ));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for row in v.data().chunks_exact(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    /// Rows `indices` of a `[K, c]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(mismatch("gather_rows", format!("table {s:?} is not 2-d")));
        }
        let (k, c) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(mismatch("gather_rows", format!("index {bad} >= {k}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Forward value is `quantized`; the backward pass hands the incoming
    /// gradient to `f` unchanged.
    pub fn straight_through(&mut self, f: Var, quantized: Tensor<T>) -> Result<Var> {
        if self.shape(f) != quantized.shape() {
            return Err(mismatch(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(f), quantized.shape()),
            ));
        }
        Ok(self.push(quantized, Op::StraightThrough(f), &[f]))
    }

    /// Mean over rows of `-Σ_j t_j · log softmax(logits)_j` for target
    /// distributions `targets` (same shape as `logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let v = self.value(logits);
        if v.shape() != targets.shape() || v.shape().len() != 2 {
            return Err(mismatch(
                "cross_entropy",
                format!("{:?} vs {:?}", v.shape(), targets.shape()),
            ));
        }
        let w = v.width();
        let rows = v.rows();
        let mut probs = v.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_exact_mut(w).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<T>().ln();
            let t = &targets.data()[r * w..(r + 1) * w];
            for (p, &tj) in row.iter_mut().zip(t) {
                let logp = *p - lse;
                if tj != T::zero() {
                    loss = loss - tj * logp;
                }
                *p = logp.exp();
            }
        }
        let value = Tensor::scalar(loss / T::from_f64(rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.into_data(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ----

    /// Back-propagates from the scalar `loss`, adding `∂loss/∂node` to the
    /// stored gradient of every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(mismatch(
                "backward",
                format!("loss shape {:?} is not scalar", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        // Gradient buffer for input `v`, or None when v needs no gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].tracked {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(*a), val(*b));
                if let Some(da) = buf!(*a) {
                    // dA = G·Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (g, n as isize, 1),
                        (bd, 1, n as isize),
                        T::one(),
                        da,
                    );
                }
                if let Some(db) = buf!(*b) {
                    // dB = Aᵀ·G
                    gemm(
                        k,
                        m,
                        n,
                        (ad, 1, k as isize),
                        (g, n as isize, 1),
                        T::one(),
                        db,
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.len() / (bt * m);
                let (ad, bd) = (val(*a), val(*b));
                if let Some(da) = buf!(*a) {
                    for j in 0..bt {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let bj = &bd[j * k * n..(j + 1) * k * n];
                        // Bᵀ as an n×k view
                        let bview = if *trans_b {
                            (bj, k as isize, 1)
                        } else {
                            (bj, 1, n as isize)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            (gj, n as isize, 1),
                            bview,
                            T::one(),
                            &mut da[j * m * k..(j + 1) * m * k],
                        );
                    }
                }
                if let Some(db) = buf!(*b) {
                    for j in 0..bt {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let aj = &ad[j * m * k..(j + 1) * m * k];
                        let dst = &mut db[j * k * n..(j + 1) * k * n];
                        if *trans_b {
                            // d(B') = Gᵀ·A, n×k
                            gemm(
                                n,
                                m,
                                k,
                                (gj, 1, n as isize),
                                (aj, k as isize, 1),
                                T::one(),
                                dst,
                            );
                        } else {
                            // dB = Aᵀ·G, k×n
                            gemm(
                                k,
                                m,
                                n,
                                (aj, 1, k as isize),
                                (gj, n as isize, 1),
                                T::one(),
                                dst,
                            );
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = buf!(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = buf!(*bias) {
                    let bl = db.len();
                    for row in g.chunks_exact(bl) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if let Some(da) = buf!(*a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d = *d + x * y;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(ad) {
                        *d = *d + x * y;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &a)| *d = *d + a * *s);
                }
            }
            Op::ScaleBy(x, s) => {
                let k = nodes[s.0].value.item();
                let xd = val(*x);
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &a)| *d = *d + a * k);
                }
                if let Some(ds) = buf!(*s) {
                    let dot = g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<T>();
                    ds[0] = ds[0] + dot;
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = buf!(*x) {
                    for ((d, &a), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d = *d + a * y;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                if let Some(dx) = buf!(*x) {
                    for ((d, &a), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d = *d + a * gelu_grad(xv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = buf!(*x) {
                    for ((d, &a), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d = *d + a * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax(x) => {
                let w = nodes[i].value.width();
                if let Some(dx) = buf!(*x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(w)
                        .zip(g.chunks_exact(w))
                        .zip(out.chunks_exact(w))
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((d, &a), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + y * (a - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let w = nodes[i].value.width();
                let wn = T::from_f64(w as f64);
                if let Some(dx) = buf!(*x) {
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_exact_mut(w)
                        .zip(g.chunks_exact(w))
                        .zip(xhat.chunks_exact(w))
                        .enumerate()
                    {
                        let mg = grow.iter().copied().sum::<T>() / wn;
                        let mgh = grow.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() / wn;
                        for ((d, &a), &h) in drow.iter_mut().zip(grow).zip(hrow) {
                            *d = *d + inv_std[r] * (a - mg - h * mgh);
                        }
                    }
                }
            }
            Op::Normalize { x, norms } => {
                let w = nodes[i].value.width();
                if let Some(dx) = buf!(*x) {
                    for (r, ((drow, grow), yrow)) in dx
                        .chunks_exact_mut(w)
                        .zip(g.chunks_exact(w))
                        .zip(out.chunks_exact(w))
                        .enumerate()
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &y)| a * y).sum::<T>();
                        for ((d, &a), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + (a - y * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Mean {
                x,
                outer,
                len,
                inner,
            } => {
                let inv = T::one() / T::from_f64(*len as f64);
                if let Some(dx) = buf!(*x) {
                    for o in 0..*outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let d = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            d.iter_mut().zip(gs).for_each(|(d, &a)| *d = *d + a * inv);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if let Some(dx) = buf!(*x) {
                    add_into(dx, g);
                }
            }
            Op::SwapMiddle { x, dims } => {
                if let Some(dx) = buf!(*x) {
                    let back = permute_middle(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(dx, &back);
                }
            }
            Op::Transpose(x) => {
                let s = nodes[i].value.shape();
                if let Some(dx) = buf!(*x) {
                    let back = permute_middle(g, [1, s[0], s[1], 1]);
                    add_into(dx, &back);
                }
            }
            Op::Concat(parts) => {
                let total = nodes[i].value.width();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.width();
                    if let Some(dp) = buf!(p) {
                        for (drow, grow) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let len = nodes[i].value.width();
                let w = nodes[x.0].value.width();
                if let Some(dx) = buf!(*x) {
                    for (drow, grow) in dx.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let c = nodes[table.0].value.width();
                if let Some(dt) = buf!(*table) {
                    for (&k, grow) in indices.iter().zip(g.chunks_exact(c)) {
                        add_into(&mut dt[k * c..(k + 1) * c], grow);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let w = nodes[logits.0].value.width();
                let rows = probs.len() / w;
                let scale = g[0] / T::from_f64(rows as f64);
                if let Some(dl) = buf!(*logits) {
                    for ((drow, prow), trow) in dl
                        .chunks_exact_mut(w)
                        .zip(probs.chunks_exact(w))
                        .zip(targets.chunks_exact(w))
                    {
                        let tsum = trow.iter().copied().sum::<T>();
                        for ((d, &p), &t) in drow.iter_mut().zip(prow).zip(trow) {
                            *d = *d + scale * (p * tsum - t);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// `[a,b,c,d] -> [a,c,b,d]`.
fn permute_middle<T: Real>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
