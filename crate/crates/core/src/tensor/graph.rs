//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, a closure that maps the output gradient onto the
//! gradients of its inputs. [`Graph::backward`] walks the tape in reverse.

use super::dense::{inverse_permutation, numel, permute_data};
use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Graph<T>, &[T], &mut Grads<T>)>;

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// FLOP counters filled in by instrumented operations.
///
/// `attention_matrix` counts one FLOP per multiply-accumulate of the score and
/// value products (2·J²·D per sequence). `scan` counts 3N + N² per token and
/// channel, treating the state transition as a dense N×N update. `matmul`
/// counts two FLOPs per multiply-accumulate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounters {
    pub attention_matrix: u64,
    pub scan: u64,
    pub matmul: u64,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    pub counters: FlopCounters,
}

/// Gradient accumulators used during a backward pass.
pub struct Grads<T: Real> {
    slots: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Real> Grads<T> {
    /// Accumulator for `v`, or `None` when `v` does not take part in differentiation.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }
}

/// Gradients of leaf nodes after [`Graph::backward`].
pub struct Gradients<T: Real> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Gradient of `v`, zeros when it received none.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            counters: FlopCounters::default(),
        }
    }

    /// A graph that never records backward closures.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    fn leaf_with(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.leaf_with(t, t.requires_grad)
    }

    /// Leaf that always requires a gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf_with(t, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf_with(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Appends a node computed from `parents`. The backward closure is kept
    /// only when some parent requires a gradient.
    pub fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: &[Var],
        backward: impl Fn(&Graph<T>, &[T], &mut Grads<T>) + 'static,
    ) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element `root`; returns gradients of every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            ));
        }
        let n = root.0 + 1;
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
            needs: self.nodes[..n].iter().map(|x| x.requires_grad).collect(),
            lens: self.nodes[..n].iter().map(|x| x.data.len()).collect(),
        };
        let mut leaves: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if let Some(s) = grads.slot(root) {
            s[0] = T::one();
        }
        for i in (0..n).rev() {
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            match &self.nodes[i].backward {
                Some(f) => f(self, &g, &mut grads),
                None => leaves[i] = Some(g),
            }
        }
        Ok(Gradients { slots: leaves })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], move |_, g, gr| {
            for v in [a, b] {
                if let Some(s) = gr.slot(v) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
                }
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], move |_, g, gr| {
            if let Some(s) = gr.slot(a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
            }
            if let Some(s) = gr.slot(b) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= *g);
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], move |gr_, g, gr| {
            if let Some(s) = gr.slot(a) {
                for ((s, g), y) in s.iter_mut().zip(g).zip(gr_.value(b)) {
                    *s += *g * *y;
                }
            }
            if let Some(s) = gr.slot(b) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(gr_.value(a)) {
                    *s += *g * *x;
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let data = self.value(a).iter().map(|x| *x * k).collect();
        self.push(self.shape(a).to_vec(), data, &[a], move |_, g, gr| {
            if let Some(s) = gr.slot(a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += *g * k);
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let data = self.value(a).iter().map(|x| *x + k).collect();
        self.push(self.shape(a).to_vec(), data, &[a], move |_, g, gr| {
            if let Some(s) = gr.slot(a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
            }
        })
    }

    /// Elementwise map with derivative expressed through input `x` and output `y`.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let data: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let out = Var(self.nodes.len());
        self.push(self.shape(a).to_vec(), data, &[a], move |gr_, g, gr| {
            let xs = gr_.value(a);
            let ys = gr_.value(out);
            if let Some(s) = gr.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] * df(xs[i], ys[i]);
                }
            }
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, |_, y| y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, |x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.tensor(a);
        self.constant(&t)
    }

    // ---- broadcasting -----------------------------------------------------

    fn check_trailing(&self, x: Var, v: Var, op: &str) -> Result<usize> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if vs.len() > xs.len() || xs[xs.len() - vs.len()..] != *vs {
            return Err(shape_err!("{op}: {vs:?} is not a trailing shape of {xs:?}"));
        }
        Ok(numel(vs))
    }

    /// `x + v` with `v` broadcast over the leading axes of `x`.
    pub fn add_bcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.check_trailing(x, v, "add_bcast")?;
        let vv = self.value(v);
        let data = self.value(x).iter().enumerate().map(|(i, a)| *a + vv[i % d]).collect();
        Ok(self.push(self.shape(x).to_vec(), data, &[x, v], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
            }
            if let Some(s) = gr.slot(v) {
                for (i, g) in g.iter().enumerate() {
                    s[i % d] += *g;
                }
            }
        }))
    }

    /// `x * v` with `v` broadcast over the leading axes of `x`.
    pub fn mul_bcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = self.check_trailing(x, v, "mul_bcast")?;
        let vv = self.value(v);
        let data = self.value(x).iter().enumerate().map(|(i, a)| *a * vv[i % d]).collect();
        Ok(self.push(self.shape(x).to_vec(), data, &[x, v], move |gr_, g, gr| {
            if let Some(s) = gr.slot(x) {
                let vv = gr_.value(v);
                for (i, (s, g)) in s.iter_mut().zip(g).enumerate() {
                    *s += *g * vv[i % d];
                }
            }
            if let Some(s) = gr.slot(v) {
                let xv = gr_.value(x);
                for (i, g) in g.iter().enumerate() {
                    s[i % d] += *g * xv[i];
                }
            }
        }))
    }

    fn check_per_sample(&self, x: Var, m: Var, op: &str) -> Result<(usize, usize)> {
        let ms = self.shape(m);
        let xs = self.shape(x);
        if ms.len() != 2 || xs[0] != ms[0] {
            return Err(shape_err!("{op}: modulation {ms:?} does not match batch of {xs:?}"));
        }
        let per = numel(xs) / xs[0];
        if per % ms[1] != 0 {
            return Err(shape_err!("{op}: feature width {} does not divide {xs:?}", ms[1]));
        }
        Ok((per, ms[1]))
    }

    /// `x[b, .., i] * m[b, i]` for `x` of shape `[B, .., D]` and `m` of shape `[B, D]`.
    pub fn mul_per_sample(&mut self, x: Var, m: Var) -> Result<Var> {
        let (per, d) = self.check_per_sample(x, m, "mul_per_sample")?;
        let mv = self.value(m);
        let idx = move |i: usize| (i / per) * d + i % d;
        let data = self.value(x).iter().enumerate().map(|(i, a)| *a * mv[idx(i)]).collect();
        Ok(self.push(self.shape(x).to_vec(), data, &[x, m], move |gr_, g, gr| {
            if let Some(s) = gr.slot(x) {
                let mv = gr_.value(m);
                for (i, (s, g)) in s.iter_mut().zip(g).enumerate() {
                    *s += *g * mv[idx(i)];
                }
            }
            if let Some(s) = gr.slot(m) {
                let xv = gr_.value(x);
                for (i, g) in g.iter().enumerate() {
                    s[idx(i)] += *g * xv[i];
                }
            }
        }))
    }

    /// `x[b, .., i] + m[b, i]` for `x` of shape `[B, .., D]` and `m` of shape `[B, D]`.
    pub fn add_per_sample(&mut self, x: Var, m: Var) -> Result<Var> {
        let (per, d) = self.check_per_sample(x, m, "add_per_sample")?;
        let mv = self.value(m);
        let idx = move |i: usize| (i / per) * d + i % d;
        let data = self.value(x).iter().enumerate().map(|(i, a)| *a + mv[idx(i)]).collect();
        Ok(self.push(self.shape(x).to_vec(), data, &[x, m], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
            }
            if let Some(s) = gr.slot(m) {
                for (i, g) in g.iter().enumerate() {
                    s[idx(i)] += *g;
                }
            }
        }))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: incompatible shapes {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), n as isize, 1, T::zero(), &mut out);
        self.counters.matmul += 2 * (m * k * n) as u64;
        Ok(self.push(vec![m, n], out, &[a, b], move |gr_, g, gr| {
            if let Some(s) = gr.slot(a) {
                // dA = dC · Bᵀ
                T::gemm(m, n, k, T::one(), g, n as isize, 1, gr_.value(b), 1, n as isize, T::one(), s);
            }
            if let Some(s) = gr.slot(b) {
                // dB = Aᵀ · dC
                T::gemm(k, m, n, T::one(), gr_.value(a), 1, k as isize, g, n as isize, 1, T::one(), s);
            }
        }))
    }

    /// `x @ w + b` applied over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err!("linear: input {xs:?} vs weight {ws:?}"));
        }
        let out_dim = ws[1];
        let rows = numel(&xs) / ws[0];
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bcast(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = out_dim;
        self.reshape(y, &out_shape)
    }

    // ---- normalization ----------------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let y = Var(self.nodes.len());
        self.push(self.shape(x).to_vec(), out, &[x], move |gr_, g, gr| {
            if let Some(s) = gr.slot(x) {
                let yv = gr_.value(y);
                for ((s, g), y) in s.chunks_mut(d).zip(g.chunks(d)).zip(yv.chunks(d)) {
                    let dot: T = g.iter().zip(y).map(|(a, b)| *a * *b).sum();
                    for i in 0..d {
                        s[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        })
    }

    /// Layer normalization over the last axis with optional affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(shape_err!("layer_norm: affine shape {:?} vs width {d}", self.shape(p)));
            }
        }
        let eps = T::c(eps);
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                xhat[r * d + i] = (row[i] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gn) = gain {
            let gv = self.value(gn);
            out.iter_mut().enumerate().for_each(|(i, o)| *o *= gv[i % d]);
        }
        if let Some(bs) = bias {
            let bv = self.value(bs);
            out.iter_mut().enumerate().for_each(|(i, o)| *o += bv[i % d]);
        }
        let parents: Vec<Var> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok(self.push(self.shape(x).to_vec(), out, &parents, move |gr_, g, gr| {
            if let Some(gn) = gain {
                if let Some(s) = gr.slot(gn) {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += *gv * xhat[i];
                    }
                }
            }
            if let Some(bs) = bias {
                if let Some(s) = gr.slot(bs) {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += *gv;
                    }
                }
            }
            if gr.wants(x) {
                let gv = gain.map(|gn| gr_.value(gn).to_vec());
                let s = gr.slot(x).unwrap();
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    for i in 0..d {
                        let scale = gv.as_ref().map_or(T::one(), |v| v[i]);
                        dxhat[i] = g[r * d + i] * scale;
                    }
                    let xh = &xhat[r * d..(r + 1) * d];
                    let m1 = dxhat.iter().copied().sum::<T>() / dn;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / dn;
                    for i in 0..d {
                        s[r * d + i] += rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
                    }
                }
            }
        }))
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        if self.shape(x) == shape {
            return Ok(x);
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, &[x], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
            }
        }))
    }

    /// Materialized permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let (shape, data) = permute_data(&in_shape, self.value(x), axes)?;
        let inv = inverse_permutation(axes);
        let out_shape = shape.clone();
        Ok(self.push(shape, data, &[x], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                let (_, back) = permute_data(&out_shape, g, &inv).expect("inverse permutation");
                s.iter_mut().zip(back).for_each(|(s, g)| *s += g);
            }
        }))
    }

    /// Gathers rows of width `row` (the last axis) from `x`; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize], out_shape: &[usize]) -> Result<Var> {
        let row = *self.shape(x).last().unwrap();
        let n_rows = self.value(x).len() / row;
        if out_shape.last() != Some(&row) || numel(out_shape) != indices.len() * row {
            return Err(shape_err!("gather_rows: output {out_shape:?} for {} rows of {row}", indices.len()));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n_rows) {
            return Err(shape_err!("gather_rows: row {bad} out of {n_rows}"));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let indices = indices.to_vec();
        Ok(self.push(out_shape.to_vec(), data, &[x], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for (o, &i) in indices.iter().enumerate() {
                    let dst = &mut s[i * row..(i + 1) * row];
                    dst.iter_mut().zip(&g[o * row..(o + 1) * row]).for_each(|(d, g)| *d += *g);
                }
            }
        }))
    }

    /// Concatenation along the first axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err!("concat0: {:?} vs trailing {tail:?}", self.shape(p)));
            }
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let lens: Vec<usize> = parts.iter().map(|&p| self.value(p).len()).collect();
        let parts = parts.to_vec();
        Ok(self.push(shape, data, &parts.clone(), move |_, g, gr| {
            let mut off = 0;
            for (p, len) in parts.iter().zip(&lens) {
                if let Some(s) = gr.slot(*p) {
                    s.iter_mut().zip(&g[off..off + len]).for_each(|(s, g)| *s += *g);
                }
                off += len;
            }
        }))
    }

    /// Sub-range `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if start + len > d || len == 0 {
            return Err(shape_err!("slice_last: [{start}, {}) outside width {d}", start + len));
        }
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push(out_shape, data, &[x], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for r in 0..rows {
                    let dst = &mut s[r * d + start..r * d + start + len];
                    dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(d, g)| *d += *g);
                }
            }
        }))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], &[x], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::c(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis: axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let k = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..k {
                let src = &xv[(o * k + j) * inner..(o * k + j + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(out_shape, out, &[x], move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for o in 0..outer {
                    for j in 0..k {
                        let dst = &mut s[(o * k + j) * inner..(o * k + j + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, g)| *d += *g);
                    }
                }
            }
        }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let k = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err!("mean_axis: axis {axis}"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::c(k as f64)))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
