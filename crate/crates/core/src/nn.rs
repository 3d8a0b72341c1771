//! Named parameter storage and the linear layer used throughout the model.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Archive, Gradients, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered registry of every trainable tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Parameters placed on a graph, indexable by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Wraps vars already placed on a graph, in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        t.requires_grad = true;
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t)).collect(),
        }
    }

    /// Writes the gradients of `bound` into each tensor's accumulator.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = grads.get_or_zeros(*v, t.numel());
            t.set_grad(g).expect("gradient matches parameter");
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn write_archive(&self, prefix: &str, archive: &mut Archive) {
        for (n, t) in self.iter() {
            archive.push(format!("{prefix}{n}"), t);
        }
    }

    /// Replaces every tensor with the archive entry `prefix + name`.
    pub fn read_archive(&mut self, prefix: &str, archive: &Archive) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let stored = archive.get(&key).ok_or_else(|| Error::Load {
                path: key.clone(),
                msg: "missing tensor".into(),
            })?;
            if stored.shape() != t.shape() {
                return Err(Error::Load {
                    path: key,
                    msg: format!("shape {:?}, expected {:?}", stored.shape(), t.shape()),
                });
            }
            let mut v = stored.to::<T>();
            v.requires_grad = true;
            *t = v;
        }
        Ok(())
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Structure("parameter names differ".into()));
        }
        for ((n, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "{n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Glorot uniform over (fan_in, fan_out).
    Xavier,
    Normal(f64),
    Const(f64),
}

pub fn init_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(c) => Tensor::full(shape, T::c(c)),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Xavier => {
            let (fi, fo) = match shape {
                [a, b] => (*a, *b),
                [a] => (*a, *a),
                _ => (shape[0], shape[1..].iter().product()),
            };
            let lim = (6.0 / (fi + fo) as f64).sqrt();
            Tensor::uniform(shape, -lim, lim, rng)
        }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), init_tensor(&[in_dim, out_dim], init, rng));
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

impl<T: Real> ParamSet<T> {
    /// Largest elementwise difference to `other` (same structure assumed).
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(ps: &ParamSet<T>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ps.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: ps.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One update from the gradients stored on each parameter tensor.
    pub fn step(&mut self, ps: &mut ParamSet<T>) -> Result<()> {
        if self.m.len() != ps.len() {
            return Err(Error::Structure(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                ps.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (ob1, ob2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let step_size = T::c(self.lr / bc1);
        let sqrt_bc2 = T::c(bc2.sqrt());
        let eps = T::c(self.eps);
        let decay = T::c(1.0 - self.lr * self.weight_decay);
        for ((t, m), v) in ps.tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad.take() else {
                continue;
            };
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                *w = *w * decay - step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
            }
            t.grad = Some(g);
        }
        Ok(())
    }

    pub fn write_archive(&self, archive: &mut Archive, names: &ParamSet<T>) {
        for (i, (n, _)) in names.iter().enumerate() {
            archive.push(format!("opt.m.{n}"), &self.m[i]);
            archive.push(format!("opt.v.{n}"), &self.v[i]);
        }
    }

    pub fn read_archive(&mut self, archive: &Archive, names: &ParamSet<T>) -> Result<()> {
        for (i, (n, t)) in names.iter().enumerate() {
            for (kind, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("opt.{kind}.{n}");
                let stored = archive.get(&key).ok_or_else(|| Error::Load {
                    path: key.clone(),
                    msg: "missing tensor".into(),
                })?;
                if stored.shape() != t.shape() {
                    return Err(Error::Load {
                        path: key,
                        msg: format!("shape {:?}, expected {:?}", stored.shape(), t.shape()),
                    });
                }
                *dst = stored.to::<T>();
            }
        }
        Ok(())
    }
}
