use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;
use crate::error::{shape_err, Result};

/// Dense row-major array with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero extent in {shape:?}"));
        }
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; numel(shape)]).expect("positive extents")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[1], vec![v]).unwrap()
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::c(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self::new(shape, (0..numel(shape)).map(&mut f).collect()).expect("positive extents")
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(z * std)
        })
    }

    /// Uniform(lo, hi) entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::c(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, idx: &[usize]) -> T {
        let st = strides(&self.shape);
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        Self::new(shape, self.data.clone())
    }

    /// Materialized axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let (shape, data) = permute_data(&self.shape, &self.data, axes)?;
        Self::new(&shape, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::c(x.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::c(x.f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.numel() as f64)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Replaces the gradient accumulator; length must match.
    pub fn set_grad(&mut self, g: Vec<T>) -> Result<()> {
        if g.len() != self.numel() {
            return Err(shape_err!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            ));
        }
        self.grad = Some(g);
        Ok(())
    }
}

pub(crate) fn permute_data<T: Copy>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err!("invalid permutation {axes:?} for rank {rank}"));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    proptest! {
        #[test]
        fn permute_round_trip_is_exact(
            dims in proptest::collection::vec(1usize..4, 1..5),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::randn(&dims, 1.0, &mut rng);
            let mut axes: Vec<usize> = (0..dims.len()).collect();
            axes.reverse();
            axes.rotate_left(seed as usize % dims.len());
            let back = t.permute(&axes).unwrap().permute(&inverse_permutation(&axes)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
