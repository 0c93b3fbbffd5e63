//! Dense row-major tensors with an optional gradient slot.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Highest rank any tensor in the lab needs.
pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![S::zero(); numel])
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Samples entries from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Result<Self> {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64_lossy(z * std)
            })
            .collect();
        Self::new(shape, data)
    }

    /// Samples entries uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    /// Entry `(r, c)` of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values reinterpreted under another shape with equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Bit-level equality of the stored values.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", shape, &[]));
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * grad(p)` for every trainable
/// tensor, then clears the gradients. Frozen tensors are left untouched.
pub fn sgd_step<'a, S, N, I>(params: I, lr: S) -> Result<()>
where
    S: Scalar,
    N: AsRef<str>,
    I: IntoIterator<Item = (N, &'a mut Tensor<S>)>,
{
    let mut trainable = Vec::new();
    for (name, p) in params {
        if !p.requires_grad {
            continue;
        }
        if p.grad.is_none() {
            return Err(Error::MissingGrad(name.as_ref().to_string()));
        }
        trainable.push(p);
    }
    for p in trainable {
        let grad = p.grad.as_mut().expect("checked above");
        for (v, g) in p.data.iter_mut().zip(grad.iter_mut()) {
            *v = *v - lr * *g;
            *g = S::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor<f64> {
        let mut t = Tensor::vector(vec![v]);
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = param(1.0);
        p.accumulate_grad(&[2.0]).unwrap();
        sgd_step([("p", &mut p)], 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);
        assert_eq!(p.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut frozen = Tensor::vector(vec![3.0_f64]);
        sgd_step([("frozen", &mut frozen)], 0.5).unwrap();
        assert_eq!(frozen.data(), &[3.0]);
    }

    #[test]
    fn sgd_requires_grad_buffer() {
        let mut p = param(1.0);
        let err = sgd_step([("w", &mut p)], 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn quadratic_descent_two_steps() {
        // f(p) = p^2, grad 2p, so p_k = (1 - 2 lr)^k
        let mut p = param(1.0);
        for _ in 0..2 {
            let g = 2.0 * p.data()[0];
            p.accumulate_grad(&[g]).unwrap();
            sgd_step([("p", &mut p)], 0.1).unwrap();
        }
        assert!((p.data()[0] - 0.64).abs() < 1e-15);
    }
}
