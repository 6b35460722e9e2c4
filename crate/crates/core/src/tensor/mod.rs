//! Dense tensors, a recorded-tape autodiff [`Graph`] and a finite-difference
//! gradient checker.
//!
//! Storage, training and checkpoints use `f32`. The engine is generic over
//! [`Element`] so the gradient checker can re-evaluate the very same graph
//! code in `f64`.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, grad_check_coords, CoordCheck, GradCheckReport, ScalarFn};
pub use graph::{Graph, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Element:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn widen(x: f32) -> Self;

    fn narrow(self) -> f32;
}

impl Element for f32 {
    fn widen(x: f32) -> Self {
        x
    }

    fn narrow(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn widen(x: f32) -> Self {
        x as f64
    }

    fn narrow(self) -> f32 {
        self as f32
    }
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor whose shape is known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    /// Converts every element to another precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| U::lit(v.to_f64().expect("finite"))).collect(),
        )
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place optimizer updates.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have at least one axis")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, &self.shape, &[])),
        }
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = rhs.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        Ok(Self::from_parts(
            vec![m, n],
            kernels::matmul(&self.data, &rhs.data, m, k, n),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            kernels::softmax_axis(&self.data, outer, len, inner),
        ))
    }

    /// `gain · x / sqrt(mean(x²) + eps)` over the trailing axis.
    pub fn rms_norm(&self, gain: &Self, eps: f32) -> Result<Self> {
        let d = self.last_dim();
        if gain.numel() != d {
            return Err(Error::dim("rms_norm", &self.shape, &gain.shape));
        }
        if eps < 0.0 {
            return Err(Error::Contract(format!("rms_norm eps must be >= 0, got {eps}")));
        }
        let (out, _) = kernels::rms_norm(&self.data, d, &gain.data, None, T::widen(eps));
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn silu(&self) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| kernels::silu(x)).collect(),
        )
    }

    /// `silu(x·W_gate) ⊙ (x·W_up) · W_down` for row vectors `x`.
    pub fn swiglu(&self, w_gate: &Self, w_up: &Self, w_down: &Self) -> Result<Self> {
        let gate = self.matmul(w_gate)?.silu();
        let up = self.matmul(w_up)?;
        if gate.shape != up.shape {
            return Err(Error::dim("swiglu", &w_gate.shape, &w_up.shape));
        }
        let hidden = Self::from_parts(
            gate.shape.clone(),
            gate.data.iter().zip(&up.data).map(|(&g, &u)| g * u).collect(),
        );
        hidden.matmul(w_down)
    }

    /// Rotary position embedding of a `[seq × heads × head_dim]` (or
    /// `[seq × heads·head_dim]`) tensor, positions starting at zero.
    pub fn rope(&self, head_dim: usize, base_theta: f32) -> Result<Self> {
        check_rope(&self.shape, head_dim)?;
        let width = self.numel() / self.shape[0];
        Ok(Self::from_parts(
            self.shape.clone(),
            kernels::rope(&self.data, width, head_dim, base_theta, 0, false),
        ))
    }

    /// Mean negative log-probability of `targets` under row-wise softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<T> {
        let (n, v) = self.matrix_dims("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", &self.shape, &[targets.len()]));
        }
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: v,
                });
            }
            total = total - kernels::log_softmax_row(self.row(i))[t];
        }
        Ok(total / T::lit(n as f64))
    }
}

impl Tensor<f32> {
    /// Samples iid `N(mean, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], mean: f32, std: f32, rng: &mut R) -> Self {
        if std <= 0.0 {
            return Self::full(shape, mean);
        }
        let dist = Normal::new(mean, std).expect("std is positive and finite");
        Self::from_fn(shape, |_| dist.sample(rng))
    }

    /// Samples iid entries uniform on `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-1.0f32..=1.0) * bound)
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::dim("softmax", shape, &[axis]));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn check_rope(shape: &[usize], head_dim: usize) -> Result<()> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head_dim, got {head_dim}"
        )));
    }
    if shape.len() < 2 {
        return Err(Error::dim("rope", shape, &[head_dim]));
    }
    let width: usize = shape[1..].iter().product();
    if width % head_dim != 0 {
        return Err(Error::dim("rope", shape, &[head_dim]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data[i * k + p] as f64 * b.data[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 2], 0.0, 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
        let x = Tensor::randn(&[4, 5], 0.0, 1.0, &mut rng);
        let z = Tensor::zeros(&[2, 4]).matmul(&x).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 5]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(m, k, n) in &[(2, 3, 2), (7, 13, 5), (32, 32, 32), (1, 31, 17)] {
            let a = Tensor::randn(&[m, k], 0.0, 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 0.0, 1.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            for (g, w) in got.data.iter().zip(naive_matmul(&a, &b)) {
                assert!((*g as f64 - w).abs() <= 1e-6 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::<f32>::zeros(&[2, 3])
            .matmul(&Tensor::zeros(&[4, 2]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::new(vec![4], vec![2.5f32; 4]).unwrap().softmax(0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let t = Tensor::new(vec![2], vec![0.0f32, 3f32.ln()]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data[0] - 0.25).abs() < 1e-6 && (s.data[1] - 0.75).abs() < 1e-6);
        assert!(Tensor::<f32>::zeros(&[2, 3]).softmax(2).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 3f32.ln(), 1.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data[0] - 0.25).abs() < 1e-6 && (s.data[2] - 0.75).abs() < 1e-6);
        assert!((s.data[1] - 0.5).abs() < 1e-6 && (s.data[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rms_norm_examples() {
        let ones = Tensor::<f32>::ones(&[5]);
        let y = ones.rms_norm(&Tensor::ones(&[5]), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0; 5]);
        let x = Tensor::new(vec![2], vec![3.0f32, -3.0]).unwrap();
        let y = x.rms_norm(&Tensor::ones(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
        let y = x.rms_norm(&Tensor::zeros(&[2]), 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        assert!(x.rms_norm(&Tensor::ones(&[3]), 1e-5).is_err());
    }

    #[test]
    fn silu_and_swiglu() {
        assert_eq!(kernels::silu(0.0f32), 0.0);
        let one = Tensor::<f32>::ones(&[1, 1]);
        let y = one.swiglu(&one, &one, &one).unwrap();
        assert!((y.data[0] - 0.731_058_6).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng);
        let g = Tensor::randn(&[4, 6], 0.0, 1.0, &mut rng);
        let u = Tensor::randn(&[4, 6], 0.0, 1.0, &mut rng);
        let y = x.swiglu(&g, &u, &Tensor::zeros(&[6, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(x
            .swiglu(&g, &Tensor::zeros(&[4, 5]), &Tensor::zeros(&[6, 4]))
            .is_err());
    }

    #[test]
    fn rope_examples() {
        let x = Tensor::new(vec![2, 1, 2], vec![9.0f32, 9.0, 1.0, 0.0]).unwrap();
        let y = x.rope(2, 1.0).unwrap();
        // Position 0 is untouched; position 1 rotates by one radian.
        assert_eq!(&y.data[..2], &[9.0, 9.0]);
        assert!((y.data[2] - 1f32.cos()).abs() < 1e-6);
        assert!((y.data[3] - 1f32.sin()).abs() < 1e-6);
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 1, 3]).rope(3, 10.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[7, 3, 8], 0.0, 1.0, &mut rng);
        let y = x.rope(8, 10_000.0).unwrap();
        for (a, b) in x.data.chunks(2).zip(y.data.chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() <= 1e-6 * na.max(1.0));
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 7;
        let uniform = Tensor::<f32>::zeros(&[3, v]);
        let l = uniform.cross_entropy(&[0, 3, 6]).unwrap();
        assert!((l - (v as f32).ln()).abs() < 1e-6);
        let two = Tensor::<f32>::zeros(&[1, 2]);
        assert!((two.cross_entropy(&[0]).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        // Logit gap g on the target: ln(1 + (V-1)e^-g).
        let g = 2.5f32;
        let mut row = vec![0.0; v];
        row[4] = g;
        let t = Tensor::new(vec![1, v], row).unwrap();
        let want = (1.0 + (v as f32 - 1.0) * (-g).exp()).ln();
        assert!((t.cross_entropy(&[4]).unwrap() - want).abs() < 1e-6);
        assert!(matches!(
            uniform.cross_entropy(&[0, 1, 7]),
            Err(Error::Index { index: 7, .. })
        ));
    }

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::scalar(3.0f32).item().is_ok());
        assert!(Tensor::<f32>::zeros(&[2]).item().is_err());
    }
}
