//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the non-differentiable inference paths.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
///
/// Most of the crate works with rank-2 tensors `[rows, cols]`; operations that
/// act "per row" treat any tensor as `[numel / last_dim, last_dim]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equally sized rows into a `[rows.len(), width]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::Shape(format!(
                    "row {i} has width {}, expected {width}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { shape: vec![rows.len(), width], data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            self.shape[..self.shape.len().saturating_sub(1)].iter().product()
        } else {
            self.numel() / last
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = a · b` for row-major `a: [m, k]`, `b: [k, n]`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c = aᵀ · b` for row-major `a: [k, m]`, `b: [k, n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, (1, m as isize), b, (n as isize, 1), c);
}

/// `c = a · bᵀ` for row-major `a: [m, k]`, `b: [n, k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (1, k as isize), c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable `ln Σ exp(x)`. Returns `-inf` for an empty slice or when
/// every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// `ln(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn effective_sample_size(normalized: &[f64]) -> f64 {
    let s: f64 = normalized.iter().map(|w| w * w).sum();
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

/// `ln(1 - tanh(u)²)` computed as `2 (ln 2 - u - softplus(-2u))`.
pub fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Prefix composition of the affine maps `x ↦ a ⊙ x + u_t`.
///
/// Computes `x_t = a ⊙ x_{t-1} + u_t` for `t = 0..T` starting from `init`,
/// by a Hillis–Steele scan over the associative combination
/// `(a₁, b₁) ∘ (a₂, b₂) = (a₁ a₂, a₂ b₁ + b₂)`. `inputs` is `[T, N]` row-major
/// and the returned states have the same layout.
pub fn linear_recurrence_scan(decay: &[f64], inputs: &[f64], init: &[f64]) -> Vec<f64> {
    let n = decay.len();
    if n == 0 {
        return Vec::new();
    }
    let t_len = inputs.len() / n;
    // Element t holds the composite map of steps 0..=t as (multiplier, offset).
    let mut mult: Vec<f64> = Vec::with_capacity(t_len * n);
    for _ in 0..t_len {
        mult.extend_from_slice(decay);
    }
    let mut offs = inputs.to_vec();
    let mut stride = 1;
    while stride < t_len {
        let prev_mult = mult.clone();
        let prev_offs = offs.clone();
        for t in stride..t_len {
            let (cur, earlier) = (t * n, (t - stride) * n);
            for i in 0..n {
                // earlier map applied first, then the current one
                offs[cur + i] = prev_mult[cur + i] * prev_offs[earlier + i] + prev_offs[cur + i];
                mult[cur + i] = prev_mult[cur + i] * prev_mult[earlier + i];
            }
        }
        stride *= 2;
    }
    let mut states = offs;
    for t in 0..t_len {
        for i in 0..n {
            states[t * n + i] += mult[t * n + i] * init[i];
        }
    }
    states
}

/// One step of the same recurrence: `a ⊙ x + u`.
pub fn linear_recurrence_step(decay: &[f64], state: &[f64], input: &[f64]) -> Vec<f64> {
    decay.iter().zip(state).zip(input).map(|((a, x), u)| a * x + u).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_products() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // [3,4]
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, &b, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // aᵀ with a viewed as [3,2]
        let mut ct = vec![0.0; 8];
        gemm_tn(2, 3, 4, &a, &b, &mut ct);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[k * 2 + i] * b[k * 4 + j]).sum();
                assert!((ct[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // b viewed as [4,3] transposed
        let mut cn = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &b, &mut cn);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert!((cn[i * 4 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn tanh_jacobian_matches_direct_formula() {
        for &u in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_tanh_jacobian(u) - direct).abs() < 1e-12);
        }
        assert!(log_tanh_jacobian(40.0).is_finite());
    }

    #[test]
    fn scan_matches_sequential_fold() {
        let n = 3;
        let decay = [0.9, 0.5, 0.0];
        let inputs: Vec<f64> = (0..16 * n).map(|i| ((i * 7 % 11) as f64) / 5.0 - 1.0).collect();
        let init = [1.0, -2.0, 0.5];
        let scanned = linear_recurrence_scan(&decay, &inputs, &init);
        let mut state = init.to_vec();
        for t in 0..16 {
            state = linear_recurrence_step(&decay, &state, &inputs[t * n..(t + 1) * n]);
            for i in 0..n {
                assert!((scanned[t * n + i] - state[i]).abs() < 1e-12);
            }
        }
    }
}
