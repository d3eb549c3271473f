//! Dense row-major `f32` tensors and the numeric kernels the rest of the
//! crate is built from.
//!
//! Reductions (matmul, norms, softmax denominators) accumulate in `f64` and
//! round once on store, so results are deterministic and independent of the
//! thread count.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many output elements the kernels stay single-threaded.
const PAR_THRESHOLD: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::DataLength {
                shape,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs whose length is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.normal(std))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the values; callers keep them finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn n_rows(&self) -> usize {
        self.len() / self.last_dim().max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Rows `start..end` of a tensor viewed along its first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::from_parts(shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        shape[0] = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(shape, data))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`, accumulated in `f64`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0f32; m * n];
    let row = |(i, dst): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (acc, &bv) in acc.iter_mut().zip(brow) {
                *acc += av * bv as f64;
            }
        }
        for (d, v) in dst.iter_mut().zip(acc) {
            *d = v as f32;
        }
    };
    if m * n * k >= PAR_THRESHOLD * 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    ))
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Numerically stable softmax over a row, in place, in `f64`.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of every row of a 2-D tensor (max-subtracted).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2("softmax_rows")?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(n) {
        let mut r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        softmax_in_place(&mut r);
        out.extend(r.into_iter().map(|v| v as f32));
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Per-row `x / sqrt(mean(x²) + eps) · g`.
pub fn rmsnorm(x: &Tensor, g: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if g.len() != c {
        return Err(Error::shape("rmsnorm", &x.shape, &g.shape));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(c) {
        let inv = rms_inverse(row, eps);
        out.extend(
            row.iter()
                .zip(&g.data)
                .map(|(&v, &gv)| (v as f64 * inv * gv as f64) as f32),
        );
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn rms_inverse(row: &[f32], eps: f32) -> f64 {
    let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps as f64).sqrt()
}

/// Rotary position embedding on a `[T × n_heads·head_dim]` tensor using the
/// half-split pairing `(i, i + head_dim/2)`. Token `t` sits at position
/// `offset + t`. `inverse` rotates by the negated angle (the transpose).
pub fn rope_apply(
    x: &Tensor,
    head_dim: usize,
    offset: usize,
    theta: f32,
    inverse: bool,
) -> Result<Tensor> {
    let c = x.last_dim();
    if head_dim == 0 || c % head_dim != 0 || head_dim % 2 != 0 {
        return Err(Error::shape("rope_apply", &x.shape, &[head_dim]));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (theta as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.data.clone();
    for (t, row) in out.chunks_mut(c).enumerate() {
        let pos = (offset + t) as f64;
        for head in row.chunks_mut(head_dim) {
            for (i, &f) in freqs.iter().enumerate() {
                let (s, co) = (sign * pos * f).sin_cos();
                let a = head[i] as f64;
                let b = head[i + half] as f64;
                head[i] = (a * co - b * s) as f32;
                head[i + half] = (a * s + b * co) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Index of the largest element of each row.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    x.data
        .chunks(x.last_dim())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Lower median: for even lengths the smaller of the two middle order
/// statistics.
pub fn median(v: &[f32]) -> Option<f32> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Some(s[(s.len() - 1) / 2])
}

/// Mean squared difference accumulated in `f64`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// An independent child stream; the parent advances by one draw.
    pub fn fork(&mut self) -> Self {
        Self::seed(self.0.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn normal(&mut self, std: f32) -> f32 {
        let n = Normal::new(0.0f64, std as f64).expect("finite std");
        n.sample(&mut self.0) as f32
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.0.random::<f32>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn sign(&mut self) -> f32 {
        if self.0.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2("t").unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = Rng::seed(1);
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let z = matmul(&a, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seed(2);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!(((*g as f64) - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn identity_associativity_bit_exact() {
        let mut rng = Rng::seed(3);
        let a = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let ai = matmul(&a, &Tensor::identity(5)).unwrap();
        assert_eq!(matmul(&ai, &b).unwrap(), matmul(&a, &b).unwrap());
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::new(vec![1, 4], vec![2.0; 4]).unwrap();
        assert!(softmax_rows(&x).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let x = Tensor::new(vec![1, 2], vec![0.0, 80.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!(s.data()[0] < 1e-30 && (s.data()[1] - 1.0).abs() < 1e-7);

        let mut rng = Rng::seed(4);
        let x = Tensor::randn(&[3, 9], 3.0, &mut rng);
        let s = softmax_rows(&x).unwrap();
        for (r, row) in x.data().chunks(9).enumerate() {
            let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                let want = (v as f64).exp() / denom;
                assert!((s.data()[r * 9 + j] as f64 - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let eps = 1e-5;
        let x = Tensor::full(&[2, 4], 3.0);
        let y = rmsnorm(&x, &Tensor::full(&[4], 1.0), eps).unwrap();
        let want = 3.0 / (9.0f64 + eps as f64).sqrt();
        assert!(y.data().iter().all(|&v| ((v as f64) - want).abs() < 1e-6));
        let y = rmsnorm(&x, &Tensor::zeros(&[4]), eps).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::seed(5);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let g = Tensor::randn(&[8], 1.0, &mut rng);
        let y = rmsnorm(&x, &g, eps).unwrap();
        for t in 0..3 {
            let row = x.row(t);
            let ms: f64 = row.iter().map(|&v| (v * v) as f64).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = row[c] as f64 / (ms + eps as f64).sqrt() * g.data()[c] as f64;
                assert!((y.row(t)[c] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rope_inverse_round_trip_and_norm() {
        let mut rng = Rng::seed(6);
        let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let y = rope_apply(&x, 8, 3, 10000.0, false).unwrap();
        let back = rope_apply(&y, 8, 3, 10000.0, true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
        for t in 0..5 {
            let n0: f32 = x.row(t).iter().map(|v| v * v).sum();
            let n1: f32 = y.row(t).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-4);
        }
    }

    #[test]
    fn median_is_lower_for_even() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn rng_reproducible() {
        let a = Tensor::randn(&[64], 1.0, &mut Rng::seed(9));
        let b = Tensor::randn(&[64], 1.0, &mut Rng::seed(9));
        assert_eq!(a, b);
        assert_ne!(a, Tensor::randn(&[64], 1.0, &mut Rng::seed(10)));
    }

    #[test]
    fn argmax_rows_picks_first_max() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 5.0, 5.0, -1.0, -2.0, -0.5]).unwrap();
        assert_eq!(argmax_rows(&x), vec![1, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(v in proptest::collection::vec(-60.0f32..60.0, 1..40)) {
                let n = v.len();
                let s = softmax_rows(&Tensor::new(vec![1, n], v).unwrap()).unwrap();
                let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
