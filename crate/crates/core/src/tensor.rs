//! Dense row-major tensors and the handful of math ops everything else
//! builds on: matmul, elementwise maps, stabilized softmax, top-k selection.
//!
//! Storage is a flat `Vec<T>` with row-major (C-order) indexing. `T` is
//! `f32` for production paths and `f64` for oracles and gradient checking;
//! accumulation happens in `T`, so f64 tensors accumulate in f64.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar types tensors can hold. Sealed in practice to f32/f64.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// IEEE 754 total ordering; used for deterministic selection.
    fn total_cmp(&self, other: &Self) -> Ordering;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn total_cmp(&self, other: &Self) -> Ordering {
        f32::total_cmp(self, other)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn total_cmp(&self, other: &Self) -> Ordering {
        f64::total_cmp(self, other)
    }
}

/// Dense tensor with explicit shape over contiguous row-major storage.
///
/// Invariants: `product(shape) == data.len()` and every dim is >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "tensor dims must all be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Parameter(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// N(0, std^2) entries drawn from `rng`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.next_normal() * std))
            .collect();
        Tensor::new(shape, data).expect("randn: invalid shape")
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Parameter(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (rows, cols) = self.dims2().expect("row: 2-D only");
        assert!(r < rows, "row {r} out of {rows}");
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Reinterpret with a new shape of equal element count (metadata only).
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.data.len() {
            return Err(Error::Parameter(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    /// Matrix product of two 2-D tensors: (p,q) x (q,s) -> (p,s).
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (p, q) = self.dims2().map_err(|_| Error::Dimension {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        let (q2, s) = other.dims2().map_err(|_| Error::Dimension {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        if q != q2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); p * s];
        matmul_slices(&mut out, &self.data, &other.data, p, q, s);
        Tensor::new(&[p, s], out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transposed(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major matmul kernel over raw slices: out(p,s) = a(p,q) x b(q,s).
///
/// The k-in-the-middle loop order keeps the inner loop contiguous over both
/// `b` and `out`, which the compiler vectorizes. Accumulation order per
/// output element is fixed (ascending t), so results never depend on call
/// context or thread count.
pub fn matmul_slices<T: Element>(out: &mut [T], a: &[T], b: &[T], p: usize, q: usize, s: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * s);
    debug_assert_eq!(out.len(), p * s);
    for i in 0..p {
        let out_row = &mut out[i * s..(i + 1) * s];
        for t in 0..q {
            let aval = a[i * q + t];
            let b_row = &b[t * s..(t + 1) * s];
            for j in 0..s {
                out_row[j] = out_row[j] + aval * b_row[j];
            }
        }
    }
}

/// out += alpha * (a x b), same layout rules as [`matmul_slices`].
pub fn matmul_acc_slices<T: Element>(
    out: &mut [T],
    alpha: T,
    a: &[T],
    b: &[T],
    p: usize,
    q: usize,
    s: usize,
) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * s);
    debug_assert_eq!(out.len(), p * s);
    for i in 0..p {
        let out_row = &mut out[i * s..(i + 1) * s];
        for t in 0..q {
            let aval = alpha * a[i * q + t];
            let b_row = &b[t * s..(t + 1) * s];
            for j in 0..s {
                out_row[j] = out_row[j] + aval * b_row[j];
            }
        }
    }
}

/// Numerically stabilized softmax with temperature over a 1-D tensor.
///
/// `out[i] = exp((v[i] - max v) / tau) / sum_j exp((v[j] - max v) / tau)`.
pub fn softmax<T: Element>(v: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if v.shape().len() != 1 {
        return Err(Error::Parameter(format!(
            "softmax expects a 1-D tensor, got shape {:?}",
            v.shape()
        )));
    }
    let mut out = vec![T::zero(); v.numel()];
    softmax_slice(&mut out, v.data(), temperature)?;
    Tensor::new(v.shape(), out)
}

/// Slice-level softmax used by the routing and training hot paths.
pub fn softmax_slice<T: Element>(out: &mut [T], v: &[T], temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    if v.iter().any(|x| x.as_f64().is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    debug_assert_eq!(out.len(), v.len());
    let max = v
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let inv_tau = T::from_f64(1.0 / temperature);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(v) {
        *o = ((x - max) * inv_tau).exp();
        sum = sum + *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(())
}

/// Indices of the k largest entries, by descending value; ties break toward
/// the lowest index so selection is deterministic.
pub fn topk<T: Element>(v: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    if v.shape().len() != 1 {
        return Err(Error::Parameter(format!(
            "topk expects a 1-D tensor, got shape {:?}",
            v.shape()
        )));
    }
    topk_slice(v.data(), k)
}

pub fn topk_slice<T: Element>(v: &[T], k: usize) -> Result<Vec<usize>> {
    let n = v.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "topk k must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    if k <= 8 {
        // Selection by repeated scan: no index-array allocation or sort.
        // Strict comparison keeps the lowest index among equal values.
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if out.contains(&i) {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) => {
                        if v[i].total_cmp(&v[b]) == std::cmp::Ordering::Greater {
                            best = Some(i);
                        }
                    }
                }
            }
            out.push(best.expect("k <= n"));
        }
        return Ok(out);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // Descending by value, ascending by index among equals.
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let m = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::<f32>::eye(2);
        assert_eq!(id.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&id).unwrap(), m);
    }

    #[test]
    fn matmul_dot_product() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = Tensor::<f32>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_zeros() {
        let z = Tensor::<f32>::zeros(&[3, 4]);
        let mut rng = Rng::new(5);
        let m = Tensor::<f32>::randn(&[4, 2], 1.0, &mut rng);
        let c = z.matmul(&m).unwrap();
        assert_eq!(c, Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    /// Independent oracle: naive triple loop in f64.
    fn matmul_oracle(a: &[f64], b: &[f64], p: usize, q: usize, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * s];
        for i in 0..p {
            for j in 0..s {
                let mut acc = 0.0;
                for t in 0..q {
                    acc += a[i * q + t] * b[t * s + j];
                }
                out[i * s + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_f64_triple_loop_oracle() {
        let mut rng = Rng::new(99);
        for _ in 0..5 {
            let a = Tensor::<f32>::randn(&[32, 32], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(&[32, 32], 1.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(
                &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &b.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                32,
                32,
                32,
            );
            for (g, w) in got.data().iter().zip(&want) {
                let rel = (g.as_f64() - w).abs() / w.abs().max(1.0);
                assert!(rel < 1e-5, "got {g} want {w}");
            }
        }
    }

    #[test]
    fn softmax_uniform_on_constant_input() {
        for tau in [0.5, 1.0, 20.0] {
            let v = Tensor::<f64>::full(&[5], 3.25);
            let s = softmax(&v, tau).unwrap();
            for &w in s.data() {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_logits() {
        // exp(1)/(exp(1)+1) = 0.73106, computed by the scalar oracle.
        let v = Tensor::<f64>::new(&[2], vec![2.0, 1.0]).unwrap();
        let s = softmax(&v, 1.0).unwrap();
        let oracle = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((s.data()[0] - oracle).abs() < 1e-12);
        assert!((s.data()[0] - 0.73106).abs() < 1e-5);
        assert!((s.data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let v = Tensor::<f64>::new(&[2], vec![2.0, 1.0]).unwrap();
        let s = softmax(&v, 1000.0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-3);
        assert!((s.data()[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let v = Tensor::<f64>::new(&[2], vec![2.0, 1.0]).unwrap();
        assert!(matches!(softmax(&v, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&v, -1.0), Err(Error::Parameter(_))));
        let nan = Tensor::<f64>::new(&[2], vec![f64::NAN, 1.0]).unwrap();
        assert!(matches!(softmax(&nan, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn topk_basics() {
        let v = Tensor::<f32>::new(&[3], vec![0.1, 2.0, -1.0]).unwrap();
        assert_eq!(topk(&v, 1).unwrap(), vec![1]);

        let ties = Tensor::<f32>::new(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(topk(&ties, 2).unwrap(), vec![0, 1]);

        let v = Tensor::<f32>::new(&[4], vec![3.0, 9.0, 9.0, 1.0]).unwrap();
        assert_eq!(topk(&v, 2).unwrap(), vec![1, 2]);

        assert!(matches!(topk(&v, 5), Err(Error::Parameter(_))));
        assert!(matches!(topk(&v, 0), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_argmax(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..12),
            tau in 0.01f64..100.0,
        ) {
            let v = Tensor::<f64>::new(&[vals.len()], vals.clone()).unwrap();
            let s = softmax(&v, tau).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            let argmax_in = topk_slice(&vals, 1).unwrap()[0];
            let argmax_out = topk_slice(s.data(), 1).unwrap()[0];
            prop_assert_eq!(argmax_in, argmax_out);
        }

        #[test]
        fn topk_is_permutation_equivariant(
            vals in proptest::collection::vec(-100.0f64..100.0, 2..10),
            seed in 0u64..1000,
        ) {
            // Distinct values so the tie-break never enters.
            let mut vals = vals;
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            prop_assume!(vals.len() >= 2);
            let n = vals.len();
            let k = 1 + (seed as usize) % n;

            let mut rng = Rng::new(seed);
            let mut perm: Vec<usize> = (0..n).collect();
            // Fisher-Yates
            for i in (1..n).rev() {
                let j = rng.next_below(i + 1);
                perm.swap(i, j);
            }
            let permuted: Vec<f64> = (0..n).map(|i| vals[perm[i]]).collect();

            let base = topk_slice(&vals, k).unwrap();
            let shuffled = topk_slice(&permuted, k).unwrap();
            // Selecting then mapping through the permutation picks the same values.
            let mut base_vals: Vec<f64> = base.iter().map(|&i| vals[i]).collect();
            let mut shuf_vals: Vec<f64> = shuffled.iter().map(|&i| permuted[i]).collect();
            base_vals.sort_by(f64::total_cmp);
            shuf_vals.sort_by(f64::total_cmp);
            prop_assert_eq!(base_vals, shuf_vals);
        }
    }
}
