//! Cache-blocked fused forward: blockize x and A, two multiplies with
//! 01-mask reconstruction, multiply by B, deferred column sum.
//!
//! The GPU original splits x into m row blocks so every matrix operand has
//! dims >= 16; the masks M1/M2 fold the blocked product back to x.A, and
//! the column sum is deferred until after the B multiply. This port keeps
//! the algorithm, masks, and data movement (index, load, two multiplies,
//! mask-reconstruct, colsum) but skips arithmetic the masks provably zero
//! out, which on a CPU would otherwise be pure waste: entries of oA' that
//! M1 kills are never computed, and the M2 product is evaluated as the
//! column-group sum its 01 pattern encodes. Tests verify the literal dense
//! mask identity separately.

use crate::error::{Error, Result};
use crate::lora::LoraBank;
use crate::tensor::{Element, Tensor};

/// Default block count: the GPU constraint wants every operand dim >= 16,
/// so 16 blocks; d is zero-padded up to a multiple of m when needed.
pub const DEFAULT_BLOCK_M: usize = 16;

/// The two 01 masks that reconstruct x.A from the blocked product.
///
/// M1 (m, r*m): `M1[i][j] = 1 iff floor(j/r) == i`.
/// M2 (r*m, r): `M2[g*r + c][c] = 1` for all block groups g.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedKernelConfig<T: Element = f32> {
    pub m: usize,
    pub rank: usize,
    pub m1: Tensor<T>,
    pub m2: Tensor<T>,
}

/// Build M1 and M2 for a given block count and rank.
pub fn build_masks<T: Element>(m: usize, rank: usize) -> BlockedKernelConfig<T> {
    assert!(m >= 1 && rank >= 1, "build_masks: m and r must be >= 1");
    let mut m1 = Tensor::<T>::zeros(&[m, rank * m]);
    for i in 0..m {
        for j in 0..rank * m {
            if j / rank == i {
                m1.data_mut()[i * rank * m + j] = T::one();
            }
        }
    }
    let mut m2 = Tensor::<T>::zeros(&[rank * m, rank]);
    for g in 0..m {
        for c in 0..rank {
            m2.data_mut()[(g * rank + c) * rank + c] = T::one();
        }
    }
    BlockedKernelConfig {
        m,
        rank,
        m1,
        m2,
    }
}

/// Smallest multiple of m that is >= d.
pub fn padded_dim(d: usize, m: usize) -> usize {
    d.div_ceil(m) * m
}

/// Blockize one input vector and one A matrix.
///
/// x (d) becomes X_blk (m, dp/m) where row i holds x[i*dp/m .. (i+1)*dp/m];
/// A (d, r) becomes A_blk (dp/m, r*m) where column group g holds A's rows
/// for block g: `A_blk[t][g*r + c] = A[g*(dp/m) + t][c]`. When m does not
/// divide d both are zero-padded up to dp = padded_dim(d, m); padded
/// products are zero so the reconstruction below is unaffected.
pub fn blockize<T: Element>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    m: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = match x.shape()[..] {
        [d] => d,
        _ => {
            return Err(Error::Parameter(format!(
                "blockize expects 1-D x, got {:?}",
                x.shape()
            )))
        }
    };
    let (da, r) = a.dims2()?;
    if da != d {
        return Err(Error::Dimension {
            op: "blockize",
            lhs: x.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let dp = padded_dim(d, m);
    let cols = dp / m;

    let mut xb = vec![T::zero(); dp];
    xb[..d].copy_from_slice(x.data());
    let x_blk = Tensor::new(&[m, cols], xb)?;

    let a_blk = blockize_a(a.data(), d, r, m);
    Ok((x_blk, a_blk))
}

/// A-side of [`blockize`] over raw storage; used for the per-bank prep.
fn blockize_a<T: Element>(a: &[T], d: usize, r: usize, m: usize) -> Tensor<T> {
    let dp = padded_dim(d, m);
    let cols = dp / m;
    let mut out = vec![T::zero(); cols * r * m];
    for row in 0..d {
        let g = row / cols;
        let t = row % cols;
        // A_blk[t][g*r + c] = A[row][c]
        let dst = t * (r * m) + g * r;
        out[dst..dst + r].copy_from_slice(&a[row * r..(row + 1) * r]);
    }
    Tensor::new(&[cols, r * m], out).expect("blockize_a shape is consistent")
}

/// Pre-blockized A stacks plus masks for one bank, built once per layer.
/// Each adapter's A' is (dp/m, r*m) = dp*r scalars, contiguous per adapter.
#[derive(Debug, Clone)]
pub struct BlockedPrep<T: Element = f32> {
    pub m: usize,
    pub padded_d: usize,
    pub masks: BlockedKernelConfig<T>,
    a_blk_stack: Vec<T>,
    stride: usize,
}

impl<T: Element> BlockedPrep<T> {
    pub fn new(bank: &LoraBank<T>, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Parameter("block count m must be >= 1".into()));
        }
        let d = bank.input_dim();
        let r = bank.rank();
        let dp = padded_dim(d, m);
        let stride = dp * r;
        let mut a_blk_stack = Vec::with_capacity(bank.len() * stride);
        for i in 0..bank.len() {
            let blk = blockize_a(bank.a_slice(i), d, r, m);
            a_blk_stack.extend_from_slice(blk.data());
        }
        Ok(BlockedPrep {
            m,
            padded_d: dp,
            masks: build_masks(m, r),
            a_blk_stack,
            stride,
        })
    }

    /// Adapter i's blockized A, shape (dp/m, r*m), borrowed in place.
    pub fn a_blk(&self, i: usize) -> &[T] {
        &self.a_blk_stack[i * self.stride..(i + 1) * self.stride]
    }

    pub fn resident_floats(&self) -> u64 {
        (self.a_blk_stack.len() + self.masks.m1.numel() + self.masks.m2.numel()) as u64
    }
}

/// Scratch buffers for one blocked forward call, reused across tokens and
/// slots the way the GPU kernel reuses its SRAM tiles.
pub(crate) struct BlockedScratch<T: Element> {
    pub x_pad: Vec<T>,
    /// oA' after the M1 mask, shape (m, r*m).
    pub oa_masked: Vec<T>,
    /// oA'' = (oA' . M1) x M2, shape (m, r).
    pub oa2: Vec<T>,
    /// oB' = oA'' x B, shape (m, h).
    pub ob: Vec<T>,
}

impl<T: Element> BlockedScratch<T> {
    pub fn new(m: usize, r: usize, h: usize, dp: usize) -> Self {
        BlockedScratch {
            x_pad: vec![T::zero(); dp],
            oa_masked: vec![T::zero(); m * r * m],
            oa2: vec![T::zero(); m * r],
            ob: vec![T::zero(); m * h],
        }
    }

    pub fn floats(&self) -> u64 {
        (self.x_pad.len() + self.oa_masked.len() + self.oa2.len() + self.ob.len()) as u64
    }
}

/// One token, one selected adapter: accumulate `weight * colsum(oB')` into
/// `out` (length h). Follows the kernel steps: load A', B by index; oA' =
/// X x A' (only the entries M1 keeps); oA'' via the M2 column-group sum;
/// oB' = oA'' x B; deferred colsum folded into the weighted accumulate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn blocked_delta_acc<T: Element>(
    out: &mut [T],
    x: &[T],
    prep: &BlockedPrep<T>,
    bank: &LoraBank<T>,
    adapter: usize,
    weight: T,
    scratch: &mut BlockedScratch<T>,
) {
    let m = prep.m;
    let r = bank.rank();
    let h = bank.output_dim();
    let dp = prep.padded_d;
    let cols = dp / m;
    let rm = r * m;

    // X_blk is a pure reshape of (padded) x: row i = x[i*cols..(i+1)*cols].
    let x_blk: &[T] = if dp == x.len() {
        x
    } else {
        scratch.x_pad[..x.len()].copy_from_slice(x);
        &scratch.x_pad
    };

    let a_blk = prep.a_blk(adapter);
    let b = bank.b_slice(adapter);

    // oA' = X x A', masked by M1 as it is produced: row i only keeps its
    // own column group [i*r, (i+1)*r), everything else is zero.
    scratch.oa_masked.fill(T::zero());
    for i in 0..m {
        let dst = &mut scratch.oa_masked[i * rm + i * r..i * rm + i * r + r];
        for (t, &xv) in x_blk[i * cols..(i + 1) * cols].iter().enumerate() {
            let a_row = &a_blk[t * rm + i * r..t * rm + i * r + r];
            for (d, &a) in dst.iter_mut().zip(a_row) {
                *d = *d + xv * a;
            }
        }
    }

    // oA'' = (oA' . M1) x M2: M2's 01 pattern sums column groups, so
    // oA''[i][c] = sum_g oa_masked[i][g*r + c].
    scratch.oa2.fill(T::zero());
    for i in 0..m {
        let row = &scratch.oa_masked[i * rm..(i + 1) * rm];
        let dst = &mut scratch.oa2[i * r..(i + 1) * r];
        for group in row.chunks_exact(r) {
            for (d, &v) in dst.iter_mut().zip(group) {
                *d = *d + v;
            }
        }
    }

    // oB' = oA'' x B, colsum deferred past the second multiply.
    scratch.ob.fill(T::zero());
    crate::tensor::matmul_slices(&mut scratch.ob, &scratch.oa2, b, m, r, h);

    // O = colsum(oB'), folded into the weighted accumulate.
    for row in scratch.ob.chunks_exact(h) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + weight * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn popcount<T: Element>(t: &Tensor<T>) -> usize {
        t.data().iter().filter(|&&v| v == T::one()).count()
    }

    #[test]
    fn masks_single_block_degenerate() {
        let cfg = build_masks::<f64>(1, 3);
        // M1 is a single row of ones; M2 stacks one identity.
        assert_eq!(cfg.m1.shape(), &[1, 3]);
        assert_eq!(cfg.m1.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(cfg.m2.shape(), &[3, 3]);
        assert_eq!(cfg.m2.data(), Tensor::<f64>::eye(3).data());
    }

    #[test]
    fn masks_m2_r1_enumeration() {
        let cfg = build_masks::<f64>(2, 1);
        assert_eq!(cfg.m1.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(cfg.m2.data(), &[1.0, 1.0]);
    }

    #[test]
    fn masks_popcount() {
        let cfg = build_masks::<f32>(16, 8);
        assert_eq!(popcount(&cfg.m1), 128);
        assert_eq!(popcount(&cfg.m2), 128);
    }

    #[test]
    fn blockize_m1_is_identity() {
        let mut rng = Rng::new(10);
        let x = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[6, 2], 1.0, &mut rng);
        let (xb, ab) = blockize(&x, &a, 1).unwrap();
        assert_eq!(xb.shape(), &[1, 6]);
        assert_eq!(xb.data(), x.data());
        assert_eq!(ab.shape(), &[6, 2]);
        assert_eq!(ab.data(), a.data());
    }

    #[test]
    fn blockize_hand_example() {
        // d=4, r=1, m=2: x=[1,2,3,4], A=ones -> X_blk=[[1,2],[3,4]],
        // A_blk=[[1,1],[1,1]], and the mask reconstruction gives x.A=[10].
        let x = Tensor::<f64>::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = Tensor::<f64>::full(&[4, 1], 1.0);
        let (xb, ab) = blockize(&x, &a, 2).unwrap();
        assert_eq!(xb.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ab.shape(), &[2, 2]);
        assert_eq!(ab.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!((reconstruct_oracle(&xb, &ab, 2, 1)[0] - 10.0).abs() < 1e-12);
    }

    /// Literal dense reconstruction: colsum((X_blk x A_blk . M1) x M2).
    /// This is the oracle route; it does not share code with the kernel.
    fn reconstruct_oracle(xb: &Tensor<f64>, ab: &Tensor<f64>, m: usize, r: usize) -> Vec<f64> {
        let cfg = build_masks::<f64>(m, r);
        let oa = xb.matmul(ab).unwrap();
        let masked = Tensor::<f64>::new(
            oa.shape(),
            oa.data()
                .iter()
                .zip(cfg.m1.data())
                .map(|(&a, &b)| a * b)
                .collect(),
        )
        .unwrap();
        let oa2 = masked.matmul(&cfg.m2).unwrap();
        let mut colsum = vec![0.0; r];
        for i in 0..m {
            for c in 0..r {
                colsum[c] += oa2.data()[i * r + c];
            }
        }
        colsum
    }

    #[test]
    fn blockize_reconstruction_matches_direct_product() {
        let mut rng = Rng::new(11);
        let (d, r, m) = (64, 8, 16);
        let x = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[d, r], 1.0, &mut rng);
        let (xb, ab) = blockize(&x, &a, m).unwrap();
        let got = reconstruct_oracle(&xb, &ab, m, r);
        let want = x
            .clone()
            .reshaped(&[1, d])
            .unwrap()
            .matmul(&a)
            .unwrap()
            .into_data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "got {g} want {w}");
        }
    }

    #[test]
    fn blockize_pads_indivisible_dims() {
        let mut rng = Rng::new(12);
        let (d, r, m) = (10, 3, 4); // dp = 12
        let x = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[d, r], 1.0, &mut rng);
        let (xb, ab) = blockize(&x, &a, m).unwrap();
        assert_eq!(xb.shape(), &[4, 3]);
        assert_eq!(ab.shape(), &[3, 12]);
        let got = reconstruct_oracle(&xb, &ab, m, r);
        let want = x
            .clone()
            .reshaped(&[1, d])
            .unwrap()
            .matmul(&a)
            .unwrap()
            .into_data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn deferred_colsum_identity() {
        // colsum(oA'' x B) == colsum(oA'') x B: the linearity that justifies
        // deferring the column sum past the second multiply.
        let mut rng = Rng::new(13);
        let (m, r, h) = (8, 4, 6);
        let oa2 = Tensor::<f64>::randn(&[m, r], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[r, h], 1.0, &mut rng);

        let ob = oa2.matmul(&b).unwrap();
        let mut colsum_after = vec![0.0; h];
        for i in 0..m {
            for j in 0..h {
                colsum_after[j] += ob.data()[i * h + j];
            }
        }

        let mut colsum_first = vec![0.0; r];
        for i in 0..m {
            for c in 0..r {
                colsum_first[c] += oa2.data()[i * r + c];
            }
        }
        let early = Tensor::<f64>::new(&[1, r], colsum_first)
            .unwrap()
            .matmul(&b)
            .unwrap();

        for (a, b) in colsum_after.iter().zip(early.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
