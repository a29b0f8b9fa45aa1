//! Frozen low-rank adapters and the contiguous n-adapter bank.
//!
//! An adapter is the pair A (d,r) / B (r,h); n adapters with identical
//! shapes stack into one (n,d,r) and one (n,r,h) tensor so forward kernels
//! can index them in place without per-call copies. Banks are immutable
//! after construction: adapters stay frozen while gates train.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc_slices, Element, Tensor};

#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Element = f32> {
    pub name: String,
    /// Down projection, shape (d, r).
    pub a: Tensor<T>,
    /// Up projection, shape (r, h).
    pub b: Tensor<T>,
    /// LoRA alpha; the conventional forward scale is alpha / r.
    pub alpha: f64,
}

impl<T: Element> LoraAdapter<T> {
    pub fn new(name: impl Into<String>, a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<Self> {
        let (_, r_a) = a.dims2()?;
        let (r_b, _) = b.dims2()?;
        if r_a != r_b || r_a == 0 {
            return Err(Error::Dimension {
                op: "lora_adapter",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if !(alpha > 0.0) {
            return Err(Error::Parameter(format!(
                "lora alpha must be > 0, got {alpha}"
            )));
        }
        Ok(LoraAdapter {
            name: name.into(),
            a,
            b,
            alpha,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.b.shape()[1]
    }

    /// Conventional scale alpha / r.
    pub fn default_scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

/// n adapters stacked contiguously: A-stack (n,d,r) and B-stack (n,r,h).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBank<T: Element = f32> {
    names: Vec<String>,
    a_stack: Tensor<T>,
    b_stack: Tensor<T>,
    input_dim: usize,
    rank: usize,
    output_dim: usize,
    alpha: f64,
}

impl<T: Element> LoraBank<T> {
    /// Stack adapters into contiguous tensors; inputs are left unmodified.
    /// All adapters must share (d, r, h, alpha).
    pub fn stack(adapters: &[LoraAdapter<T>]) -> Result<Self> {
        let first = adapters
            .first()
            .ok_or_else(|| Error::Config("cannot stack an empty adapter list".into()))?;
        let (d, r, h, alpha) = (
            first.input_dim(),
            first.rank(),
            first.output_dim(),
            first.alpha,
        );
        for ad in adapters {
            if ad.input_dim() != d || ad.rank() != r || ad.output_dim() != h || ad.alpha != alpha {
                return Err(Error::Config(format!(
                    "adapter '{}' has (d={}, r={}, h={}, alpha={}), expected (d={d}, r={r}, h={h}, alpha={alpha})",
                    ad.name,
                    ad.input_dim(),
                    ad.rank(),
                    ad.output_dim(),
                    ad.alpha
                )));
            }
        }
        let n = adapters.len();
        let mut a_data = Vec::with_capacity(n * d * r);
        let mut b_data = Vec::with_capacity(n * r * h);
        for ad in adapters {
            a_data.extend_from_slice(ad.a.data());
            b_data.extend_from_slice(ad.b.data());
        }
        Ok(LoraBank {
            names: adapters.iter().map(|a| a.name.clone()).collect(),
            a_stack: Tensor::new(&[n, d, r], a_data)?,
            b_stack: Tensor::new(&[n, r, h], b_data)?,
            input_dim: d,
            rank: r,
            output_dim: h,
            alpha,
        })
    }

    /// Build directly from stacked storage (artifact loading path).
    pub fn from_stacks(
        names: Vec<String>,
        a_stack: Tensor<T>,
        b_stack: Tensor<T>,
        alpha: f64,
    ) -> Result<Self> {
        let (n, d, r) = match a_stack.shape()[..] {
            [n, d, r] => (n, d, r),
            _ => {
                return Err(Error::Config(format!(
                    "A-stack must be 3-D (n,d,r), got {:?}",
                    a_stack.shape()
                )))
            }
        };
        let (n2, r2, h) = match b_stack.shape()[..] {
            [n, r, h] => (n, r, h),
            _ => {
                return Err(Error::Config(format!(
                    "B-stack must be 3-D (n,r,h), got {:?}",
                    b_stack.shape()
                )))
            }
        };
        if n != n2 || r != r2 || names.len() != n {
            return Err(Error::Config(format!(
                "stack shapes disagree: A {:?}, B {:?}, {} names",
                a_stack.shape(),
                b_stack.shape(),
                names.len()
            )));
        }
        Ok(LoraBank {
            names,
            a_stack,
            b_stack,
            input_dim: d,
            rank: r,
            output_dim: h,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn default_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn a_stack(&self) -> &Tensor<T> {
        &self.a_stack
    }

    pub fn b_stack(&self) -> &Tensor<T> {
        &self.b_stack
    }

    /// Borrow adapter i's A matrix (d*r contiguous scalars), no copy.
    pub fn a_slice(&self, i: usize) -> &[T] {
        let len = self.input_dim * self.rank;
        &self.a_stack.data()[i * len..(i + 1) * len]
    }

    /// Borrow adapter i's B matrix (r*h contiguous scalars), no copy.
    pub fn b_slice(&self, i: usize) -> &[T] {
        let len = self.rank * self.output_dim;
        &self.b_stack.data()[i * len..(i + 1) * len]
    }

    /// Extract adapter i as an owned value (the stack round-trip).
    pub fn adapter(&self, i: usize) -> LoraAdapter<T> {
        LoraAdapter {
            name: self.names[i].clone(),
            a: Tensor::new(&[self.input_dim, self.rank], self.a_slice(i).to_vec())
                .expect("bank slice is consistent"),
            b: Tensor::new(&[self.rank, self.output_dim], self.b_slice(i).to_vec())
                .expect("bank slice is consistent"),
            alpha: self.alpha,
        }
    }

    pub fn cast<U: Element>(&self) -> LoraBank<U> {
        LoraBank {
            names: self.names.clone(),
            a_stack: self.a_stack.cast(),
            b_stack: self.b_stack.cast(),
            input_dim: self.input_dim,
            rank: self.rank,
            output_dim: self.output_dim,
            alpha: self.alpha,
        }
    }
}

/// Single-adapter forward pass: o = x W_base + scale * ((x A) B).
pub fn lora_forward<T: Element>(
    x: &Tensor<T>,
    w_base: &Tensor<T>,
    adapter: &LoraAdapter<T>,
    scale: f64,
) -> Result<Tensor<T>> {
    let d = match x.shape()[..] {
        [d] => d,
        _ => {
            return Err(Error::Dimension {
                op: "lora_forward",
                lhs: x.shape().to_vec(),
                rhs: w_base.shape().to_vec(),
            })
        }
    };
    let (wd, h) = w_base.dims2()?;
    if wd != d || adapter.input_dim() != d || adapter.output_dim() != h {
        return Err(Error::Dimension {
            op: "lora_forward",
            lhs: vec![d, adapter.input_dim(), adapter.output_dim()],
            rhs: vec![wd, h],
        });
    }
    let r = adapter.rank();
    let mut out = vec![T::zero(); h];
    matmul_acc_slices(&mut out, T::one(), x.data(), w_base.data(), 1, d, h);
    let mut xa = vec![T::zero(); r];
    matmul_acc_slices(&mut xa, T::one(), x.data(), adapter.a.data(), 1, d, r);
    matmul_acc_slices(&mut out, T::from_f64(scale), &xa, adapter.b.data(), 1, r, h);
    Tensor::new(&[h], out)
}
