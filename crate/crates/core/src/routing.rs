//! Gating network and per-token top-k routing.
//!
//! The gate is a bias-free linear map d -> n producing one logit per
//! adapter. Selection always happens on raw logits; temperature only
//! reshapes the weights of the already-selected set, so the top-1 choice is
//! invariant to tau. Weights are a softmax over the selected k logits only
//! (the denominator never sees unselected adapters).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_acc_slices, topk_slice, Element, Tensor};

/// Bias-free linear gate: logits = x . weight, weight shape (d, n).
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork<T: Element = f32> {
    weight: Tensor<T>,
}

impl<T: Element> GatingNetwork<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        weight.dims2()?;
        Ok(GatingNetwork { weight })
    }

    /// Gaussian init with small std so initial routing is near-uniform.
    pub fn init(input_dim: usize, n_adapters: usize, std: f64, rng: &mut Rng) -> Self {
        GatingNetwork {
            weight: Tensor::randn(&[input_dim, n_adapters], std, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_adapters(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    /// Mutable access for the training loop (single writer).
    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn cast<U: Element>(&self) -> GatingNetwork<U> {
        GatingNetwork {
            weight: self.weight.cast(),
        }
    }

    /// Unnormalized adapter logits for one token.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.input_dim();
        if x.shape() != [d] {
            return Err(Error::Dimension {
                op: "gate_logits",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); self.n_adapters()];
        self.logits_into(&mut out, x.data());
        Tensor::new(&[self.n_adapters()], out)
    }

    /// Slice-level variant for hot paths; `x` must have length d.
    pub fn logits_into(&self, out: &mut [T], x: &[T]) {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(out.len(), self.n_adapters());
        out.fill(T::zero());
        matmul_acc_slices(
            out,
            T::one(),
            x,
            self.weight.data(),
            1,
            self.input_dim(),
            self.n_adapters(),
        );
    }
}

/// Top-k routing parameters. tau defaults to 1 and only matters at
/// inference on composite inputs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoutingConfig {
    pub k: usize,
    pub temperature: f64,
}

impl RoutingConfig {
    pub fn new(k: usize) -> Self {
        RoutingConfig {
            k,
            temperature: 1.0,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self, n_adapters: usize) -> Result<()> {
        if self.k == 0 || self.k > n_adapters {
            return Err(Error::Parameter(format!(
                "routing k must satisfy 1 <= k <= {n_adapters}, got {}",
                self.k
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "routing temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One token's routing outcome: which adapters, with what weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T: Element = f32> {
    /// Selected adapter ids in descending-logit order; always distinct.
    pub indices: Vec<usize>,
    /// Softmax weights over the selected set; sums to 1, all >= 0.
    pub weights: Vec<T>,
    /// Raw gate logits over all n adapters.
    pub logits: Vec<T>,
}

/// Top-k selection on raw logits, then softmax over the selected logits
/// only, divided by temperature.
pub fn route<T: Element>(logits: &Tensor<T>, cfg: &RoutingConfig) -> Result<RoutingDecision<T>> {
    if logits.shape().len() != 1 {
        return Err(Error::Parameter(format!(
            "route expects 1-D logits, got {:?}",
            logits.shape()
        )));
    }
    route_slice(logits.data(), cfg)
}

pub fn route_slice<T: Element>(logits: &[T], cfg: &RoutingConfig) -> Result<RoutingDecision<T>> {
    cfg.validate(logits.len())?;
    let indices = topk_slice(logits, cfg.k)?;
    // Softmax over the selected logits only, in place in the weight vector.
    let mut weights: Vec<T> = indices.iter().map(|&i| logits[i]).collect();
    if weights.iter().any(|x| x.as_f64().is_nan()) {
        return Err(Error::Numeric("routing logits contain NaN".into()));
    }
    let max = weights
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let inv_tau = T::from_f64(1.0 / cfg.temperature);
    let mut sum = T::zero();
    for w in weights.iter_mut() {
        *w = ((*w - max) * inv_tau).exp();
        sum = sum + *w;
    }
    let inv = T::one() / sum;
    for w in weights.iter_mut() {
        *w = *w * inv;
    }
    Ok(RoutingDecision {
        indices,
        weights,
        logits: logits.to_vec(),
    })
}
