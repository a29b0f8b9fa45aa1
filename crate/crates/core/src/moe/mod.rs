//! The routed multi-adapter layer and its three forward strategies.
//!
//! All strategies share one routing path (gate logits + top-k + selected
//! softmax), so they always produce identical `RoutingDecision`s; they only
//! differ in how the per-token adapter deltas are evaluated:
//!
//! - `loop`: per-adapter dispatch. For each adapter, materialize its token
//!   mask, gather the assigned tokens, run the two low-rank multiplies,
//!   scatter weighted results back. Adapter matrices are read in place.
//! - `batched`: gather per-(token, slot) copies of x, A and B into big
//!   contiguous operands, run two batched multiplies, weighted sum. Fast
//!   and simple, but the gathered A/B copies grow with b*s*k.
//! - `blocked`: the fused kernel from `blocked`: pre-blockized A stacks
//!   indexed in place, mask reconstruction, deferred column sum. No
//!   per-token adapter copies.
//!
//! Every forward returns an [`AllocReport`] counting scalars allocated per
//! call by category; the benchmark and the memory acceptance checks read
//! these instead of process RSS.

pub mod blocked;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lora::LoraBank;
use crate::routing::{route_slice, GatingNetwork, RoutingConfig, RoutingDecision};
use crate::tensor::{matmul_slices, Element, Tensor};

pub use blocked::{
    blockize, build_masks, padded_dim, BlockedKernelConfig, BlockedPrep, DEFAULT_BLOCK_M,
};

/// Below this many tokens the kernels stay single-threaded; the work is so
/// small that fork/join overhead would dominate and benchmarks would
/// measure rayon instead of the kernels.
const PAR_TOKEN_THRESHOLD: usize = 32;

/// Gathered-operand budget for the batched strategy (scalars). The batched
/// gather allocates fresh storage proportional to b*s*k; past this it is a
/// configuration error, not an OOM.
const MAX_BATCHED_GATHER_FLOATS: u64 = 1 << 31;

/// Forward strategy, selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Loop,
    Batched,
    Blocked,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Loop, Strategy::Batched, Strategy::Blocked];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Loop => "loop",
            Strategy::Batched => "batched",
            Strategy::Blocked => "blocked",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loop" => Ok(Strategy::Loop),
            "batched" => Ok(Strategy::Batched),
            "blocked" => Ok(Strategy::Blocked),
            other => Err(Error::Parameter(format!(
                "unknown strategy '{other}' (expected loop | batched | blocked)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A (b, s, d) batch of token hidden states.
#[derive(Debug, Clone)]
pub struct TokenBatch<T: Element = f32> {
    x: Tensor<T>,
}

impl<T: Element> TokenBatch<T> {
    pub fn new(x: Tensor<T>) -> Result<Self> {
        match x.shape()[..] {
            [_, _, _] => Ok(TokenBatch { x }),
            _ => Err(Error::Parameter(format!(
                "token batch must be (b, s, d), got {:?}",
                x.shape()
            ))),
        }
    }

    /// Single sequence (1, s, d) from a flat (s, d) tensor.
    pub fn single(x: Tensor<T>) -> Result<Self> {
        let (s, d) = x.dims2()?;
        Ok(TokenBatch {
            x: x.reshaped(&[1, s, d])?,
        })
    }

    pub fn batch(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn tokens(&self) -> usize {
        self.batch() * self.seq_len()
    }

    /// Token t's hidden state, flattening (b, s) in row-major order.
    pub fn token(&self, t: usize) -> &[T] {
        let d = self.dim();
        &self.x.data()[t * d..(t + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.x
    }
}

/// Scalars allocated during one forward call, by category. Deterministic
/// by construction: the kernels increment these at their allocation sites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocReport {
    /// Copies made of adapter A/B matrices (the batched gather).
    pub adapter_operand_floats: u64,
    /// Copies made of token hidden states (gathers of x).
    pub token_operand_floats: u64,
    /// Reused intermediates: low-rank activations, kernel scratch.
    pub workspace_floats: u64,
    /// Routing bookkeeping: logits, weights per token.
    pub routing_floats: u64,
    /// The output tensor itself.
    pub output_floats: u64,
}

impl AllocReport {
    pub fn total(&self) -> u64 {
        self.adapter_operand_floats
            + self.token_operand_floats
            + self.workspace_floats
            + self.routing_floats
            + self.output_floats
    }
}

/// Result of one forward call: outputs, per-token routing, allocation tally.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Element = f32> {
    /// Shape (b, s, h).
    pub output: Tensor<T>,
    /// One decision per token, (b, s) flattened row-major.
    pub decisions: Vec<RoutingDecision<T>>,
    pub alloc: AllocReport,
}

/// One base linear layer with an adapter bank and its gate.
#[derive(Debug, Clone)]
pub struct MeteoraLayer<T: Element = f32> {
    w_base: Tensor<T>,
    bank: LoraBank<T>,
    gate: GatingNetwork<T>,
    cfg: RoutingConfig,
    scale: f64,
    prep: BlockedPrep<T>,
}

impl<T: Element> MeteoraLayer<T> {
    pub fn new(
        w_base: Tensor<T>,
        bank: LoraBank<T>,
        gate: GatingNetwork<T>,
        cfg: RoutingConfig,
        scale: f64,
    ) -> Result<Self> {
        Self::with_block_m(w_base, bank, gate, cfg, scale, DEFAULT_BLOCK_M)
    }

    pub fn with_block_m(
        w_base: Tensor<T>,
        bank: LoraBank<T>,
        gate: GatingNetwork<T>,
        cfg: RoutingConfig,
        scale: f64,
        block_m: usize,
    ) -> Result<Self> {
        let (d, h) = w_base.dims2()?;
        if bank.input_dim() != d || bank.output_dim() != h {
            return Err(Error::Config(format!(
                "bank shape (d={}, h={}) does not match base weight (d={d}, h={h})",
                bank.input_dim(),
                bank.output_dim()
            )));
        }
        if gate.input_dim() != d || gate.n_adapters() != bank.len() {
            return Err(Error::Config(format!(
                "gate shape ({}, {}) does not match d={d}, n={}",
                gate.input_dim(),
                gate.n_adapters(),
                bank.len()
            )));
        }
        cfg.validate(bank.len())?;
        let prep = BlockedPrep::new(&bank, block_m)?;
        Ok(MeteoraLayer {
            w_base,
            bank,
            gate,
            cfg,
            scale,
            prep,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_base.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w_base.shape()[1]
    }

    pub fn n_adapters(&self) -> usize {
        self.bank.len()
    }

    pub fn w_base(&self) -> &Tensor<T> {
        &self.w_base
    }

    pub fn bank(&self) -> &LoraBank<T> {
        &self.bank
    }

    pub fn gate(&self) -> &GatingNetwork<T> {
        &self.gate
    }

    /// Training-time mutation point; inference paths take &self only.
    pub fn gate_mut(&mut self) -> &mut GatingNetwork<T> {
        &mut self.gate
    }

    /// Replace the gate wholesale (artifact loading).
    pub fn set_gate(&mut self, gate: GatingNetwork<T>) -> Result<()> {
        if gate.input_dim() != self.input_dim() || gate.n_adapters() != self.n_adapters() {
            return Err(Error::Config(format!(
                "gate shape ({}, {}) does not match layer (d={}, n={})",
                gate.input_dim(),
                gate.n_adapters(),
                self.input_dim(),
                self.n_adapters()
            )));
        }
        self.gate = gate;
        Ok(())
    }

    pub fn routing(&self) -> &RoutingConfig {
        &self.cfg
    }

    pub fn set_routing(&mut self, cfg: RoutingConfig) -> Result<()> {
        cfg.validate(self.n_adapters())?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn block_m(&self) -> usize {
        self.prep.m
    }

    pub fn cast<U: Element>(&self) -> MeteoraLayer<U> {
        MeteoraLayer::with_block_m(
            self.w_base.cast(),
            self.bank.cast(),
            self.gate.cast(),
            self.cfg,
            self.scale,
            self.prep.m,
        )
        .expect("cast preserves validity")
    }

    pub fn forward(&self, batch: &TokenBatch<T>, strategy: Strategy) -> Result<ForwardOutput<T>> {
        self.forward_cfg(batch, strategy, &self.cfg)
    }

    /// Forward with a per-call routing override (temperature sweeps, k
    /// experiments) without touching the layer's stored config.
    pub fn forward_cfg(
        &self,
        batch: &TokenBatch<T>,
        strategy: Strategy,
        cfg: &RoutingConfig,
    ) -> Result<ForwardOutput<T>> {
        match strategy {
            Strategy::Loop => forward_loop_cfg(self, batch, cfg),
            Strategy::Batched => forward_batched_cfg(self, batch, cfg),
            Strategy::Blocked => forward_blocked_cfg(self, batch, self.prep.m, cfg),
        }
    }

    fn check_batch(&self, batch: &TokenBatch<T>) -> Result<()> {
        if batch.dim() != self.input_dim() {
            return Err(Error::Dimension {
                op: "moe_forward",
                lhs: batch.tensor().shape().to_vec(),
                rhs: self.w_base.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Routing shared by all strategies: identical code path, identical
    /// decisions. Returns decisions plus the floats they allocated.
    fn route_tokens(
        &self,
        batch: &TokenBatch<T>,
        cfg: &RoutingConfig,
    ) -> Result<(Vec<RoutingDecision<T>>, u64)> {
        let n = self.n_adapters();
        let k = cfg.k;
        let tokens = batch.tokens();
        let mut logits_buf = vec![T::zero(); n];
        let mut decisions = Vec::with_capacity(tokens);
        for t in 0..tokens {
            self.gate.logits_into(&mut logits_buf, batch.token(t));
            decisions.push(route_slice(&logits_buf, cfg)?);
        }
        // Per decision: n logits + k weights + k selected scratch; plus the
        // shared logits buffer.
        let routing_floats = (tokens * (n + 2 * k) + n) as u64;
        Ok((decisions, routing_floats))
    }

    /// out(bs, h) = X(bs, d) x W_base, the term shared by every strategy.
    fn base_term(&self, batch: &TokenBatch<T>) -> Vec<T> {
        let (bs, d, h) = (batch.tokens(), self.input_dim(), self.output_dim());
        let mut out = vec![T::zero(); bs * h];
        if bs >= PAR_TOKEN_THRESHOLD {
            out.par_chunks_mut(h).enumerate().for_each(|(t, row)| {
                matmul_slices(row, batch.token(t), self.w_base.data(), 1, d, h);
            });
        } else {
            matmul_slices(&mut out, batch.tensor().data(), self.w_base.data(), bs, d, h);
        }
        out
    }
}

/// Per-adapter dispatch (the reference strategy). For each adapter:
/// materialize its token mask over all (token, slot) assignments, gather
/// the assigned tokens into one matrix, apply the two low-rank multiplies,
/// scatter the weighted deltas back. Adapters with no tokens still pay the
/// mask/scan; that serialized per-adapter sweep is exactly what makes this
/// strategy slow when n is large and b*s*k is small.
pub fn forward_loop<T: Element>(
    layer: &MeteoraLayer<T>,
    batch: &TokenBatch<T>,
) -> Result<ForwardOutput<T>> {
    forward_loop_cfg(layer, batch, &layer.cfg)
}

fn forward_loop_cfg<T: Element>(
    layer: &MeteoraLayer<T>,
    batch: &TokenBatch<T>,
    cfg: &RoutingConfig,
) -> Result<ForwardOutput<T>> {
    layer.check_batch(batch)?;
    let (bs, d, h) = (batch.tokens(), layer.input_dim(), layer.output_dim());
    let r = layer.bank.rank();
    let n = layer.n_adapters();
    let k = cfg.k;
    let scale = T::from_f64(layer.scale);

    let mut alloc = AllocReport::default();
    let (decisions, routing_floats) = layer.route_tokens(batch, cfg)?;
    alloc.routing_floats = routing_floats;

    let mut out = layer.base_term(batch);
    alloc.output_floats = (bs * h) as u64;

    for adapter in 0..n {
        // Dispatch mask for this adapter over every (token, slot) pair.
        let mask: Vec<bool> = decisions
            .iter()
            .flat_map(|dec| dec.indices.iter().map(move |&i| i == adapter))
            .collect();
        let assigned: Vec<(usize, usize)> = (0..bs * k)
            .filter(|&p| mask[p])
            .map(|p| (p / k, p % k))
            .collect();
        if assigned.is_empty() {
            continue;
        }
        let p = assigned.len();

        // Gather X_a (p, d): the one place this strategy copies tokens.
        let mut gathered = Vec::with_capacity(p * d);
        for &(t, _) in &assigned {
            gathered.extend_from_slice(batch.token(t));
        }
        alloc.token_operand_floats += (p * d) as u64;

        // (X_a x A_a) x B_a with A/B read in place from the bank.
        let mut xa = vec![T::zero(); p * r];
        matmul_slices(&mut xa, &gathered, layer.bank.a_slice(adapter), p, d, r);
        let mut delta = vec![T::zero(); p * h];
        matmul_slices(&mut delta, &xa, layer.bank.b_slice(adapter), p, r, h);
        alloc.workspace_floats += (p * r + p * h) as u64;

        // Scatter, weighted by this adapter's routing weight per token.
        for (row, &(t, slot)) in assigned.iter().enumerate() {
            let w = scale * decisions[t].weights[slot];
            let src = &delta[row * h..(row + 1) * h];
            let dst = &mut out[t * h..(t + 1) * h];
            for j in 0..h {
                dst[j] = dst[j] + w * src[j];
            }
        }
    }

    Ok(ForwardOutput {
        output: Tensor::new(&[batch.batch(), batch.seq_len(), h], out)?,
        decisions,
        alloc,
    })
}

/// Estimated gathered-operand scalars for the batched strategy.
pub fn batched_gather_estimate(
    tokens: usize,
    k: usize,
    d: usize,
    r: usize,
    h: usize,
) -> Result<u64> {
    let per_slot = (d as u64)
        .checked_mul(r as u64)
        .and_then(|dr| (r as u64).checked_mul(h as u64).map(|rh| (dr, rh)))
        .and_then(|(dr, rh)| dr.checked_add(rh))
        .and_then(|ops| ops.checked_add(d as u64))
        .ok_or_else(|| Error::Resource("batched gather size overflows u64".into()))?;
    let total = (tokens as u64)
        .checked_mul(k as u64)
        .and_then(|slots| slots.checked_mul(per_slot))
        .ok_or_else(|| Error::Resource("batched gather size overflows u64".into()))?;
    if total > MAX_BATCHED_GATHER_FLOATS {
        return Err(Error::Resource(format!(
            "batched gather would allocate {total} scalars (> {MAX_BATCHED_GATHER_FLOATS}); \
             use the loop or blocked strategy"
        )));
    }
    Ok(total)
}

/// Fully batched gather: copy x, A, B per (token, slot) into contiguous
/// stacks, run the two multiplies over all slots, weighted-sum per token.
pub fn forward_batched<T: Element>(
    layer: &MeteoraLayer<T>,
    batch: &TokenBatch<T>,
) -> Result<ForwardOutput<T>> {
    forward_batched_cfg(layer, batch, &layer.cfg)
}

fn forward_batched_cfg<T: Element>(
    layer: &MeteoraLayer<T>,
    batch: &TokenBatch<T>,
    cfg: &RoutingConfig,
) -> Result<ForwardOutput<T>> {
    layer.check_batch(batch)?;
    let (bs, d, h) = (batch.tokens(), layer.input_dim(), layer.output_dim());
    let r = layer.bank.rank();
    let k = cfg.k;
    let slots = bs * k;
    batched_gather_estimate(bs, k, d, r, h)?;

    let mut alloc = AllocReport::default();
    let (decisions, routing_floats) = layer.route_tokens(batch, cfg)?;
    alloc.routing_floats = routing_floats;

    // Gather per-(token, slot) copies: x into (slots, d), A into
    // (slots, d, r), B into (slots, r, h). This is the strategy's defining
    // cost: fresh storage proportional to b*s*k.
    let mut x_g = Vec::with_capacity(slots * d);
    let mut a_g = Vec::with_capacity(slots * d * r);
    let mut b_g = Vec::with_capacity(slots * r * h);
    for t in 0..bs {
        for &adapter in &decisions[t].indices {
            x_g.extend_from_slice(batch.token(t));
            a_g.extend_from_slice(layer.bank.a_slice(adapter));
            b_g.extend_from_slice(layer.bank.b_slice(adapter));
        }
    }
    alloc.token_operand_floats += (slots * d) as u64;
    alloc.adapter_operand_floats += (slots * (d * r + r * h)) as u64;

    // Two batched multiplies over all slots.
    let mut xa = vec![T::zero(); slots * r];
    let mut delta = vec![T::zero(); slots * h];
    alloc.workspace_floats += (slots * r + slots * h) as u64;
    let bmm = |slot: usize, xa: &mut [T], delta: &mut [T]| {
        matmul_slices(
            xa,
            &x_g[slot * d..(slot + 1) * d],
            &a_g[slot * d * r..(slot + 1) * d * r],
            1,
            d,
            r,
        );
        matmul_slices(
            delta,
            xa,
            &b_g[slot * r * h..(slot + 1) * r * h],
            1,
            r,
            h,
        );
    };
    if slots >= PAR_TOKEN_THRESHOLD {
        xa.par_chunks_mut(r)
            .zip(delta.par_chunks_mut(h))
            .enumerate()
            .for_each(|(slot, (xa, delta))| bmm(slot, xa, delta));
    } else {
        for (slot, (xa, delta)) in xa.chunks_mut(r).zip(delta.chunks_mut(h)).enumerate() {
            bmm(slot, xa, delta);
        }
    }

    // Weighted sum over each token's k slots, on top of the base term.
    let mut out = layer.base_term(batch);
    alloc.output_floats = (bs * h) as u64;
    let scale = T::from_f64(layer.scale);
    for t in 0..bs {
        let dst = &mut out[t * h..(t + 1) * h];
        for slot in 0..k {
            let w = scale * decisions[t].weights[slot];
            let src = &delta[(t * k + slot) * h..(t * k + slot + 1) * h];
            for j in 0..h {
                dst[j] = dst[j] + w * src[j];
            }
        }
    }

    Ok(ForwardOutput {
        output: Tensor::new(&[batch.batch(), batch.seq_len(), h], out)?,
        decisions,
        alloc,
    })
}

/// Blocked fused kernel; see [`blocked`] for the kernel itself. `m` is the
/// block count; when it matches the layer's prepared value the pre-built
/// A' stacks are used, otherwise a fresh prep is built for this call.
pub fn forward_blocked<T: Element>(
    layer: &MeteoraLayer<T>,
    batch: &TokenBatch<T>,
    m: usize,
) -> Result<ForwardOutput<T>> {
    forward_blocked_cfg(layer, batch, m, &layer.cfg)
}

fn forward_blocked_cfg<T: Element>(
    layer: &MeteoraLayer<T>,
    batch: &TokenBatch<T>,
    m: usize,
    cfg: &RoutingConfig,
) -> Result<ForwardOutput<T>> {
    layer.check_batch(batch)?;
    let (bs, h) = (batch.tokens(), layer.output_dim());
    let r = layer.bank.rank();
    let scale = T::from_f64(layer.scale);

    let mut alloc = AllocReport::default();
    let fresh_prep;
    let prep = if m == layer.prep.m {
        &layer.prep
    } else {
        fresh_prep = BlockedPrep::new(&layer.bank, m)?;
        alloc.workspace_floats += fresh_prep.resident_floats();
        &fresh_prep
    };

    let (decisions, routing_floats) = layer.route_tokens(batch, cfg)?;
    alloc.routing_floats = routing_floats;

    let mut out = layer.base_term(batch);
    alloc.output_floats = (bs * h) as u64;

    // One scratch set per worker, reused across its tokens the way the GPU
    // kernel reuses SRAM tiles across thread blocks.
    let run_token = |t: usize, dst: &mut [T], scratch: &mut blocked::BlockedScratch<T>| {
        let dec = &decisions[t];
        for (slot, &adapter) in dec.indices.iter().enumerate() {
            blocked::blocked_delta_acc(
                dst,
                batch.token(t),
                prep,
                &layer.bank,
                adapter,
                scale * dec.weights[slot],
                scratch,
            );
        }
    };
    if bs >= PAR_TOKEN_THRESHOLD {
        out.par_chunks_mut(h).enumerate().for_each_init(
            || blocked::BlockedScratch::new(prep.m, r, h, prep.padded_d),
            |scratch, (t, dst)| run_token(t, dst, scratch),
        );
        // Accounting uses the single-worker scratch footprint; worker count
        // is an execution detail, not part of the algorithm's residency.
        alloc.workspace_floats +=
            blocked::BlockedScratch::<T>::new(prep.m, r, h, prep.padded_d).floats();
    } else {
        let mut scratch = blocked::BlockedScratch::new(prep.m, r, h, prep.padded_d);
        alloc.workspace_floats += scratch.floats();
        for t in 0..bs {
            run_token(t, &mut out[t * h..(t + 1) * h], &mut scratch);
        }
    }

    Ok(ForwardOutput {
        output: Tensor::new(&[batch.batch(), batch.seq_len(), h], out)?,
        decisions,
        alloc,
    })
}

/// Convenience for tests and the toy model: random layer from a seed.
pub fn random_layer<T: Element>(
    n: usize,
    d: usize,
    r: usize,
    h: usize,
    cfg: RoutingConfig,
    seed: u64,
) -> MeteoraLayer<T> {
    use crate::lora::LoraAdapter;
    use crate::rng::Rng;
    let mut rng = Rng::new(seed);
    let w = Tensor::randn(&[d, h], 0.3, &mut rng);
    let adapters: Vec<LoraAdapter<T>> = (0..n)
        .map(|i| {
            LoraAdapter::new(
                format!("adapter{i}"),
                Tensor::randn(&[d, r], 0.3, &mut rng),
                Tensor::randn(&[r, h], 0.3, &mut rng),
                16.0,
            )
            .expect("adapter dims are valid")
        })
        .collect();
    let bank = LoraBank::stack(&adapters).expect("homogeneous adapters");
    let gate = GatingNetwork::init(d, n, 1.0, &mut rng);
    let scale = bank.default_scale();
    MeteoraLayer::new(w, bank, gate, cfg, scale).expect("layer dims are valid")
}
