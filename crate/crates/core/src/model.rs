//! Tiny decoder-only transformer with a routed adapter bank at every
//! linear layer.
//!
//! Architecture: token embeddings, pre-norm blocks (rms-norm, multi-head
//! causal attention with rotary position encoding, rms-norm, SiLU-gated
//! MLP), final rms-norm, tied unembedding. Rotary encoding makes attention
//! patterns depend on relative offsets only, so circuits learned on short
//! episodes keep working when the same episode appears deep inside a
//! longer composite prompt. Each block has seven adapter sites:
//! q, k, v, o, up, gating, down. The base weights are random at build time
//! and stay frozen forever; adapters and gates carry all task knowledge.
//!
//! Two forward implementations exist on purpose. The value-level forward
//! drives generation and evaluation through the moe kernels (strategy
//! selectable); the tape forward re-expresses the same computation as
//! recorded ops for training and gradient checking. A test pins them to
//! each other.

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraBank};
use crate::moe::{MeteoraLayer, Strategy, TokenBatch};
use crate::rng::Rng;
use crate::routing::{GatingNetwork, RoutingConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::{softmax_slice, topk_slice, Element, Tensor};
use crate::tasks::{SyntheticTask, SEG_LEN};
use crate::trace::{dominant_adapter, RoutingTrace, Segment, SiteRouting, SwitchReport, TokenTrace};

pub const SITES_PER_BLOCK: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Q,
    K,
    V,
    O,
    Up,
    Gating,
    Down,
}

impl Site {
    pub const ALL: [Site; SITES_PER_BLOCK] = [
        Site::Q,
        Site::K,
        Site::V,
        Site::O,
        Site::Up,
        Site::Gating,
        Site::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Up => "up",
            Site::Gating => "gating",
            Site::Down => "down",
        }
    }

    /// (input, output) dims of this site's linear map.
    pub fn dims(self, cfg: &ToyModelConfig) -> (usize, usize) {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        match self {
            Site::Q | Site::K | Site::V | Site::O => (d, d),
            Site::Up | Site::Gating => (d, f),
            Site::Down => (f, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab: 64,
            d_model: 64,
            heads: 4,
            blocks: 2,
            d_ff: 128,
            max_seq: 96,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab == 0 || self.blocks == 0 || self.max_seq < 2 {
            return Err(Error::Config("degenerate model config".into()));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.blocks * SITES_PER_BLOCK
    }
}

const RMS_EPS: f64 = 1e-6;
/// Attention mask value; finite so f32 softmax stays NaN-free.
const MASK_NEG: f64 = -1e9;

/// Which per-site map the forward applies on top of the frozen base.
pub enum SiteMode<'a, T: Element> {
    /// x W only.
    Base,
    /// Classic single-adapter pass: one adapter per site, fixed scale.
    Single {
        adapters: &'a [LoraAdapter<T>],
        scale: f64,
    },
    /// Full routed bank via the selected kernel; `routing` overrides the
    /// per-layer config (temperature sweeps at inference).
    Moe {
        strategy: Strategy,
        routing: Option<RoutingConfig>,
    },
}

#[derive(Clone)]
pub struct ToyModel<T: Element = f32> {
    cfg: ToyModelConfig,
    embedding: Tensor<T>,
    /// (rms1, rms2) per block, each (1, d).
    block_norms: Vec<(Tensor<T>, Tensor<T>)>,
    final_norm: Tensor<T>,
    /// Frozen base weight per site, indexed block * 7 + site.
    site_weights: Vec<Tensor<T>>,
    /// Routed banks and gates, present once banks are attached.
    moe_sites: Option<Vec<MeteoraLayer<T>>>,
    adapter_names: Vec<String>,
}

impl<T: Element> ToyModel<T> {
    /// Deterministic random base from a seed; everything here is frozen.
    pub fn build(cfg: ToyModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut emb_rng = root.fork(1);
        let mut w_rng = root.fork(3);

        let embedding = Tensor::randn(&[cfg.vocab, cfg.d_model], 1.0, &mut emb_rng);
        let w_std = 1.0 / (cfg.d_model as f64).sqrt();

        let mut block_norms = Vec::with_capacity(cfg.blocks);
        let mut site_weights = Vec::with_capacity(cfg.n_sites());
        for _ in 0..cfg.blocks {
            block_norms.push((
                Tensor::full(&[1, cfg.d_model], T::one()),
                Tensor::full(&[1, cfg.d_model], T::one()),
            ));
            for site in Site::ALL {
                let (din, dout) = site.dims(&cfg);
                site_weights.push(Tensor::randn(&[din, dout], w_std, &mut w_rng));
            }
        }
        Ok(ToyModel {
            final_norm: Tensor::full(&[1, cfg.d_model], T::one()),
            cfg,
            embedding,
            block_norms,
            site_weights,
            moe_sites: None,
            adapter_names: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn site_weight(&self, idx: usize) -> &Tensor<T> {
        &self.site_weights[idx]
    }

    /// Replace a base site weight. Only valid before banks are attached;
    /// exists for the full-rank learnability oracle, not for training
    /// protocols (those freeze the base).
    pub fn set_site_weight(&mut self, idx: usize, w: Tensor<T>) -> Result<()> {
        self.frozen_guard()?;
        if w.shape() != self.site_weights[idx].shape() {
            return Err(Error::Dimension {
                op: "set_site_weight",
                lhs: w.shape().to_vec(),
                rhs: self.site_weights[idx].shape().to_vec(),
            });
        }
        self.site_weights[idx] = w;
        Ok(())
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.embedding
    }

    pub fn block_norms(&self, block: usize) -> (&Tensor<T>, &Tensor<T>) {
        let (a, b) = &self.block_norms[block];
        (a, b)
    }

    pub fn final_norm(&self) -> &Tensor<T> {
        &self.final_norm
    }

    /// Artifact-loading hooks; all reject changes once banks are attached
    /// and all validate shapes.
    pub fn set_embedding(&mut self, t: Tensor<T>) -> Result<()> {
        self.frozen_guard()?;
        if t.shape() != self.embedding.shape() {
            return Err(Error::Dimension {
                op: "set_embedding",
                lhs: t.shape().to_vec(),
                rhs: self.embedding.shape().to_vec(),
            });
        }
        self.embedding = t;
        Ok(())
    }

    pub fn set_block_norms(&mut self, block: usize, rms1: Tensor<T>, rms2: Tensor<T>) -> Result<()> {
        self.frozen_guard()?;
        let want = self.block_norms[block].0.shape().to_vec();
        if rms1.shape() != want || rms2.shape() != want {
            return Err(Error::Dimension {
                op: "set_block_norms",
                lhs: rms1.shape().to_vec(),
                rhs: want,
            });
        }
        self.block_norms[block] = (rms1, rms2);
        Ok(())
    }

    pub fn set_final_norm(&mut self, t: Tensor<T>) -> Result<()> {
        self.frozen_guard()?;
        if t.shape() != self.final_norm.shape() {
            return Err(Error::Dimension {
                op: "set_final_norm",
                lhs: t.shape().to_vec(),
                rhs: self.final_norm.shape().to_vec(),
            });
        }
        self.final_norm = t;
        Ok(())
    }

    fn frozen_guard(&self) -> Result<()> {
        if self.moe_sites.is_some() {
            return Err(Error::Config(
                "cannot modify base weights after banks are attached".into(),
            ));
        }
        Ok(())
    }

    /// Attach already-stacked banks (artifact loading); gates start at the
    /// seeded init and are replaced by [`ToyModel::set_gates`] when stored.
    pub fn attach_prebuilt_banks(
        &mut self,
        banks: Vec<LoraBank<T>>,
        routing: RoutingConfig,
        gate_seed: u64,
    ) -> Result<()> {
        let n_sites = self.cfg.n_sites();
        if banks.len() != n_sites {
            return Err(Error::Config(format!(
                "expected {n_sites} banks, got {}",
                banks.len()
            )));
        }
        let names = banks[0].names().to_vec();
        let mut gate_rng = Rng::new(gate_seed).fork(4);
        let mut layers = Vec::with_capacity(n_sites);
        for (site_idx, bank) in banks.into_iter().enumerate() {
            let (din, _) = self.site_weights[site_idx].dims2()?;
            let gate = GatingNetwork::init(din, bank.len(), 0.02, &mut gate_rng);
            let scale = bank.default_scale();
            layers.push(MeteoraLayer::new(
                self.site_weights[site_idx].clone(),
                bank,
                gate,
                routing,
                scale,
            )?);
        }
        self.adapter_names = names;
        self.moe_sites = Some(layers);
        Ok(())
    }

    /// Replace all gate weights (artifact loading / gate training output).
    pub fn set_gates(&mut self, gates: Vec<GatingNetwork<T>>) -> Result<()> {
        let sites = self.moe_sites_mut()?;
        if gates.len() != sites.len() {
            return Err(Error::Config(format!(
                "expected {} gates, got {}",
                sites.len(),
                gates.len()
            )));
        }
        for (layer, gate) in sites.iter_mut().zip(gates) {
            layer.set_gate(gate)?;
        }
        Ok(())
    }

    pub fn adapter_names(&self) -> &[String] {
        &self.adapter_names
    }

    pub fn has_moe(&self) -> bool {
        self.moe_sites.is_some()
    }

    pub fn moe_sites(&self) -> Result<&[MeteoraLayer<T>]> {
        self.moe_sites
            .as_deref()
            .ok_or_else(|| Error::Config("model has no adapter banks attached".into()))
    }

    pub fn moe_sites_mut(&mut self) -> Result<&mut [MeteoraLayer<T>]> {
        self.moe_sites
            .as_deref_mut()
            .ok_or_else(|| Error::Config("model has no adapter banks attached".into()))
    }

    /// Stack one adapter set per task into per-site banks, attach fresh
    /// seeded gates. `adapters_by_task[t]` holds task t's adapters in site
    /// order. Gating networks decide per site on their own inputs.
    pub fn attach_banks(
        &mut self,
        adapters_by_task: &[(String, Vec<LoraAdapter<T>>)],
        k: usize,
        gate_seed: u64,
    ) -> Result<()> {
        if adapters_by_task.is_empty() {
            return Err(Error::Config("no adapter sets to attach".into()));
        }
        let n_sites = self.cfg.n_sites();
        for (name, set) in adapters_by_task {
            if set.len() != n_sites {
                return Err(Error::Config(format!(
                    "adapter set '{name}' has {} adapters, expected {n_sites}",
                    set.len()
                )));
            }
        }
        let mut gate_rng = Rng::new(gate_seed).fork(4);
        let mut layers = Vec::with_capacity(n_sites);
        for site_idx in 0..n_sites {
            let per_site: Vec<LoraAdapter<T>> = adapters_by_task
                .iter()
                .map(|(name, set)| {
                    let mut ad = set[site_idx].clone();
                    ad.name = name.clone();
                    ad
                })
                .collect();
            let bank = LoraBank::stack(&per_site)?;
            let (din, _) = self.site_weights[site_idx].dims2()?;
            let gate = GatingNetwork::init(din, bank.len(), 0.02, &mut gate_rng);
            let scale = bank.default_scale();
            layers.push(MeteoraLayer::new(
                self.site_weights[site_idx].clone(),
                bank,
                gate,
                RoutingConfig::new(k),
                scale,
            )?);
        }
        self.adapter_names = adapters_by_task
            .iter()
            .map(|(name, _)| name.clone())
            .collect();
        self.moe_sites = Some(layers);
        Ok(())
    }

    pub fn set_routing_all(&mut self, cfg: RoutingConfig) -> Result<()> {
        for layer in self.moe_sites_mut()? {
            layer.set_routing(cfg)?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ToyModel<U> {
        ToyModel {
            cfg: self.cfg.clone(),
            embedding: self.embedding.cast(),
            block_norms: self
                .block_norms
                .iter()
                .map(|(a, b)| (a.cast(), b.cast()))
                .collect(),
            final_norm: self.final_norm.cast(),
            site_weights: self.site_weights.iter().map(Tensor::cast).collect(),
            moe_sites: self
                .moe_sites
                .as_ref()
                .map(|sites| sites.iter().map(MeteoraLayer::cast).collect()),
            adapter_names: self.adapter_names.clone(),
        }
    }

    /// FNV-1a over the bit patterns of every frozen base tensor; used by
    /// the frozen-parameter tests.
    pub fn base_digest(&self) -> u64 {
        let mut hasher = BitDigest::new();
        hasher.update(&self.embedding);
        for (a, b) in &self.block_norms {
            hasher.update(a);
            hasher.update(b);
        }
        hasher.update(&self.final_norm);
        for w in &self.site_weights {
            hasher.update(w);
        }
        if let Some(sites) = &self.moe_sites {
            for layer in sites {
                hasher.update(layer.w_base());
            }
        }
        hasher.finish()
    }

    /// Digest over the stacked bank tensors.
    pub fn bank_digest(&self) -> u64 {
        let mut hasher = BitDigest::new();
        if let Some(sites) = &self.moe_sites {
            for layer in sites {
                hasher.update(layer.bank().a_stack());
                hasher.update(layer.bank().b_stack());
            }
        }
        hasher.finish()
    }

    /// Digest over the gate weights.
    pub fn gate_digest(&self) -> u64 {
        let mut hasher = BitDigest::new();
        if let Some(sites) = &self.moe_sites {
            for layer in sites {
                hasher.update(layer.gate().weight());
            }
        }
        hasher.finish()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Parameter("token sequence is empty".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Generation(format!(
                "sequence of {} tokens exceeds context window {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Parameter(format!(
                "token id {bad} out of vocab {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    fn apply_site(
        &self,
        site_idx: usize,
        x: &Tensor<T>, // (s, din)
        mode: &SiteMode<'_, T>,
        routing_out: Option<&mut Vec<Vec<SiteRouting>>>,
    ) -> Result<Tensor<T>> {
        let (s, _) = x.dims2()?;
        match mode {
            SiteMode::Base => x.matmul(&self.site_weights[site_idx]),
            SiteMode::Single { adapters, scale } => {
                let ad = &adapters[site_idx];
                let base = x.matmul(&self.site_weights[site_idx])?;
                let delta = x.matmul(&ad.a)?.matmul(&ad.b)?.scale(T::from_f64(*scale));
                base.add(&delta)
            }
            SiteMode::Moe { strategy, routing } => {
                let layer = &self.moe_sites()?[site_idx];
                let batch = TokenBatch::single(x.clone())?;
                let fwd = match routing {
                    None => layer.forward(&batch, *strategy)?,
                    Some(cfg) => layer.forward_cfg(&batch, *strategy, cfg)?,
                };
                if let Some(collect) = routing_out {
                    let block = site_idx / SITES_PER_BLOCK;
                    let site = Site::ALL[site_idx % SITES_PER_BLOCK];
                    for t in 0..s {
                        let dec = &fwd.decisions[t];
                        collect[t].push(SiteRouting {
                            block,
                            site: site.name().to_string(),
                            indices: dec.indices.clone(),
                            weights: dec.weights.iter().map(|w| w.as_f64()).collect(),
                        });
                    }
                }
                fwd.output.reshaped(&[s, layer.output_dim()])
            }
        }
    }

    /// Value-level forward over one sequence: returns (s, vocab) logits and,
    /// if requested, per-position routing for every site.
    pub fn forward(
        &self,
        tokens: &[usize],
        mode: &SiteMode<'_, T>,
        collect_routing: bool,
    ) -> Result<(Tensor<T>, Option<Vec<Vec<SiteRouting>>>)> {
        self.check_tokens(tokens)?;
        let (s, d) = (tokens.len(), self.cfg.d_model);
        let heads = self.cfg.heads;
        let dh = d / heads;

        let mut routing: Option<Vec<Vec<SiteRouting>>> = if collect_routing {
            Some(vec![Vec::with_capacity(self.cfg.n_sites()); s])
        } else {
            None
        };

        let mut xdata = Vec::with_capacity(s * d);
        for &tok in tokens {
            xdata.extend_from_slice(&self.embedding.data()[tok * d..(tok + 1) * d]);
        }
        let mut x = Tensor::new(&[s, d], xdata)?;
        let rope = RotaryTables::<T>::new(s, dh);

        for block in 0..self.cfg.blocks {
            let base = block * SITES_PER_BLOCK;
            let (rms1, rms2) = &self.block_norms[block];

            // attention
            let xn = rmsnorm_rows(&x, rms1);
            let mut q = self.apply_site(base, &xn, mode, routing.as_mut())?;
            let mut k = self.apply_site(base + 1, &xn, mode, routing.as_mut())?;
            let v = self.apply_site(base + 2, &xn, mode, routing.as_mut())?;
            for head in 0..heads {
                rope.rotate(q.data_mut(), s, d, head * dh);
                rope.rotate(k.data_mut(), s, d, head * dh);
            }
            let mut ctx = Tensor::<T>::zeros(&[s, d]);
            for head in 0..heads {
                attention_head(
                    ctx.data_mut(),
                    q.data(),
                    k.data(),
                    v.data(),
                    s,
                    d,
                    head * dh,
                    dh,
                )?;
            }
            let attn = self.apply_site(base + 3, &ctx, mode, routing.as_mut())?;
            x = x.add(&attn)?;

            // SiLU-gated MLP
            let xn2 = rmsnorm_rows(&x, rms2);
            let up = self.apply_site(base + 4, &xn2, mode, routing.as_mut())?;
            let gated = self.apply_site(base + 5, &xn2, mode, routing.as_mut())?;
            let act = Tensor::new(
                up.shape(),
                up.data()
                    .iter()
                    .zip(gated.data())
                    .map(|(&u, &g)| u * (g / (T::one() + (-g).exp())))
                    .collect(),
            )?;
            let mlp = self.apply_site(base + 6, &act, mode, routing.as_mut())?;
            x = x.add(&mlp)?;
        }

        let h = rmsnorm_rows(&x, &self.final_norm);
        // Tied unembedding, scaled like attention scores so base logits
        // start near-uniform instead of confidently random.
        let logits = h
            .matmul(&self.embedding.transposed()?)?
            .scale(T::from_f64(1.0 / (d as f64).sqrt()));
        Ok((logits, routing))
    }

    /// Greedy argmax decoding. Returns the generated tokens (prompt not
    /// included) and a routing trace covering prompt and generation.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_tokens: usize,
        strategy: Strategy,
        temperature: f64,
    ) -> Result<(Vec<usize>, RoutingTrace)> {
        let segments = [DriveSegment::Forced(prompt.to_vec()), DriveSegment::Generate(max_tokens)];
        let (seq, trace) = self.drive(&segments, strategy, temperature)?;
        Ok((seq[prompt.len()..].to_vec(), trace))
    }

    /// Mixed forced/free decoding: forced segments are consumed as-is,
    /// generate segments are produced greedily. The returned trace covers
    /// the full final sequence; by causality the routing recorded for any
    /// position equals the routing in effect when that position was first
    /// processed.
    pub fn drive(
        &self,
        segments: &[DriveSegment],
        strategy: Strategy,
        temperature: f64,
    ) -> Result<(Vec<usize>, RoutingTrace)> {
        let n_adapters = self.moe_sites()?[0].n_adapters();
        let total: usize = segments
            .iter()
            .map(|seg| match seg {
                DriveSegment::Forced(toks) => toks.len(),
                DriveSegment::Generate(count) => *count,
            })
            .sum();
        match segments.first() {
            Some(DriveSegment::Forced(toks)) if !toks.is_empty() => {}
            _ => return Err(Error::Parameter("drive must start with a non-empty prompt".into())),
        }
        if total > self.cfg.max_seq {
            return Err(Error::Generation(format!(
                "prompt plus generation of {total} tokens exceeds context window {}",
                self.cfg.max_seq
            )));
        }

        let routing = RoutingConfig {
            k: self.moe_sites()?[0].routing().k,
            temperature,
        };
        let mode = SiteMode::Moe {
            strategy,
            routing: Some(routing),
        };

        let mut seq: Vec<usize> = Vec::with_capacity(total);
        for segment in segments {
            match segment {
                DriveSegment::Forced(toks) => seq.extend_from_slice(toks),
                DriveSegment::Generate(count) => {
                    for _ in 0..*count {
                        let (logits, _) = self.forward(&seq, &mode, false)?;
                        let (s, v) = logits.dims2()?;
                        let last = &logits.data()[(s - 1) * v..s * v];
                        seq.push(topk_slice(last, 1)?[0]);
                    }
                }
            }
        }

        // One full pass over the final sequence collects the trace.
        let (_, collected) = self.forward(&seq, &mode, true)?;
        let per_pos = collected.expect("routing requested");
        let tokens = seq
            .iter()
            .zip(per_pos)
            .enumerate()
            .map(|(step, (&token, per_site))| {
                let dominant = dominant_adapter(&per_site, n_adapters);
                TokenTrace {
                    step,
                    token,
                    per_site,
                    dominant,
                }
            })
            .collect();
        Ok((
            seq,
            RoutingTrace {
                tokens,
                adapter_names: self.adapter_names.clone(),
            },
        ))
    }
}

/// One span of a driven sequence.
#[derive(Debug, Clone)]
pub enum DriveSegment {
    Forced(Vec<usize>),
    Generate(usize),
}

/// Everything a composite evaluation produces.
#[derive(Debug, Clone)]
pub struct CompositeOutcome {
    pub sequence: Vec<usize>,
    pub trace: RoutingTrace,
    pub segments: Vec<Segment>,
    pub report: SwitchReport,
}

impl<T: Element> ToyModel<T> {
    /// Composite evaluation: two worked examples, then one question per
    /// task in order; answers are generated, questions are forced. Returns
    /// per-segment dominance and boundary switch offsets over the full
    /// trace (input consumption and generation both count).
    pub fn composite_eval(
        &self,
        tasks: &[SyntheticTask],
        strategy: Strategy,
        temperature: f64,
        seed: u64,
    ) -> Result<CompositeOutcome> {
        if tasks.len() < 2 {
            return Err(Error::Parameter(
                "composite evaluation needs at least two task segments".into(),
            ));
        }
        self.moe_sites()?;
        let mut rng = Rng::new(seed).fork(0xc0);

        let mut drive = Vec::new();
        let mut segments = Vec::new();
        let mut cursor = 0usize;

        // Two worked examples, drawn from the composite's own tasks.
        for shot in 0..2 {
            let task = &tasks[shot % tasks.len()];
            let ep = task.gen_episode(&mut rng);
            segments.push(Segment {
                task: task.id,
                name: task.name().to_string(),
                start: cursor,
                end: cursor + ep.tokens.len(),
            });
            cursor += ep.tokens.len();
            drive.push(DriveSegment::Forced(ep.tokens));
        }

        // Questions: forced prompt, generated answer.
        for task in tasks {
            let ep = task.gen_episode(&mut rng);
            let question = ep.question().to_vec();
            let span = question.len() + SEG_LEN;
            segments.push(Segment {
                task: task.id,
                name: task.name().to_string(),
                start: cursor,
                end: cursor + span,
            });
            cursor += span;
            drive.push(DriveSegment::Forced(question));
            drive.push(DriveSegment::Generate(SEG_LEN));
        }

        let (sequence, trace) = self.drive(&drive, strategy, temperature)?;
        let report = SwitchReport::from_trace(&trace, &segments);
        Ok(CompositeOutcome {
            sequence,
            trace,
            segments,
            report,
        })
    }
}

/// Rotary position tables: cos/sin of p * theta_j for j < dh/2, with the
/// LLaMA pairing (j, j + dh/2).
struct RotaryTables<T: Element> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

pub(crate) const ROPE_BASE: f64 = 10_000.0;

impl<T: Element> RotaryTables<T> {
    fn new(s: usize, dh: usize) -> Self {
        let half = dh / 2;
        let mut cos = Vec::with_capacity(s * half);
        let mut sin = Vec::with_capacity(s * half);
        for p in 0..s {
            for j in 0..half {
                let theta = (p as f64) * ROPE_BASE.powf(-2.0 * j as f64 / dh as f64);
                cos.push(T::from_f64(theta.cos()));
                sin.push(T::from_f64(theta.sin()));
            }
        }
        RotaryTables { cos, sin, half }
    }

    /// Rotate the dh columns starting at `off` of a (s, d) matrix in place.
    fn rotate(&self, data: &mut [T], s: usize, d: usize, off: usize) {
        for p in 0..s {
            let row = &mut data[p * d + off..p * d + off + 2 * self.half];
            for j in 0..self.half {
                let (c, sn) = (self.cos[p * self.half + j], self.sin[p * self.half + j]);
                let (a, b) = (row[j], row[j + self.half]);
                row[j] = a * c - b * sn;
                row[j + self.half] = a * sn + b * c;
            }
        }
    }

    /// (s, dh) cos/sin tables expanded to full width for the tape path.
    fn tables(&self, s: usize) -> (Vec<T>, Vec<T>) {
        let mut cos = Vec::with_capacity(s * 2 * self.half);
        let mut sin = Vec::with_capacity(s * 2 * self.half);
        for p in 0..s {
            let row = &self.cos[p * self.half..(p + 1) * self.half];
            cos.extend_from_slice(row);
            cos.extend_from_slice(row);
            let row = &self.sin[p * self.half..(p + 1) * self.half];
            sin.extend_from_slice(row);
            sin.extend_from_slice(row);
        }
        (cos, sin)
    }
}

/// Per-row rms-norm with gain, value-level.
fn rmsnorm_rows<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>) -> Tensor<T> {
    let (s, d) = x.dims2().expect("rmsnorm on 2-D");
    let g = gamma.data();
    let mut out = vec![T::zero(); s * d];
    for i in 0..s {
        let row = &x.data()[i * d..(i + 1) * d];
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v).as_f64() / d as f64;
        let inv = T::from_f64(1.0 / (ms + RMS_EPS).sqrt());
        for j in 0..d {
            out[i * d + j] = row[j] * g[j] * inv;
        }
    }
    Tensor::new(&[s, d], out).expect("shape preserved")
}

/// Causal single-head attention on column range [off, off+dh), accumulated
/// into ctx.
#[allow(clippy::too_many_arguments)]
fn attention_head<T: Element>(
    ctx: &mut [T],
    q: &[T],
    k: &[T],
    v: &[T],
    s: usize,
    d: usize,
    off: usize,
    dh: usize,
) -> Result<()> {
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut scores = vec![T::zero(); s];
    let mut probs = vec![T::zero(); s];
    for i in 0..s {
        // causal: keys 0..=i
        for j in 0..=i {
            let mut acc = T::zero();
            for c in 0..dh {
                acc = acc + q[i * d + off + c] * k[j * d + off + c];
            }
            scores[j] = acc * inv_sqrt;
        }
        softmax_slice(&mut probs[..=i], &scores[..=i], 1.0)?;
        for j in 0..=i {
            let p = probs[j];
            for c in 0..dh {
                ctx[i * d + off + c] = ctx[i * d + off + c] + p * v[j * d + off + c];
            }
        }
    }
    Ok(())
}

/// Incremental FNV-1a over tensor bit patterns.
struct BitDigest(u64);

impl BitDigest {
    fn new() -> Self {
        BitDigest(0xcbf2_9ce4_8422_2325)
    }

    fn update<T: Element>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            for byte in v.as_f64().to_bits().to_le_bytes() {
                self.0 ^= byte as u64;
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Tape forward: the same architecture as recorded, differentiable ops.
// ---------------------------------------------------------------------------

/// How sites behave inside the recorded forward.
pub enum TapeMode<'a, T: Element> {
    /// One adapter per site; when `trainable`, A/B register as params with
    /// ids (2 * site, 2 * site + 1).
    SingleAdapter {
        adapters: &'a [LoraAdapter<T>],
        scale: f64,
        trainable: bool,
    },
    /// Routed banks, frozen; gate weights register as params with id =
    /// site index. `gate_label` adds one classification loss per site.
    Moe { k: usize, gate_label: Option<usize> },
    /// Full-rank training of the base site weights themselves (param id =
    /// site index). Only used as a learnability oracle in tests: if a task
    /// is learnable at all at these dims, it is learnable this way.
    BaseTrainable,
}

/// A recorded forward pass plus the handles training needs.
pub struct TapeForward<T: Element> {
    pub tape: Tape<T>,
    /// (s, vocab) logits node.
    pub logits: NodeId,
    /// One full-vocab classification loss per site (Moe mode with labels).
    pub site_ce: Vec<NodeId>,
    /// Top-k selections made at each site, per position; constants of the
    /// graph (the straight-through contract).
    pub selections: Vec<Vec<Vec<usize>>>,
}

impl<T: Element> ToyModel<T> {
    /// Record the model forward on a tape.
    pub fn build_tape(&self, tokens: &[usize], mode: &TapeMode<'_, T>) -> Result<TapeForward<T>> {
        self.check_tokens(tokens)?;
        let (s, d) = (tokens.len(), self.cfg.d_model);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let mut tape = Tape::new();
        let mut site_ce = Vec::new();
        let mut selections = Vec::new();

        // Embeddings enter as constants: they are frozen in every protocol.
        let emb = tape.constant(self.embedding.clone());
        let mut x = tape.embedding(emb, tokens)?;

        // Rotary constants for this sequence length.
        let rope = RotaryTables::<T>::new(s, dh);
        let (cos_data, sin_data) = rope.tables(s);
        let cos = tape.constant(Tensor::new(&[s, dh], cos_data)?);
        let sin = tape.constant(Tensor::new(&[s, dh], sin_data)?);

        // Shared causal mask for this length.
        let mut mask = Tensor::<T>::zeros(&[s, s]);
        for i in 0..s {
            for j in i + 1..s {
                mask.data_mut()[i * s + j] = T::from_f64(MASK_NEG);
            }
        }

        for block in 0..self.cfg.blocks {
            let base = block * SITES_PER_BLOCK;
            let (rms1, rms2) = &self.block_norms[block];
            let g1 = tape.constant(rms1.clone());
            let g2 = tape.constant(rms2.clone());

            let xn = tape.rmsnorm(x, g1, RMS_EPS)?;
            let q = self.tape_site(&mut tape, base, xn, mode, &mut site_ce, &mut selections, tokens)?;
            let k = self.tape_site(&mut tape, base + 1, xn, mode, &mut site_ce, &mut selections, tokens)?;
            let v = self.tape_site(&mut tape, base + 2, xn, mode, &mut site_ce, &mut selections, tokens)?;

            let mut head_ctx = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh_raw = tape.slice_cols(q, head * dh, dh)?;
                let kh_raw = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let qh = rotate_node(&mut tape, qh_raw, cos, sin, dh)?;
                let kh = rotate_node(&mut tape, kh_raw, cos, sin, dh)?;
                let kt = tape.transpose(kh)?;
                let raw = tape.matmul(qh, kt)?;
                let scaled = tape.scale(raw, 1.0 / (dh as f64).sqrt());
                let masked = tape.add_const(scaled, mask.clone())?;
                let probs = tape.softmax_rows(masked, 1.0)?;
                head_ctx.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&head_ctx)?;
            let attn = self.tape_site(&mut tape, base + 3, ctx, mode, &mut site_ce, &mut selections, tokens)?;
            x = tape.add(x, attn)?;

            let xn2 = tape.rmsnorm(x, g2, RMS_EPS)?;
            let up = self.tape_site(&mut tape, base + 4, xn2, mode, &mut site_ce, &mut selections, tokens)?;
            let gated = self.tape_site(&mut tape, base + 5, xn2, mode, &mut site_ce, &mut selections, tokens)?;
            let act = tape.silu(gated);
            let prod = tape.mul(act, up)?;
            let mlp = self.tape_site(&mut tape, base + 6, prod, mode, &mut site_ce, &mut selections, tokens)?;
            x = tape.add(x, mlp)?;
        }

        let gf = tape.constant(self.final_norm.clone());
        let h = tape.rmsnorm(x, gf, RMS_EPS)?;
        let unembed = tape.constant(self.embedding.transposed()?);
        let raw = tape.matmul(h, unembed)?;
        let logits = tape.scale(raw, 1.0 / (d as f64).sqrt());
        Ok(TapeForward {
            tape,
            logits,
            site_ce,
            selections,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn tape_site(
        &self,
        tape: &mut Tape<T>,
        site_idx: usize,
        x: NodeId,
        mode: &TapeMode<'_, T>,
        site_ce: &mut Vec<NodeId>,
        selections: &mut Vec<Vec<Vec<usize>>>,
        tokens: &[usize],
    ) -> Result<NodeId> {
        if let TapeMode::BaseTrainable = mode {
            let w = tape.param(self.site_weights[site_idx].clone(), site_idx);
            return tape.matmul(x, w);
        }
        let w = tape.constant(self.site_weights[site_idx].clone());
        match mode {
            TapeMode::SingleAdapter {
                adapters,
                scale,
                trainable,
            } => {
                let ad = &adapters[site_idx];
                let a = if *trainable {
                    tape.param(ad.a.clone(), 2 * site_idx)
                } else {
                    tape.constant(ad.a.clone())
                };
                let b = if *trainable {
                    tape.param(ad.b.clone(), 2 * site_idx + 1)
                } else {
                    tape.constant(ad.b.clone())
                };
                let base = tape.matmul(x, w)?;
                let xa = tape.matmul(x, a)?;
                let delta = tape.matmul(xa, b)?;
                let scaled = tape.scale(delta, *scale);
                tape.add(base, scaled)
            }
            TapeMode::BaseTrainable => unreachable!("handled above"),
            TapeMode::Moe { k, gate_label } => {
                let layer = &self.moe_sites()?[site_idx];
                let s = tokens.len();
                let wg = tape.param(layer.gate().weight().clone(), site_idx);
                let logits = tape.matmul(x, wg)?;

                // Selection on detached logit values; enters as constants.
                let idx: Vec<Vec<usize>> = (0..s)
                    .map(|i| topk_slice(tape.value(logits).row(i), *k))
                    .collect::<Result<_>>()?;
                let gathered = tape.gather_cols(logits, &idx)?;
                let weights = tape.softmax_rows(gathered, 1.0)?;

                let mut out = tape.matmul(x, w)?;
                let mut active: Vec<usize> = idx.iter().flatten().copied().collect();
                active.sort_unstable();
                active.dedup();
                for adapter in active {
                    let mut mask = Tensor::<T>::zeros(&[s, *k]);
                    for (i, row) in idx.iter().enumerate() {
                        for (slot, &a) in row.iter().enumerate() {
                            if a == adapter {
                                mask.data_mut()[i * *k + slot] = T::one();
                            }
                        }
                    }
                    let mask = tape.constant(mask);
                    let picked = tape.mul(weights, mask)?;
                    let w_col = tape.row_sum(picked)?;

                    let a_mat = Tensor::new(
                        &[layer.input_dim(), layer.bank().rank()],
                        layer.bank().a_slice(adapter).to_vec(),
                    )?;
                    let b_mat = Tensor::new(
                        &[layer.bank().rank(), layer.output_dim()],
                        layer.bank().b_slice(adapter).to_vec(),
                    )?;
                    let a_node = tape.constant(a_mat);
                    let b_node = tape.constant(b_mat);
                    let xa = tape.matmul(x, a_node)?;
                    let delta = tape.matmul(xa, b_node)?;
                    let weighted = tape.mul_col(w_col, delta)?;
                    let scaled = tape.scale(weighted, layer.scale());
                    out = tape.add(out, scaled)?;
                }

                if let Some(label) = gate_label {
                    let labels = vec![*label; s];
                    site_ce.push(tape.cross_entropy_mean(logits, &labels)?);
                }
                selections.push(idx);
                Ok(out)
            }
        }
    }
}

/// Next-token LM loss over rows `[from, s-1)`: logits row i predicts
/// token i+1. `from` masks the question part when only answers count.
pub fn lm_loss_node<T: Element>(
    tape: &mut Tape<T>,
    logits: NodeId,
    tokens: &[usize],
    from: usize,
) -> Result<NodeId> {
    let s = tokens.len();
    if s < 2 || from + 1 >= s {
        return Err(Error::Parameter(
            "lm loss needs at least one predicted position".into(),
        ));
    }
    lm_loss_ranges(tape, logits, tokens, &[(from, s - 1 - from)])
}

/// Masked LM loss over several row ranges: each (start, len) range of
/// logits rows predicts tokens[start+1 ..= start+len]. The result is the
/// mean over all predicted positions.
pub fn lm_loss_ranges<T: Element>(
    tape: &mut Tape<T>,
    logits: NodeId,
    tokens: &[usize],
    ranges: &[(usize, usize)],
) -> Result<NodeId> {
    let total: usize = ranges.iter().map(|&(_, len)| len).sum();
    if total == 0 {
        return Err(Error::Parameter(
            "lm loss needs at least one predicted position".into(),
        ));
    }
    let mut terms = Vec::with_capacity(ranges.len());
    for &(start, len) in ranges {
        if start + len + 1 > tokens.len() {
            return Err(Error::Parameter(format!(
                "lm loss range ({start}, {len}) exceeds sequence of {}",
                tokens.len()
            )));
        }
        let rows = tape.slice_rows(logits, start, len)?;
        let targets: Vec<usize> = tokens[start + 1..start + 1 + len].to_vec();
        let ce = tape.cross_entropy_mean(rows, &targets)?;
        terms.push((len as f64 / total as f64, ce));
    }
    tape.scalar_combine(&terms)
}


/// Rotary encoding as tape ops: out = x . cos + rotate_half(x) . sin,
/// where rotate_half([a, b]) = [-b, a] over the two half-blocks.
fn rotate_node<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    cos: NodeId,
    sin: NodeId,
    dh: usize,
) -> Result<NodeId> {
    let half = dh / 2;
    let lo = tape.slice_cols(x, 0, half)?;
    let hi = tape.slice_cols(x, half, half)?;
    let neg_hi = tape.scale(hi, -1.0);
    let rotated = tape.concat_cols(&[neg_hi, lo])?;
    let cos_term = tape.mul(x, cos)?;
    let sin_term = tape.mul(rotated, sin)?;
    tape.add(cos_term, sin_term)
}
