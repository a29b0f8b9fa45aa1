//! Gate training under the joint loss, adapter training, and gradient
//! verification against central finite differences.
//!
//! Training never touches frozen state by construction: the recorded
//! forward registers only the tensors being trained as parameters, so the
//! backward pass cannot produce gradients for anything else. Gate training
//! updates gate weights with plain SGD; adapter training uses Adam (rank-8
//! factors on a random frozen base need per-coordinate step sizes to make
//! progress in a reasonable number of steps).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{lm_loss_node, lm_loss_ranges, Site, TapeMode, ToyModel};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tasks::{GateSample, SyntheticTask};
use crate::tensor::{Element, Tensor};

/// -log softmax(logits)[label] over all n classes (value-level).
pub fn gate_ce_loss<T: Element>(logits: &Tensor<T>, label: usize) -> Result<f64> {
    let n = match logits.shape()[..] {
        [n] => n,
        _ => {
            return Err(Error::Parameter(format!(
                "gate_ce_loss expects 1-D logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if label >= n {
        return Err(Error::Parameter(format!(
            "label {label} out of range for {n} adapters"
        )));
    }
    let mut probs = vec![T::zero(); n];
    crate::tensor::softmax_slice(&mut probs, logits.data(), 1.0)?;
    Ok(-probs[label].as_f64().max(1e-300).ln())
}

/// Joint loss: lm + beta * sum of all per-module gate losses.
pub fn joint_loss(lm_loss: f64, gate_losses: &[f64], beta: f64) -> Result<f64> {
    if gate_losses.is_empty() {
        return Err(Error::Parameter("joint_loss needs at least one gate term".into()));
    }
    Ok(lm_loss + beta * gate_losses.iter().sum::<f64>())
}

/// Truncated top-1 loss: classification terms only, no lm term.
pub fn top1_loss(gate_losses: &[f64]) -> Result<f64> {
    joint_loss(0.0, gate_losses, 1.0)
}

/// Which loss shapes gate training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossMode {
    /// Classification-only loss; routing runs with k = 1.
    Top1,
    /// Joint lm + beta * gate loss with top-k routing.
    TopK(usize),
}

impl LossMode {
    pub fn k(self) -> usize {
        match self {
            LossMode::Top1 => 1,
            LossMode::TopK(k) => k,
        }
    }

    pub fn name(self) -> String {
        match self {
            LossMode::Top1 => "top1".into(),
            LossMode::TopK(k) => format!("top{k}"),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Gate-loss weight in the joint loss.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            lr: 5e-2,
            epochs: 50,
            batch_size: 8,
            mode: LossMode::Top1,
            seed: 0,
        }
    }
}

/// Per-epoch mean losses, in the order they appear in the loss CSV.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lm_loss: f64,
    pub gate_loss: f64,
    pub total: f64,
}

/// Per-sample loss pieces: the scalar node to differentiate plus the
/// reporting numbers.
fn sample_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: NodeId,
    site_ce: &[NodeId],
    tokens: &[usize],
    mode: LossMode,
    beta: f64,
) -> Result<(NodeId, f64, f64)> {
    let lm = lm_loss_node(tape, logits, tokens, 0)?;
    let lm_value = tape.scalar_value(lm).as_f64();
    let gate_value: f64 = site_ce
        .iter()
        .map(|&n| tape.scalar_value(n).as_f64())
        .sum();
    let mut terms: Vec<(f64, NodeId)> = Vec::with_capacity(site_ce.len() + 1);
    match mode {
        LossMode::Top1 => {
            for &ce in site_ce {
                terms.push((1.0, ce));
            }
        }
        LossMode::TopK(_) => {
            terms.push((1.0, lm));
            for &ce in site_ce {
                terms.push((beta, ce));
            }
        }
    }
    let loss = tape.scalar_combine(&terms)?;
    Ok((loss, lm_value, gate_value))
}

/// Train the gate weights; everything else stays bitwise frozen. Returns
/// the per-epoch loss curve. Deterministic for a fixed config.
pub fn train_gates<T: Element>(
    model: &mut ToyModel<T>,
    dataset: &[GateSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(Error::Parameter("gate training dataset is empty".into()));
    }
    if cfg.lr <= 0.0 || cfg.beta < 0.0 {
        return Err(Error::Parameter(format!(
            "lr must be > 0 and beta >= 0, got lr={} beta={}",
            cfg.lr, cfg.beta
        )));
    }
    let n_sites = model.cfg().n_sites();
    model.moe_sites()?;
    let k = cfg.mode.k();
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = Rng::new(cfg.seed).fork(0x50f1);

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Fisher-Yates reshuffle per epoch.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.next_below(i + 1);
            order.swap(i, j);
        }
        let mut epoch_lm = 0.0;
        let mut epoch_gate = 0.0;
        let mut epoch_total = 0.0;

        for chunk in order.chunks(batch_size) {
            let mut grad_acc: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
            for &si in chunk {
                let sample = &dataset[si];
                let mut fwd = model.build_tape(
                    &sample.tokens,
                    &TapeMode::Moe {
                        k,
                        gate_label: Some(sample.label),
                    },
                )?;
                let (loss, lm_v, gate_v) = sample_loss(
                    &mut fwd.tape,
                    fwd.logits,
                    &fwd.site_ce,
                    &sample.tokens,
                    cfg.mode,
                    cfg.beta,
                )?;
                let total_v = fwd.tape.scalar_value(loss).as_f64();
                if !total_v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gate training loss diverged at epoch {epoch}"
                    )));
                }
                epoch_lm += lm_v;
                epoch_gate += gate_v;
                epoch_total += total_v;

                let grads = fwd.tape.backward(loss)?;
                for site in 0..n_sites {
                    if let Some(g) = grads.get(site) {
                        match grad_acc.remove(&site) {
                            None => {
                                grad_acc.insert(site, g.clone());
                            }
                            Some(prev) => {
                                grad_acc.insert(site, prev.add(g)?);
                            }
                        }
                    }
                }
            }
            // Plain SGD on the gate weights, batch-mean gradient.
            let step = T::from_f64(cfg.lr / chunk.len() as f64);
            let sites = model.moe_sites_mut()?;
            for (site, grad) in &grad_acc {
                let w = sites[*site].gate_mut().weight_mut();
                for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
                    *wv = *wv - step * *gv;
                }
            }
        }

        let n = dataset.len() as f64;
        curve.push(EpochStats {
            epoch,
            lm_loss: epoch_lm / n,
            gate_loss: epoch_gate / n,
            total: epoch_total / n,
        });
    }
    Ok(curve)
}

/// Token-level routing accuracy: fraction of positions whose dominant
/// adapter equals the sample's task id.
pub fn routing_accuracy<T: Element>(
    model: &ToyModel<T>,
    samples: &[GateSample],
) -> Result<f64> {
    use crate::moe::Strategy;
    use crate::trace::dominant_adapter;
    let n = model.moe_sites()?[0].n_adapters();
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let (_, routing) = model.forward(
            &sample.tokens,
            &crate::model::SiteMode::Moe {
                strategy: Strategy::Loop,
                routing: None,
            },
            true,
        )?;
        for per_site in routing.expect("routing requested") {
            if dominant_adapter(&per_site, n) == sample.label {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdapterTrainConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Retention strength: with weight anchor_weight, each step also
    /// penalizes squared logit deviation from the frozen base on random
    /// token soup, keeping the adapter inert off-task.
    pub anchor_weight: f64,
    /// Anchor sequences per step.
    pub anchor_batch: usize,
    pub seed: u64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            rank: 8,
            alpha: 16.0,
            lr: 5e-3,
            steps: 1000,
            batch_size: 8,
            anchor_weight: 1.0,
            anchor_batch: 2,
            seed: 0,
        }
    }
}

/// Fresh zero-update adapters: Gaussian A, zero B.
pub fn init_adapters<T: Element>(
    model: &ToyModel<T>,
    rank: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Vec<LoraAdapter<T>> {
    let cfg = model.cfg();
    let mut out = Vec::with_capacity(cfg.n_sites());
    for _ in 0..cfg.blocks {
        for site in Site::ALL {
            let (din, dout) = site.dims(cfg);
            out.push(
                LoraAdapter::new(
                    "init",
                    Tensor::randn(&[din, rank], 0.02, rng),
                    Tensor::zeros(&[rank, dout]),
                    alpha,
                )
                .expect("valid adapter dims"),
            );
        }
    }
    out
}

struct Adam<T: Element> {
    lr: f64,
    /// Multiplier applied to lr, set per step by the caller (decay).
    lr_scale: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> Adam<T> {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, id: usize, w: &mut Tensor<T>, grad: &Tensor<T>) {
        let (m, v) = self
            .moments
            .entry(id)
            .or_insert_with(|| (vec![0.0; w.numel()], vec![0.0; w.numel()]));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((wv, &gv), (mv, vv)) in w
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = gv.as_f64();
            *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
            *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
            let update = self.lr * self.lr_scale * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            *wv = T::from_f64(wv.as_f64() - update);
        }
    }
}

/// Train one task's adapter set against the frozen base: causal LM loss on
/// the answer positions of generated episodes. Returns the adapters and
/// the per-step mean loss curve.
pub fn train_adapter<T: Element>(
    model: &ToyModel<T>,
    task: &SyntheticTask,
    cfg: &AdapterTrainConfig,
) -> Result<(Vec<LoraAdapter<T>>, Vec<f64>)> {
    let mut rng = Rng::new(cfg.seed).fork(0xada0 + task.id as u64);
    let mut adapters = init_adapters(model, cfg.rank, cfg.alpha, &mut rng);
    let scale = cfg.alpha / cfg.rank as f64;
    let n_sites = model.cfg().n_sites();
    let mut adam = Adam::<T>::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);

    // Context curriculum: single episodes plus sequences with preceding
    // context, either earlier episodes of the same task or unstructured
    // random tokens. Retrieval must stay inside the current episode no
    // matter what sits earlier in the window.
    const EPISODE_SCHEDULE: [usize; 4] = [1, 1, 2, 3];
    for step in 0..cfg.steps {
        let mut grad_acc: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        let episodes = EPISODE_SCHEDULE[step % EPISODE_SCHEDULE.len()];
        for _ in 0..cfg.batch_size {
            let mut tokens = Vec::new();
            let mut ranges = Vec::with_capacity(episodes);
            if episodes == 1 && step % 2 == 1 {
                // Random-soup context before a lone episode.
                let soup_len = 1 + rng.next_below(2 * crate::tasks::SEG_LEN + 2);
                tokens.extend((0..soup_len).map(|_| rng.next_below(model.cfg().vocab)));
            }
            for _ in 0..episodes {
                let ep = task.gen_episode(&mut rng);
                ranges.push((tokens.len() + ep.answer_start - 1, ep.tokens.len() - ep.answer_start));
                tokens.extend(ep.tokens);
            }
            let mut fwd = model.build_tape(
                &tokens,
                &TapeMode::SingleAdapter {
                    adapters: &adapters,
                    scale,
                    trainable: true,
                },
            )?;
            let loss = lm_loss_ranges(&mut fwd.tape, fwd.logits, &tokens, &ranges)?;
            let loss_v = fwd.tape.scalar_value(loss).as_f64();
            if !loss_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "adapter training for task '{}' diverged at step {step}",
                    task.name()
                )));
            }
            batch_loss += loss_v;
            let grads = fwd.tape.backward(loss)?;
            for pid in 0..2 * n_sites {
                if let Some(g) = grads.get(pid) {
                    match grad_acc.remove(&pid) {
                        None => {
                            grad_acc.insert(pid, g.clone());
                        }
                        Some(prev) => {
                            grad_acc.insert(pid, prev.add(g)?);
                        }
                    }
                }
            }
        }
        // Retention: squared deviation from the frozen base's own logits
        // on unstructured random sequences. Keeps the adapter from
        // rewriting behaviour outside its task.
        if cfg.anchor_weight > 0.0 {
            for _ in 0..cfg.anchor_batch {
                let len = 2 + 2 * crate::tasks::SEG_LEN;
                let soup: Vec<usize> = (0..len)
                    .map(|_| rng.next_below(model.cfg().vocab))
                    .collect();
                let (base_logits, _) =
                    model.forward(&soup, &crate::model::SiteMode::Base, false)?;
                let mut fwd = model.build_tape(
                    &soup,
                    &TapeMode::SingleAdapter {
                        adapters: &adapters,
                        scale,
                        trainable: true,
                    },
                )?;
                let target = fwd.tape.constant(base_logits);
                let diff = fwd.tape.sub(fwd.logits, target)?;
                let sq = fwd.tape.mul(diff, diff)?;
                let rows = fwd.tape.row_sum(sq)?;
                let rows_t = fwd.tape.transpose(rows)?;
                let ones = fwd.tape.constant(Tensor::full(&[len, 1], T::one()));
                let total = fwd.tape.matmul(rows_t, ones)?;
                let numel = (len * model.cfg().vocab) as f64;
                let anchor = fwd.tape.scale(total, cfg.anchor_weight / numel);
                let grads = fwd.tape.backward(anchor)?;
                for pid in 0..2 * n_sites {
                    if let Some(g) = grads.get(pid) {
                        match grad_acc.remove(&pid) {
                            None => {
                                grad_acc.insert(pid, g.clone());
                            }
                            Some(prev) => {
                                grad_acc.insert(pid, prev.add(g)?);
                            }
                        }
                    }
                }
            }
        }

        adam.begin_step();
        adam.lr_scale = 1.0 - 0.9 * step as f64 / cfg.steps.max(1) as f64;
        let inv_batch = T::from_f64(1.0 / cfg.batch_size as f64);
        for (pid, grad) in &grad_acc {
            let site = pid / 2;
            let target = if pid % 2 == 0 {
                &mut adapters[site].a
            } else {
                &mut adapters[site].b
            };
            adam.update(*pid, target, &grad.scale(inv_batch));
        }
        curve.push(batch_loss / cfg.batch_size as f64);
    }
    for (i, ad) in adapters.iter_mut().enumerate() {
        ad.name = format!("{}#{}", task.name(), i);
    }
    Ok((adapters, curve))
}

/// Full-rank training of the base site weights on one task; the
/// learnability oracle behind the adapter tests. If the toy dims can
/// learn the task at all, they can learn it with every site trainable.
pub fn train_base_sites<T: Element>(
    model: &mut ToyModel<T>,
    task: &SyntheticTask,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed).fork(0xba5e + task.id as u64);
    let n_sites = model.cfg().n_sites();
    let mut adam = Adam::<T>::new(lr);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grad_acc: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..batch_size {
            let episode = task.gen_episode(&mut rng);
            let mut fwd = model.build_tape(&episode.tokens, &TapeMode::BaseTrainable)?;
            let loss = lm_loss_node(
                &mut fwd.tape,
                fwd.logits,
                &episode.tokens,
                episode.answer_start - 1,
            )?;
            let loss_v = fwd.tape.scalar_value(loss).as_f64();
            if !loss_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "full-rank training for task '{}' diverged at step {step}",
                    task.name()
                )));
            }
            batch_loss += loss_v;
            let grads = fwd.tape.backward(loss)?;
            for pid in 0..n_sites {
                if let Some(g) = grads.get(pid) {
                    match grad_acc.remove(&pid) {
                        None => {
                            grad_acc.insert(pid, g.clone());
                        }
                        Some(prev) => {
                            grad_acc.insert(pid, prev.add(g)?);
                        }
                    }
                }
            }
        }
        adam.begin_step();
        let inv_batch = T::from_f64(1.0 / batch_size as f64);
        for (pid, grad) in &grad_acc {
            let mut w = model.site_weight(*pid).clone();
            adam.update(*pid, &mut w, &grad.scale(inv_batch));
            model.set_site_weight(*pid, w)?;
        }
        curve.push(batch_loss / batch_size as f64);
    }
    Ok(curve)
}

/// Greedy exact match through the plain base forward (oracle evaluation).
pub fn exact_match_base<T: Element>(
    model: &ToyModel<T>,
    episodes: &[crate::tasks::Episode],
) -> Result<f64> {
    use crate::model::SiteMode;
    use crate::tensor::topk_slice;
    let mut hits = 0usize;
    for ep in episodes {
        let mut seq = ep.question().to_vec();
        let mut ok = true;
        for &want in ep.answer() {
            let (logits, _) = model.forward(&seq, &SiteMode::Base, false)?;
            let (s, v) = logits.dims2()?;
            let next = topk_slice(&logits.data()[(s - 1) * v..s * v], 1)?[0];
            if next != want {
                ok = false;
            }
            seq.push(next);
        }
        if ok {
            hits += 1;
        }
    }
    Ok(hits as f64 / episodes.len().max(1) as f64)
}

/// Mean next-token CE on answer positions, with or without adapters.
pub fn answer_ce<T: Element>(
    model: &ToyModel<T>,
    adapters: Option<(&[LoraAdapter<T>], f64)>,
    episodes: &[crate::tasks::Episode],
) -> Result<f64> {
    use crate::model::SiteMode;
    let mut total = 0.0;
    for ep in episodes {
        let mode = match adapters {
            Some((ads, scale)) => SiteMode::Single {
                adapters: ads,
                scale,
            },
            None => SiteMode::Base,
        };
        let (logits, _) = model.forward(&ep.tokens, &mode, false)?;
        total += answer_ce_from_logits(&logits, &ep.tokens, ep.answer_start)?;
    }
    Ok(total / episodes.len().max(1) as f64)
}

fn answer_ce_from_logits<T: Element>(
    logits: &Tensor<T>,
    tokens: &[usize],
    answer_start: usize,
) -> Result<f64> {
    let (_, v) = logits.dims2()?;
    let mut probs = vec![T::zero(); v];
    let mut total = 0.0;
    let mut count = 0usize;
    for pos in answer_start - 1..tokens.len() - 1 {
        crate::tensor::softmax_slice(&mut probs, logits.row(pos), 1.0)?;
        total -= probs[tokens[pos + 1]].as_f64().max(1e-300).ln();
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Greedy exact-match rate over held-out episodes with a single adapter
/// set applied classically.
pub fn exact_match<T: Element>(
    model: &ToyModel<T>,
    adapters: &[LoraAdapter<T>],
    scale: f64,
    episodes: &[crate::tasks::Episode],
) -> Result<f64> {
    use crate::model::SiteMode;
    use crate::tensor::topk_slice;
    let mode = SiteMode::Single { adapters, scale };
    let mut hits = 0usize;
    for ep in episodes {
        let mut seq = ep.question().to_vec();
        let mut ok = true;
        for &want in ep.answer() {
            let (logits, _) = model.forward(&seq, &mode, false)?;
            let (s, v) = logits.dims2()?;
            let next = topk_slice(&logits.data()[(s - 1) * v..s * v], 1)?[0];
            if next != want {
                ok = false;
            }
            seq.push(next);
        }
        if ok {
            hits += 1;
        }
    }
    Ok(hits as f64 / episodes.len().max(1) as f64)
}

/// Result of one finite-difference verification run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compare tape gradients of the gate-training loss against central finite
/// differences on a random subset of gate coordinates. Coordinates whose
/// perturbation flips any top-k selection are skipped: the loss is only
/// piecewise smooth and the straight-through contract applies where the
/// selection is stable.
pub fn grad_check(
    model: &ToyModel<f64>,
    sample: &GateSample,
    mode: LossMode,
    beta: f64,
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Parameter("grad_check eps must be > 0".into()));
    }
    let n_sites = model.cfg().n_sites();

    // Loss + selections for a given model state.
    let eval = |m: &ToyModel<f64>| -> Result<(f64, Vec<Vec<Vec<usize>>>)> {
        let mut fwd = m.build_tape(
            &sample.tokens,
            &TapeMode::Moe {
                k: mode.k(),
                gate_label: Some(sample.label),
            },
        )?;
        let (loss, _, _) = sample_loss(
            &mut fwd.tape,
            fwd.logits,
            &fwd.site_ce,
            &sample.tokens,
            mode,
            beta,
        )?;
        Ok((fwd.tape.scalar_value(loss), fwd.selections))
    };

    // Analytic gradients at the base point.
    let mut fwd = model.build_tape(
        &sample.tokens,
        &TapeMode::Moe {
            k: mode.k(),
            gate_label: Some(sample.label),
        },
    )?;
    let (loss, _, _) = sample_loss(
        &mut fwd.tape,
        fwd.logits,
        &fwd.site_ce,
        &sample.tokens,
        mode,
        beta,
    )?;
    let grads = fwd.tape.backward(loss)?;
    let base_selections = fwd.selections;

    // Scale floor for the per-coordinate relative error: central
    // differences at eps carry an absolute eps^2 truncation term, so
    // coordinates far below the parameter's gradient scale sit in that
    // noise floor. A wrong backward still fails loudly: its error is
    // proportional to the gradient itself.
    let grad_scale = (0..n_sites)
        .filter_map(|site| grads.get(site))
        .flat_map(|g| g.data().iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let floor = (1e-2 * grad_scale).max(1e-9);

    let mut work = model.clone();
    let mut rng = Rng::new(seed).fork(0x9cad);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut attempts = 0usize;

    while checked + skipped < min_coords && attempts < min_coords * 20 {
        attempts += 1;
        let site = rng.next_below(n_sites);
        let numel = model.moe_sites()?[site].gate().weight().numel();
        let coord = rng.next_below(numel);

        let original = work.moe_sites()?[site].gate().weight().data()[coord];
        let mut probe = |delta: f64, work: &mut ToyModel<f64>| -> Result<(f64, Vec<Vec<Vec<usize>>>)> {
            work.moe_sites_mut()?[site].gate_mut().weight_mut().data_mut()[coord] =
                original + delta;
            eval(work)
        };
        let (plus, sel_plus) = probe(eps, &mut work)?;
        let (minus, sel_minus) = probe(-eps, &mut work)?;
        work.moe_sites_mut()?[site].gate_mut().weight_mut().data_mut()[coord] = original;

        if sel_plus != base_selections || sel_minus != base_selections {
            skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * eps);
        let analytic = grads
            .get(site)
            .map(|g| g.data()[coord])
            .unwrap_or(0.0);
        let denom = fd.abs().max(analytic.abs()).max(floor);
        max_rel = max_rel.max((fd - analytic).abs() / denom);
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::Numeric(
            "grad_check: no coordinate had a stable top-k selection".into(),
        ));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ToyModelConfig, SITES_PER_BLOCK};
    use crate::tasks::standard_tasks;

    #[test]
    fn gate_ce_uniform_is_log_n() {
        let logits = Tensor::<f64>::full(&[4], 0.7);
        let loss = gate_ce_loss(&logits, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn gate_ce_saturated_is_near_zero() {
        // Exact value is ln(1 + 3 e^-10) = 1.36e-4.
        let logits = Tensor::<f64>::new(&[4], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = gate_ce_loss(&logits, 0).unwrap();
        assert!((loss - (1.0 + 3.0 * (-10.0f64).exp()).ln()).abs() < 1e-12);
        assert!(loss < 2e-4);
    }

    #[test]
    fn gate_ce_two_class_oracle() {
        // -ln(e^1 / (e^1 + e^2)) computed by the scalar oracle.
        let logits = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let oracle = -(1.0f64.exp() / (1.0f64.exp() + 2.0f64.exp())).ln();
        let loss = gate_ce_loss(&logits, 0).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 1.31326).abs() < 1e-5);
    }

    #[test]
    fn gate_ce_rejects_bad_label() {
        let logits = Tensor::<f64>::full(&[3], 0.0);
        assert!(matches!(gate_ce_loss(&logits, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(2.5, &[9.0, 9.0], 0.0).unwrap(), 2.5);
        assert_eq!(joint_loss(2.0, &[1.0, 3.0], 0.5).unwrap(), 4.0);
        // Two blocks x seven modules: exactly fourteen terms enter the sum.
        let terms = vec![0.25; 2 * SITES_PER_BLOCK];
        assert_eq!(terms.len(), 14);
        assert!((joint_loss(1.0, &terms, 1.0).unwrap() - 4.5).abs() < 1e-12);
        assert!(matches!(joint_loss(1.0, &[], 0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn top1_loss_is_joint_without_lm() {
        assert_eq!(top1_loss(&[1.0, 2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(
            top1_loss(&[1.0, 2.0, 3.0]).unwrap(),
            joint_loss(0.0, &[1.0, 2.0, 3.0], 1.0).unwrap()
        );
        assert_eq!(top1_loss(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn loss_mode_routing_k() {
        assert_eq!(LossMode::Top1.k(), 1);
        assert_eq!(LossMode::TopK(2).k(), 2);
        assert_eq!(LossMode::Top1.name(), "top1");
        assert_eq!(LossMode::TopK(2).name(), "top2");
    }

    fn tiny_moe_model(seed: u64, k: usize) -> ToyModel<f32> {
        let mut model = ToyModel::<f32>::build(ToyModelConfig::default(), seed).unwrap();
        let tasks = standard_tasks();
        let mut rng = Rng::new(seed).fork(50);
        let sets: Vec<(String, Vec<LoraAdapter<f32>>)> = tasks
            .iter()
            .map(|t| {
                (
                    t.name().to_string(),
                    init_adapters(&model, 4, 16.0, &mut rng),
                )
            })
            .collect();
        model.attach_banks(&sets, k, seed).unwrap();
        model
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = tiny_moe_model(1, 1);
        let err = train_gates(&mut model, &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn zero_epochs_leaves_gates_at_initialization() {
        let mut model = tiny_moe_model(2, 1);
        let before = model.gate_digest();
        let data = crate::tasks::balanced_gate_dataset(&standard_tasks(), 2, 3);
        let curve = train_gates(
            &mut model,
            &data,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.gate_digest(), before);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let model = tiny_moe_model(3, 2).cast::<f64>();
        let sample = GateSample {
            tokens: standard_tasks()[0].gen_episode(&mut Rng::new(4)).tokens,
            label: 0,
        };
        assert!(matches!(
            grad_check(&model, &sample, LossMode::Top1, 0.1, 0.0, 8, 1),
            Err(Error::Parameter(_))
        ));
    }
}
