//! Mixture of personalized modules: frozen pools of every client's converged
//! personalized parameters and experts, per-client gating networks with Top-K
//! masking, and the fine-tuning loop that trains only the gates.
//!
//! Two mixtures exist. The parameter mixture replaces the client's local
//! personalized vector by a gated weighted sum over the pool; the expert
//! mixture replaces the outputs of the local personalized extractor and head
//! by gated weighted sums of every pool expert's output. Gates see the raw
//! input sample. Pool entries never receive gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::datagen::LabeledDataset;
use crate::energy::{denoise, EnergyConfig, EnergyReport};
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, cross_entropy_grad, sgd_step, Activation, Init, Mlp, MlpCache, MlpGrads, Tensor,
};
use crate::rng::{self, tag};
use crate::splitmodel::{argmax, SplitConfig, SplitModel};

// ── Expert pool ─────────────────────────────────────────────────────────

/// Frozen collection of converged personalized parts from all clients, in
/// client-id order. Fields are private: nothing can mutate a pool entry
/// after construction, and the contained stacks are marked frozen so an
/// accidental SGD call is a no-op as well.
#[derive(Clone, Debug)]
pub struct ExpertPool {
    pp: Vec<Tensor>,
    extractors: Vec<Mlp>,
    heads: Vec<Mlp>,
    size: usize,
}

impl ExpertPool {
    /// Collect the personalized parts of every client's model. All models
    /// must share the same split configuration and shapes.
    pub fn build(models: &[&SplitModel]) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyInput {
            context: "ExpertPool::build",
        })?;
        let mut pp = Vec::new();
        let mut extractors = Vec::new();
        let mut heads = Vec::new();
        for (j, model) in models.iter().enumerate() {
            if model.config != first.config {
                return Err(Error::InvalidParameter {
                    name: "pool",
                    message: format!("client {j} has a different split configuration"),
                });
            }
            if let Some(v) = &model.personal_vector {
                pp.push(v.clone());
            }
            if let Some(fe) = &model.personal_extractor {
                let mut fe = fe.clone();
                fe.frozen = true;
                extractors.push(fe);
            }
            if let Some(hd) = &model.personal_head {
                let mut hd = hd.clone();
                hd.frozen = true;
                heads.push(hd);
            }
        }
        for (name, len) in [("pp", pp.len()), ("extractors", extractors.len()), ("heads", heads.len())] {
            if len != 0 && len != models.len() {
                return Err(Error::InvalidParameter {
                    name: "pool",
                    message: format!("missing client entries in {name}: {len} of {}", models.len()),
                });
            }
        }
        Ok(ExpertPool {
            pp,
            extractors,
            heads,
            size: models.len(),
        })
    }

    /// Append experts with randomized parameters of the same shapes. Used to
    /// study denoising: the extra entries carry no client's knowledge.
    pub fn with_noise_experts(mut self, count: usize, seed: u64) -> Self {
        for e in 0..count {
            let mut r = rng::stream(seed, &[tag::NOISE_EXPERT, e as u64]);
            if let Some(template) = self.pp.first() {
                let data: Vec<f64> = (0..template.len())
                    .map(|_| r.sample::<f64, _>(StandardNormal))
                    .collect();
                self.pp.push(Tensor::new(template.shape().to_vec(), data).expect("template shape"));
            }
            if let Some(template) = self.extractors.first() {
                self.extractors.push(randomized_like(template, &mut r));
            }
            if let Some(template) = self.heads.first() {
                self.heads.push(randomized_like(template, &mut r));
            }
            self.size += 1;
        }
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pp(&self) -> &[Tensor] {
        &self.pp
    }

    pub fn extractors(&self) -> &[Mlp] {
        &self.extractors
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn has_pp(&self) -> bool {
        !self.pp.is_empty()
    }

    pub fn has_extractors(&self) -> bool {
        !self.extractors.is_empty()
    }

    pub fn has_heads(&self) -> bool {
        !self.heads.is_empty()
    }

    /// True when an expert mixture exists (extractor or head experts).
    pub fn has_expert_mixture(&self) -> bool {
        self.has_extractors() || self.has_heads()
    }

    /// Named views of every pool tensor, for digests and checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, t) in self.pp.iter().enumerate() {
            out.push((format!("pool.pp.{l}"), t));
        }
        for (l, m) in self.extractors.iter().enumerate() {
            out.extend(m.named_params(&format!("pool.extractor.{l}")));
        }
        for (l, m) in self.heads.iter().enumerate() {
            out.extend(m.named_params(&format!("pool.head.{l}")));
        }
        out
    }
}

fn randomized_like(template: &Mlp, rng: &mut ChaCha8Rng) -> Mlp {
    let mut out = template.clone();
    for layer in out.layers.iter_mut() {
        let fan_in = layer.in_dim() as f64;
        let std = (2.0 / fan_in).sqrt();
        for v in layer.weight.data_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        for v in layer.bias.data_mut() {
            *v = 0.0;
        }
    }
    out.frozen = true;
    out
}

// ── Gate network ────────────────────────────────────────────────────────

/// Per-client trainable router over the pool. Output dimension equals the
/// pool size; the forward pass applies a masked softmax, keeps the `top_k`
/// largest weights (ties to the lower index) and renormalizes them to sum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNetwork {
    pub mlp: Mlp,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// Mixture weights over the full pool: non-negative, zero outside the
    /// selected set, summing to 1 over it.
    pub weights: Vec<f64>,
    /// Selected pool indices, ascending.
    pub selected: Vec<usize>,
}

pub struct GateCache {
    mlp_cache: MlpCache,
    softmax: Vec<f64>,
    active: Vec<bool>,
    selected: Vec<usize>,
    kept_sum: f64,
}

impl GateNetwork {
    pub fn init(
        input_dim: usize,
        pool_size: usize,
        hidden: &[usize],
        activation: Activation,
        init: Init,
        top_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if top_k == 0 || top_k > pool_size {
            return Err(Error::InvalidParameter {
                name: "top_k",
                message: format!("must be in 1..={pool_size}, got {top_k}"),
            });
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(pool_size);
        Ok(GateNetwork {
            mlp: Mlp::init(&dims, activation, init, rng),
            top_k,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward(&self, x: &[f64], active: &[bool]) -> Result<GateOutput> {
        let logits = self.mlp.forward(x);
        let (softmax, selected, kept_sum) = masked_topk(&logits, active, self.top_k)?;
        Ok(output_from(&softmax, &selected, kept_sum))
    }

    pub fn forward_cached(&self, x: &[f64], active: &[bool]) -> Result<(GateOutput, GateCache)> {
        let (logits, mlp_cache) = self.mlp.forward_cached(x);
        let (softmax, selected, kept_sum) = masked_topk(&logits, active, self.top_k)?;
        let out = output_from(&softmax, &selected, kept_sum);
        Ok((
            out,
            GateCache {
                mlp_cache,
                softmax,
                active: active.to_vec(),
                selected,
                kept_sum,
            },
        ))
    }

    /// Backprop d(loss)/d(weights) through renormalization, Top-K mask and
    /// masked softmax into the gate parameters.
    pub fn backward(&self, cache: &GateCache, dweights: &[f64], grads: &mut MlpGrads) {
        let n = cache.softmax.len();
        let mut dsoft = vec![0.0; n];
        let mut inner = 0.0;
        for &i in &cache.selected {
            inner += dweights[i] * cache.softmax[i] / cache.kept_sum;
        }
        for &i in &cache.selected {
            dsoft[i] = (dweights[i] - inner) / cache.kept_sum;
        }
        let mut dot = 0.0;
        for i in 0..n {
            if cache.active[i] {
                dot += dsoft[i] * cache.softmax[i];
            }
        }
        let mut dlogits = vec![0.0; n];
        for i in 0..n {
            if cache.active[i] {
                dlogits[i] = cache.softmax[i] * (dsoft[i] - dot);
            }
        }
        self.mlp.backward(&cache.mlp_cache, &dlogits, grads);
    }
}

/// The gate's weighting rule applied to raw routing logits: masked softmax,
/// Top-K selection, renormalization. Exposed for callers that bring their own
/// logits.
pub fn top_k_weights(logits: &[f64], active: &[bool], k: usize) -> Result<GateOutput> {
    if k == 0 {
        return Err(Error::InvalidParameter {
            name: "top_k",
            message: "must be >= 1".into(),
        });
    }
    let (softmax, selected, kept_sum) = masked_topk(logits, active, k)?;
    Ok(output_from(&softmax, &selected, kept_sum))
}

fn output_from(softmax: &[f64], selected: &[usize], kept_sum: f64) -> GateOutput {
    let mut weights = vec![0.0; softmax.len()];
    for &i in selected {
        weights[i] = softmax[i] / kept_sum;
    }
    GateOutput {
        weights,
        selected: selected.to_vec(),
    }
}

/// Masked softmax followed by Top-K selection. Returns the softmax over the
/// active set (zeros elsewhere), the selected indices (ascending) and the sum
/// of their softmax mass.
fn masked_topk(logits: &[f64], active: &[bool], k: usize) -> Result<(Vec<f64>, Vec<usize>, f64)> {
    if logits.len() != active.len() {
        return Err(Error::ShapeMismatch {
            context: "gate_forward",
            lhs: vec![logits.len()],
            rhs: vec![active.len()],
        });
    }
    let active_idx: Vec<usize> = (0..logits.len()).filter(|&i| active[i]).collect();
    if active_idx.is_empty() {
        return Err(Error::EmptyInput {
            context: "gate_forward: active mask",
        });
    }
    let max = active_idx
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut softmax = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for &i in &active_idx {
        let e = (logits[i] - max).exp();
        softmax[i] = e;
        sum += e;
    }
    for &i in &active_idx {
        softmax[i] /= sum;
    }
    let mut order = active_idx.clone();
    order.sort_by(|&a, &b| softmax[b].total_cmp(&softmax[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(k.min(active_idx.len())).collect();
    selected.sort_unstable();
    let kept_sum: f64 = selected.iter().map(|&i| softmax[i]).sum();
    Ok((softmax, selected, kept_sum))
}

// ── Mixtures ────────────────────────────────────────────────────────────

/// Weighted sum of pool vectors: sum_l w_l * pp_l.
pub fn mpp_mix(pool: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    let first = pool.first().ok_or(Error::EmptyInput { context: "mpp_mix" })?;
    if pool.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            context: "mpp_mix",
            lhs: vec![pool.len()],
            rhs: vec![weights.len()],
        });
    }
    let mut out = Tensor::zeros(first.shape().to_vec());
    for (entry, &w) in pool.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if entry.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                context: "mpp_mix",
                lhs: entry.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        for (o, v) in out.data_mut().iter_mut().zip(entry.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Weighted sum of expert outputs: sum_l w_l * expert_l(input). Experts with
/// zero weight are not evaluated.
pub fn mpe_mix(experts: &[Mlp], weights: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    let first = experts.first().ok_or(Error::EmptyInput { context: "mpe_mix" })?;
    if experts.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            context: "mpe_mix",
            lhs: vec![experts.len()],
            rhs: vec![weights.len()],
        });
    }
    let mut out = vec![0.0; first.out_dim()];
    for (expert, &w) in experts.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(expert.forward(input)) {
            *o += w * v;
        }
    }
    Ok(out)
}

// ── Phase-2 forward ─────────────────────────────────────────────────────

/// Kept masks over pool indices, one per pool kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    pub pp: Vec<bool>,
    pub pe: Vec<bool>,
}

impl Masks {
    pub fn all(pool_size: usize) -> Self {
        Masks {
            pp: vec![true; pool_size],
            pe: vec![true; pool_size],
        }
    }
}

/// The two per-client gates: one for the parameter pool, one shared by the
/// expert pools (an expert is one client's whole personalized module).
#[derive(Clone, Debug, PartialEq)]
pub struct ClientGates {
    pub pp: Option<GateNetwork>,
    pub pe: Option<GateNetwork>,
}

impl ClientGates {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(g) = &self.pp {
            out.extend(g.mlp.named_params("gate_pp"));
        }
        if let Some(g) = &self.pe {
            out.extend(g.mlp.named_params("gate_pe"));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(g) = self.pp.as_mut() {
            out.extend(g.mlp.named_params_mut("gate_pp"));
        }
        if let Some(g) = self.pe.as_mut() {
            out.extend(g.mlp.named_params_mut("gate_pe"));
        }
        out
    }
}

/// Gate architecture and Top-K settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSettings {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    pub top_k: usize,
}

impl Default for GateSettings {
    fn default() -> Self {
        GateSettings {
            hidden: vec![128, 256, 128],
            activation: Activation::LeakyRelu(0.01),
            init: Init::Orthogonal,
            top_k: 1,
        }
    }
}

/// Build the gates a client needs for this pool, deterministically from
/// (seed, client id).
pub fn init_gates(
    config: &SplitConfig,
    pool: &ExpertPool,
    settings: &GateSettings,
    client_id: usize,
    seed: u64,
) -> Result<ClientGates> {
    let make = |which: u64, rng_seed: u64| -> Result<GateNetwork> {
        let mut r = rng::stream(rng_seed, &[tag::GATE_INIT, client_id as u64, which]);
        GateNetwork::init(
            config.input_dim,
            pool.size(),
            &settings.hidden,
            settings.activation,
            settings.init,
            settings.top_k.min(pool.size()),
            &mut r,
        )
    };
    Ok(ClientGates {
        pp: pool.has_pp().then(|| make(0, seed)).transpose()?,
        pe: pool.has_expert_mixture().then(|| make(1, seed)).transpose()?,
    })
}

/// How mixture weights are produced for a forward pass.
pub enum GateMode<'a> {
    /// Trained per-sample routing with denoising masks.
    Learned(&'a ClientGates, &'a Masks),
    /// Clamp both mixtures one-hot on a pool index (the identity fallback).
    ForcedOneHot(usize),
}

/// Phase-2 logits: the client's frozen global parts plus gated mixtures in
/// place of its local personalized parts.
pub fn moe_logits(
    model: &SplitModel,
    pool: &ExpertPool,
    mode: &GateMode,
    x: &[f64],
) -> Result<Vec<f64>> {
    let (w_pp, w_pe) = mixture_weights(pool, mode, x)?;
    let mut h = model.global_extractor.forward(x);
    if pool.has_extractors() {
        let mix = mpe_mix(pool.extractors(), w_pe.as_ref().expect("pe gate"), x)?;
        for (a, b) in h.iter_mut().zip(mix) {
            *a += b;
        }
    }
    if pool.has_pp() && !model.config.pp_on_logits {
        let mix = mpp_mix(pool.pp(), w_pp.as_ref().expect("pp gate"))?;
        for (a, b) in h.iter_mut().zip(mix.data()) {
            *a += b;
        }
    }
    let mut logits = model.global_head.forward(&h);
    if pool.has_heads() {
        let mix = mpe_mix(pool.heads(), w_pe.as_ref().expect("pe gate"), &h)?;
        for (a, b) in logits.iter_mut().zip(mix) {
            *a += b;
        }
    }
    if pool.has_pp() && model.config.pp_on_logits {
        let mix = mpp_mix(pool.pp(), w_pp.as_ref().expect("pp gate"))?;
        for (a, b) in logits.iter_mut().zip(mix.data()) {
            *a += b;
        }
    }
    Ok(logits)
}

fn mixture_weights(
    pool: &ExpertPool,
    mode: &GateMode,
    x: &[f64],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    match mode {
        GateMode::Learned(gates, masks) => {
            let w_pp = match (&gates.pp, pool.has_pp()) {
                (Some(g), true) => Some(g.forward(x, &masks.pp)?.weights),
                (None, true) => {
                    return Err(Error::InvalidParameter {
                        name: "gates",
                        message: "pool has personalized vectors but no pp gate".into(),
                    })
                }
                _ => None,
            };
            let w_pe = match (&gates.pe, pool.has_expert_mixture()) {
                (Some(g), true) => Some(g.forward(x, &masks.pe)?.weights),
                (None, true) => {
                    return Err(Error::InvalidParameter {
                        name: "gates",
                        message: "pool has experts but no pe gate".into(),
                    })
                }
                _ => None,
            };
            Ok((w_pp, w_pe))
        }
        GateMode::ForcedOneHot(idx) => {
            let mut w = vec![0.0; pool.size()];
            if *idx >= pool.size() {
                return Err(Error::InvalidParameter {
                    name: "forced_index",
                    message: format!("{idx} out of range for pool of {}", pool.size()),
                });
            }
            w[*idx] = 1.0;
            Ok((Some(w.clone()), Some(w)))
        }
    }
}

/// Accuracy of the gated forward pass over a dataset.
pub fn evaluate_moe(
    model: &SplitModel,
    pool: &ExpertPool,
    gates: &ClientGates,
    masks: &Masks,
    data: &LabeledDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "evaluate_moe",
        });
    }
    let mode = GateMode::Learned(gates, masks);
    let mut correct = 0usize;
    for s in data.samples() {
        let logits = moe_logits(model, pool, &mode, &s.features)?;
        if argmax(&logits) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ── Denoising masks ─────────────────────────────────────────────────────

/// Energy reports backing the masks; absent when the pool kind is absent.
#[derive(Clone, Debug)]
pub struct MaskReports {
    pub pp: Option<EnergyReport>,
    pub pe: Option<EnergyReport>,
}

/// Score every pool entry against the client's own and drop the lowest
/// fraction. Expert scoring uses the personalized extractor outputs when
/// extractors exist (the feature-space comparison), otherwise the head
/// experts' outputs on the client's phase-1 representations. The parameter
/// pool is scored directly on the vectors.
pub fn denoise_masks(
    model: &SplitModel,
    pool: &ExpertPool,
    own_index: usize,
    data: &LabeledDataset,
    cfg: &EnergyConfig,
) -> Result<(Masks, MaskReports)> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "denoise_masks",
        });
    }
    let pe_report = if pool.has_extractors() {
        let reprs: Vec<Vec<Vec<f64>>> = pool
            .extractors()
            .iter()
            .map(|fe| {
                data.samples()
                    .iter()
                    .map(|s| fe.forward(&s.features))
                    .collect()
            })
            .collect();
        Some(denoise(&reprs, own_index, cfg)?)
    } else if pool.has_heads() {
        let hs: Vec<Vec<f64>> = data
            .samples()
            .iter()
            .map(|s| model.forward(&s.features).map(|(h, _)| h))
            .collect::<Result<_>>()?;
        let reprs: Vec<Vec<Vec<f64>>> = pool
            .heads()
            .iter()
            .map(|hd| hs.iter().map(|h| hd.forward(h)).collect())
            .collect();
        Some(denoise(&reprs, own_index, cfg)?)
    } else {
        None
    };
    let pp_report = if pool.has_pp() {
        let reprs: Vec<Vec<Vec<f64>>> = pool
            .pp()
            .iter()
            .map(|t| vec![t.data().to_vec()])
            .collect();
        Some(denoise(&reprs, own_index, cfg)?)
    } else {
        None
    };
    let masks = Masks {
        pp: pp_report
            .as_ref()
            .map(|r| r.kept.clone())
            .unwrap_or_else(|| vec![true; pool.size()]),
        pe: pe_report
            .as_ref()
            .map(|r| r.kept.clone())
            .unwrap_or_else(|| vec![true; pool.size()]),
    };
    Ok((
        masks,
        MaskReports {
            pp: pp_report,
            pe: pe_report,
        },
    ))
}

// ── Fine-tuning loop ────────────────────────────────────────────────────

/// Phase-2 hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoeTuning {
    /// Gate learning rate.
    pub lr: f64,
    /// Gate training epochs.
    pub epochs: usize,
    pub energy: EnergyConfig,
}

#[derive(Clone, Debug)]
pub struct FinetuneRow {
    pub client: usize,
    pub epoch: usize,
    pub loss: f64,
    pub test_accuracy: f64,
    pub kept_experts: usize,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub gates: ClientGates,
    pub rows: Vec<FinetuneRow>,
    pub final_masks: Masks,
    pub final_reports: MaskReports,
    pub final_accuracy: f64,
}

/// Train one client's gates. Per epoch: recompute the denoising masks on the
/// full local training set, then run per-sample gated forward/backward steps
/// that update only the gate parameters. Every backbone and pool tensor is
/// byte-identical before and after (checked by digest).
#[allow(clippy::too_many_arguments)]
pub fn finetune_client(
    model: &SplitModel,
    pool: &ExpertPool,
    own_index: usize,
    train: &LabeledDataset,
    test: &LabeledDataset,
    tuning: &MoeTuning,
    mut gates: ClientGates,
    seed: u64,
) -> Result<FinetuneOutcome> {
    use rand::seq::SliceRandom;
    if train.is_empty() {
        return Err(Error::EmptyInput {
            context: "finetune_client",
        });
    }
    let frozen_before = {
        let mut named = pool.named_tensors();
        named.extend(model.global_named());
        named.extend(model.personal_named());
        checkpoint::digest(&named)
    };

    let mut rows = Vec::with_capacity(tuning.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..tuning.epochs {
        let (masks, reports) = denoise_masks(model, pool, own_index, train, &tuning.energy)?;
        let mut r = rng::stream(seed, &[tag::MOE_ORDER, own_index as u64, epoch as u64]);
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for &i in &order {
            let s = &train.samples()[i];
            loss_sum += train_step(model, pool, &mut gates, &masks, &s.features, s.label, tuning.lr)?;
        }
        if !loss_sum.is_finite() {
            return Err(Error::InvalidParameter {
                name: "moe_lr",
                message: format!("gate training diverged (non-finite loss) at lr = {}", tuning.lr),
            });
        }
        let test_accuracy = if test.is_empty() {
            f64::NAN
        } else {
            evaluate_moe(model, pool, &gates, &masks, test)?
        };
        rows.push(FinetuneRow {
            client: own_index,
            epoch,
            loss: loss_sum / train.len() as f64,
            test_accuracy,
            kept_experts: reports
                .pe
                .as_ref()
                .or(reports.pp.as_ref())
                .map_or(pool.size(), |rep| rep.kept_count()),
        });
    }

    let (final_masks, final_reports) = denoise_masks(model, pool, own_index, train, &tuning.energy)?;
    let final_accuracy = if test.is_empty() {
        f64::NAN
    } else {
        evaluate_moe(model, pool, &gates, &final_masks, test)?
    };

    let frozen_after = {
        let mut named = pool.named_tensors();
        named.extend(model.global_named());
        named.extend(model.personal_named());
        checkpoint::digest(&named)
    };
    assert_eq!(
        frozen_before, frozen_after,
        "frozen tensors changed during gate fine-tuning"
    );

    Ok(FinetuneOutcome {
        gates,
        rows,
        final_masks,
        final_reports,
        final_accuracy,
    })
}

/// Analytic gradients of the phase-2 cross-entropy with respect to the gate
/// parameters, plus the sample loss. Frozen modules contribute input
/// gradients but never accumulate parameter gradients.
pub struct GateGrads {
    pub pp: Option<MlpGrads>,
    pub pe: Option<MlpGrads>,
    pub loss: f64,
}

pub fn gate_grads(
    model: &SplitModel,
    pool: &ExpertPool,
    gates: &ClientGates,
    masks: &Masks,
    x: &[f64],
    label: usize,
) -> Result<GateGrads> {
    // Forward with caches.
    let pp_fwd = match (&gates.pp, pool.has_pp()) {
        (Some(g), true) => Some(g.forward_cached(x, &masks.pp)?),
        _ => None,
    };
    let pe_fwd = match (&gates.pe, pool.has_expert_mixture()) {
        (Some(g), true) => Some(g.forward_cached(x, &masks.pe)?),
        _ => None,
    };

    let mut h = model.global_extractor.forward(x);
    let mut extractor_outputs: Vec<(usize, Vec<f64>)> = Vec::new();
    if pool.has_extractors() {
        let (out, _) = pe_fwd.as_ref().expect("pe gate");
        for &l in &out.selected {
            let value = pool.extractors()[l].forward(x);
            for (a, b) in h.iter_mut().zip(&value) {
                *a += out.weights[l] * b;
            }
            extractor_outputs.push((l, value));
        }
    }
    if pool.has_pp() && !model.config.pp_on_logits {
        let (out, _) = pp_fwd.as_ref().expect("pp gate");
        for &l in &out.selected {
            for (a, b) in h.iter_mut().zip(pool.pp()[l].data()) {
                *a += out.weights[l] * b;
            }
        }
    }
    let (mut logits, gh_cache) = model.global_head.forward_cached(&h);
    let mut head_runs: Vec<(usize, Vec<f64>, MlpCache)> = Vec::new();
    if pool.has_heads() {
        let (out, _) = pe_fwd.as_ref().expect("pe gate");
        for &l in &out.selected {
            let (value, cache) = pool.heads()[l].forward_cached(&h);
            for (a, b) in logits.iter_mut().zip(&value) {
                *a += out.weights[l] * b;
            }
            head_runs.push((l, value, cache));
        }
    }
    if pool.has_pp() && model.config.pp_on_logits {
        let (out, _) = pp_fwd.as_ref().expect("pp gate");
        for &l in &out.selected {
            for (a, b) in logits.iter_mut().zip(pool.pp()[l].data()) {
                *a += out.weights[l] * b;
            }
        }
    }

    let loss = cross_entropy(&logits, label)?;
    let dlogits = cross_entropy_grad(&logits, label)?;

    // d(loss)/dh through the global head and every selected head expert.
    let mut dh = model.global_head.backward_data(&gh_cache, &dlogits);
    if let Some((out, _)) = pe_fwd.as_ref() {
        for (l, _, cache) in &head_runs {
            let d = pool.heads()[*l].backward_data(cache, &dlogits);
            for (a, b) in dh.iter_mut().zip(d) {
                *a += out.weights[*l] * b;
            }
        }
    }

    // Mixture-weight gradients feed the gates.
    let pe_grads = match pe_fwd {
        Some((_, cache)) => {
            let mut dweights = vec![0.0; pool.size()];
            for (l, value, _) in &head_runs {
                dweights[*l] += dlogits.iter().zip(value).map(|(a, b)| a * b).sum::<f64>();
            }
            for (l, value) in &extractor_outputs {
                dweights[*l] += dh.iter().zip(value).map(|(a, b)| a * b).sum::<f64>();
            }
            let gate = gates.pe.as_ref().expect("pe gate");
            let mut grads = gate.mlp.zero_grads();
            gate.backward(&cache, &dweights, &mut grads);
            Some(grads)
        }
        None => None,
    };
    let pp_grads = match pp_fwd {
        Some((out, cache)) => {
            let upstream: &[f64] = if model.config.pp_on_logits { &dlogits } else { &dh };
            let mut dweights = vec![0.0; pool.size()];
            for &l in &out.selected {
                dweights[l] = upstream
                    .iter()
                    .zip(pool.pp()[l].data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            let gate = gates.pp.as_ref().expect("pp gate");
            let mut grads = gate.mlp.zero_grads();
            gate.backward(&cache, &dweights, &mut grads);
            Some(grads)
        }
        None => None,
    };
    Ok(GateGrads {
        pp: pp_grads,
        pe: pe_grads,
        loss,
    })
}

/// One gated training step; returns the sample loss.
fn train_step(
    model: &SplitModel,
    pool: &ExpertPool,
    gates: &mut ClientGates,
    masks: &Masks,
    x: &[f64],
    label: usize,
    lr: f64,
) -> Result<f64> {
    let grads = gate_grads(model, pool, gates, masks, x, label)?;
    if let (Some(gate), Some(g)) = (gates.pe.as_mut(), &grads.pe) {
        sgd_step(&mut gate.mlp, g, lr)?;
    }
    if let (Some(gate), Some(g)) = (gates.pp.as_mut(), &grads.pp) {
        sgd_step(&mut gate.mlp, g, lr)?;
    }
    Ok(grads.loss)
}
