//! Encoder pretraining and the three-stage training procedure: stage 1
//! trains conv + head with both encoders frozen, stage 2 additionally
//! unfreezes the edge encoder, stage 3 trains everything. Adam with a step
//! learning-rate schedule restarting each stage; logical batches of
//! subgraphs accumulated sequentially for reproducibility.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::graph_store::{extract_ego, sample_augment, truncate_eval, SamplerConfig, TxGraph};
use crate::metrics::roc_auc;
use crate::models::Model;
use crate::parallel::par_map_indices;
use crate::seq_encoder::{
    pretrain_forward, AmountStats, EncoderConfig, EncoderIds, EventSequence,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub stage_epochs: (usize, usize, usize),
    /// Initial learning rate of the three GNN stages.
    pub lr: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    /// Step-LR schedule: epochs per step and decay factor.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage_epochs: (4, 2, 4),
            lr: 0.001,
            pretrain_lr: 0.01,
            pretrain_epochs: 4,
            step_size: 2,
            gamma: 0.5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size == 0 {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0,1]", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `base_lr · gamma^floor(epoch / step_size)`.
pub fn step_lr(epoch: usize, base_lr: f64, step_size: usize, gamma: f64) -> Result<f64> {
    if step_size == 0 {
        return Err(Error::Config("step_size must be positive".into()));
    }
    Ok(base_lr * gamma.powi((epoch / step_size) as i32))
}

/// Binary cross-entropy with the probability clamped to [1e-12, 1-1e-12].
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let pc = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

/// Adam with default moments. Frozen parameters are skipped entirely.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64) -> Self {
        let (m, v) = ps
            .ids()
            .map(|id| {
                let n = ps.value(id).len();
                (vec![0.0; n], vec![0.0; n])
            })
            .unzip();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update from the gradients accumulated in `ps`. Errors if any
    /// updated parameter stops being finite.
    pub fn step(&mut self, ps: &mut ParamSet) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (slot, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let param = ps.get_mut(id);
            if param.frozen {
                continue;
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for ((value, &g), (mi, vi)) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(param.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *value -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
            if !param.value.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameter after optimizer step (t={})",
                    self.t
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic seed derivation for per-step randomness.
fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut s = master ^ 0x6a09_e667_f3bc_c908;
    for &p in parts {
        s = s.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(p).rotate_left(23) ^ p;
    }
    s.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Pretrained sequence encoder with its frozen normalization statistics.
pub struct Pretrained {
    pub params: ParamSet,
    pub encoder: EncoderConfig,
    pub ids: EncoderIds,
}

/// Train encoder + linear head on labeled sequences with BCE; the head
/// stays in `params` but is not copied into graph models. Amount statistics
/// are frozen from the training data before any gradient step.
pub fn pretrain_encoder(
    data: &[(EventSequence, u8)],
    base: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    let n_pos = data.iter().filter(|(_, y)| *y == 1).count();
    if data.is_empty() || n_pos == 0 || n_pos == data.len() {
        return Err(Error::InvalidInput(
            "pretraining needs at least one example of each class".into(),
        ));
    }
    let mut stats = AmountStats::new();
    for (seq, _) in data {
        for tx in &seq.events {
            stats.observe(tx.amount);
        }
    }
    let mut encoder = base.clone();
    encoder.freeze_stats(&stats);

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    let ids = EncoderIds::init(&mut ps, "enc", &encoder, true, &mut rng);

    let mut opt = Adam::new(&ps, cfg.pretrain_lr);
    for epoch in 0..cfg.pretrain_epochs {
        opt.lr = step_lr(epoch, cfg.pretrain_lr, cfg.step_size, cfg.gamma)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, &[0, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            ps.zero_grads();
            for &i in batch {
                let (seq, y) = &data[i];
                let mut tape = Tape::new();
                let logit = pretrain_forward(&mut tape, &ps, &ids, &encoder, seq)?;
                let p = tape.sigmoid(logit);
                let loss = tape.bce_loss(p, *y as f64)?;
                let grads = tape.backward(loss)?;
                ps.accumulate(&grads, 1.0 / batch.len() as f64);
            }
            opt.step(&mut ps)?;
        }
    }
    Ok(Pretrained { params: ps, encoder, ids })
}

/// Mean training BCE of the pretraining head on a dataset (no updates).
pub fn pretrain_loss(pre: &Pretrained, data: &[(EventSequence, u8)]) -> Result<f64> {
    let mut total = 0.0;
    for (seq, y) in data {
        let mut tape = Tape::new();
        let logit = pretrain_forward(&mut tape, &pre.params, &pre.ids, &pre.encoder, seq)?;
        let p = tape.sigmoid(logit);
        total += bce_loss(tape.value(p).item(), *y as f64);
    }
    Ok(total / data.len() as f64)
}

/// Default probabilities from the pretraining head for each sequence.
pub fn pretrain_scores(pre: &Pretrained, data: &[EventSequence]) -> Result<Vec<f64>> {
    par_map_indices(data.len(), |i| -> Result<f64> {
        let mut tape = Tape::new();
        let logit = pretrain_forward(&mut tape, &pre.params, &pre.ids, &pre.encoder, &data[i])?;
        let p = tape.sigmoid(logit);
        Ok(tape.value(p).item())
    })
    .into_iter()
    .collect()
}

/// Labeled ego subgraphs, the unit the trainer consumes.
pub struct Dataset {
    pub subs: Vec<EgoSubgraphEntry>,
    pub labels: Vec<u8>,
}

pub type EgoSubgraphEntry = crate::graph_store::EgoSubgraph;

impl Dataset {
    /// Extract depth-2 neighborhoods for the given targets; every target
    /// must carry a label.
    pub fn extract<'a>(g: &TxGraph, targets: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut subs = Vec::new();
        let mut labels = Vec::new();
        for id in targets {
            let label = g
                .label(id)
                .ok_or_else(|| Error::InvalidInput(format!("client {id} has no label")))?;
            subs.push(extract_ego(g, id, 2)?);
            labels.push(label);
        }
        Ok(Dataset { subs, labels })
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc: f64,
}

fn apply_freeze(model: &mut Model, stage: usize) {
    model.params.set_frozen_where(|_| true, false);
    match stage {
        0 => model
            .params
            .set_frozen_where(|n| n.starts_with("node_enc") || n.starts_with("edge_enc"), true),
        1 => model.params.set_frozen_where(|n| n.starts_with("node_enc"), true),
        _ => {}
    }
}

/// Run the three stages with the freeze schedule, per-step neighborhood
/// resampling, and gradient accumulation over logical batches. Returns the
/// per-epoch log; the scheduler and optimizer restart at each stage.
pub fn train_three_stage(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    sampler.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let stages = [cfg.stage_epochs.0, cfg.stage_epochs.1, cfg.stage_epochs.2];
    let mut logs = Vec::new();
    for (stage, &epochs) in stages.iter().enumerate() {
        if epochs == 0 {
            continue;
        }
        apply_freeze(model, stage);
        let mut opt = Adam::new(&model.params, cfg.lr);
        for epoch in 0..epochs {
            opt.lr = step_lr(epoch, cfg.lr, cfg.step_size, cfg.gamma)?;
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut shuffle_rng = ChaCha20Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[1, stage as u64, epoch as u64],
            ));
            order.shuffle(&mut shuffle_rng);

            let mut total_loss = 0.0;
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                model.params.zero_grads();
                for (slot, &i) in batch.iter().enumerate() {
                    let cell = [2, stage as u64, epoch as u64, step as u64, slot as u64];
                    let mut aug = sampler.clone();
                    aug.seed = derive_seed(cfg.seed, &cell);
                    let sub = sample_augment(&train.subs[i], &aug)?;
                    let mut dropout_rng =
                        ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed.wrapping_add(3), &cell));
                    let mut tape = Tape::new();
                    let p = model.forward(&mut tape, &sub, Some(&mut dropout_rng))?;
                    let loss = tape.bce_loss(p, train.labels[i] as f64)?;
                    let lv = tape.value(loss).item();
                    if !lv.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite loss at stage {} epoch {epoch} step {step}",
                            stage + 1
                        )));
                    }
                    total_loss += lv;
                    let grads = tape.backward(loss)?;
                    model.params.accumulate(&grads, 1.0 / batch.len() as f64);
                }
                opt.step(&mut model.params)?;
            }
            let scores = score(model, val, sampler)?;
            let val_auc = roc_auc(&scores, &val.labels)?;
            logs.push(EpochLog {
                stage: stage + 1,
                epoch,
                lr: opt.lr,
                train_loss: total_loss / train.len() as f64,
                val_auc,
            });
        }
    }
    model.params.set_frozen_where(|_| true, false);
    Ok(logs)
}

/// Eval-mode default probabilities over a dataset: deterministic neighbor
/// truncation, no dropout. Runs in parallel; results are order-exact.
pub fn score(model: &Model, set: &Dataset, sampler: &SamplerConfig) -> Result<Vec<f64>> {
    par_map_indices(set.len(), |i| -> Result<f64> {
        let sub = truncate_eval(&set.subs[i], sampler)?;
        let mut tape = Tape::new();
        let p = model.forward(&mut tape, &sub, None)?;
        Ok(tape.value(p).item())
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};
    use rand::Rng;
    use crate::seq_encoder::Transaction;
    use crate::synth::{generate, GenConfig};

    #[test]
    fn step_lr_follows_the_formula() {
        assert_eq!(step_lr(0, 0.001, 2, 0.5).unwrap(), 0.001);
        assert!((step_lr(4, 0.001, 2, 0.5).unwrap() - 0.00025).abs() < 1e-18);
        let seq: Vec<f64> = (0..10).map(|e| step_lr(e, 0.01, 3, 0.7).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
        assert!(step_lr(1, 0.001, 0, 0.5).is_err());
    }

    #[test]
    fn bce_matches_hand_values_and_logit_gradient() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 2e-12);
        // d/dlogit bce(sigmoid(logit), y) = sigmoid(logit) - y
        for (logit, y) in [(0.3, 1.0), (-1.2, 0.0), (2.0, 1.0)] {
            let f = |l: f64| bce_loss(crate::autodiff::sigmoid(l), y);
            let h = 1e-6;
            let numeric = (f(logit + h) - f(logit - h)) / (2.0 * h);
            let analytic = crate::autodiff::sigmoid(logit) - y;
            assert!((numeric - analytic).abs() < 1e-8, "logit {logit}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", crate::autodiff::Tensor::vector(vec![1.0, 2.0]));
        ps.get_mut(id).grad = crate::autodiff::Tensor::vector(vec![f64::NAN, 0.0]);
        let mut opt = Adam::new(&ps, 0.1);
        assert!(opt.step(&mut ps).is_err());
    }

    fn toy_sequences(n: usize, seed: u64) -> Vec<(EventSequence, u8)> {
        // separable: positives spend large amounts at mcc 0, negatives
        // small amounts at mcc 1
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = (i % 2) as u8;
                let events = (0..4)
                    .map(|k| Transaction {
                        amount: if y == 1 { 500.0 } else { 5.0 } * (1.0 + 0.1 * rng.gen::<f64>()),
                        currency: 0,
                        mcc: Some(y as u32),
                        timestamp: k * 10_000,
                    })
                    .collect();
                (EventSequence::new(events), y)
            })
            .collect()
    }

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            currency_vocab: 3,
            currency_embed_dim: 2,
            mcc_vocab: 40,
            mcc_embed_dim: 3,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_epochs_return_initialization_unchanged() {
        let data = toy_sequences(8, 1);
        let cfg = TrainConfig { pretrain_epochs: 0, ..TrainConfig::default() };
        let pre = pretrain_encoder(&data, &small_encoder(), &cfg).unwrap();
        // reconstruct the initialization with the same seed
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        EncoderIds::init(&mut ps, "enc", &pre.encoder, true, &mut rng);
        for (a, b) in pre.params.ids().zip(ps.ids()) {
            assert_eq!(pre.params.value(a).data(), ps.value(b).data());
        }
    }

    #[test]
    fn single_class_pretraining_is_rejected() {
        let mut data = toy_sequences(6, 2);
        for (_, y) in &mut data {
            *y = 1;
        }
        assert!(pretrain_encoder(&data, &small_encoder(), &TrainConfig::default()).is_err());
        assert!(pretrain_encoder(&[], &small_encoder(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn separable_toy_loss_decreases_over_epochs() {
        let data = toy_sequences(32, 3);
        let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        let losses: Vec<f64> = (0..=3)
            .map(|epochs| {
                let pre = pretrain_encoder(
                    &data,
                    &small_encoder(),
                    &TrainConfig { pretrain_epochs: epochs, ..cfg.clone() },
                )
                .unwrap();
                pretrain_loss(&pre, &data).unwrap()
            })
            .collect();
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "losses not strictly decreasing: {losses:?}"
        );
    }

    #[test]
    fn pretrained_encoder_beats_080_auc_on_node_signal_data() {
        // hop-0-only signal: labels depend on the client's own sequences
        let gen = GenConfig {
            n_clients: 1200,
            w0: 2.0,
            w1: 0.0,
            w2: 0.0,
            tx_per_client: (12, 20),
            seed: 9,
            ..GenConfig::default()
        };
        let (g, _) = generate(&gen).unwrap();
        let all: Vec<(EventSequence, u8)> = g
            .client_ids()
            .map(|id| (g.client_seq(id).unwrap().clone(), g.label(id).unwrap()))
            .collect();
        let (train, held) = all.split_at(900);
        let cfg = TrainConfig { pretrain_epochs: 6, seed: 5, ..TrainConfig::default() };
        let pre = pretrain_encoder(train, &EncoderConfig::default(), &cfg).unwrap();
        let seqs: Vec<EventSequence> = held.iter().map(|(s, _)| s.clone()).collect();
        let labels: Vec<u8> = held.iter().map(|(_, y)| *y).collect();
        let scores = pretrain_scores(&pre, &seqs).unwrap();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!(auc > 0.8, "held-out AUC {auc}");
    }

    fn tiny_graph_dataset(seed: u64, n: usize) -> (Dataset, Dataset) {
        // higher base rate keeps both classes present in tiny splits
        let gen = GenConfig { n_clients: n, seed, base_rate: 0.4, ..GenConfig::default() };
        let (g, _) = generate(&gen).unwrap();
        let ids: Vec<String> = g.client_ids().map(str::to_string).collect();
        let split = n * 3 / 4;
        let train = Dataset::extract(&g, ids[..split].iter().map(String::as_str)).unwrap();
        let val = Dataset::extract(&g, ids[split..].iter().map(String::as_str)).unwrap();
        (train, val)
    }

    fn tiny_model(layers: usize) -> Model {
        Model::new(ModelConfig {
            kind: ModelKind::EwsGcn { layers },
            encoder: EncoderConfig {
                hidden_dim: 8,
                currency_embed_dim: 2,
                mcc_embed_dim: 3,
                ..EncoderConfig::default()
            },
            channels: 6,
            init_seed: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn param_bytes(ps: &ParamSet, prefix: &str) -> Vec<u64> {
        ps.ids()
            .filter(|&id| ps.name(id).starts_with(prefix))
            .flat_map(|id| ps.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn all_zero_stage_epochs_leave_the_model_untouched() {
        let (train, val) = tiny_graph_dataset(21, 40);
        let mut model = tiny_model(1);
        let before = param_bytes(&model.params, "");
        let cfg = TrainConfig { stage_epochs: (0, 0, 0), ..TrainConfig::default() };
        let logs =
            train_three_stage(&mut model, &train, &val, &SamplerConfig::default(), &cfg).unwrap();
        assert!(logs.is_empty());
        assert_eq!(param_bytes(&model.params, ""), before);
    }

    #[test]
    fn freeze_schedule_honors_the_stage_contract() {
        let (train, val) = tiny_graph_dataset(22, 40);
        let sampler = SamplerConfig::default();

        // stage 1 only: both encoders bit-identical, conv/head moved
        let mut model = tiny_model(1);
        let node0 = param_bytes(&model.params, "node_enc");
        let edge0 = param_bytes(&model.params, "edge_enc");
        let conv0 = param_bytes(&model.params, "conv");
        let cfg = TrainConfig { stage_epochs: (1, 0, 0), batch_size: 8, ..TrainConfig::default() };
        train_three_stage(&mut model, &train, &val, &sampler, &cfg).unwrap();
        assert_eq!(param_bytes(&model.params, "node_enc"), node0);
        assert_eq!(param_bytes(&model.params, "edge_enc"), edge0);
        assert_ne!(param_bytes(&model.params, "conv"), conv0);

        // stages 1+2: node encoder still frozen, edge encoder updated
        let mut model = tiny_model(1);
        let node0 = param_bytes(&model.params, "node_enc");
        let edge0 = param_bytes(&model.params, "edge_enc");
        let cfg = TrainConfig { stage_epochs: (1, 1, 0), batch_size: 8, ..TrainConfig::default() };
        train_three_stage(&mut model, &train, &val, &sampler, &cfg).unwrap();
        assert_eq!(param_bytes(&model.params, "node_enc"), node0);
        assert_ne!(param_bytes(&model.params, "edge_enc"), edge0);

        // full run: node encoder finally moves in stage 3
        let mut model = tiny_model(1);
        let node0 = param_bytes(&model.params, "node_enc");
        let cfg = TrainConfig { stage_epochs: (1, 1, 1), batch_size: 8, ..TrainConfig::default() };
        train_three_stage(&mut model, &train, &val, &sampler, &cfg).unwrap();
        assert_ne!(param_bytes(&model.params, "node_enc"), node0);
    }

    #[test]
    fn training_is_reproducible_bit_for_bit() {
        let (train, val) = tiny_graph_dataset(23, 32);
        let cfg = TrainConfig { stage_epochs: (1, 1, 1), batch_size: 8, ..TrainConfig::default() };
        let sampler = SamplerConfig::default();
        let run = || {
            let mut model = tiny_model(2);
            let logs = train_three_stage(&mut model, &train, &val, &sampler, &cfg).unwrap();
            (param_bytes(&model.params, ""), logs)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn stage_three_loss_improves_on_stage_one() {
        let (train, val) = tiny_graph_dataset(24, 60);
        let mut model = tiny_model(1);
        let cfg = TrainConfig {
            stage_epochs: (2, 1, 2),
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let logs =
            train_three_stage(&mut model, &train, &val, &SamplerConfig::default(), &cfg).unwrap();
        let stage1_final = logs.iter().filter(|l| l.stage == 1).last().unwrap().train_loss;
        let stage3_final = logs.iter().filter(|l| l.stage == 3).last().unwrap().train_loss;
        assert!(
            stage3_final < stage1_final,
            "stage 3 {stage3_final} vs stage 1 {stage1_final}: {logs:?}"
        );
    }

    #[test]
    fn log_covers_every_epoch_with_restarting_lr() {
        let (train, val) = tiny_graph_dataset(25, 24);
        let mut model = tiny_model(1);
        let cfg = TrainConfig {
            stage_epochs: (3, 0, 3),
            batch_size: 8,
            step_size: 2,
            gamma: 0.5,
            ..TrainConfig::default()
        };
        let logs =
            train_three_stage(&mut model, &train, &val, &SamplerConfig::default(), &cfg).unwrap();
        assert_eq!(logs.len(), 6);
        for l in &logs {
            assert!(l.val_auc >= 0.0 && l.val_auc <= 1.0);
            assert!(l.train_loss.is_finite());
        }
        // scheduler restarts per stage: epoch 0 of each stage at base lr
        let stage3_first = logs.iter().find(|l| l.stage == 3).unwrap();
        assert_eq!(stage3_first.lr, cfg.lr);
        let stage1_last = logs.iter().filter(|l| l.stage == 1).last().unwrap();
        assert_eq!(stage1_last.lr, cfg.lr * cfg.gamma);
    }
}
