//! GRU encoder mapping a variable-length transaction or transfer sequence to
//! a fixed 60-dimensional embedding, plus the classification head used for
//! pretraining on the scoring task.
//!
//! Purchases carry an MCC code; person-to-person transfers do not and fall
//! back to a reserved embedding-table row. The same encoder architecture
//! consumes both, so a pretrained copy can initialize the node and edge
//! encoders of the full graph model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};

/// One card operation: a purchase (has an MCC) or a transfer (no MCC).
#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub amount: f64,
    pub currency: u32,
    pub mcc: Option<u32>,
    /// Seconds since epoch.
    pub timestamp: i64,
}

/// Time-ordered list of transactions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventSequence {
    pub events: Vec<Transaction>,
}

impl EventSequence {
    /// Builds a sequence, sorting events into non-decreasing timestamp order.
    pub fn new(mut events: Vec<Transaction>) -> Self {
        events.sort_by_key(|t| t.timestamp);
        EventSequence { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Frozen normalization statistics for `log1p(amount)`.
#[derive(Debug, Clone, Default)]
pub struct AmountStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl AmountStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, amount: f64) {
        let x = amount.ln_1p();
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        (self.m2 / self.count as f64).sqrt().max(1e-8)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub currency_vocab: usize,
    pub currency_embed_dim: usize,
    /// Real MCC codes; one extra reserved row is added for transfers.
    pub mcc_vocab: usize,
    pub mcc_embed_dim: usize,
    /// Most recent events kept when encoding.
    pub max_seq_len: usize,
    /// Mean of log1p(amount), frozen at pretraining end.
    pub amount_mean: f64,
    pub amount_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 60,
            currency_vocab: 3,
            currency_embed_dim: 2,
            mcc_vocab: 40,
            mcc_embed_dim: 8,
            max_seq_len: 512,
            amount_mean: 0.0,
            amount_std: 1.0,
        }
    }
}

/// Numeric slots: amount, sin/cos time-of-day, sin/cos day-of-week,
/// log inter-event gap, direction flag.
const NUMERIC_FEATURES: usize = 7;

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.currency_embed_dim + self.mcc_embed_dim + NUMERIC_FEATURES
    }

    /// Row used when a transaction has no MCC (transfers).
    pub fn reserved_mcc_row(&self) -> usize {
        self.mcc_vocab
    }

    pub fn freeze_stats(&mut self, stats: &AmountStats) {
        self.amount_mean = stats.mean();
        self.amount_std = stats.std();
    }
}

/// Parameter handles for one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let ws = 1.0 / (input_dim as f64).sqrt();
        let us = 1.0 / (hidden_dim as f64).sqrt();
        let gate = |name: &str, ps: &mut ParamSet, rng: &mut R| {
            (
                ps.add(format!("{prefix}.w_{name}"), Tensor::randn(&[input_dim, hidden_dim], ws, rng)),
                ps.add(format!("{prefix}.u_{name}"), Tensor::randn(&[hidden_dim, hidden_dim], us, rng)),
                ps.add(format!("{prefix}.b_{name}"), Tensor::zeros(&[hidden_dim])),
            )
        };
        let (w_update, u_update, b_update) = gate("update", ps, rng);
        let (w_reset, u_reset, b_reset) = gate("reset", ps, rng);
        let (w_cand, u_cand, b_cand) = gate("cand", ps, rng);
        GruIds {
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
        }
    }
}

/// One GRU step: update/reset gates with sigmoid, tanh candidate,
/// `h' = (1 - z) ⊙ h + z ⊙ c`.
pub fn gru_step(
    tape: &mut Tape,
    ps: &ParamSet,
    gru: &GruIds,
    input: NodeId,
    hidden: NodeId,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId| -> Result<NodeId> {
        let wn = tape.param(ps, w);
        let un = tape.param(ps, u);
        let bn = tape.param(ps, b);
        let xi = tape.matmul(input, wn)?;
        let hi = tape.matmul(hidden, un)?;
        let s = tape.add(xi, hi)?;
        tape.add(s, bn)
    };
    let z_pre = gate(tape, gru.w_update, gru.u_update, gru.b_update)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, gru.w_reset, gru.u_reset, gru.b_reset)?;
    let r = tape.sigmoid(r_pre);

    let wn = tape.param(ps, gru.w_cand);
    let un = tape.param(ps, gru.u_cand);
    let bn = tape.param(ps, gru.b_cand);
    let xi = tape.matmul(input, wn)?;
    let rh = tape.mul(r, hidden)?;
    let hi = tape.matmul(rh, un)?;
    let s = tape.add(xi, hi)?;
    let c_pre = tape.add(s, bn)?;
    let c = tape.tanh(c_pre);

    let one = tape.constant(Tensor::scalar(1.0));
    let neg_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add(one, neg_z)?;
    let keep = tape.mul(one_minus_z, hidden)?;
    let write = tape.mul(z, c)?;
    tape.add(keep, write)
}

/// Parameter handles for one sequence encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderIds {
    pub currency_embed: ParamId,
    pub mcc_embed: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub gru: GruIds,
    pub head: Option<(ParamId, ParamId)>,
}

impl EncoderIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        cfg: &EncoderConfig,
        with_head: bool,
        rng: &mut R,
    ) -> Self {
        let d = cfg.input_dim();
        let currency_embed = ps.add(
            format!("{prefix}.currency_embed"),
            Tensor::randn(&[cfg.currency_vocab, cfg.currency_embed_dim], 0.1, rng),
        );
        let mcc_embed = ps.add(
            format!("{prefix}.mcc_embed"),
            Tensor::randn(&[cfg.mcc_vocab + 1, cfg.mcc_embed_dim], 0.1, rng),
        );
        let proj_w = ps.add(
            format!("{prefix}.proj_w"),
            Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng),
        );
        let proj_b = ps.add(format!("{prefix}.proj_b"), Tensor::zeros(&[d]));
        let gru = GruIds::init(ps, &format!("{prefix}.gru"), d, cfg.hidden_dim, rng);
        let head = with_head.then(|| {
            (
                ps.add(format!("{prefix}.head_w"), Tensor::zeros(&[cfg.hidden_dim])),
                ps.add(format!("{prefix}.head_b"), Tensor::zeros(&[1])),
            )
        });
        EncoderIds { currency_embed, mcc_embed, proj_w, proj_b, gru, head }
    }
}

/// Embedding + numeric features for one event. `prev_ts` is the previous
/// event's timestamp (for the inter-event gap); `direction` is the transfer
/// direction flag, 0 for node sequences.
pub fn featurize(
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &EncoderIds,
    cfg: &EncoderConfig,
    tx: &Transaction,
    prev_ts: Option<i64>,
    direction: f64,
) -> Result<NodeId> {
    if tx.currency as usize >= cfg.currency_vocab {
        return Err(Error::InvalidInput(format!(
            "currency id {} out of vocabulary ({})",
            tx.currency, cfg.currency_vocab
        )));
    }
    let mcc_row = match tx.mcc {
        Some(m) if (m as usize) < cfg.mcc_vocab => m as usize,
        Some(m) => {
            return Err(Error::InvalidInput(format!(
                "mcc id {m} out of vocabulary ({})",
                cfg.mcc_vocab
            )))
        }
        None => cfg.reserved_mcc_row(),
    };

    let cur_table = tape.param(ps, enc.currency_embed);
    let cur_vec = tape.row(cur_table, tx.currency as usize)?;
    let mcc_table = tape.param(ps, enc.mcc_embed);
    let mcc_vec = tape.row(mcc_table, mcc_row)?;

    let norm_amount = (tx.amount.ln_1p() - cfg.amount_mean) / cfg.amount_std;
    let tod = tx.timestamp.rem_euclid(86_400) as f64 / 86_400.0;
    let dow = tx.timestamp.div_euclid(86_400).rem_euclid(7) as f64 / 7.0;
    let gap = prev_ts.map_or(0.0, |p| (tx.timestamp - p).max(0) as f64);
    let tau = std::f64::consts::TAU;
    let numeric = tape.constant(Tensor::vector(vec![
        norm_amount,
        (tau * tod).sin(),
        (tau * tod).cos(),
        (tau * dow).sin(),
        (tau * dow).cos(),
        gap.ln_1p() / 10.0,
        direction,
    ]));
    tape.concat(&[cur_vec, mcc_vec, numeric])
}

fn encode_events(
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &EncoderIds,
    cfg: &EncoderConfig,
    events: &[(&Transaction, f64)],
) -> Result<NodeId> {
    let start = events.len().saturating_sub(cfg.max_seq_len);
    let events = &events[start..];
    let mut hidden = tape.constant(Tensor::zeros(&[cfg.hidden_dim]));
    let mut prev_ts = None;
    for (tx, dir) in events {
        let feats = featurize(tape, ps, enc, cfg, tx, prev_ts, *dir)?;
        let w = tape.param(ps, enc.proj_w);
        let b = tape.param(ps, enc.proj_b);
        let projected = tape.matmul(feats, w)?;
        let input = tape.add(projected, b)?;
        hidden = gru_step(tape, ps, &enc.gru, input, hidden)?;
        prev_ts = Some(tx.timestamp);
    }
    Ok(hidden)
}

/// Final hidden state after consuming a node sequence in time order.
/// The empty sequence returns the zero initial state.
pub fn encode(
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &EncoderIds,
    cfg: &EncoderConfig,
    seq: &EventSequence,
) -> Result<NodeId> {
    let events: Vec<(&Transaction, f64)> = seq.events.iter().map(|t| (t, 0.0)).collect();
    encode_events(tape, ps, enc, cfg, &events)
}

/// Encoder over a merged transfer sequence with per-event direction flags.
pub fn encode_flagged(
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &EncoderIds,
    cfg: &EncoderConfig,
    events: &[(Transaction, f64)],
) -> Result<NodeId> {
    let refs: Vec<(&Transaction, f64)> = events.iter().map(|(t, d)| (t, *d)).collect();
    encode_events(tape, ps, enc, cfg, &refs)
}

/// Pretraining forward pass: linear head on the sequence embedding.
/// `sigmoid(logit)` is the default probability.
pub fn pretrain_forward(
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &EncoderIds,
    cfg: &EncoderConfig,
    seq: &EventSequence,
) -> Result<NodeId> {
    let (head_w, head_b) = enc
        .head
        .ok_or_else(|| Error::Config("encoder has no pretraining head".into()))?;
    let h = encode(tape, ps, enc, cfg, seq)?;
    let w = tape.param(ps, head_w);
    let b = tape.param(ps, head_b);
    let dot = tape.matmul(h, w)?;
    tape.add(dot, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tx(amount: f64, mcc: Option<u32>, ts: i64) -> Transaction {
        Transaction { amount, currency: 0, mcc, timestamp: ts }
    }

    fn setup(with_head: bool) -> (EncoderConfig, ParamSet, EncoderIds) {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let enc = EncoderIds::init(&mut ps, "enc", &cfg, with_head, &mut rng);
        (cfg, ps, enc)
    }

    #[test]
    fn transfer_uses_reserved_mcc_row() {
        let (cfg, ps, enc) = setup(false);
        let mut tape = Tape::new();
        let transfer = featurize(&mut tape, &ps, &enc, &cfg, &tx(5.0, None, 0), None, 0.0).unwrap();
        let reserved = {
            let table = tape.param(&ps, enc.mcc_embed);
            tape.row(table, cfg.reserved_mcc_row()).unwrap()
        };
        let got = &tape.value(transfer).data()
            [cfg.currency_embed_dim..cfg.currency_embed_dim + cfg.mcc_embed_dim];
        assert_eq!(got, tape.value(reserved).data());
    }

    #[test]
    fn featurize_rejects_out_of_vocab() {
        let (cfg, ps, enc) = setup(false);
        let mut tape = Tape::new();
        let bad_cur = Transaction { amount: 1.0, currency: 99, mcc: None, timestamp: 0 };
        assert!(featurize(&mut tape, &ps, &enc, &cfg, &bad_cur, None, 0.0).is_err());
        let bad_mcc = tx(1.0, Some(40), 0);
        assert!(featurize(&mut tape, &ps, &enc, &cfg, &bad_mcc, None, 0.0).is_err());
    }

    #[test]
    fn amount_at_running_mean_normalizes_to_zero() {
        let (mut cfg, ps, enc) = setup(false);
        let mut stats = AmountStats::new();
        for a in [10.0, 20.0, 30.0] {
            stats.observe(a);
        }
        cfg.freeze_stats(&stats);
        let amount = stats.mean().exp_m1();
        let mut tape = Tape::new();
        let f = featurize(&mut tape, &ps, &enc, &cfg, &tx(amount, Some(1), 0), None, 0.0).unwrap();
        let slot = cfg.currency_embed_dim + cfg.mcc_embed_dim;
        assert!(tape.value(f).data()[slot].abs() < 1e-12);
    }

    #[test]
    fn time_of_day_features_are_24h_periodic() {
        let (cfg, ps, enc) = setup(false);
        let mut tape = Tape::new();
        let a = featurize(&mut tape, &ps, &enc, &cfg, &tx(1.0, Some(1), 50_000), None, 0.0).unwrap();
        let b = featurize(&mut tape, &ps, &enc, &cfg, &tx(1.0, Some(1), 50_000 + 86_400), None, 0.0)
            .unwrap();
        let base = cfg.currency_embed_dim + cfg.mcc_embed_dim + 1;
        for i in base..base + 2 {
            assert!((tape.value(a).data()[i] - tape.value(b).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_encodes_to_zero() {
        let (cfg, ps, enc) = setup(false);
        let mut tape = Tape::new();
        let h = encode(&mut tape, &ps, &enc, &cfg, &EventSequence::default()).unwrap();
        assert_eq!(tape.value(h).len(), 60);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gru_weights_keep_zero_state() {
        let (cfg, mut ps, enc) = setup(false);
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.name(id).contains(".gru.") {
                let shape = ps.value(id).shape().to_vec();
                ps.get_mut(id).value = Tensor::zeros(&shape);
            }
        }
        let seq = EventSequence::new(vec![tx(3.0, Some(2), 10), tx(9.0, None, 20)]);
        let mut tape = Tape::new();
        let h = encode(&mut tape, &ps, &enc, &cfg, &seq).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_60_dim_and_deterministic() {
        let (cfg, ps, enc) = setup(false);
        let seq = EventSequence::new(
            (0..5).map(|i| tx(i as f64 + 1.0, Some(i), i as i64 * 3600)).collect(),
        );
        let mut t1 = Tape::new();
        let h1 = encode(&mut t1, &ps, &enc, &cfg, &seq).unwrap();
        let mut t2 = Tape::new();
        let h2 = encode(&mut t2, &ps, &enc, &cfg, &seq).unwrap();
        assert_eq!(t1.value(h1).len(), 60);
        assert_eq!(t1.value(h1).data(), t2.value(h2).data());
    }

    #[test]
    fn reversed_sequence_changes_embedding() {
        let (cfg, ps, enc) = setup(false);
        let fwd = EventSequence::new(
            (0..5).map(|i| tx((i * 7 + 1) as f64, Some(i), i as i64 * 1000)).collect(),
        );
        // same events, reversed roles in time: reverse amounts/mccs
        let rev_events: Vec<Transaction> = fwd
            .events
            .iter()
            .rev()
            .zip(&fwd.events)
            .map(|(src, slot)| Transaction { timestamp: slot.timestamp, ..src.clone() })
            .collect();
        let rev = EventSequence::new(rev_events);
        let mut tape = Tape::new();
        let hf = encode(&mut tape, &ps, &enc, &cfg, &fwd).unwrap();
        let hr = encode(&mut tape, &ps, &enc, &cfg, &rev).unwrap();
        let dist: f64 = tape
            .value(hf)
            .data()
            .iter()
            .zip(tape.value(hr).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn zero_head_gives_probability_half_and_scales_linearly() {
        let (cfg, mut ps, enc) = setup(true);
        let seq = EventSequence::new(vec![tx(4.0, Some(3), 100)]);
        let mut tape = Tape::new();
        let logit = pretrain_forward(&mut tape, &ps, &enc, &cfg, &seq).unwrap();
        assert_eq!(tape.value(logit).item(), 0.0);

        let (hw, hb) = enc.head.unwrap();
        ps.get_mut(hw).value = Tensor::full(&[cfg.hidden_dim], 0.3);
        ps.get_mut(hb).value = Tensor::scalar(0.1);
        let mut t1 = Tape::new();
        let l1 = pretrain_forward(&mut t1, &ps, &enc, &cfg, &seq).unwrap();
        let v1 = t1.value(l1).item();
        for id in [hw, hb] {
            let doubled = crate::autodiff::Tensor::vector(
                ps.value(id).data().iter().map(|v| 2.0 * v).collect(),
            );
            let shape = ps.value(id).shape().to_vec();
            ps.get_mut(id).value = Tensor::new(shape, doubled.data().to_vec()).unwrap();
        }
        let mut t2 = Tape::new();
        let l2 = pretrain_forward(&mut t2, &ps, &enc, &cfg, &seq).unwrap();
        assert!((t2.value(l2).item() - 2.0 * v1).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_passes_grad_check() {
        // small vocabularies keep the coordinate sweep quick
        let cfg = EncoderConfig {
            mcc_vocab: 4,
            mcc_embed_dim: 3,
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let enc = EncoderIds::init(&mut ps, "enc", &cfg, true, &mut rng);
        let (hw, hb) = enc.head.unwrap();
        ps.get_mut(hw).value = Tensor::randn(&[cfg.hidden_dim], 0.2, &mut rng);
        ps.get_mut(hb).value = Tensor::scalar(0.05);
        let seq = EventSequence::new(vec![
            tx(12.0, Some(1), 100),
            tx(3.0, None, 7_000),
            tx(88.0, Some(3), 90_000),
        ]);
        let err = grad_check(&ps, 1e-5, |ps, tape| {
            let logit = pretrain_forward(tape, ps, &enc, &cfg, &seq)?;
            let p = tape.sigmoid(logit);
            tape.bce_loss(p, 1.0)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
