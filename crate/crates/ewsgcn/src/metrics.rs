//! Ranking metrics: ROC-AUC with tie handling, a stratified-bootstrap
//! standard error, and the ROC curve itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_map_indices;

/// Mann-Whitney ROC-AUC via average ranks; tied score pairs count one half.
/// Errors when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "scores/labels length mismatch: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score in ROC-AUC input".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "ROC-AUC needs at least one positive and one negative".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Stratified-bootstrap standard error of the AUC: positives are resampled
/// among positives and negatives among negatives, `resamples` times. Each
/// replicate draws from its own generator seeded from `seed`, so the result
/// does not depend on how the replicates are scheduled.
pub fn auc_se(scores: &[f64], labels: &[u8], resamples: usize, seed: u64) -> Result<f64> {
    if resamples < 2 {
        return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
    }
    roc_auc(scores, labels)?;
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();

    let aucs: Vec<f64> = par_map_indices(resamples, |r| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(r as u64 + 1)));
        let mut s = Vec::with_capacity(scores.len());
        let mut l = Vec::with_capacity(scores.len());
        for _ in 0..pos.len() {
            s.push(pos[rng.gen_range(0..pos.len())]);
            l.push(1u8);
        }
        for _ in 0..neg.len() {
            s.push(neg[rng.gen_range(0..neg.len())]);
            l.push(0u8);
        }
        roc_auc(&s, &l).expect("resample keeps both classes")
    });

    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aucs.len() - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve points from (0,0) down through every distinct score threshold
/// to (1,1).
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    roc_auc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / n_neg, tpr: tp as f64 / n_pos, threshold: t });
    }
    Ok(points)
}

/// One scored evaluation: raw scores, labels, the AUC with its bootstrap
/// standard error, and a fingerprint of every config and seed involved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredRun {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub auc: f64,
    pub auc_se: f64,
    pub fingerprint: String,
}

impl ScoredRun {
    pub fn new(
        scores: Vec<f64>,
        labels: Vec<u8>,
        resamples: usize,
        seed: u64,
        fingerprint: String,
    ) -> Result<Self> {
        let auc = roc_auc(&scores, &labels)?;
        let auc_se = auc_se(&scores, &labels, resamples, seed)?;
        Ok(ScoredRun { scores, labels, auc, auc_se, fingerprint })
    }
}

/// Hex SHA-256 of anything serializable, for config fingerprints.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("serializable fingerprint input");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub layers: usize,
    pub mean_auc: f64,
    /// Standard error of the mean over seeds.
    pub se: f64,
    pub per_seed: Vec<f64>,
}

/// Evaluate `run(layers, seed)` over the grid and aggregate per depth.
/// `layers = 0` is the node-only model by convention of the caller.
pub fn sweep_depth<F>(l_list: &[usize], seeds: &[u64], mut run: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(usize, u64) -> Result<f64>,
{
    if l_list.is_empty() {
        return Err(Error::Config("depth sweep needs a nonempty layer list".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("depth sweep needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(l_list.len());
    for &layers in l_list {
        let per_seed: Vec<f64> =
            seeds.iter().map(|&s| run(layers, s)).collect::<Result<_>>()?;
        let n = per_seed.len() as f64;
        let mean_auc = per_seed.iter().sum::<f64>() / n;
        let se = if per_seed.len() < 2 {
            0.0
        } else {
            let var =
                per_seed.iter().map(|a| (a - mean_auc).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        rows.push(SweepRow { layers, mean_auc, se, per_seed });
    }
    Ok(rows)
}

/// Aligned text table of a depth sweep.
pub fn sweep_table_text(rows: &[SweepRow]) -> String {
    let mut out = String::from("layers  mean_auc  se\n");
    for r in rows {
        out.push_str(&format!("{:<6}  {:<8.4}  {:.4}\n", r.layers, r.mean_auc, r.se));
    }
    out
}

/// CSV export of ROC points with a `fpr,tpr,threshold` header.
pub fn roc_csv<W: std::io::Write>(points: &[RocPoint], w: &mut W) -> Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for p in points {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    Ok(())
}
