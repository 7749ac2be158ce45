//! Synthetic transaction-graph benchmark with plantable default signals at
//! hop distances 0, 1, and 2, and a closed-form Bayes posterior oracle.
//!
//! Client risk is a latent factor ρ ~ U[0,1]. It surfaces only through
//! sequence shape: risky merchant codes and amount volatility in purchases
//! (hop 0), and late-night transfer frequency on edges (carrying hop-1
//! information). The label posterior mixes own, 1-hop, and exactly-2-hop
//! latents with configurable weights and is calibrated to a target base
//! rate, so the true ranking ceiling is known exactly.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::graph_store::TxGraph;
use crate::metrics::roc_auc;
use crate::seq_encoder::{EventSequence, Transaction};

/// Merchant codes below this bound are "risky"; the vocabulary is 40 wide.
pub const RISKY_MCC_BOUND: u32 = 8;
pub const MCC_VOCAB: u32 = 40;
pub const CURRENCY_VOCAB: u32 = 3;

const EPOCH: i64 = 1_600_000_000;
const WINDOW_DAYS: i64 = 90;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_clients: usize,
    pub mean_degree: f64,
    /// Inclusive bounds on purchases per client.
    pub tx_per_client: (usize, usize),
    /// Inclusive bounds on transfer events per edge.
    pub transfers_per_edge: (usize, usize),
    /// Own-latent signal weight.
    pub w0: f64,
    /// 1-hop mean-latent weight.
    pub w1: f64,
    /// Exactly-2-hop mean-latent weight.
    pub w2: f64,
    pub base_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_clients: 2000,
            mean_degree: 3.0,
            tx_per_client: (8, 16),
            transfers_per_edge: (2, 5),
            w0: 0.5,
            w1: 1.0,
            w2: 0.5,
            base_rate: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::Config("n_clients must be at least 2".into()));
        }
        if !(self.mean_degree > 0.0) || self.mean_degree >= self.n_clients as f64 {
            return Err(Error::Config(format!(
                "mean_degree {} must be in (0, n_clients)",
                self.mean_degree
            )));
        }
        for (name, (lo, hi)) in
            [("tx_per_client", self.tx_per_client), ("transfers_per_edge", self.transfers_per_edge)]
        {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) invalid")));
            }
        }
        if self.w0 < 0.0 || self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config("signal weights must be non-negative".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(Error::Config(format!("base_rate {} outside (0,1)", self.base_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtClient {
    pub id: String,
    pub rho: f64,
    /// Latent risk score `w0·ρ + w1·mean(1-hop ρ) + w2·mean(2-hop ρ)`.
    pub r: f64,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub clients: Vec<GtClient>,
}

impl GroundTruth {
    pub fn posterior_of(&self, id: &str) -> Option<f64> {
        self.clients.iter().find(|c| c.id == id).map(|c| c.posterior)
    }
}

fn client_id(i: usize) -> String {
    format!("c{i:05}")
}

/// Sample an undirected edge set with a configuration-model flavor: Poisson
/// degrees, stubs shuffled and paired, self-loops and duplicates dropped.
fn sample_edges<R: Rng>(n: usize, mean_degree: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let pois = Poisson::new(mean_degree).expect("validated mean_degree");
    let mut stubs = Vec::new();
    for i in 0..n {
        let d = pois.sample(rng) as usize;
        stubs.extend(std::iter::repeat(i).take(d));
    }
    if stubs.len() % 2 == 1 {
        stubs.pop();
    }
    // Fisher-Yates
    for i in (1..stubs.len()).rev() {
        stubs.swap(i, rng.gen_range(0..=i));
    }
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    for pair in stubs.chunks_exact(2) {
        let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
        if a != b && seen.insert((a, b)) {
            edges.push((a, b));
        }
    }
    edges
}

fn random_timestamp<R: Rng>(rng: &mut R, night: bool) -> i64 {
    let day = rng.gen_range(0..WINDOW_DAYS);
    let hour = if night { rng.gen_range(0..6) } else { rng.gen_range(8..22) };
    EPOCH + day * 86_400 + hour * 3600 + rng.gen_range(0..3600)
}

pub fn generate(cfg: &GenConfig) -> Result<(TxGraph, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_clients;
    let rho: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let edges = sample_edges(n, cfg.mean_degree, &mut rng);

    let mut graph = TxGraph::new();
    for (i, &r) in rho.iter().enumerate() {
        let count = rng.gen_range(cfg.tx_per_client.0..=cfg.tx_per_client.1);
        let sigma = 0.4 + 1.0 * r;
        let amounts = LogNormal::new(50f64.ln(), sigma).expect("finite sigma");
        let p_risky = 0.05 + 0.9 * r;
        let events: Vec<Transaction> = (0..count)
            .map(|_| {
                let mcc = if rng.gen::<f64>() < p_risky {
                    rng.gen_range(0..RISKY_MCC_BOUND)
                } else {
                    rng.gen_range(RISKY_MCC_BOUND..MCC_VOCAB)
                };
                Transaction {
                    amount: amounts.sample(&mut rng),
                    currency: rng.gen_range(0..CURRENCY_VOCAB),
                    mcc: Some(mcc),
                    timestamp: random_timestamp(&mut rng, false),
                }
            })
            .collect();
        graph.add_client(client_id(i), EventSequence::new(events));
    }

    let transfer_amounts = LogNormal::new(100f64.ln(), 0.6).expect("fixed sigma");
    for &(u, v) in &edges {
        let count = rng.gen_range(cfg.transfers_per_edge.0..=cfg.transfers_per_edge.1);
        let p_night = 0.1 + 0.8 * rho[u].max(rho[v]);
        let mut fwd = Vec::new();
        let mut rev = Vec::new();
        for _ in 0..count {
            let night = rng.gen::<f64>() < p_night;
            let tx = Transaction {
                amount: transfer_amounts.sample(&mut rng),
                currency: 0,
                mcc: None,
                timestamp: random_timestamp(&mut rng, night),
            };
            if rng.gen::<bool>() {
                fwd.push(tx);
            } else {
                rev.push(tx);
            }
        }
        let (cu, cv) = (client_id(u), client_id(v));
        if !fwd.is_empty() {
            graph.add_transfer(&cu, &cv, EventSequence::new(fwd))?;
        }
        if !rev.is_empty() {
            graph.add_transfer(&cv, &cu, EventSequence::new(rev))?;
        }
    }

    // hop sets from the undirected edge list (only surviving edges count)
    let mut adj = vec![BTreeSet::new(); n];
    for &(u, v) in &edges {
        adj[u].insert(v);
        adj[v].insert(u);
    }
    let hop_mean = |set: &BTreeSet<usize>| -> f64 {
        if set.is_empty() {
            0.5
        } else {
            set.iter().map(|&j| rho[j]).sum::<f64>() / set.len() as f64
        }
    };
    let r: Vec<f64> = (0..n)
        .map(|i| {
            let one_hop = &adj[i];
            let mut two_hop = BTreeSet::new();
            for &j in one_hop {
                for &k in &adj[j] {
                    if k != i && !one_hop.contains(&k) {
                        two_hop.insert(k);
                    }
                }
            }
            cfg.w0 * rho[i] + cfg.w1 * hop_mean(one_hop) + cfg.w2 * hop_mean(&two_hop)
        })
        .collect();

    let posteriors = calibrate(&r, cfg.base_rate);
    let mut clients = Vec::with_capacity(n);
    for i in 0..n {
        let id = client_id(i);
        let label = u8::from(rng.gen::<f64>() < posteriors[i]);
        graph.set_label(&id, label)?;
        clients.push(GtClient { id, rho: rho[i], r: r[i], posterior: posteriors[i] });
    }
    Ok((graph, GroundTruth { clients }))
}

/// Map latent scores through `σ(slope·(r − mean) + b)` with the intercept
/// bisected until the mean posterior hits `base_rate` (to 1e-9). Constant
/// scores collapse to `posterior = base_rate` exactly.
fn calibrate(r: &[f64], base_rate: f64) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return vec![base_rate; r.len()];
    }
    let slope = 8.0 / std;
    let mean_post = |b: f64| r.iter().map(|&v| sigmoid(slope * (v - mean) + b)).sum::<f64>() / n;
    let (mut lo, mut hi) = (-60.0, 60.0);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if mean_post(mid) < base_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    r.iter().map(|&v| sigmoid(slope * (v - mean) + b)).collect()
}

/// AUC of the true posterior against the drawn labels — the achievable
/// ranking ceiling in expectation. All-tied posteriors give 0.5.
pub fn bayes_auc(gt: &GroundTruth, graph: &TxGraph) -> Result<f64> {
    let mut scores = Vec::with_capacity(gt.clients.len());
    let mut labels = Vec::with_capacity(gt.clients.len());
    for c in &gt.clients {
        let label = graph
            .label(&c.id)
            .ok_or_else(|| Error::InvalidInput(format!("no label for client {}", c.id)))?;
        scores.push(c.posterior);
        labels.push(label);
    }
    roc_auc(&scores, &labels)
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    id: String,
    rho: f64,
    posterior: f64,
}

pub fn write_ground_truth<W: Write>(gt: &GroundTruth, w: &mut W) -> Result<()> {
    for c in &gt.clients {
        let line = GtLine { id: c.id.clone(), rho: c.rho, posterior: c.posterior };
        serde_json::to_writer(&mut *w, &line)
            .map_err(|e| Error::InvalidInput(format!("ground-truth serialization: {e}")))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(r: R) -> Result<GroundTruth> {
    let mut clients = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GtLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() })?;
        clients.push(GtClient { id: parsed.id, rho: parsed.rho, r: f64::NAN, posterior: parsed.posterior });
    }
    Ok(GroundTruth { clients })
}
