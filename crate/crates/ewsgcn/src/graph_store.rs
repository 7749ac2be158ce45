//! Attributed directed transaction graph, depth-2 ego-subgraph extraction,
//! stochastic training augmentation, and JSONL serialization.
//!
//! Neighborhood membership ignores edge direction, but the directed transfer
//! histories are preserved: when both i→j and j→i exist their sequences are
//! merged by timestamp and each event carries a direction flag that the
//! encoder consumes as a feature.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq_encoder::{EventSequence, Transaction};

pub const SCHEMA_VERSION: u32 = 1;

/// Whole transaction graph: clients with purchase histories, directed
/// transfers between client pairs, and partial default labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TxGraph {
    clients: BTreeMap<String, EventSequence>,
    transfers: BTreeMap<(String, String), EventSequence>,
    labels: BTreeMap<String, u8>,
    neighbors: BTreeMap<String, BTreeSet<String>>,
}

impl TxGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_client(&mut self, id: impl Into<String>, seq: EventSequence) {
        let id = id.into();
        self.neighbors.entry(id.clone()).or_default();
        self.clients.insert(id, seq);
    }

    pub fn set_label(&mut self, id: &str, label: u8) -> Result<()> {
        if !self.clients.contains_key(id) {
            return Err(Error::InvalidInput(format!("unknown client {id}")));
        }
        if label > 1 {
            return Err(Error::InvalidInput(format!("label must be 0 or 1, got {label}")));
        }
        self.labels.insert(id.to_string(), label);
        Ok(())
    }

    pub fn add_transfer(&mut self, src: &str, dst: &str, seq: EventSequence) -> Result<()> {
        if !self.clients.contains_key(src) || !self.clients.contains_key(dst) {
            return Err(Error::InvalidInput(format!(
                "transfer {src}->{dst} references unknown client"
            )));
        }
        if seq.is_empty() {
            return Err(Error::InvalidInput(format!(
                "transfer {src}->{dst} has an empty history"
            )));
        }
        self.neighbors.get_mut(src).unwrap().insert(dst.to_string());
        self.neighbors.get_mut(dst).unwrap().insert(src.to_string());
        self.transfers.insert((src.to_string(), dst.to_string()), seq);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.clients.contains_key(id)
    }

    pub fn client_ids(&self) -> impl Iterator<Item = &str> {
        self.clients.keys().map(String::as_str)
    }

    pub fn client_seq(&self, id: &str) -> Option<&EventSequence> {
        self.clients.get(id)
    }

    pub fn label(&self, id: &str) -> Option<u8> {
        self.labels.get(id).copied()
    }

    pub fn labels(&self) -> &BTreeMap<String, u8> {
        &self.labels
    }

    pub fn transfers(&self) -> &BTreeMap<(String, String), EventSequence> {
        &self.transfers
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Undirected neighbor set of one client.
    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &str> {
        self.neighbors.get(id).into_iter().flatten().map(String::as_str)
    }
}

/// Merged transfer history of one client pair. `a` and `b` index into the
/// subgraph's node list with `id(a) < id(b)`; a flag of +1 marks an event
/// sent a→b, -1 an event sent b→a.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSeq {
    pub a: usize,
    pub b: usize,
    pub events: Vec<(Transaction, f64)>,
}

/// Depth-limited neighborhood around one scoring target (node index 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSubgraph {
    /// Client ids; target first, remaining nodes in sorted id order.
    pub nodes: Vec<String>,
    pub node_seqs: Vec<EventSequence>,
    pub edges: Vec<EdgeSeq>,
    /// Per node: (neighbor index, edge index), sorted by neighbor.
    pub adj: Vec<Vec<(usize, usize)>>,
}

impl EgoSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Hop distance from the target for every node.
    pub fn hops(&self) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        dist[0] = 0;
        queue.push_back(0);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

fn build_adjacency(n: usize, edges: &[EdgeSeq]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n];
    for (ei, e) in edges.iter().enumerate() {
        adj[e.a].push((e.b, ei));
        adj[e.b].push((e.a, ei));
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    adj
}

/// Breadth-first neighborhood of `target` up to `depth` hops, with all
/// induced edges among the selected nodes. Node ordering is canonical
/// (target, then sorted ids), independent of map iteration order.
pub fn extract_ego(g: &TxGraph, target: &str, depth: usize) -> Result<EgoSubgraph> {
    if !g.contains(target) {
        return Err(Error::InvalidInput(format!("unknown target id {target}")));
    }
    let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
    dist.insert(target, 0);
    let mut queue = VecDeque::from([target]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u];
        if d == depth {
            continue;
        }
        for v in g.neighbors(u) {
            if !dist.contains_key(v) {
                dist.insert(v, d + 1);
                queue.push_back(v);
            }
        }
    }

    let mut nodes: Vec<String> = vec![target.to_string()];
    nodes.extend(dist.keys().filter(|&&id| id != target).map(|id| id.to_string()));
    let index: BTreeMap<&str, usize> =
        nodes.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let node_seqs = nodes
        .iter()
        .map(|id| g.client_seq(id).cloned().unwrap_or_default())
        .collect();

    let mut edges = Vec::new();
    for (ui, u) in nodes.iter().enumerate() {
        for v in g.neighbors(u) {
            if u.as_str() < v {
                if let Some(&vi) = index.get(v) {
                    edges.push(merge_pair(g, u, ui, v, vi));
                }
            }
        }
    }
    // canonical edge order: by id pair, matching the (a_id, b_id) sort
    edges.sort_by(|x, y| {
        (nodes[x.a].as_str(), nodes[x.b].as_str()).cmp(&(nodes[y.a].as_str(), nodes[y.b].as_str()))
    });
    let adj = build_adjacency(nodes.len(), &edges);
    Ok(EgoSubgraph { nodes, node_seqs, edges, adj })
}

/// `u` must be the lexicographically smaller id.
fn merge_pair(g: &TxGraph, u: &str, ui: usize, v: &str, vi: usize) -> EdgeSeq {
    debug_assert!(u < v);
    let mut events: Vec<(Transaction, f64)> = Vec::new();
    if let Some(seq) = g.transfers.get(&(u.to_string(), v.to_string())) {
        events.extend(seq.events.iter().map(|t| (t.clone(), 1.0)));
    }
    if let Some(seq) = g.transfers.get(&(v.to_string(), u.to_string())) {
        events.extend(seq.events.iter().map(|t| (t.clone(), -1.0)));
    }
    // forward events first on timestamp ties
    events.sort_by(|(a, fa), (b, fb)| {
        a.timestamp.cmp(&b.timestamp).then(fb.partial_cmp(fa).unwrap())
    });
    EdgeSeq { a: ui, b: vi, events }
}

/// Fan-out and transaction-drop ranges for training augmentation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplerConfig {
    pub hop1_fanout: (usize, usize),
    pub hop2_fanout: (usize, usize),
    pub tx_drop: (f64, f64),
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            hop1_fanout: (20, 25),
            hop2_fanout: (15, 20),
            tx_drop: (0.0, 0.25),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop1_fanout.0 > self.hop1_fanout.1 || self.hop2_fanout.0 > self.hop2_fanout.1 {
            return Err(Error::Config("fan-out ranges must satisfy lo <= hi".into()));
        }
        if !(0.0..1.0).contains(&self.tx_drop.0)
            || !(0.0..1.0).contains(&self.tx_drop.1)
            || self.tx_drop.0 > self.tx_drop.1
        {
            return Err(Error::Config("tx_drop must be a subrange of [0, 1)".into()));
        }
        Ok(())
    }
}

/// Keep only `kept` nodes (must contain 0), optionally dropping each
/// transaction event independently with probability `drop_p`. Edges whose
/// sequence becomes empty are removed, then nodes left unreachable from the
/// target are removed as well.
fn induce(
    sub: &EgoSubgraph,
    kept: &BTreeSet<usize>,
    drop_p: f64,
    rng: &mut ChaCha20Rng,
) -> EgoSubgraph {
    debug_assert!(kept.contains(&0));
    let keep_event = |rng: &mut ChaCha20Rng| drop_p == 0.0 || rng.gen::<f64>() >= drop_p;

    let order: Vec<usize> = kept.iter().copied().collect();
    let remap: BTreeMap<usize, usize> =
        order.iter().enumerate().map(|(new, &old)| (old, new)).collect();

    let mut node_seqs: Vec<EventSequence> = Vec::with_capacity(order.len());
    for &old in &order {
        let seq = &sub.node_seqs[old];
        let mut events: Vec<Transaction> =
            seq.events.iter().filter(|_| keep_event(rng)).cloned().collect();
        if old == 0 && events.is_empty() {
            if let Some(last) = seq.events.last() {
                events.push(last.clone());
            }
        }
        node_seqs.push(EventSequence { events });
    }

    let mut edges = Vec::new();
    for e in &sub.edges {
        let (Some(&na), Some(&nb)) = (remap.get(&e.a), remap.get(&e.b)) else {
            continue;
        };
        let events: Vec<(Transaction, f64)> =
            e.events.iter().filter(|_| keep_event(rng)).cloned().collect();
        if !events.is_empty() {
            edges.push(EdgeSeq { a: na, b: nb, events });
        }
    }

    // prune nodes disconnected by edge removal
    let adj = build_adjacency(order.len(), &edges);
    let tmp = EgoSubgraph {
        nodes: order.iter().map(|&o| sub.nodes[o].clone()).collect(),
        node_seqs,
        edges,
        adj,
    };
    let hops = tmp.hops();
    if hops.iter().all(|&d| d != usize::MAX) {
        return tmp;
    }
    let reachable: BTreeSet<usize> =
        hops.iter().enumerate().filter(|(_, &d)| d != usize::MAX).map(|(i, _)| i).collect();
    let mut no_drop = rng.clone();
    induce(&tmp, &reachable, 0.0, &mut no_drop)
}

fn draw_range(rng: &mut ChaCha20Rng, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Uniform sample of `k` items from `pool` without replacement, in the
/// pool's original order.
fn sample_without_replacement(
    pool: &[usize],
    k: usize,
    rng: &mut ChaCha20Rng,
) -> BTreeSet<usize> {
    if k >= pool.len() {
        return pool.iter().copied().collect();
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut chosen = BTreeSet::new();
    for i in 0..k {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
        chosen.insert(pool[idx[i]]);
    }
    chosen
}

/// Training augmentation: fan-out sampling at both hops plus random
/// transaction deletion. Fully determined by `cfg.seed`.
pub fn sample_augment(sub: &EgoSubgraph, cfg: &SamplerConfig) -> Result<EgoSubgraph> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let hops = sub.hops();

    let hop1: Vec<usize> = (0..sub.num_nodes()).filter(|&i| hops[i] == 1).collect();
    let k1 = draw_range(&mut rng, cfg.hop1_fanout);
    let kept1 = sample_without_replacement(&hop1, k1, &mut rng);

    let mut kept: BTreeSet<usize> = BTreeSet::from([0]);
    kept.extend(&kept1);
    for &h1 in &kept1 {
        let candidates: Vec<usize> =
            sub.adj[h1].iter().map(|&(v, _)| v).filter(|&v| hops[v] == 2).collect();
        let k2 = draw_range(&mut rng, cfg.hop2_fanout);
        kept.extend(sample_without_replacement(&candidates, k2, &mut rng));
    }

    let p = if cfg.tx_drop.0 == cfg.tx_drop.1 {
        cfg.tx_drop.0
    } else {
        rng.gen_range(cfg.tx_drop.0..cfg.tx_drop.1)
    };
    Ok(induce(sub, &kept, p, &mut rng))
}

/// Deterministic evaluation-time truncation: fan-out caps at their maxima,
/// smallest node indices first, no transaction dropping.
pub fn truncate_eval(sub: &EgoSubgraph, cfg: &SamplerConfig) -> Result<EgoSubgraph> {
    cfg.validate()?;
    let hops = sub.hops();
    let kept1: Vec<usize> = (0..sub.num_nodes())
        .filter(|&i| hops[i] == 1)
        .take(cfg.hop1_fanout.1)
        .collect();
    let mut kept: BTreeSet<usize> = BTreeSet::from([0]);
    kept.extend(&kept1);
    for &h1 in &kept1 {
        let mut taken = 0;
        for &(v, _) in &sub.adj[h1] {
            if hops[v] == 2 && !kept.contains(&v) {
                kept.insert(v);
                taken += 1;
                if taken == cfg.hop2_fanout.1 {
                    break;
                }
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    Ok(induce(sub, &kept, 0.0, &mut rng))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header { schema_version: u32 },
    Node { id: String, label: Option<u8>, tx: Vec<TxRec> },
    Edge { src: String, dst: String, tx: Vec<TxRec> },
}

#[derive(Debug, Serialize, Deserialize)]
struct TxRec {
    amt: f64,
    cur: u32,
    mcc: Option<u32>,
    ts: i64,
}

impl TxRec {
    fn from_tx(t: &Transaction) -> Self {
        TxRec { amt: t.amount, cur: t.currency, mcc: t.mcc, ts: t.timestamp }
    }

    fn into_tx(self, line: usize) -> Result<Transaction> {
        if !(self.amt >= 0.0) {
            return Err(Error::Parse {
                line,
                msg: format!("amount must be nonnegative, got {}", self.amt),
            });
        }
        Ok(Transaction { amount: self.amt, currency: self.cur, mcc: self.mcc, timestamp: self.ts })
    }
}

fn write_record<W: Write>(w: &mut W, rec: &Record) -> Result<()> {
    serde_json::to_writer(&mut *w, rec).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    Ok(())
}

/// JSONL serialization: a header line, then one record per node and per
/// directed edge.
pub fn write_graph<W: Write>(g: &TxGraph, w: &mut W) -> Result<()> {
    write_record(w, &Record::Header { schema_version: SCHEMA_VERSION })?;
    for (id, seq) in &g.clients {
        write_record(
            w,
            &Record::Node {
                id: id.clone(),
                label: g.label(id),
                tx: seq.events.iter().map(TxRec::from_tx).collect(),
            },
        )?;
    }
    for ((src, dst), seq) in &g.transfers {
        write_record(
            w,
            &Record::Edge {
                src: src.clone(),
                dst: dst.clone(),
                tx: seq.events.iter().map(TxRec::from_tx).collect(),
            },
        )?;
    }
    Ok(())
}

fn parse_line(line: &str, lineno: usize) -> Result<Record> {
    serde_json::from_str(line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })
}

pub fn read_graph<R: BufRead>(r: R) -> Result<TxGraph> {
    let mut g = TxGraph::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, lineno)? {
            Record::Header { schema_version } => {
                if schema_version != SCHEMA_VERSION {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unsupported schema version {schema_version}"),
                    });
                }
            }
            Record::Node { id, label, tx } => {
                if g.contains(&id) {
                    return Err(Error::Parse { line: lineno, msg: format!("duplicate node {id}") });
                }
                let events = tx
                    .into_iter()
                    .map(|t| t.into_tx(lineno))
                    .collect::<Result<Vec<_>>>()?;
                g.add_client(id.clone(), EventSequence::new(events));
                if let Some(l) = label {
                    g.set_label(&id, l).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
                }
            }
            Record::Edge { src, dst, tx } => {
                let events = tx
                    .into_iter()
                    .map(|t| t.into_tx(lineno))
                    .collect::<Result<Vec<_>>>()?;
                g.add_transfer(&src, &dst, EventSequence::new(events))
                    .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
            }
        }
    }
    Ok(g)
}

/// Subgraph serialization reuses the graph schema: node lines in index order
/// (target first), merged edges split back into their directed histories.
pub fn write_subgraph<W: Write>(sub: &EgoSubgraph, w: &mut W) -> Result<()> {
    write_record(w, &Record::Header { schema_version: SCHEMA_VERSION })?;
    for (id, seq) in sub.nodes.iter().zip(&sub.node_seqs) {
        write_record(
            w,
            &Record::Node {
                id: id.clone(),
                label: None,
                tx: seq.events.iter().map(TxRec::from_tx).collect(),
            },
        )?;
    }
    for e in &sub.edges {
        let (u, v) = (&sub.nodes[e.a], &sub.nodes[e.b]);
        for (src, dst, flag) in [(u, v, 1.0), (v, u, -1.0)] {
            let tx: Vec<TxRec> = e
                .events
                .iter()
                .filter(|(_, f)| *f == flag)
                .map(|(t, _)| TxRec::from_tx(t))
                .collect();
            if !tx.is_empty() {
                write_record(w, &Record::Edge { src: src.clone(), dst: dst.clone(), tx })?;
            }
        }
    }
    Ok(())
}

pub fn read_subgraph<R: BufRead>(mut r: R) -> Result<EgoSubgraph> {
    // the first node line is the scoring target
    let mut target = None;
    let mut buf = String::new();
    let mut raw = Vec::new();
    while r.read_line(&mut buf)? > 0 {
        if target.is_none() {
            if let Ok(Record::Node { id, .. }) = parse_line(buf.trim_end(), raw.len() + 1) {
                target = Some(id);
            }
        }
        raw.extend_from_slice(buf.as_bytes());
        buf.clear();
    }
    let target =
        target.ok_or_else(|| Error::Parse { line: 0, msg: "subgraph has no nodes".into() })?;
    let g = read_graph(&raw[..])?;
    extract_ego(&g, &target, usize::MAX)
}
