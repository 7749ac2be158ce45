//! Full model assembly: sequence encoders feeding L graph convolutions and
//! a linear scoring head on the target node, for the weight-shared
//! edge-attention model and the node-only / GCN / GAT / EGNN baselines.
//! Also parameter accounting and binary checkpointing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gnn_layers::{
    ews_attention, ews_layer, gcn_layer, Activation, EgnnLayerIds, EwsGcnIds, GatLayerIds,
};
use crate::graph_store::EgoSubgraph;
use crate::seq_encoder::{encode, encode_flagged, EncoderConfig, EncoderIds};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ModelKind {
    NodeOnly,
    Gcn { layers: usize },
    Gat { layers: usize },
    Egnn { layers: usize },
    EwsGcn { layers: usize },
}

impl ModelKind {
    pub fn layers(&self) -> usize {
        match *self {
            ModelKind::NodeOnly => 0,
            ModelKind::Gcn { layers }
            | ModelKind::Gat { layers }
            | ModelKind::Egnn { layers }
            | ModelKind::EwsGcn { layers } => layers,
        }
    }

    fn uses_edge_encoder(&self) -> bool {
        matches!(self, ModelKind::Egnn { .. } | ModelKind::EwsGcn { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    /// Attention channels K of the shared convolution.
    pub channels: usize,
    pub dropout: f64,
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    pub egnn_channels: usize,
    pub egnn_proj_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::EwsGcn { layers: 2 },
            encoder: EncoderConfig::default(),
            channels: 80,
            dropout: 0.25,
            gat_heads: 8,
            gat_head_dim: 60,
            egnn_channels: 8,
            egnn_proj_dim: 8,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.encoder.hidden_dim == 0 {
            return Err(Error::Config("zero model dimensions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        match self.kind {
            ModelKind::Gcn { layers } | ModelKind::Gat { layers } | ModelKind::Egnn { layers }
                if layers == 0 =>
            {
                Err(Error::Config("baseline GNN needs at least one layer".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum ConvIds {
    None,
    Gcn(Vec<ParamId>),
    Gat(Vec<GatLayerIds>),
    Egnn(Vec<EgnnLayerIds>),
    EwsGcn(EwsGcnIds),
}

/// Assembled model: parameter store plus the handles wiring it together.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    node_enc: EncoderIds,
    edge_enc: Option<EncoderIds>,
    conv: ConvIds,
    head_w: ParamId,
    head_b: ParamId,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.init_seed);
        let mut ps = ParamSet::new();
        let d = cfg.encoder.hidden_dim;
        let node_enc = EncoderIds::init(&mut ps, "node_enc", &cfg.encoder, false, &mut rng);
        let edge_enc = cfg
            .kind
            .uses_edge_encoder()
            .then(|| EncoderIds::init(&mut ps, "edge_enc", &cfg.encoder, false, &mut rng));

        let (conv, head_in) = match cfg.kind {
            ModelKind::NodeOnly => (ConvIds::None, d),
            ModelKind::EwsGcn { .. } => {
                (ConvIds::EwsGcn(EwsGcnIds::init(&mut ps, "conv", d, cfg.channels, &mut rng)), d)
            }
            ModelKind::Gcn { layers } => {
                let ws: Vec<ParamId> = (0..layers)
                    .map(|l| {
                        ps.add(
                            format!("conv.l{l}.w"),
                            Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
                        )
                    })
                    .collect();
                (ConvIds::Gcn(ws), d)
            }
            ModelKind::Gat { layers } => {
                let mut in_dim = d;
                let mut total = 0;
                let ids: Vec<GatLayerIds> = (0..layers)
                    .map(|l| {
                        let layer = GatLayerIds::init(
                            &mut ps,
                            &format!("conv.l{l}"),
                            in_dim,
                            cfg.gat_head_dim,
                            cfg.gat_heads,
                            true,
                            &mut rng,
                        );
                        in_dim = layer.out_dim(&ps);
                        total += in_dim;
                        layer
                    })
                    .collect();
                // intermediate-concat readout over all layer outputs
                (ConvIds::Gat(ids), total)
            }
            ModelKind::Egnn { layers } => {
                let mut in_dim = d;
                let mut total = 0;
                let ids: Vec<EgnnLayerIds> = (0..layers)
                    .map(|l| {
                        let layer = EgnnLayerIds::init(
                            &mut ps,
                            &format!("conv.l{l}"),
                            in_dim,
                            d,
                            cfg.egnn_proj_dim,
                            cfg.egnn_channels,
                            &mut rng,
                        );
                        in_dim = layer.out_dim(&ps);
                        total += in_dim;
                        layer
                    })
                    .collect();
                (ConvIds::Egnn(ids), total)
            }
        };

        let head_w = ps.add("head.w", Tensor::randn(&[head_in], 0.1, &mut rng));
        let head_b = ps.add("head.b", Tensor::zeros(&[1]));
        Ok(Model { cfg, params: ps, node_enc, edge_enc, conv, head_w, head_b })
    }

    /// Copy pretrained encoder values into the node encoder and, when the
    /// architecture has one, the edge encoder. `other_prefix` names the
    /// encoder inside the pretrained parameter set.
    pub fn init_encoders_from(&mut self, pretrained: &ParamSet, other_prefix: &str) -> Result<()> {
        self.params.copy_values_by_prefix("node_enc", pretrained, other_prefix)?;
        if self.edge_enc.is_some() {
            self.params.copy_values_by_prefix("edge_enc", pretrained, other_prefix)?;
        }
        Ok(())
    }

    fn encode_all_nodes(&self, tape: &mut Tape, sub: &EgoSubgraph) -> Result<Vec<NodeId>> {
        sub.node_seqs
            .iter()
            .map(|seq| encode(tape, &self.params, &self.node_enc, &self.cfg.encoder, seq))
            .collect()
    }

    fn encode_all_edges(&self, tape: &mut Tape, sub: &EgoSubgraph) -> Result<Vec<NodeId>> {
        let enc = self.edge_enc.as_ref().expect("edge encoder present");
        sub.edges
            .iter()
            .map(|e| encode_flagged(tape, &self.params, enc, &self.cfg.encoder, &e.events))
            .collect()
    }

    fn dropout(&self, tape: &mut Tape, x: NodeId, rng: &mut Option<&mut ChaCha20Rng>) -> Result<NodeId> {
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        let p = self.cfg.dropout;
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::vector(
            (0..tape.value(x).len())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect(),
        );
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }

    fn dropout_all(
        &self,
        tape: &mut Tape,
        xs: Vec<NodeId>,
        rng: &mut Option<&mut ChaCha20Rng>,
    ) -> Result<Vec<NodeId>> {
        xs.into_iter().map(|x| self.dropout(tape, x, rng)).collect()
    }

    /// Default probability for the target node. Passing a dropout generator
    /// enables training mode; `None` is the deterministic eval path.
    pub fn forward(
        &self,
        tape: &mut Tape,
        sub: &EgoSubgraph,
        mut dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<NodeId> {
        let rng = &mut dropout_rng;
        let target = match &self.conv {
            ConvIds::None => {
                // the graph is ignored entirely; only the target sequence runs
                let h = encode(tape, &self.params, &self.node_enc, &self.cfg.encoder, &sub.node_seqs[0])?;
                self.dropout(tape, h, rng)?
            }
            ConvIds::EwsGcn(ids) => {
                let mut x = self.encode_all_nodes(tape, sub)?;
                if self.cfg.kind.layers() == 0 {
                    self.dropout(tape, x[0], rng)?
                } else {
                    let e = self.encode_all_edges(tape, sub)?;
                    // attention depends only on edge features: compute once,
                    // reuse across every shared-weight application
                    let att = ews_attention(tape, &self.params, ids.w_e, &e, &sub.adj)?;
                    for _ in 0..self.cfg.kind.layers() {
                        x = ews_layer(tape, &self.params, ids, &att, &x, &sub.adj, self.cfg.channels)?;
                        x = self.dropout_all(tape, x, rng)?;
                    }
                    x[0]
                }
            }
            ConvIds::Gcn(ws) => {
                let mut x = self.encode_all_nodes(tape, sub)?;
                for &w in ws {
                    x = gcn_layer(tape, &self.params, &x, &sub.adj, w, Activation::Tanh)?;
                    x = self.dropout_all(tape, x, rng)?;
                }
                x[0]
            }
            ConvIds::Gat(layers) => {
                let mut x = self.encode_all_nodes(tape, sub)?;
                let mut intermediates = Vec::with_capacity(layers.len());
                for ids in layers {
                    x = crate::gnn_layers::gat_layer(tape, &self.params, ids, &x, &sub.adj)?;
                    x = self.dropout_all(tape, x, rng)?;
                    intermediates.push(x[0]);
                }
                tape.concat(&intermediates)?
            }
            ConvIds::Egnn(layers) => {
                let mut x = self.encode_all_nodes(tape, sub)?;
                let e = self.encode_all_edges(tape, sub)?;
                let mut intermediates = Vec::with_capacity(layers.len());
                for ids in layers {
                    x = crate::gnn_layers::egnn_layer(tape, &self.params, ids, &x, &e, &sub.adj)?;
                    x = self.dropout_all(tape, x, rng)?;
                    intermediates.push(x[0]);
                }
                tape.concat(&intermediates)?
            }
        };
        let w = tape.param(&self.params, self.head_w);
        let b = tape.param(&self.params, self.head_b);
        let dot = tape.matmul(target, w)?;
        let logit = tape.add(dot, b)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Trainable scalar counts grouped by top-level component name.
#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

impl Model {
    pub fn param_count(&self) -> ParamReport {
        let mut components: Vec<(String, usize)> = Vec::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let group = name.split('.').next().unwrap_or(name).to_string();
            let len = self.params.value(id).len();
            match components.iter_mut().find(|(g, _)| *g == group) {
                Some((_, c)) => *c += len,
                None => components.push((group, len)),
            }
        }
        let total = components.iter().map(|(_, c)| c).sum();
        ParamReport { components, total }
    }

    /// Scalars in the graph-convolution block alone.
    pub fn conv_param_count(&self) -> usize {
        self.param_count()
            .components
            .iter()
            .filter(|(g, _)| g == "conv")
            .map(|(_, c)| c)
            .sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

impl Model {
    /// Write the checkpoint: flat little-endian f64 values at `bin`, JSON
    /// sidecar manifest (name → offset, shape) next to it.
    pub fn save_checkpoint(&self, bin: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut w = BufWriter::new(File::create(bin)?);
        for id in self.params.ids() {
            let t = self.params.value(id);
            entries.push(ManifestEntry {
                name: self.params.name(id).to_string(),
                offset,
                shape: t.shape().to_vec(),
            });
            offset += t.len();
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        let manifest = Manifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.cfg.clone(),
            params: entries,
        };
        let mut mw = BufWriter::new(File::create(manifest_path(bin))?);
        serde_json::to_writer_pretty(&mut mw, &manifest)
            .map_err(|e| Error::InvalidInput(format!("manifest serialization: {e}")))?;
        mw.write_all(b"\n")?;
        mw.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(bin: &Path) -> Result<Model> {
        let mf = manifest_path(bin);
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&mf)?))
            .map_err(|e| Error::Parse { line: 0, msg: format!("{}: {e}", mf.display()) })?;
        if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "checkpoint schema {} unsupported (expected {})",
                manifest.schema_version, CHECKPOINT_SCHEMA_VERSION
            )));
        }
        let mut model = Model::new(manifest.config)?;
        let mut raw = Vec::new();
        File::open(bin)?.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "checkpoint {} not a whole number of f64s",
                bin.display()
            )));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let ids: Vec<ParamId> = model.params.ids().collect();
        if ids.len() != manifest.params.len() {
            return Err(Error::InvalidInput(format!(
                "manifest lists {} parameters, model has {}",
                manifest.params.len(),
                ids.len()
            )));
        }
        for (id, entry) in ids.into_iter().zip(&manifest.params) {
            if model.params.name(id) != entry.name {
                return Err(Error::InvalidInput(format!(
                    "manifest parameter {:?} does not match model parameter {:?}",
                    entry.name,
                    model.params.name(id)
                )));
            }
            let expect_shape = model.params.value(id).shape().to_vec();
            if expect_shape != entry.shape {
                return Err(Error::InvalidInput(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    entry.name, entry.shape, expect_shape
                )));
            }
            let len: usize = entry.shape.iter().product();
            let slice = values.get(entry.offset..entry.offset + len).ok_or_else(|| {
                Error::InvalidInput(format!("checkpoint too short for {}", entry.name))
            })?;
            model.params.get_mut(id).value = Tensor::new(expect_shape, slice.to_vec())?;
        }
        Ok(model)
    }
}
