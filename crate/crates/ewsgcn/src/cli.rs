//! Command-line entry point: dataset generation, encoder pretraining,
//! three-stage training, evaluation, and the depth sweep, all driven by one
//! versioned experiment config. Every command writes its resolved config
//! into the output directory and avoids timestamps, so identical seeds
//! reproduce identical artifacts byte for byte.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::graph_store::{read_graph, write_graph, SamplerConfig, TxGraph};
use crate::metrics::{
    fingerprint, roc_csv, roc_points, sweep_depth, sweep_table_text, ScoredRun, SweepRow,
};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::seq_encoder::{EncoderConfig, EncoderIds, EventSequence};
use crate::synth::{generate, write_ground_truth, GenConfig};
use crate::trainer::{pretrain_encoder, train_three_stage, score, Dataset, Pretrained, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Fraction of clients in the train split (rest is the test split).
    pub train_fraction: f64,
    /// Fraction of the train split held out for the per-epoch val AUC.
    pub val_fraction: f64,
    pub sweep_layers: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            train_fraction: 0.8,
            val_fraction: 0.1,
            sweep_layers: vec![0, 1, 2],
            sweep_seeds: vec![0, 1, 2],
            bootstrap_resamples: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} unsupported (expected {})",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0,1)",
                self.train_fraction
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0,1)", self.val_fraction)));
        }
        if self.bootstrap_resamples < 2 {
            return Err(Error::Config("bootstrap_resamples must be at least 2".into()));
        }
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            other => {
                return Err(Error::Config(format!(
                    "config {} has unsupported extension {other:?} (want .toml or .json)",
                    path.display()
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "ewsgcn", about = "Transaction-graph default scoring experiments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with its ground-truth sidecar.
    SynthGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the sequence encoder on the train split's node sequences.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run three-stage training, optionally from a pretrained encoder.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Pretrained encoder checkpoint (encoder.bin) to initialize from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the test split with a trained model checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate over a grid of depths and seeds.
    SweepDepth {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Parse { .. } => EXIT_IO,
        Error::Numerical(_) | Error::Shape(_) => EXIT_NUMERICAL,
    }
}

/// Parse process arguments, run, and map errors to documented exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point used by integration tests: run with explicit arguments.
pub fn run_with_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::Config(format!("argument parsing: {e}")))?;
    execute(cli)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { config, out, seed } => cmd_synth_gen(&config, &out, seed),
        Command::Pretrain { data, config, out, seed } => cmd_pretrain(&data, &config, &out, seed),
        Command::Train { data, config, checkpoint, out, seed } => {
            cmd_train(&data, &config, checkpoint.as_deref(), &out, seed)
        }
        Command::Eval { data, config, checkpoint, out, seed } => {
            cmd_eval(&data, &config, &checkpoint, &out, seed)
        }
        Command::SweepDepth { data, config, out } => cmd_sweep(&data, &config, &out),
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_resolved_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_json(cfg, &out.join("resolved_config.json"))
}

fn load_data_graph(data: &Path) -> Result<TxGraph> {
    let path = if data.is_dir() { data.join("graph.jsonl") } else { data.to_path_buf() };
    read_graph(BufReader::new(File::open(&path)?))
}

/// Deterministic client split: sorted ids, first `train_fraction` for
/// training (with a val tail), the remainder for testing.
struct Split {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn split_clients(g: &TxGraph, cfg: &ExperimentConfig) -> Result<Split> {
    let ids: Vec<String> = g.client_ids().map(str::to_string).collect();
    if ids.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "{} clients is too few to split",
            ids.len()
        )));
    }
    let n_train = ((ids.len() as f64 * cfg.train_fraction) as usize).clamp(2, ids.len() - 1);
    let n_val = ((n_train as f64 * cfg.val_fraction) as usize).clamp(1, n_train - 1);
    let (train_all, test) = ids.split_at(n_train);
    let (train, val) = train_all.split_at(n_train - n_val);
    Ok(Split { train: train.to_vec(), val: val.to_vec(), test: test.to_vec() })
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    schema_version: u32,
    gen: &'a GenConfig,
    files: Vec<(String, String)>,
    dataset_hash: String,
}

fn cmd_synth_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.gen.seed = s;
    }
    fs::create_dir_all(out)?;
    let (graph, gt) = generate(&cfg.gen)?;

    let graph_path = out.join("graph.jsonl");
    let mut w = BufWriter::new(File::create(&graph_path)?);
    write_graph(&graph, &mut w)?;
    w.flush()?;

    let gt_path = out.join("ground_truth.jsonl");
    let mut w = BufWriter::new(File::create(&gt_path)?);
    write_ground_truth(&gt, &mut w)?;
    w.flush()?;

    let files = vec![
        ("graph.jsonl".to_string(), sha256_hex(&graph_path)?),
        ("ground_truth.jsonl".to_string(), sha256_hex(&gt_path)?),
    ];
    let mut all = Sha256::new();
    for (_, h) in &files {
        all.update(h.as_bytes());
    }
    let manifest = DatasetManifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        gen: &cfg.gen,
        files,
        dataset_hash: format!("{:x}", all.finalize()),
    };
    write_json(&manifest, &out.join("manifest.json"))?;
    write_resolved_config(&cfg, out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    schema_version: u32,
    encoder: EncoderConfig,
    params: Vec<(String, Vec<usize>)>,
}

fn save_encoder(pre: &Pretrained, bin: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(bin)?);
    let mut entries = Vec::new();
    for id in pre.params.ids() {
        let t = pre.params.value(id);
        entries.push((pre.params.name(id).to_string(), t.shape().to_vec()));
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let manifest = EncoderManifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        encoder: pre.encoder.clone(),
        params: entries,
    };
    write_json(&manifest, &bin.with_extension("json"))
}

pub fn load_encoder(bin: &Path) -> Result<Pretrained> {
    let mf_path = bin.with_extension("json");
    let manifest: EncoderManifest =
        serde_json::from_reader(BufReader::new(File::open(&mf_path)?))
            .map_err(|e| Error::Parse { line: 0, msg: format!("{}: {e}", mf_path.display()) })?;
    if manifest.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "encoder checkpoint schema {} unsupported",
            manifest.schema_version
        )));
    }
    // rebuild the parameter registry deterministically, then load values
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut ps = ParamSet::new();
    let ids = EncoderIds::init(&mut ps, "enc", &manifest.encoder, true, &mut rng);

    let mut raw = Vec::new();
    File::open(bin)?.read_to_end(&mut raw)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut offset = 0;
    let param_ids: Vec<_> = ps.ids().collect();
    if param_ids.len() != manifest.params.len() {
        return Err(Error::InvalidInput("encoder manifest parameter count mismatch".into()));
    }
    for (id, (name, shape)) in param_ids.into_iter().zip(&manifest.params) {
        if ps.name(id) != name || ps.value(id).shape() != &shape[..] {
            return Err(Error::InvalidInput(format!(
                "encoder manifest entry {name:?} does not match the rebuilt registry"
            )));
        }
        let len: usize = shape.iter().product();
        let slice = values
            .get(offset..offset + len)
            .ok_or_else(|| Error::InvalidInput("encoder checkpoint too short".into()))?;
        ps.get_mut(id).value = Tensor::new(shape.clone(), slice.to_vec())?;
        offset += len;
    }
    Ok(Pretrained { params: ps, encoder: manifest.encoder, ids })
}

fn labeled_sequences(g: &TxGraph, ids: &[String]) -> Result<Vec<(EventSequence, u8)>> {
    ids.iter()
        .map(|id| {
            let seq = g
                .client_seq(id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown client {id}")))?;
            let label = g
                .label(id)
                .ok_or_else(|| Error::InvalidInput(format!("client {id} has no label")))?;
            Ok((seq.clone(), label))
        })
        .collect()
}

fn cmd_pretrain(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let g = load_data_graph(data)?;
    let split = split_clients(&g, &cfg)?;
    let train = labeled_sequences(&g, &split.train)?;
    let pre = pretrain_encoder(&train, &cfg.model.encoder, &cfg.train)?;
    fs::create_dir_all(out)?;
    save_encoder(&pre, &out.join("encoder.bin"))?;
    write_resolved_config(&cfg, out)?;
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let g = load_data_graph(data)?;
    let split = split_clients(&g, &cfg)?;

    let pretrained = checkpoint.map(load_encoder).transpose()?;
    if let Some(pre) = &pretrained {
        // adopt the frozen normalization statistics of the encoder
        cfg.model.encoder = pre.encoder.clone();
    }
    let mut model = Model::new(cfg.model.clone())?;
    if let Some(pre) = &pretrained {
        model.init_encoders_from(&pre.params, "enc")?;
    }

    let train_set = Dataset::extract(&g, split.train.iter().map(String::as_str))?;
    let val_set = Dataset::extract(&g, split.val.iter().map(String::as_str))?;
    let logs = train_three_stage(&mut model, &train_set, &val_set, &cfg.sampler, &cfg.train)?;

    fs::create_dir_all(out)?;
    model.save_checkpoint(&out.join("model.bin"))?;
    let mut w = BufWriter::new(File::create(out.join("epochs.jsonl"))?);
    for log in &logs {
        serde_json::to_writer(&mut w, log)
            .map_err(|e| Error::InvalidInput(format!("epoch log serialization: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_resolved_config(&cfg, out)?;
    Ok(())
}

fn cmd_eval(
    data: &Path,
    config: &Path,
    checkpoint: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let g = load_data_graph(data)?;
    let split = split_clients(&g, &cfg)?;
    let model = Model::load_checkpoint(checkpoint)?;
    let test = Dataset::extract(&g, split.test.iter().map(String::as_str))?;
    let scores = score(&model, &test, &cfg.sampler)?;
    let boot_seed = seed.unwrap_or(cfg.train.seed);
    let run = ScoredRun::new(
        scores,
        test.labels.clone(),
        cfg.bootstrap_resamples,
        boot_seed,
        fingerprint(&(&cfg, &model.cfg, boot_seed)),
    )?;

    fs::create_dir_all(out)?;
    write_json(&run, &out.join("report.json"))?;
    let pts = roc_points(&run.scores, &run.labels)?;
    let mut w = BufWriter::new(File::create(out.join("roc.csv"))?);
    roc_csv(&pts, &mut w)?;
    w.flush()?;
    write_resolved_config(&cfg, out)?;
    Ok(())
}

fn cmd_sweep(data: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let g = load_data_graph(data)?;
    let split = split_clients(&g, &cfg)?;
    let train_seqs = labeled_sequences(&g, &split.train)?;
    let train_set = Dataset::extract(&g, split.train.iter().map(String::as_str))?;
    let val_set = Dataset::extract(&g, split.val.iter().map(String::as_str))?;
    let test_set = Dataset::extract(&g, split.test.iter().map(String::as_str))?;

    // one pretraining per seed, shared by every depth
    let mut pretrained = Vec::new();
    for &s in &cfg.sweep_seeds {
        let tc = TrainConfig { seed: s, ..cfg.train.clone() };
        pretrained.push((s, pretrain_encoder(&train_seqs, &cfg.model.encoder, &tc)?));
    }

    let rows: Vec<SweepRow> = sweep_depth(&cfg.sweep_layers, &cfg.sweep_seeds, |layers, s| {
        let pre = &pretrained.iter().find(|(ps, _)| *ps == s).expect("seed pretrained").1;
        let mut mc = cfg.model.clone();
        mc.kind = ModelKind::EwsGcn { layers };
        mc.encoder = pre.encoder.clone();
        mc.init_seed = s;
        let mut model = Model::new(mc)?;
        model.init_encoders_from(&pre.params, "enc")?;
        let tc = TrainConfig { seed: s, ..cfg.train.clone() };
        train_three_stage(&mut model, &train_set, &val_set, &cfg.sampler, &tc)?;
        let scores = score(&model, &test_set, &cfg.sampler)?;
        crate::metrics::roc_auc(&scores, &test_set.labels)
    })?;

    fs::create_dir_all(out)?;
    write_json(&rows, &out.join("sweep.json"))?;
    let mut w = BufWriter::new(File::create(out.join("sweep.csv"))?);
    writeln!(w, "layers,mean_auc,se")?;
    for r in &rows {
        writeln!(w, "{},{},{}", r.layers, r.mean_auc, r.se)?;
    }
    w.flush()?;
    fs::write(out.join("sweep.txt"), sweep_table_text(&rows))?;
    write_resolved_config(&cfg, out)?;
    Ok(())
}
