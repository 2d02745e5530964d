//! Command-line interface.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msgt_core::ablation::{self, SweepAxis};
use msgt_core::checkpoint::{model_version, Checkpoint};
use msgt_core::concept_pool::{build_pool, ConceptPool, DEFAULT_TAU_C, DEFAULT_TAU_R};
use msgt_core::data_io::{load_embedding_file, read_candidates, Dataset, EmbeddingTable, PseudoEmbedder};
use msgt_core::fixture::{self, FixtureSpec, FIXTURE_SEED};
use msgt_core::trainer::{evaluate, train, TrainConfig};
use serde_json::json;

use crate::engine::{ClampRequest, Engine, InterventionRequest};
use crate::service;

#[derive(Debug, Parser)]
#[command(name = "msgt", version, about = "Concept-bottleneck graph transformer: pool, train, evaluate, serve")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Concept pool construction.
    Pool {
        #[command(subcommand)]
        action: PoolCommand,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate one model per sweep grid point; CSV output.
    Ablate(AblateArgs),
    /// Predict one sample, optionally applying an intervention file.
    Predict(PredictArgs),
    /// Predict one sample with clamps given on the command line.
    Intervene(IntervenArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
    /// Write the synthetic separable fixture to a directory.
    Fixture(FixtureArgs),
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    Build(PoolBuildArgs),
}

#[derive(Debug, Args)]
pub struct PoolBuildArgs {
    /// Candidate phrases, one per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Embeddings of the candidate phrases; pseudo embeddings when absent.
    #[arg(long = "candidate-emb")]
    pub candidate_emb: Option<PathBuf>,
    /// Embeddings of the label names.
    #[arg(long = "labels-emb")]
    pub labels_emb: Option<PathBuf>,
    /// Manifest whose label names are pseudo-embedded when --labels-emb is absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Dimension for pseudo embeddings.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub text_seed: u64,
    #[arg(long = "tau-c", default_value_t = DEFAULT_TAU_C)]
    pub tau_c: f64,
    #[arg(long = "tau-r", default_value_t = DEFAULT_TAU_R)]
    pub tau_r: f64,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "two-stage")]
    pub two_stage: bool,
    #[arg(long)]
    pub stage_one_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    /// `key=v1,v2,...`; repeat for a grid.
    #[arg(long, required = true)]
    pub sweep: Vec<String>,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub sample: Option<String>,
    /// JSON `{sample_id, clamps: [{index|name, value}], hint_text}`.
    #[arg(long)]
    pub interventions: Option<PathBuf>,
    /// Write node kinds, distances, buckets and structural priors here.
    #[arg(long = "dump-graphs")]
    pub dump_graphs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IntervenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub sample: String,
    /// `index=value` or `name=value`; repeatable.
    #[arg(long)]
    pub clamp: Vec<String>,
    #[arg(long)]
    pub hint: Option<String>,
    #[arg(long = "dump-graphs")]
    pub dump_graphs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Allowed browser origin; repeatable. Any origin when absent.
    #[arg(long = "cors-origin")]
    pub cors_origin: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = FIXTURE_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pool {
            action: PoolCommand::Build(a),
        } => pool_build(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Intervene(a) => intervene_cmd(a, out),
        Command::Serve(a) => serve_cmd(a),
        Command::Fixture(a) => fixture_cmd(a, out),
    }
}

fn write_json(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TrainConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_pool(path: &Path) -> Result<ConceptPool> {
    ConceptPool::load(path).with_context(|| format!("loading pool {}", path.display()))
}

fn pool_build(a: PoolBuildArgs, out: &mut dyn Write) -> Result<()> {
    let names = read_candidates(&a.candidates)?;
    if names.is_empty() {
        bail!("{}: no candidate phrases", a.candidates.display());
    }
    let cand_file = a.candidate_emb.as_deref().map(load_embedding_file).transpose()?;
    let label_file = a.labels_emb.as_deref().map(load_embedding_file).transpose()?;
    let dataset = a.manifest.as_deref().map(load_dataset).transpose()?;
    let dim = a
        .dim
        .or(cand_file.as_ref().map(EmbeddingTable::dim))
        .or(label_file.as_ref().map(EmbeddingTable::dim))
        .or(dataset.as_ref().map(|d| d.views.dim()))
        .ok_or_else(|| anyhow!("cannot infer the embedding dimension; pass --dim"))?;
    let embedder = PseudoEmbedder::new(dim, a.text_seed);
    let candidates = match cand_file {
        Some(table) => {
            let rows = names
                .iter()
                .map(|n| {
                    table
                        .index_of(n)
                        .ok_or_else(|| anyhow!("candidate `{n}` has no row in the candidate embeddings"))
                })
                .collect::<Result<Vec<_>>>()?;
            table.subset(&rows)
        }
        None => embedder.embed_table(&names)?,
    };
    let labels = match (label_file, &dataset) {
        (Some(t), _) => t,
        (None, Some(d)) => embedder.embed_table(&d.manifest.label_names)?,
        (None, None) => bail!("pass --labels-emb or --manifest for the label names"),
    };
    let pool = build_pool(&candidates, &labels, a.tau_c, a.tau_r, a.k)?;
    pool.save(&a.out)?;
    write_json(
        out,
        &json!({
            "out": a.out,
            "concepts": pool.names(),
            "zero_relevance_fill": pool.zero_relevance_fill,
        }),
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if a.two_stage {
        config.two_stage = true;
    }
    if let Some(e) = a.stage_one_epochs {
        config.stage_one_epochs = e;
    }
    let dataset = load_dataset(&a.manifest)?;
    let pool = load_pool(&a.pool)?;
    let ck = train(&config, &dataset, &pool)?;
    let bytes = ck.to_bytes()?;
    write_file(&a.out, &bytes)?;
    write_json(
        out,
        &json!({
            "out": a.out,
            "model_version": model_version(&bytes),
            "epochs": ck.loss_history.len(),
            "initial_loss": ck.loss_history.first(),
            "final_loss": ck.loss_history.last(),
        }),
    )
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = fs::read(&a.ckpt).with_context(|| format!("cannot read checkpoint {}", a.ckpt.display()))?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let dataset = load_dataset(&a.manifest)?;
    let mut report = evaluate(&ck.model, &dataset, &a.split)?;
    report.loss_history = ck.loss_history.clone();
    report.model_version = Some(model_version(&bytes));
    match &a.report {
        Some(p) => write_file(p, (serde_json::to_string_pretty(&report)? + "\n").as_bytes()),
        None => write_json(out, &report),
    }
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    let axes = a.sweep.iter().map(|s| SweepAxis::parse(s)).collect::<msgt_core::Result<Vec<_>>>()?;
    let dataset = load_dataset(&a.manifest)?;
    let pool = load_pool(&a.pool)?;
    let rows = ablation::run(&config, &axes, &dataset, &pool, &a.split)?;
    match &a.out {
        Some(p) => {
            let file = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
            ablation::write_csv(&rows, file)?;
        }
        None => ablation::write_csv(&rows, out)?,
    }
    Ok(())
}

fn load_engine(m: &ModelArgs) -> Result<Engine> {
    Ok(Engine::load(&m.ckpt, &m.manifest, m.pool.as_deref())?)
}

fn respond(engine: &Engine, req: &InterventionRequest, dump: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let resp = engine.intervene(req)?;
    if let Some(p) = dump {
        let graphs = engine.graph_dump(req)?;
        write_file(p, (serde_json::to_string_pretty(&graphs)? + "\n").as_bytes())?;
    }
    write_json(out, &resp)
}

fn predict_cmd(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let mut req: InterventionRequest = match &a.interventions {
        Some(p) => read_json(p)?,
        None => InterventionRequest::default(),
    };
    match (&a.sample, req.sample_id.is_empty()) {
        (Some(s), true) => req.sample_id = s.clone(),
        (Some(s), false) if *s != req.sample_id => {
            bail!("--sample {s} disagrees with sample_id {} in the intervention file", req.sample_id)
        }
        (None, true) => bail!("no sample given; pass --sample or set sample_id in the intervention file"),
        _ => {}
    }
    let engine = load_engine(&a.model)?;
    respond(&engine, &req, a.dump_graphs.as_deref(), out)
}

/// Parses `index=value` or `name=value`.
pub fn parse_clamp(text: &str) -> Result<ClampRequest> {
    let (key, value) = text
        .rsplit_once('=')
        .ok_or_else(|| anyhow!("clamp `{text}` is not index=value or name=value"))?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| anyhow!("clamp `{text}` has a non-numeric value"))?;
    let key = key.trim();
    Ok(match key.parse::<i64>() {
        Ok(index) => ClampRequest {
            index: Some(index),
            name: None,
            value,
        },
        Err(_) => ClampRequest {
            index: None,
            name: Some(key.to_string()),
            value,
        },
    })
}

fn intervene_cmd(a: IntervenArgs, out: &mut dyn Write) -> Result<()> {
    let req = InterventionRequest {
        sample_id: a.sample,
        clamps: a.clamp.iter().map(|c| parse_clamp(c)).collect::<Result<_>>()?,
        hint_text: a.hint,
    };
    let engine = load_engine(&a.model)?;
    respond(&engine, &req, a.dump_graphs.as_deref(), out)
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let engine = load_engine(&a.model)?;
    let origins = (!a.cors_origin.is_empty()).then_some(a.cors_origin.as_slice());
    let cors = service::cors(origins)?;
    let addr = SocketAddr::new(a.host, a.port);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(service::serve(engine, addr, cors))
}

fn fixture_cmd(a: FixtureArgs, out: &mut dyn Write) -> Result<()> {
    let d = FixtureSpec::default();
    let spec = FixtureSpec {
        seed: a.seed,
        n_samples: a.samples.unwrap_or(d.n_samples),
        n_classes: a.classes.unwrap_or(d.n_classes),
        dim: a.dim.unwrap_or(d.dim),
        ..d
    };
    let fx = fixture::synthetic(&spec)?;
    let files = fixture::write(&fx, &a.out)?;
    write_json(
        out,
        &json!({
            "manifest": files.manifest,
            "views": files.views,
            "candidates": files.candidates,
            "candidate_embeddings": files.candidate_embeddings,
            "label_embeddings": files.label_embeddings,
            "pool": files.pool,
            "config": files.config,
        }),
    )
}
