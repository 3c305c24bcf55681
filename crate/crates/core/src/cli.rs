//! Command-line entry point.
//!
//! Every command resolves its inputs into a [`RunConfig`] and embeds it,
//! with its SHA-256 hash, in each artifact it writes: JSON reports carry it
//! inline, directories of grids get a `run.json` and per-row hashes in
//! `manifest.jsonl`, checkpoints get a `<checkpoint>.json` sidecar.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::normality_report;
use crate::cisp::{
    aux_image_vector, read_embeddings, retrieval_top1, slerp_path, write_embeddings, CispConfig, CispModel,
    CispTrainConfig, Embedding,
};
use crate::denoiser::{Conditioning, DenoiserConfig, DenoiserNet, GuidanceConfig};
use crate::humaneval::server::{serve, ServerConfig};
use crate::humaneval::{prepare_pairs, read_jsonl, tally, write_jsonl, write_prepared, ShapeEntry};
use crate::metrics::{Distance, DistanceTables, EvalSets};
use crate::pipeline::{image_conditioning, image_values, train_cisp, train_ddpm, train_items, DdpmRecipe, EC_CELLS};
use crate::sampler::{sample_many, SampleRequest};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::toy_data::{build_dataset, load_items, DatasetConfig, Image, Item, Split};
use crate::voxel::{read_grid, sample_surface, write_grid, PointCloud};

const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "voxdiff", version, about = "Image-conditioned voxel diffusion toolkit")]
pub struct Cli {
    /// Root seed; every random draw derives from it through named streams.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Default root for outputs not given explicitly.
    #[arg(long, global = true, env = "VOXDIFF_OUT")]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy image/shape dataset.
    Data(DataArgs),
    /// Train the contrastive image and shape encoders.
    TrainCisp(TrainCispArgs),
    /// Write image embeddings for query images.
    Embed(EmbedArgs),
    /// Train the conditional denoiser.
    TrainDdpm(TrainDdpmArgs),
    /// Draw samples from a trained denoiser.
    Sample(SampleArgs),
    /// Sample along the spherical path between two embeddings.
    Interpolate(InterpolateArgs),
    /// Generation metrics between two directories of grids.
    Evaluate(EvaluateArgs),
    /// Forward-process normality report for one grid.
    Analyze(AnalyzeArgs),
    /// Build side-by-side comparison pairs and their sealed key.
    HumanevalPrepare(PrepareArgs),
    /// Majority-vote report from a vote log.
    HumanevalTally(TallyArgs),
    /// Serve the judging API.
    HumanevalServe(ServeArgs),
    /// Print a noise schedule as TSV.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, default_value_t = 40)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCispArgs {
    /// Dataset directory written by `data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub cisp: PathBuf,
    /// Query images (ICIM), embedded in order.
    #[arg(long, required = true, num_args = 1..)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainDdpmArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained contrastive checkpoint supplying image embeddings.
    #[arg(long)]
    pub cisp: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Diffusion length T.
    #[arg(long, default_value_t = 200)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta_end: f64,
    /// Per-stream conditioning dropout.
    #[arg(long, default_value_t = 0.1)]
    pub p_drop: f64,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Pooling factor from dataset grids to training grids.
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Denoiser checkpoint; its `.json` sidecar supplies the schedule.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Embedding file (ICEM) holding the contrastive conditioning.
    #[arg(long, conflicts_with_all = ["uncond", "dataset", "explicit_null"])]
    pub cisp_emb: Option<PathBuf>,
    /// Which embedding of `--cisp-emb` to use.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Query image (ICIM) supplying the auxiliary image vector, and the
    /// embedding too when `--cisp` is given without `--cisp-emb`.
    #[arg(long, conflicts_with_all = ["uncond", "dataset", "explicit_null"])]
    pub image: Option<PathBuf>,
    /// Contrastive checkpoint, needed with `--dataset` or a bare `--image`.
    #[arg(long)]
    pub cisp: Option<PathBuf>,
    /// Condition on every query image of a dataset split.
    #[arg(long, conflicts_with_all = ["uncond", "explicit_null"])]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Sample without conditioning (null tokens, single pass).
    #[arg(long)]
    pub uncond: bool,
    /// Pass the learned null tokens as if they were real conditioning.
    #[arg(long, conflicts_with = "uncond")]
    pub explicit_null: bool,
    /// Guidance scale (default 1.5); not accepted with `--uncond`.
    #[arg(long)]
    pub w: Option<f64>,
    /// Samples per conditioning input.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Reverse steps to run; defaults to the full schedule.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Start embedding (first entry of an ICEM file).
    #[arg(long)]
    pub a: PathBuf,
    /// End embedding.
    #[arg(long)]
    pub b: PathBuf,
    /// Number of grids, evenly spaced from 0 to 1 inclusive.
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.5)]
    pub w: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    All,
    #[value(name = "1nna")]
    #[serde(rename = "1nna")]
    OneNna,
    Mmd,
    Cov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceArg {
    Cd,
    Emd,
}

impl From<DistanceArg> for Distance {
    fn from(d: DistanceArg) -> Distance {
        match d {
            DistanceArg::Cd => Distance::Cd,
            DistanceArg::Emd => Distance::Emd,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of generated grids (`*.icvx`).
    #[arg(long)]
    pub gen_dir: PathBuf,
    /// Directory of reference grids.
    #[arg(long)]
    pub ref_dir: PathBuf,
    #[arg(long, value_enum, num_args = 1.., default_values_t = [MetricArg::All])]
    pub metric: Vec<MetricArg>,
    #[arg(long, value_enum, num_args = 1.., default_values_t = [DistanceArg::Cd])]
    pub distance: Vec<DistanceArg>,
    /// Surface points per shape.
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 250, 500, 750, 1000])]
    pub timesteps: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub schedule_steps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_END)]
    pub beta_end: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// JSON-lines manifest of our shapes (query_id, category, query_image, shape).
    #[arg(long)]
    pub ours: PathBuf,
    /// Manifest of the comparison method, same layout.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_per_category: usize,
    /// Restrict to these categories; default is every category in `--ours`.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TallyArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub votes: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Vote log; created if missing, resumed if present.
    #[arg(long)]
    pub votes: PathBuf,
    /// Base for relative paths in the pair file; defaults to its directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Minutes a handed-out pair stays reserved for its annotator.
    #[arg(long, default_value_t = 30)]
    pub hold_minutes: u64,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub timesteps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_END)]
    pub beta_end: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved inputs of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub paths: BTreeMap<String, PathBuf>,
    pub params: Value,
    pub version: String,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64) -> Self {
        RunConfig {
            command: command.into(),
            seed,
            paths: BTreeMap::new(),
            params: json!({}),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn path(mut self, name: &str, p: &Path) -> Self {
        self.paths.insert(name.into(), p.to_path_buf());
        self
    }

    pub fn params(mut self, v: Value) -> Self {
        self.params = v;
        self
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn envelope(&self, result: impl Serialize) -> anyhow::Result<Value> {
        Ok(json!({ "config": self, "config_hash": self.hash(), "result": serde_json::to_value(result)? }))
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let root = cli.out_root.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    let seed = cli.seed;
    match cli.command {
        Command::Data(a) => cmd_data(a, seed, &root),
        Command::TrainCisp(a) => cmd_train_cisp(a, seed, &root),
        Command::Embed(a) => cmd_embed(a, seed),
        Command::TrainDdpm(a) => cmd_train_ddpm(a, seed, &root),
        Command::Sample(a) => cmd_sample(a, seed, &root),
        Command::Interpolate(a) => cmd_interpolate(a, seed, &root),
        Command::Evaluate(a) => cmd_evaluate(a, seed, &root),
        Command::Analyze(a) => cmd_analyze(a, seed, &root),
        Command::HumanevalPrepare(a) => cmd_prepare(a, seed, &root),
        Command::HumanevalTally(a) => cmd_tally(a, seed, &root),
        Command::HumanevalServe(a) => cmd_serve(a, seed),
        Command::Schedule(a) => cmd_schedule(a),
    }
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Sidecar path of a checkpoint: `model.ckpt` → `model.ckpt.json`.
pub fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn split_items(items: &[Item], split: Split) -> Vec<&Item> {
    items.iter().filter(|i| i.entry.split == split).collect()
}

fn cmd_data(a: DataArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    if a.split.len() != 3 {
        bail!("--split takes three comma-separated fractions, got {}", a.split.len());
    }
    let out = a.out.unwrap_or_else(|| root.join("data"));
    let cfg = DatasetConfig { n_per_class: a.n_per_class, split: [a.split[0], a.split[1], a.split[2]], dim: a.dim, seed };
    let run = RunConfig::new("data", seed).path("out", &out).params(serde_json::to_value(cfg)?);
    ensure_dir(&out)?;
    let entries = build_dataset(&cfg, &out)?;
    let counts: BTreeMap<String, usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|s| (format!("{s:?}").to_lowercase(), entries.iter().filter(|e| e.split == *s).count()))
        .collect();
    write_json(&out.join("run.json"), &run.envelope(json!({ "items": entries.len(), "splits": counts }))?)?;
    println!("wrote {} items to {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train_cisp(a: TrainCispArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    let out = a.out.unwrap_or_else(|| root.join("cisp.ickp"));
    let items = load_items(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let config = CispConfig { embed_dim: a.embed_dim, ..CispConfig::default() };
    let train = CispTrainConfig { epochs: a.epochs, batch: a.batch, lr: a.lr, seed, frozen: Vec::new() };
    let run = RunConfig::new("train-cisp", seed)
        .path("data", &a.data)
        .path("out", &out)
        .params(json!({ "model": config, "train": train }));
    let t0 = Instant::now();
    let (model, curve) = train_cisp(&split_items(&items, Split::Train), config, &train, |e, l, _| {
        log::info!("epoch {e} loss {l:.4}");
    })?;
    ensure_parent(&out)?;
    model.save(&out)?;
    let test = split_items(&items, Split::Test);
    let top1 = if test.len() >= 2 {
        let imgs = test.iter().map(|i| model.embed_image(&image_values(&i.render))).collect::<crate::Result<Vec<_>>>()?;
        let shapes = test
            .iter()
            .map(|i| model.embed_shape(&crate::cisp::pool_shape(&i.grid, model.config())?))
            .collect::<crate::Result<Vec<_>>>()?;
        Some(retrieval_top1(&imgs, &shapes)?)
    } else {
        None
    };
    let result = json!({ "loss_curve": curve, "test_retrieval_top1": top1, "seconds": t0.elapsed().as_secs_f64() });
    write_json(&sidecar(&out), &run.envelope(result)?)?;
    println!("saved {}; test top-1 {:?}", out.display(), top1);
    Ok(())
}

fn cmd_embed(a: EmbedArgs, seed: u64) -> anyhow::Result<()> {
    let model = CispModel::load(&a.cisp)?;
    let embs = a
        .image
        .iter()
        .map(|p| {
            let img = Image::read(p)?;
            model.embed_image(&image_values(&img))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    ensure_parent(&a.out)?;
    write_embeddings(&embs, &a.out)?;
    let run = RunConfig::new("embed", seed).path("cisp", &a.cisp).path("out", &a.out).params(json!({ "images": a.image }));
    write_json(&sidecar(&a.out), &run.envelope(json!({ "count": embs.len() }))?)?;
    Ok(())
}

fn cmd_train_ddpm(a: TrainDdpmArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    let out = a.out.unwrap_or_else(|| root.join("ddpm.ickp"));
    let items = load_items(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let cisp = CispModel::load(&a.cisp).with_context(|| format!("loading {}", a.cisp.display()))?;
    let dim = items.first().ok_or_else(|| anyhow!("dataset is empty"))?.grid.dims()[0];
    if a.factor == 0 || dim % a.factor != 0 {
        bail!("pooling factor {} does not divide grid size {dim}", a.factor);
    }
    let recipe = DdpmRecipe {
        timesteps: a.timesteps,
        beta_start: a.beta_start,
        beta_end: a.beta_end,
        factor: a.factor,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        guidance: GuidanceConfig { w: GuidanceConfig::default().w, p_drop: a.p_drop },
        denoiser: DenoiserConfig {
            grid: dim / a.factor,
            width: a.width,
            cond_dim: cisp.config().embed_dim,
            ec_dim: EC_CELLS * EC_CELLS,
            ..DenoiserConfig::default()
        },
    };
    recipe.guidance.validate()?;
    let run = RunConfig::new("train-ddpm", seed)
        .path("data", &a.data)
        .path("cisp", &a.cisp)
        .path("out", &out)
        .params(json!({ "recipe": recipe }));
    let data = train_items(&split_items(&items, Split::Train), &cisp, a.factor)?;
    let t0 = Instant::now();
    let mut window = Vec::new();
    let mut curve = Vec::new();
    let net = train_ddpm(&data, &recipe, seed, |step, loss| {
        window.push(loss);
        if window.len() == 100 || step + 1 == recipe.steps {
            let m = window.iter().sum::<f64>() / window.len() as f64;
            log::info!("step {} loss {m:.4}", step + 1);
            curve.push(m);
            window.clear();
        }
    })?;
    ensure_parent(&out)?;
    net.save(&out)?;
    write_json(&sidecar(&out), &run.envelope(json!({ "loss_curve_per_100": curve, "seconds": t0.elapsed().as_secs_f64() }))?)?;
    println!("saved {}", out.display());
    Ok(())
}

/// Loads a denoiser and the schedule recorded next to it.
pub fn load_denoiser(ckpt: &Path) -> anyhow::Result<(DenoiserNet, DdpmRecipe)> {
    let net = DenoiserNet::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let side = sidecar(ckpt);
    let recipe = match fs::read(&side) {
        Ok(bytes) => {
            let v: Value = serde_json::from_slice(&bytes)?;
            serde_json::from_value(v["config"]["params"]["recipe"].clone())
                .with_context(|| format!("no recipe in {}", side.display()))?
        }
        Err(_) => {
            log::warn!("{} missing; using the default schedule", side.display());
            DdpmRecipe::default()
        }
    };
    if recipe.denoiser.grid != net.config().grid {
        bail!("sidecar grid {} disagrees with checkpoint grid {}", recipe.denoiser.grid, net.config().grid);
    }
    Ok((net, recipe))
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    file: PathBuf,
    seed: u64,
    w: f64,
    evaluations: usize,
    empty: bool,
    config_hash: String,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    query: Option<ShapeEntry>,
}

fn first_embedding(p: &Path, index: usize) -> anyhow::Result<Embedding> {
    let embs = read_embeddings(p).with_context(|| format!("reading {}", p.display()))?;
    let n = embs.len();
    embs.into_iter().nth(index).ok_or_else(|| anyhow!("{} holds {n} embeddings, index {index} requested", p.display()))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn cmd_sample(a: SampleArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    if a.uncond && a.w.is_some() {
        bail!("--w has no effect with --uncond; drop one of them");
    }
    if a.count == 0 {
        bail!("--count must be positive");
    }
    let out_dir = a.out_dir.clone().unwrap_or_else(|| root.join("samples"));
    let (net, recipe) = load_denoiser(&a.ckpt)?;
    let sched = recipe.schedule()?;
    let w = if a.uncond { 1.0 } else { a.w.unwrap_or(GuidanceConfig::default().w) };
    let cisp = a.cisp.as_ref().map(CispModel::load).transpose()?;

    // One conditioning per query, each sampled `count` times.
    let mut queries: Vec<(Conditioning, Option<ShapeEntry>)> = Vec::new();
    if let Some(ds) = &a.dataset {
        let cisp = cisp.as_ref().ok_or_else(|| anyhow!("--dataset needs --cisp"))?;
        let items = load_items(ds)?;
        for it in split_items(&items, a.split.into()) {
            let q = ShapeEntry {
                query_id: it.entry.id.clone(),
                category: it.entry.class.name().into(),
                query_image: absolute(&ds.join(&it.entry.render_paths[0])),
                shape: PathBuf::new(),
            };
            queries.push((image_conditioning(cisp, &it.render)?, Some(q)));
        }
        if queries.is_empty() {
            bail!("split {:?} of {} is empty", a.split, ds.display());
        }
    } else if a.uncond {
        queries.push((Conditioning::none(), None));
    } else if a.explicit_null {
        queries.push((Conditioning { cisp: Some(net.null_cisp()), ec: Some(net.null_ec()) }, None));
    } else {
        let image = a.image.as_ref().map(Image::read).transpose()?;
        let cisp_vec = match (&a.cisp_emb, &image, &cisp) {
            (Some(p), _, _) => Some(first_embedding(p, a.index)?.0),
            (None, Some(img), Some(m)) => Some(m.embed_image(&image_values(img))?.0),
            _ => None,
        };
        let ec = image.as_ref().map(|img| aux_image_vector(img, EC_CELLS)).transpose()?;
        if cisp_vec.is_none() && ec.is_none() {
            bail!("no conditioning given: use --cisp-emb, --image, --dataset, --explicit-null or --uncond");
        }
        queries.push((Conditioning { cisp: cisp_vec, ec }, None));
    }

    let steps = a.steps.unwrap_or(sched.steps());
    let run = RunConfig::new("sample", seed)
        .path("ckpt", &a.ckpt)
        .path("out_dir", &out_dir)
        .params(json!({
            "w": w, "count": a.count, "uncond": a.uncond, "explicit_null": a.explicit_null,
            "cisp_emb": a.cisp_emb, "index": a.index, "image": a.image, "cisp": a.cisp,
            "dataset": a.dataset, "split": format!("{:?}", a.split).to_lowercase(), "steps": steps,
            "recipe": recipe,
        }));
    let hash = run.hash();
    let dim = net.config().grid;
    let mut reqs = Vec::new();
    for (cond, _) in &queries {
        for _ in 0..a.count {
            let mut r = SampleRequest::new(seed + reqs.len() as u64, w, cond.clone(), &sched, dim);
            r.steps = steps;
            reqs.push(r);
        }
    }
    ensure_dir(&out_dir)?;
    let t0 = Instant::now();
    let outs = sample_many(&reqs, &net, &sched);
    let mut rows = Vec::new();
    for (j, (req, out)) in reqs.iter().zip(outs).enumerate() {
        let out = out?;
        let file = PathBuf::from(format!("sample-{j:04}.icvx"));
        write_grid(&out.binary, out_dir.join(&file))?;
        let query = queries[j / a.count].1.clone().map(|mut q| {
            q.shape = absolute(&out_dir.join(&file));
            q
        });
        rows.push(SampleRow { file, seed: req.seed, w, evaluations: out.evaluations, empty: out.empty, config_hash: hash.clone(), query });
    }
    write_jsonl(&out_dir.join("manifest.jsonl"), &rows)?;
    let empty = rows.iter().filter(|r| r.empty).count();
    write_json(
        &out_dir.join("run.json"),
        &run.envelope(json!({ "samples": rows.len(), "empty": empty, "seconds": t0.elapsed().as_secs_f64() }))?,
    )?;
    println!("wrote {} samples ({empty} empty) to {}", rows.len(), out_dir.display());
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    if a.steps < 2 {
        bail!("--steps must be at least 2");
    }
    let out_dir = a.out_dir.clone().unwrap_or_else(|| root.join("interpolate"));
    let (net, recipe) = load_denoiser(&a.ckpt)?;
    let sched = recipe.schedule()?;
    let ea = first_embedding(&a.a, 0)?;
    let eb = first_embedding(&a.b, 0)?;
    let path = slerp_path(&ea, &eb, a.steps)?;
    let run = RunConfig::new("interpolate", seed)
        .path("ckpt", &a.ckpt)
        .path("a", &a.a)
        .path("b", &a.b)
        .path("out_dir", &out_dir)
        .params(json!({ "steps": a.steps, "w": a.w, "recipe": recipe }));
    let hash = run.hash();
    let dim = net.config().grid;
    let reqs: Vec<SampleRequest> = path
        .iter()
        .map(|e| SampleRequest::new(seed, a.w, Conditioning { cisp: Some(e.0.clone()), ec: None }, &sched, dim))
        .collect();
    ensure_dir(&out_dir)?;
    let mut rows = Vec::new();
    for (k, out) in sample_many(&reqs, &net, &sched).into_iter().enumerate() {
        let out = out?;
        let lambda = k as f64 / (a.steps - 1) as f64;
        let file = format!("interp-{k:02}.icvx");
        write_grid(&out.binary, out_dir.join(&file))?;
        rows.push(json!({ "file": file, "lambda": lambda, "seed": seed, "occupied": out.binary.occupied_count(),
                          "empty": out.empty, "config_hash": hash }));
    }
    write_jsonl(&out_dir.join("manifest.jsonl"), &rows)?;
    write_json(&out_dir.join("run.json"), &run.envelope(json!({ "grids": rows.len() }))?)?;
    println!("wrote {} grids to {}", rows.len(), out_dir.display());
    Ok(())
}

fn grid_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "icvx"))
        .collect();
    v.sort();
    if v.is_empty() {
        bail!("no .icvx grids in {}", dir.display());
    }
    Ok(v)
}

fn clouds(files: &[PathBuf], points: usize, seed: u64) -> anyhow::Result<Vec<PointCloud>> {
    files
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let g = read_grid(p)?.threshold(0.5)?;
            sample_surface(&g, points, crate::rng::split(&mut crate::rng::item_stream(seed, "surface", i as u64)))
                .with_context(|| format!("sampling {}", p.display()))
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| root.join("evaluate.json"));
    let gen = grid_files(&a.gen_dir)?;
    let refs = grid_files(&a.ref_dir)?;
    let sets = EvalSets { generated: clouds(&gen, a.points, seed)?, reference: clouds(&refs, a.points, seed)? };
    let all = a.metric.contains(&MetricArg::All);
    let want = |m: MetricArg| all || a.metric.contains(&m);
    let mut results = BTreeMap::new();
    for &d in &a.distance {
        let tables = DistanceTables::compute(&sets, d.into())?;
        let mut r = BTreeMap::new();
        if want(MetricArg::OneNna) {
            if gen.len() != refs.len() {
                bail!("1-NNA needs equal set sizes ({} generated, {} reference)", gen.len(), refs.len());
            }
            r.insert("1nna", tables.one_nna()?);
        }
        if want(MetricArg::Mmd) {
            r.insert("mmd", tables.mmd()?);
        }
        if want(MetricArg::Cov) {
            r.insert("cov", tables.cov()?);
        }
        results.insert(serde_json::to_value(d)?.as_str().unwrap_or_default().to_string(), r);
    }
    let run = RunConfig::new("evaluate", seed)
        .path("gen_dir", &a.gen_dir)
        .path("ref_dir", &a.ref_dir)
        .path("out", &out)
        .params(json!({ "metric": a.metric, "distance": a.distance, "points": a.points,
                        "generated": gen.len(), "reference": refs.len() }));
    write_json(&out, &run.envelope(&results)?)?;
    println!("{}", serde_json::to_string_pretty(&results)?);
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| root.join("analyze.json"));
    let grid = read_grid(&a.grid)?;
    let sched = NoiseSchedule::linear(a.schedule_steps, a.beta_start, a.beta_end)?;
    let report = normality_report(&grid, &sched, &a.timesteps, seed)?;
    let run = RunConfig::new("analyze", seed)
        .path("grid", &a.grid)
        .path("out", &out)
        .params(json!({ "timesteps": a.timesteps, "schedule_steps": a.schedule_steps,
                        "beta_start": a.beta_start, "beta_end": a.beta_end }));
    write_json(&out, &run.envelope(&report)?)?;
    for r in &report.records {
        println!("t={:5} qq_r={:.5} mean={:+.4} var={:.4}", r.t, r.qq_correlation, r.mean, r.variance);
    }
    Ok(())
}

fn cmd_prepare(a: PrepareArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    let out_dir = a.out_dir.clone().unwrap_or_else(|| root.join("humaneval"));
    let ours: Vec<ShapeEntry> = read_jsonl(&a.ours)?;
    let base: Vec<ShapeEntry> = read_jsonl(&a.baseline)?;
    let prep = prepare_pairs(&ours, &base, a.categories.as_deref(), a.n_per_category, seed)?;
    ensure_dir(&out_dir)?;
    write_prepared(&prep, &out_dir.join("pairs.jsonl"), &out_dir.join("key.jsonl"))?;
    let run = RunConfig::new("humaneval-prepare", seed)
        .path("ours", &a.ours)
        .path("baseline", &a.baseline)
        .path("out_dir", &out_dir)
        .params(json!({ "n_per_category": a.n_per_category, "categories": a.categories }));
    let result = json!({ "pairs": prep.pairs.len(), "side_a_share": prep.side_a_share(), "rejected": prep.rejected });
    write_json(&out_dir.join("prepare.json"), &run.envelope(result)?)?;
    for id in &prep.rejected {
        eprintln!("warning: query {id} has the same shape on both sides; skipped");
    }
    println!("wrote {} pairs to {}", prep.pairs.len(), out_dir.display());
    Ok(())
}

fn cmd_tally(a: TallyArgs, seed: u64, root: &Path) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| root.join("tally.json"));
    let report = tally(&read_jsonl(&a.pairs)?, &read_jsonl(&a.key)?, &read_jsonl(&a.votes)?)?;
    let run = RunConfig::new("humaneval-tally", seed)
        .path("pairs", &a.pairs)
        .path("key", &a.key)
        .path("votes", &a.votes)
        .path("out", &out);
    write_json(&out, &run.envelope(&report)?)?;
    println!(
        "realism majority {:.2}%  coherence majority {:.2}%",
        report.realism.overall.majority, report.coherence.overall.majority
    );
    Ok(())
}

fn cmd_serve(a: ServeArgs, seed: u64) -> anyhow::Result<()> {
    let root = a.root.clone().unwrap_or_else(|| a.pairs.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut cfg = ServerConfig::new(&a.pairs, &a.votes, root);
    cfg.seed = seed;
    cfg.hold = Duration::from_secs(a.hold_minutes * 60);
    serve(&cfg, a.addr)?;
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs) -> anyhow::Result<()> {
    let tsv = NoiseSchedule::linear(a.timesteps, a.beta_start, a.beta_end)?.to_tsv();
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, tsv).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{tsv}"),
    }
    Ok(())
}
