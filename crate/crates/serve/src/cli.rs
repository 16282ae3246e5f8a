//! The `sat3d` command line.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sat3d_core::inference::{eval_case, plan_windows, Windowed, OVERLAP};
use sat3d_core::metrics::{report, MetricReport};
use sat3d_core::netblocks::{ModelConfig, Sat3d};
use sat3d_core::promptloop::{refine_step, EpisodeTrace, PointPrompt, PromptState, PromptableModel};
use sat3d_core::stats::{friedman_with, pairwise_wilcoxon, FriedmanOptions, RankTable};
use sat3d_core::trainer::{TrainConfig, Trainer};
use sat3d_core::volgrid::{
    generate_phantom, load_mask, load_volume, save_mask, save_volume, znormalize, BinaryMask, PhantomSpec, Volume,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::api::{self, AppState, ServeConfig};

/// Extensions tried for dataset files, native first.
pub const EXTENSIONS: [&str; 3] = ["s3d", "nii.gz", "nii"];

#[derive(Debug, Parser)]
#[command(name = "sat3d", version, about = "Prompt-driven 3-D lesion segmentation with uncertainty")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON or TOML config.
    Train(TrainArgs),
    /// Segment one volume with scripted clicks.
    Infer(InferArgs),
    /// Score predictions against ground truth, or a checkpoint under the click protocol.
    Eval(EvalArgs),
    /// Friedman or Wilcoxon tests on a long-format CSV table.
    Stats(StatsArgs),
    /// Write synthetic volume/mask pairs.
    Phantom(PhantomArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// JSON list of `{"coord": [i, j, k], "label": 0|1}`, inline or a file path.
    #[arg(long)]
    pub points: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth; adds per-step Dice to the trace.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// With `--gt`, simulate this many clicks and keep the best step instead of using `--points`.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Where to write the trace JSON (default: next to `--out`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Z-normalise the volume first.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "gt_dir", conflicts_with = "checkpoint")]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    /// Evaluate a checkpoint on `<name>_image`/`<name>_mask` pairs in `--data`.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Click budgets for checkpoint evaluation.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
    pub budget: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TestKind {
    Friedman,
    Wilcoxon,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, value_enum)]
    pub test: TestKind,
    #[arg(long)]
    pub tie_correction: bool,
    /// JSON output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid side in voxels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SAT3D_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Weights to serve; without one an untrained desk model is used.
    #[arg(long, env = "SAT3D_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Seconds before an idle session expires.
    #[arg(long, default_value_t = 3600)]
    pub idle_timeout: u64,
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Persist each session's trace as `<id>.json` here.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Infer(a) => infer(a, seed.unwrap_or(0)),
        Command::Eval(a) => eval(a, seed.unwrap_or(0)),
        Command::Stats(a) => stats(a),
        Command::Phantom(a) => phantom(a, seed.unwrap_or(0)),
        Command::Serve(a) => serve(a, seed.unwrap_or(0)),
    }
}

/// Path of a dataset file `<dir>/<name>_<role>.<ext>` for the first
/// extension that exists.
fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn strip_ext(name: &str) -> Option<&str> {
    EXTENSIONS.iter().find_map(|e| name.strip_suffix(&format!(".{e}")))
}

/// Case names with a `<name>_mask.<ext>` file in `dir`, sorted.
pub fn case_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(case) = strip_ext(&name).and_then(|s| s.strip_suffix("_mask")) {
            names.push(case.to_string());
        }
    }
    names.sort();
    names.dedup();
    Ok(names)
}

/// Loads every `<name>_image`/`<name>_mask` pair under `dir`.
pub fn load_dataset(dir: &Path, normalize: bool) -> Result<Vec<(String, Volume, BinaryMask)>> {
    let mut out = Vec::new();
    for name in case_names(dir)? {
        let img = find_file(dir, &format!("{name}_image")).with_context(|| format!("no image for case {name} in {}", dir.display()))?;
        let v = load_volume(&img).with_context(|| img.display().to_string())?;
        let v = if normalize { znormalize(&v)? } else { v };
        let m = load_mask(find_file(dir, &format!("{name}_mask")).expect("listed"))?;
        out.push((name, v, m));
    }
    if out.is_empty() {
        bail!("no <name>_mask files in {}", dir.display());
    }
    Ok(out)
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum ModelChoice {
    /// "desk", "full" or "tiny".
    Preset(String),
    Full(Box<ModelConfig>),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelConfig> {
        Ok(match self {
            Self::Preset(p) if p == "desk" => ModelConfig::desk(),
            Self::Preset(p) if p == "full" => ModelConfig::full(),
            Self::Preset(p) if p == "tiny" => ModelConfig::tiny(32),
            Self::Preset(p) => bail!("unknown model preset {p:?} (desk, full or tiny)"),
            Self::Full(c) => (**c).clone(),
        })
    }
}

/// Phantom training data generated on the fly.
#[derive(Debug, Deserialize, Serialize)]
pub struct PhantomSet {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    64
}

/// Training config file: every `TrainConfig` key plus where to find data
/// and where to write logs and checkpoints.
#[derive(Debug, Deserialize, Serialize)]
pub struct TrainFile {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default = "desk_model")]
    pub model: ModelChoice,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub phantoms: Option<PhantomSet>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    pub out: PathBuf,
    /// Continue from this trainer checkpoint.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn desk_model() -> ModelChoice {
    ModelChoice::Preset("desk".into())
}

fn yes() -> bool {
    true
}

pub fn read_train_file(path: &Path) -> Result<TrainFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    Ok(if is_toml { toml::from_str(&text)? } else { serde_json::from_str(&text)? })
}

/// Phantom pairs named `case_000`, `case_001`, ...; case seeds are drawn
/// from one stream so that distinct seeds give disjoint-looking sets.
/// Lesion radii scale with the grid from the 64-voxel defaults.
pub fn phantom_set(n: usize, seed: u64, size: usize) -> Result<Vec<(String, Volume, BinaryMask)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = PhantomSpec::default();
    let scale = size as f64 / base.grid[0] as f64;
    let radius = ((base.radius.0 * scale).max(1.0), (base.radius.1 * scale).max(1.0));
    (0..n)
        .map(|i| {
            let spec = PhantomSpec { grid: [size; 3], radius, seed: rng.random(), ..base.clone() };
            let (v, m) = generate_phantom(&spec)?;
            Ok((format!("case_{i:03}"), v, m))
        })
        .collect()
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut file = read_train_file(&a.config)?;
    if let Some(s) = seed {
        file.train.seed = s;
    }
    let data: Vec<(Volume, BinaryMask)> = match (&file.data, &file.phantoms) {
        (Some(d), _) => load_dataset(d, file.normalize)?.into_iter().map(|(_, v, m)| (v, m)).collect(),
        (None, Some(p)) => phantom_set(p.n, p.seed, p.size)?
            .into_iter()
            .map(|(_, v, m)| Ok((if file.normalize { znormalize(&v)? } else { v }, m)))
            .collect::<Result<_>>()?,
        (None, None) => bail!("the config needs `data` (a directory) or `phantoms`"),
    };
    let val: Vec<(Volume, BinaryMask)> = match &file.val {
        Some(d) => load_dataset(d, file.normalize)?.into_iter().map(|(_, v, m)| (v, m)).collect(),
        None => vec![],
    };
    let mut trainer = match &file.resume {
        Some(p) => Trainer::resume(p, Some(file.train.clone()))?,
        None => Trainer::new(Sat3d::new(file.model.resolve()?)?, file.train.clone())?,
    };
    tracing::info!(params = trainer.model.num_params(), cases = data.len(), "training");
    let summary = trainer.fit(&data, &val, Some(&file.out))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn parse_points(arg: &str) -> Result<Vec<PointPrompt>> {
    let text = if arg.trim_start().starts_with('[') { arg.to_string() } else { fs::read_to_string(arg).with_context(|| format!("reading {arg}"))? };
    serde_json::from_str(&text).context("points must be a JSON list of {\"coord\": [i, j, k], \"label\": 0|1}")
}

fn infer(a: InferArgs, seed: u64) -> Result<()> {
    let model = Sat3d::load(&a.checkpoint)?;
    let raw = load_volume(&a.volume)?;
    let volume = if a.normalize { znormalize(&raw)? } else { raw };
    let gt = a.gt.as_ref().map(load_mask).transpose()?;
    let (mask, trace) = match (a.budget, &gt) {
        (Some(k), Some(g)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = eval_case(&model, &volume, g, k, &mut rng)?;
            (out.best_mask, json!({ "best_step": out.best_step, "best": out.best_report, "reports": out.reports, "trace": out.trace }))
        }
        (Some(_), None) => bail!("--budget needs --gt"),
        (None, _) => {
            let points = a.points.as_deref().map(parse_points).transpose()?.unwrap_or_default();
            let plan = plan_windows(volume.dims(), model.input_dims().expect("fixed input"), OVERLAP)?;
            let w = Windowed { model: &model, plan };
            let img = w.embed(&volume)?;
            let mut state = PromptState::new(volume.dims(), volume.spacing(), points.len() + 1);
            let mut steps = vec![refine_step(&w, &img, &mut state)?];
            for p in points {
                state.points.push(p);
                steps.push(refine_step(&w, &img, &mut state)?);
            }
            let trace = EpisodeTrace::from_steps(&steps, gt.as_ref(), None);
            (steps.pop().expect("step 0").pred, serde_json::to_value(trace)?)
        }
    };
    save_mask(&mask, &a.out)?;
    let trace_path = a.trace.unwrap_or_else(|| a.out.with_extension("trace.json"));
    fs::write(&trace_path, serde_json::to_string_pretty(&trace)?)?;
    println!("{} foreground voxels -> {}", mask.count(), a.out.display());
    Ok(())
}

/// One CSV row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case_id: String,
    pub dsc: f64,
    pub iou: f64,
    pub rve: f64,
    pub hd95_mm: f64,
    pub assd_mm: f64,
    pub empty_flag: bool,
}

impl EvalRow {
    fn new(case_id: String, r: &MetricReport) -> Self {
        Self { case_id, dsc: r.dsc, iou: r.iou, rve: r.rve, hd95_mm: r.hd95, assd_mm: r.assd, empty_flag: r.empty_flag }
    }
}

/// Scores `<case>_mask` files in `gt_dir` against the same file name in
/// `pred_dir`, falling back to `<case>_pred` and `<case>`.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for case in case_names(gt_dir)? {
        let gt = load_mask(find_file(gt_dir, &format!("{case}_mask")).expect("listed"))?;
        let pred_path = [format!("{case}_mask"), format!("{case}_pred"), case.clone()]
            .iter()
            .find_map(|s| find_file(pred_dir, s))
            .with_context(|| format!("no prediction for case {case} in {}", pred_dir.display()))?;
        let pred = load_mask(&pred_path)?;
        rows.push(EvalRow::new(case, &report(&pred, &gt, gt.spacing())?));
    }
    if rows.is_empty() {
        bail!("no <name>_mask files in {}", gt_dir.display());
    }
    Ok(rows)
}

fn write_rows(rows: &[EvalRow], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn eval(a: EvalArgs, seed: u64) -> Result<()> {
    let rows = match (&a.pred_dir, &a.gt_dir, &a.checkpoint, &a.data) {
        (Some(p), Some(g), None, _) => eval_dirs(p, g)?,
        (None, _, Some(c), Some(d)) => {
            let model = Sat3d::load(c)?;
            let cases = load_dataset(d, true)?;
            let mut rows = Vec::new();
            for &k in &a.budget {
                for (i, (name, v, m)) in cases.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let out = eval_case(&model, v, m, k, &mut rng)?;
                    rows.push(EvalRow::new(format!("{name}@k{k}"), &out.best_report));
                }
            }
            rows
        }
        _ => bail!("give --pred-dir with --gt-dir, or --checkpoint with --data"),
    };
    write_rows(&rows, &a.out)?;
    let mean = MetricReport::mean(&rows.iter().map(|r| MetricReport { dsc: r.dsc, iou: r.iou, rve: r.rve, hd95: r.hd95_mm, assd: r.assd_mm, empty_flag: r.empty_flag }).collect::<Vec<_>>());
    println!("{} cases, mean {}", rows.len(), serde_json::to_string(&mean)?);
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let table = RankTable::from_csv(&fs::read_to_string(&a.table).with_context(|| a.table.display().to_string())?)?;
    let result = match a.test {
        TestKind::Friedman => serde_json::to_value(friedman_with(&table, FriedmanOptions { tie_correction: a.tie_correction })?)?,
        TestKind::Wilcoxon => {
            let pairs: Vec<_> = pairwise_wilcoxon(&table)?.into_iter().map(|(x, y, r)| json!({ "a": x, "b": y, "result": r })).collect();
            json!(pairs)
        }
    };
    let text = serde_json::to_string_pretty(&result)?;
    match a.out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn phantom(a: PhantomArgs, seed: u64) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    for (name, v, m) in phantom_set(a.n, seed, a.size)? {
        save_volume(&v, a.out.join(format!("{name}_image.s3d")))?;
        save_mask(&m, a.out.join(format!("{name}_mask.s3d")))?;
    }
    println!("wrote {} phantoms to {}", a.n, a.out.display());
    Ok(())
}

fn serve(a: ServeArgs, seed: u64) -> Result<()> {
    let (model, checkpoint_id) = match &a.checkpoint {
        Some(p) => (Sat3d::load(p).with_context(|| p.display().to_string())?, p.display().to_string()),
        None => {
            tracing::warn!("no checkpoint given; serving untrained weights");
            (Sat3d::new(ModelConfig { init_seed: seed, ..ModelConfig::desk() })?, format!("untrained-desk-{seed}"))
        }
    };
    let config = ServeConfig {
        idle_timeout: Duration::from_secs(a.idle_timeout),
        cors_origin: a.cors_origin,
        checkpoint_id,
        trace_dir: a.trace_dir,
        ..ServeConfig::default()
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(%addr, "listening");
        api::serve(listener, AppState::new(model, config), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sat3d_core::volgrid::Spacing;

    #[test]
    fn train_file_accepts_toml_and_flattened_keys() {
        let f: TrainFile = toml::from_str("epochs = 3\nbatch_size = 1\nout = \"runs\"\nmodel = \"tiny\"\n[phantoms]\nn = 2\n").unwrap();
        assert_eq!(f.train.epochs, 3);
        assert_eq!(f.train.base_lr, TrainConfig::full().base_lr);
        assert_eq!(f.model.resolve().unwrap().input_size, 32);
        assert_eq!(f.phantoms.unwrap().size, 64);
    }

    #[test]
    fn phantom_cases_are_named_and_distinct() {
        let set = phantom_set(2, 1, 16).unwrap();
        assert_eq!(set[0].0, "case_000");
        assert_eq!(set[1].1.spacing(), Spacing::ISO);
        assert_ne!(set[0].2, set[1].2);
    }
}
