//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eval::{
    cases_from_synthetic, generate_dataset, run_ablation, AblationConfig, EvalCase, Manifest, ManifestEntry,
    ManifestInstance, SyntheticSpec,
};
use crate::grid::{draw_margins, BoundingBox, LabelMap, ScribbleSet};
use crate::io::{load_image, load_mask, save_image, save_label_values, save_mask, BitDepth};
use crate::nn::{load_model, save_model, train, ArchConfig, SegmenterModel, TrainConfig, TrainingSet};
use crate::pipeline::{init_segment, RefineConfig, Session, SessionConfig};
use crate::service::{serve, AppState, BusyPolicy, ServiceConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "BIFSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bifseg", version, about = "Bounding-box interactive segmentation with image-specific fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the cropped instances of a dataset.
    Train(TrainArgs),
    /// Segment one object inside a box, optionally refining once.
    Segment(SegmentArgs),
    /// Replay several refinement rounds, one scribble file per round.
    Refine(RefineArgs),
    /// Run the method comparison on a synthetic or manifest test set.
    Benchmark(BenchmarkArgs),
    /// Print a benchmark report as a table.
    Report(ReportArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Write a synthetic dataset to disk with a manifest.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct DataSource {
    /// Dataset manifest (JSON).
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    pub data: Option<PathBuf>,
    /// Synthetic dataset spec (TOML), generated in memory.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: DataSource,
    /// Training config (TOML with `target_min`, `[arch]` and `[train]`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both seeds of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest split to train on.
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Inclusive box `x0,y0,x1,y1`.
    #[arg(long = "box", value_name = "X0,Y0,X1,Y1")]
    pub bbox: String,
    /// Refinement config (TOML), overriding defaults field by field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shorter side of the working resolution.
    #[arg(long, default_value_t = SessionConfig::default().target_min)]
    pub target_min: usize,
    /// Ground-truth mask; Dice is printed when given.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Session diagnostics (JSON).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    /// Scribble file (`fg|bg x y` per line, crop coordinates); an empty file refines unsupervised.
    #[arg(long, conflicts_with = "unsupervised_refine")]
    pub scribbles: Option<PathBuf>,
    #[arg(long)]
    pub unsupervised_refine: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    /// One scribble file per round, in order.
    #[arg(long = "scribbles", required = true)]
    pub rounds: Vec<PathBuf>,
    /// Directory receiving `round_<k>.png` for every round, 0 being the initial mask.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub model: PathBuf,
    /// Ablation config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write every method's final mask per case.
    #[arg(long)]
    pub keep_masks: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` or the directory holding it.
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ReportFormat {
    Table,
    Markdown,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory that `image_id` values refer to.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 1800)]
    pub idle_timeout_secs: u64,
    #[arg(long, value_enum, default_value = "queue")]
    pub busy: BusyPolicy,
    #[arg(long, default_value_t = 4096 * 4096)]
    pub max_image_pixels: usize,
    /// Default refinement config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = SessionConfig::default().target_min)]
    pub target_min: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the boxes written for test instances.
    #[arg(long, default_value_t = AblationConfig::default().box_seed)]
    pub box_seed: u64,
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub target_min: usize,
    /// Seed of the weight initialization and sample order.
    pub seed: u64,
    /// Seed of the random crop margins.
    pub crop_seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            target_min: SessionConfig::default().target_min,
            seed: 0,
            crop_seed: 0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// An error caused by how the command was invoked rather than by its inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())).into())
        }
    }
}

fn read_spec(path: &Path) -> anyhow::Result<SyntheticSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SyntheticSpec::from_toml(&text)?)
}

/// Parses `fg x y` / `bg x y` lines into a set for a `width x height` crop.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_scribbles(text: &str, width: usize, height: usize) -> crate::Result<ScribbleSet> {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Format { what: "scribble file", detail: format!("line {}: {line:?}", n + 1) };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [tag, x, y] = parts[..] else { return Err(bad()) };
        let p = (x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?);
        match tag {
            "fg" => fg.push(p),
            "bg" => bg.push(p),
            _ => return Err(bad()),
        }
    }
    ScribbleSet::from_points(width, height, &fg, &bg)
}

pub fn format_scribbles(set: &ScribbleSet) -> String {
    let (fg, bg) = set.points();
    let mut out = String::new();
    for (tag, pts) in [("fg", fg), ("bg", bg)] {
        for (x, y) in pts {
            writeln!(out, "{tag} {x} {y}").unwrap();
        }
    }
    out
}

fn load_model_arc(path: &Path) -> anyhow::Result<Arc<SegmenterModel>> {
    Ok(Arc::new(load_model(path).with_context(|| format!("loading model {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainFile = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        (cfg.seed, cfg.crop_seed) = (seed, seed);
    }
    let (images, instances) = match (&a.source.data, &a.source.spec) {
        (Some(manifest), _) => {
            let m = Manifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
            let split = m.load_split(&a.split)?;
            let mut images = Vec::new();
            let mut instances = Vec::new();
            for (k, (image, labels, inst)) in split.into_iter().enumerate() {
                instances.extend(inst.iter().map(|i| (k, i.label)));
                images.push((image, labels));
            }
            (images, instances)
        }
        (None, Some(spec)) => {
            let data = generate_dataset(&read_spec(spec)?)?;
            let images: Vec<_> = data.train.into_iter().map(|c| (c.image, c.labels)).collect();
            let instances = (0..images.len()).map(|k| (k, 1)).collect();
            (images, instances)
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let set = TrainingSet::from_instances(&images, &instances, cfg.target_min, cfg.crop_seed)?;
    log::info!("training on {} crops", set.samples.len());
    let model = train(&set, &cfg.arch, &cfg.train, cfg.seed)?;
    save_model(&a.out, &model)?;
    let curve_path = a.out.with_extension("loss.csv");
    let mut curve = String::from("point,loss\n");
    for (i, l) in model.loss_curve().iter().enumerate() {
        writeln!(curve, "{i},{l}").unwrap();
    }
    fs::write(&curve_path, curve)?;
    println!("wrote {} and {}", a.out.display(), curve_path.display());
    Ok(())
}

fn open_session(a: &SessionArgs) -> anyhow::Result<(Session, RefineConfig)> {
    let model = load_model_arc(&a.model)?;
    let image = load_image(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let bbox = BoundingBox::parse(&a.bbox)?;
    let refine: RefineConfig = read_toml(a.config.as_deref())?;
    refine.validate()?;
    let mut session = init_segment(model, &image, bbox, &SessionConfig { target_min: a.target_min, ..Default::default() })?;
    if let Some(t) = &a.truth {
        session.set_ground_truth(load_mask(t).with_context(|| format!("loading {}", t.display()))?)?;
    }
    Ok((session, refine))
}

fn read_scribble_file(path: &Path, session: &Session) -> anyhow::Result<ScribbleSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h) = session.crop_size();
    Ok(parse_scribbles(&text, w, h).with_context(|| path.display().to_string())?)
}

fn finish_session(a: &SessionArgs, session: &Session) -> anyhow::Result<()> {
    if let Some(d) = session.history().last().and_then(|r| r.dice) {
        println!("dice {d:.6}");
    }
    if let Some(p) = &a.diagnostics {
        write_json(p, &session.diagnostics_json())?;
    }
    Ok(())
}

fn cmd_segment(a: &SegmentArgs) -> anyhow::Result<()> {
    let (mut session, cfg) = open_session(&a.session)?;
    let scribbles = match (&a.scribbles, a.unsupervised_refine) {
        (Some(path), _) => Some(read_scribble_file(path, &session)?),
        (None, true) => {
            let (w, h) = session.crop_size();
            Some(ScribbleSet::empty(w, h))
        }
        (None, false) => None,
    };
    if let Some(s) = scribbles {
        session.refine(&s, &cfg)?;
    }
    save_mask(&a.out, &session.final_labels())?;
    finish_session(&a.session, &session)
}

fn cmd_refine(a: &RefineArgs) -> anyhow::Result<()> {
    let (mut session, cfg) = open_session(&a.session)?;
    fs::create_dir_all(&a.out)?;
    save_mask(a.out.join("round_0.png"), &session.final_labels())?;
    for (k, path) in a.rounds.iter().enumerate() {
        let scribbles = read_scribble_file(path, &session)?;
        let rec = session.refine(&scribbles, &cfg)?;
        log::info!("round {}: energy {:.4}, {:.1} ms", rec.round, rec.energy, rec.wall_ms);
        save_mask(a.out.join(format!("round_{}.png", k + 1)), &session.final_labels())?;
    }
    finish_session(&a.session, &session)
}

/// Test cases of a manifest split; instances without a box get the tight box
/// widened by margins drawn with `box_seed + i`.
pub fn manifest_cases(manifest: &Manifest, split: &str, box_seed: u64) -> crate::Result<Vec<EvalCase>> {
    let mut cases = Vec::new();
    for (entry, (image, labels, instances)) in manifest.split(split).zip(manifest.load_split(split)?) {
        let (w, h) = (image.width(), image.height());
        let stem = entry.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for inst in instances {
            let truth = LabelMap::binarize(w, h, &labels, inst.label)?;
            let bbox = match inst.bbox {
                Some(b) => b,
                None => {
                    let tight = BoundingBox::tight(w, h, |x, y| labels[y * w + x] == inst.label)
                        .ok_or(Error::EmptyInstance(inst.label))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(box_seed.wrapping_add(cases.len() as u64));
                    tight.expanded(draw_margins(&mut rng), w, h)
                }
            };
            cases.push(EvalCase { name: format!("{stem}_{}", inst.label), class: inst.class, image: image.clone(), truth, bbox });
        }
    }
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(cases)
}

fn cmd_benchmark(a: &BenchmarkArgs) -> anyhow::Result<()> {
    let mut cfg: AblationConfig = read_toml(a.config.as_deref())?;
    cfg.keep_masks = a.keep_masks;
    let model = load_model_arc(&a.model)?;
    let cases = match (&a.source.data, &a.source.spec) {
        (Some(m), _) => manifest_cases(&Manifest::load(m)?, &a.split, cfg.box_seed)?,
        (None, Some(spec)) => cases_from_synthetic(&generate_dataset(&read_spec(spec)?)?.test, cfg.box_seed),
        (None, None) => unreachable!("clap requires a source"),
    };
    if cases.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    log::info!("benchmarking {} cases", cases.len());
    let report = run_ablation(model, &cases, &cfg)?;
    report.write(&a.out)?;
    print!("{}", render_report(&serde_json::to_value(&report)?, ReportFormat::Table)?);
    Ok(())
}

/// Renders the summary rows of a serialized report.
pub fn render_report(report: &serde_json::Value, format: ReportFormat) -> anyhow::Result<String> {
    let rows = report["summary"].as_array().context("report has no summary")?;
    let mut out = String::new();
    match format {
        ReportFormat::Table => writeln!(out, "{:<28} {:<10} {:>5} {:>4} {:>16}", "method", "class", "round", "n", "dice")?,
        ReportFormat::Markdown => out.push_str("| method | class | round | n | dice |\n|---|---|---|---|---|\n"),
    }
    for r in rows {
        let method = r["method"].as_str().context("summary row without method")?;
        let class = r["class"].as_str().unwrap_or("");
        let (round, n) = (r["round"].as_u64().unwrap_or(0), r["n"].as_u64().unwrap_or(0));
        let dice = format!("{:.4}±{:.4}", r["mean"].as_f64().unwrap_or(f64::NAN), r["std"].as_f64().unwrap_or(f64::NAN));
        match format {
            ReportFormat::Table => writeln!(out, "{method:<28} {class:<10} {round:>5} {n:>4} {dice:>16}")?,
            ReportFormat::Markdown => writeln!(out, "| {method} | {class} | {round} | {n} | {dice} |")?,
        }
    }
    Ok(out)
}

fn cmd_report(a: &ReportArgs) -> anyhow::Result<()> {
    let path = if a.input.is_dir() { a.input.join("report.json") } else { a.input.clone() };
    let value: serde_json::Value =
        serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
    print!("{}", render_report(&value, a.format)?);
    let timing = path.with_file_name("timing.csv");
    if let Ok(t) = fs::read_to_string(timing) {
        print!("\nmachine time per method (ms)\n{t}");
    }
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> anyhow::Result<()> {
    let model = load_model_arc(&a.model)?;
    let refine: RefineConfig = read_toml(a.config.as_deref())?;
    refine.validate()?;
    let model_id = format!(
        "{}-{:016x}",
        a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        model.config_hash()
    );
    let cfg = ServiceConfig {
        image_dir: a.images.clone(),
        max_image_pixels: a.max_image_pixels,
        idle_timeout: Duration::from_secs(a.idle_timeout_secs),
        busy: a.busy,
        session: SessionConfig { target_min: a.target_min, ..Default::default() },
        refine,
        ..Default::default()
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(AppState::new(model, model_id, cfg), a.addr))?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let data = generate_dataset(&read_spec(&a.spec)?)?;
    let images = a.out.join("images");
    let labels = a.out.join("labels");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&labels)?;
    let boxes: Vec<BoundingBox> = cases_from_synthetic(&data.test, a.box_seed).into_iter().map(|c| c.bbox).collect();
    let mut entries = Vec::new();
    for (split, cases, boxes) in [("train", &data.train, None), ("test", &data.test, Some(&boxes))] {
        for (i, c) in cases.iter().enumerate() {
            let image = PathBuf::from("images").join(format!("{}.png", c.name));
            let label = PathBuf::from("labels").join(format!("{}.png", c.name));
            save_image(a.out.join(&image), &c.image, BitDepth::Eight)?;
            save_label_values(a.out.join(&label), c.image.width(), c.image.height(), &c.labels)?;
            let bbox = boxes.map(|b| b[i]);
            let instances = vec![ManifestInstance { label: 1, class: c.class.name().into(), bbox }];
            entries.push(ManifestEntry { image, label, instances, split: split.into() });
        }
    }
    Manifest::new(entries, &a.out).save(a.out.join("manifest.json"))?;
    println!("wrote {} training and {} test images to {}", data.train.len(), data.test.len(), a.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Generate(a) => cmd_generate(a),
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        UsageError(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| UsageError(e.to_string()))?;
    Ok(())
}
