//! `vton` command line: dataset generation, augmentation, training,
//! evaluation, single-image try-on and the HTTP service.

pub mod config;
pub mod server;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use vton_core::data::{self, DatasetManifest, Split};
use vton_core::imaging::ImageBuffer;
use vton_core::metrics::{evaluate_pairs, EvalConfig, KidConfig};
use vton_core::pipeline::{self, load_bundle, TryOnOptions, TryOnPipeline};
use vton_core::segnet::{self, smoothed_ends, SegTrainer};
use vton_core::transnet::{gan_pairs, GanTrainer};
use vton_core::{augment, Error, Result};

use crate::config::{load_config, AppConfig, Override};

#[derive(Debug, Parser)]
#[command(name = "vton", version, about = "Virtual try-on toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set seg.iterations=50` (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Write augmented copies of a dataset.
    Augment(AugmentArgs),
    /// Train the body segmentation network.
    TrainSeg(TrainSegArgs),
    /// Train a mask-to-cloth translation model.
    TrainGan(TrainGanArgs),
    /// Compare real/ and fake/ image folders; prints a JSON report.
    Eval(EvalArgs),
    /// Run try-on on one image.
    Tryon(TryonArgs),
    /// Serve try-on over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples [data.n].
    #[arg(long)]
    n: Option<usize>,
    /// Image side in pixels [data.size].
    #[arg(long)]
    size: Option<usize>,
    /// Train fraction [data.split_fraction].
    #[arg(long)]
    split: Option<f64>,
    /// Mask label [data.label].
    #[arg(long)]
    label: Option<String>,
    /// [data.seed]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Source dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Augmented copies per pair [augment.copies].
    #[arg(long)]
    copies: Option<usize>,
    /// [augment.seed]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainSegArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// [seg.iterations]
    #[arg(long)]
    iterations: Option<usize>,
    /// [seg.batch_size]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [seg.seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Loss history CSV (default: next to the checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Also install the model into this bundle.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainGanArgs {
    /// Dataset directory or manifest; samples need try-on targets.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// [gan.epochs]
    #[arg(long)]
    epochs: Option<usize>,
    /// [gan.batch_size]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [gan.seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Loss history CSV (default: next to the checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Also install the model into this bundle under `--garment`.
    #[arg(long, requires = "garment")]
    bundle: Option<PathBuf>,
    /// Garment id used with `--bundle`.
    #[arg(long)]
    garment: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory holding `real/` and `fake/` with matching file names.
    #[arg(long)]
    pairs: PathBuf,
    /// `pixels`, `randconv`, `randconv:<d>` or `checkpoint:<path>`.
    #[arg(long, default_value = "randconv")]
    embedder: String,
    /// KID subset size (default: min(n, 100)).
    #[arg(long)]
    kid_subset_size: Option<usize>,
    /// Number of KID subsets averaged.
    #[arg(long, default_value_t = 10)]
    kid_subsets: usize,
    /// Seed for KID subset sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TryonArgs {
    /// Bundle directory [pipeline.bundle].
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Person image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    /// Garment id from the bundle.
    #[arg(long)]
    garment: String,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// [pipeline.threshold]
    #[arg(long)]
    threshold: Option<f64>,
    /// [pipeline.feather]
    #[arg(long)]
    feather: Option<f64>,
    /// Write per-person masks and generated cloth here.
    #[arg(long)]
    intermediates: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Bundle directory [pipeline.bundle].
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// [serve.host]
    #[arg(long)]
    host: Option<String>,
    /// [serve.port]
    #[arg(long)]
    port: Option<u16>,
    /// [serve.workers]
    #[arg(long)]
    workers: Option<usize>,
}

fn push<T: serde::Serialize>(out: &mut Vec<Override>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push(Override::new(key, serde_json::to_value(v).expect("flag value serializes")));
    }
}

/// Subcommand flags that stand for config keys.
fn flag_overrides(cmd: &Command) -> Vec<Override> {
    let mut o = Vec::new();
    match cmd {
        Command::SynthData(a) => {
            push(&mut o, "data.n", &a.n);
            push(&mut o, "data.size", &a.size);
            push(&mut o, "data.split_fraction", &a.split);
            push(&mut o, "data.label", &a.label);
            push(&mut o, "data.seed", &a.seed);
        }
        Command::Augment(a) => {
            push(&mut o, "augment.copies", &a.copies);
            push(&mut o, "augment.seed", &a.seed);
        }
        Command::TrainSeg(a) => {
            push(&mut o, "seg.iterations", &a.iterations);
            push(&mut o, "seg.batch_size", &a.batch_size);
            push(&mut o, "seg.seed", &a.seed);
        }
        Command::TrainGan(a) => {
            push(&mut o, "gan.epochs", &a.epochs);
            push(&mut o, "gan.batch_size", &a.batch_size);
            push(&mut o, "gan.seed", &a.seed);
        }
        Command::Eval(_) => {}
        Command::Tryon(a) => {
            push(&mut o, "pipeline.bundle", &a.bundle);
            push(&mut o, "pipeline.threshold", &a.threshold);
            push(&mut o, "pipeline.feather", &a.feather);
        }
        Command::Serve(a) => {
            push(&mut o, "pipeline.bundle", &a.bundle);
            push(&mut o, "serve.host", &a.host);
            push(&mut o, "serve.port", &a.port);
            push(&mut o, "serve.workers", &a.workers);
        }
    }
    o
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// domain error, 2 on a usage or configuration error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut overrides = Vec::new();
    for s in &cli.global.set {
        match Override::parse(s) {
            Ok(o) => overrides.push(o),
            Err(e) => return report(&e),
        }
    }
    overrides.extend(flag_overrides(&cli.command));
    let cfg = match load_config(cli.global.config.as_deref(), &overrides, std::env::vars()) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    match dispatch(cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn dispatch(cmd: Command, cfg: &AppConfig) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth(&a, cfg),
        Command::Augment(a) => augment_cmd(&a, cfg),
        Command::TrainSeg(a) => train_seg(&a, cfg),
        Command::TrainGan(a) => train_gan(&a, cfg),
        Command::Eval(a) => eval(&a),
        Command::Tryon(a) => tryon(&a, cfg),
        Command::Serve(_) => serve(cfg),
    }
}

fn synth(a: &SynthArgs, cfg: &AppConfig) -> Result<()> {
    let d = &cfg.data;
    let (manifest, _) = data::synth_dataset(&a.out, d.n, d.size, d.seed, d.split_fraction, &d.label)?;
    print_json(&json!({
        "manifest": a.out.join(data::MANIFEST_FILE),
        "train": manifest.ids(Split::Train).len(),
        "val": manifest.ids(Split::Val).len(),
    }));
    Ok(())
}

fn augment_cmd(a: &AugmentArgs, cfg: &AppConfig) -> Result<()> {
    let source = DatasetManifest::load(&a.data)?;
    let out = augment::augment_dataset(&source, &a.out, &cfg.augment, &cfg.data.label)?;
    print_json(&json!({
        "manifest": a.out.join(data::MANIFEST_FILE),
        "samples": out.samples.len(),
        "skipped": out.skipped.len(),
    }));
    Ok(())
}

fn history_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.with_extension("csv"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn ensure_parent(path: &Path) -> Result<()> {
    write_text(&path.with_extension("tmp"), "")?;
    std::fs::remove_file(path.with_extension("tmp")).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn train_seg(a: &TrainSegArgs, cfg: &AppConfig) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let label = &cfg.seg.label;
    let train = manifest.load_split(Split::Train, label)?;
    let val = manifest.load_split(Split::Val, label)?;
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    }
    ensure_parent(&a.out)?;
    let mut trainer = SegTrainer::new(cfg.seg.clone(), &train)?;
    trainer.run(cfg.seg.iterations, a.checkpoint_dir.as_deref())?;
    trainer.checkpoint().save(&a.out)?;
    write_text(&history_path(&a.history, &a.out), &trainer.history.to_csv())?;
    if let Some(b) = &a.bundle {
        pipeline::register_segmentation(b, &trainer.checkpoint())?;
    }
    let losses = trainer.history.losses();
    let ends = smoothed_ends(&losses, 10);
    let metrics = if val.is_empty() { None } else { Some(segnet::evaluate(&trainer.model, &val)?) };
    print_json(&json!({
        "checkpoint": a.out,
        "steps": trainer.steps_done(),
        "smoothed_loss_start": ends.map(|e| e.0),
        "smoothed_loss_end": ends.map(|e| e.1),
        "val": metrics.map(|m| json!({"mae": m.mae, "max_fbeta": m.max_fbeta, "iou": m.iou})),
    }));
    Ok(())
}

fn train_gan(a: &TrainGanArgs, cfg: &AppConfig) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let train = manifest.load_split(Split::Train, &cfg.data.label)?;
    let pairs = gan_pairs(&train, cfg.gan.image_size)?;
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    }
    ensure_parent(&a.out)?;
    let mut trainer = GanTrainer::new(cfg.gan.clone(), &pairs)?;
    trainer.run_epochs(a.checkpoint_dir.as_deref())?;
    let ck = trainer.checkpoint();
    ck.save(&a.out)?;
    write_text(&history_path(&a.history, &a.out), &trainer.history.to_csv())?;
    if let (Some(b), Some(g)) = (&a.bundle, &a.garment) {
        pipeline::register_garment(b, g, &ck)?;
    }
    let last = trainer.history.rows.last();
    print_json(&json!({
        "checkpoint": a.out,
        "steps": trainer.steps_done(),
        "final": last.map(|r| json!({"d_loss": r.d_loss, "g_gan": r.g_gan, "g_fm": r.g_fm, "g_perc": r.g_perc, "l1": r.l1})),
    }));
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })? {
        let p = e.map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?.path();
        let ext = p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let real_dir = a.pairs.join("real");
    let fake_dir = a.pairs.join("fake");
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for r in image_files(&real_dir)? {
        let name = r.file_name().expect("file");
        let f = fake_dir.join(name);
        if !f.is_file() {
            return Err(Error::Validation(format!("{} has no counterpart in {}", r.display(), fake_dir.display())));
        }
        real.push(ImageBuffer::load(&r)?.to_rgb());
        fake.push(ImageBuffer::load(&f)?.to_rgb());
    }
    let cfg = EvalConfig {
        embedder: a.embedder.clone(),
        kid: KidConfig { subset_size: a.kid_subset_size, subsets: a.kid_subsets, seed: a.seed },
        ..Default::default()
    };
    let report = evaluate_pairs(&real, &fake, &cfg)?;
    print_json(&serde_json::to_value(report)?);
    Ok(())
}

fn bundle_path(cfg: &AppConfig) -> Result<&Path> {
    cfg.pipeline.bundle.as_deref().ok_or_else(|| Error::Config("no bundle given (--bundle or pipeline.bundle)".into()))
}

fn tryon(a: &TryonArgs, cfg: &AppConfig) -> Result<()> {
    let bundle = Arc::new(load_bundle(bundle_path(cfg)?)?);
    let pipe = TryOnPipeline::new(bundle, cfg.detect.clone(), cfg.pipeline.clone())?;
    let img = ImageBuffer::load(&a.image)?;
    let res = pipe.tryon(&img, &a.garment, &TryOnOptions::default())?;
    ensure_parent(&a.out)?;
    res.output.save_png(&a.out)?;
    if let Some(dir) = &a.intermediates {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for (i, p) in res.persons.iter().enumerate() {
            p.mask.to_image().save_png(&dir.join(format!("person{i}_mask.png")))?;
            p.generated_cloth.save_png(&dir.join(format!("person{i}_cloth.png")))?;
        }
    }
    print_json(&json!({
        "output": a.out,
        "persons": res.persons.iter().map(|p| json!({"box": p.detection.bbox, "score": p.detection.score})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn serve(cfg: &AppConfig) -> Result<()> {
    let pipe = match &cfg.pipeline.bundle {
        Some(b) => Some(TryOnPipeline::new(Arc::new(load_bundle(b)?), cfg.detect.clone(), cfg.pipeline.clone())?),
        None => {
            eprintln!("warning: no bundle configured; try-on requests will answer 503");
            None
        }
    };
    let state = server::AppState::new(pipe, cfg.serve.workers)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Io { path: PathBuf::from("<runtime>"), source: e })?;
    rt.block_on(server::serve(&cfg.serve, state))
}
