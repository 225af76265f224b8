use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sha2::{Digest, Sha256};

use oodseg::head::TrainConfig;
use oodseg::maps::LabelMap;
use oodseg::metrics;
use oodseg::pipeline::{self, report, Artifacts, InferOptions, RunConfig, TileInput};
use oodseg::scores::Method;
use oodseg::splitter::{self, SplitConfig};
use oodseg::synthgen::{self, SynthSpec, SynthSplit};
use oodseg::thresholds::{FitOptions, Mode, SweepResult};

#[derive(Parser, Debug)]
#[command(name = "oodseg", version, about = "Pixelwise out-of-distribution detection on tiled feature maps")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Target ID-acceptance fraction.
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Smallest kept anomaly component, in latent cells.
    #[arg(long, global = true)]
    min_area: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Gaussian-mixture feature dataset.
    Synth(SynthArgs),
    /// Group-constrained, histogram-stratified train/val/test split.
    Split(SplitArgs),
    /// Train the linear segmentation head.
    TrainHead,
    /// Estimate class statistics, ReAct clamp and KL profiles.
    Calibrate,
    /// Fit thresholds on the train and validation tiles.
    FitThresholds(FitArgs),
    /// Score tiles and write extended label maps and area reports.
    Score,
    /// Score labeled tiles and report detection metrics.
    Evaluate,
    /// Sweep p over the 25-level grid for both threshold modes.
    Sweep(SweepArgs),
    /// Area report from extended label maps written by `score`.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    Default,
    Heterogeneous,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "default")]
    kind: SynthKind,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Known anomaly classes besides healthy.
    #[arg(long, default_value_t = 4)]
    k_id: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Pixels per ID class in the calibration and evaluation splits.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 2000)]
    ood_count: usize,
    #[arg(long, default_value_t = 32)]
    tile_side: usize,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// CSV with header `id,group,<count columns>`.
    #[arg(long)]
    units: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = splitter::DEFAULT_MAX_ITERATIONS)]
    max_iterations: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Fit every scoring method instead of the configured one.
    #[arg(long)]
    all_methods: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Labeled tiles on which the best p is selected.
    #[arg(long)]
    select_on: PathBuf,
    #[arg(long)]
    all_methods: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory of `<slide>/<tile>.ext.oods` maps; defaults to the output
    /// directory.
    #[arg(long)]
    pred: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: oodseg::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: oodseg::Error| e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = common.method {
        cfg.method = m;
    }
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    if let Some(p) = common.p {
        cfg.p = p;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = common.min_area {
        cfg.min_area = a;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn config_hash(cfg: &RunConfig) -> String {
    format!("{:x}", Sha256::digest(cfg.to_text().as_bytes()))
}

/// Records the command, configuration hash and canonical configuration.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut text = format!(
        "command = {command}\nversion = {}\nconfig_hash = {}\n",
        env!("CARGO_PKG_VERSION"),
        config_hash(cfg)
    );
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str("\n[config]\n");
    text.push_str(&cfg.to_text());
    let path = dir.join(format!("manifest-{command}.txt"));
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("configuration key `{key}` is required for this command"))
}

fn tiles_from(cfg: &RunConfig, dir: &Path) -> Result<Vec<TileInput>> {
    Ok(pipeline::load_tiles(dir, cfg.labels.as_deref())?)
}

/// Training and validation tiles together: the threshold calibration set.
fn calibration_tiles(cfg: &RunConfig) -> Result<Vec<TileInput>> {
    let mut tiles = tiles_from(cfg, required(&cfg.train, "train")?)?;
    if let Some(val) = &cfg.val {
        tiles.extend(tiles_from(cfg, val)?);
    }
    Ok(tiles)
}

fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let seed = cfg.seeds[0];
    let set = match args.kind {
        SynthKind::Default => synthgen::generate(&SynthSpec {
            dim: args.dim,
            k_id: args.k_id,
            separation: args.separation,
            counts: vec![args.count],
            ood_count: args.ood_count,
            tile_side: args.tile_side,
            seed,
            ..Default::default()
        })?,
        SynthKind::Heterogeneous => synthgen::heterogeneous_instance(seed)?,
    };
    let out = &cfg.out;
    set.write(out)?;
    let conf = RunConfig {
        train: Some(out.join(SynthSplit::Calibration.tag())),
        val: Some(out.join(SynthSplit::Validation.tag())),
        eval: Some(out.join(SynthSplit::Evaluation.tag())),
        model: out.join("model"),
        out: out.join("results"),
        n_id: set.classes.n_id(),
        seeds: vec![seed],
        epochs: 15,
        learning_rate: 0.05,
        batch_size: 128,
        ..cfg.clone()
    };
    fs::write(out.join("oodseg.conf"), conf.to_text())?;
    info!(
        "wrote {} calibration, {} validation and {} evaluation tiles to {}",
        set.calibration.len(),
        set.validation.len(),
        set.evaluation.len(),
        out.display()
    );
    write_manifest(out, "synth", cfg, &[("kind", format!("{:?}", args.kind).to_lowercase())])
}

fn split(cfg: &RunConfig, args: &SplitArgs) -> Result<()> {
    let units = splitter::read_units_csv(&args.units)?;
    let ratios: [f64; 3] = args
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| anyhow::anyhow!("--ratios needs exactly three values"))?;
    let split_cfg = SplitConfig {
        ratios,
        seed: cfg.seeds[0],
        max_iterations: args.max_iterations,
    };
    let assignment = splitter::stratified_split(&units, &split_cfg)?;
    fs::create_dir_all(&cfg.out)?;
    splitter::write_assignment_csv(&cfg.out.join("split.csv"), &units, &assignment)?;
    fs::write(cfg.out.join("split_trace.txt"), splitter::trace_text(&assignment))?;
    println!(
        "objective {} after {} accepted moves; ratios {:.4}/{:.4}/{:.4}",
        assignment.objective,
        assignment.trace.len().saturating_sub(1),
        assignment.ratios[0],
        assignment.ratios[1],
        assignment.ratios[2]
    );
    write_manifest(&cfg.out, "split", cfg, &[("units", args.units.display().to_string())])
}

fn train_head(cfg: &RunConfig) -> Result<()> {
    let train = tiles_from(cfg, required(&cfg.train, "train")?)?;
    let val = tiles_from(cfg, required(&cfg.val, "val")?)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed: cfg.seeds[0],
        ..Default::default()
    };
    let trained = pipeline::train_head(&train, &val, &cfg.shift, cfg.n_id, &train_cfg)?;
    Artifacts::new(trained.head).save(&cfg.model)?;
    let mut history = String::from("epoch,train_loss,val_loss,val_mean_iou,learning_rate\n");
    for r in &trained.history {
        history.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_mean_iou, r.learning_rate
        ));
    }
    fs::write(cfg.model.join("train_history.csv"), history)?;
    let best = &trained.history[trained.best_epoch - 1];
    println!("best epoch {} with validation mean IoU {:.4}", trained.best_epoch, best.val_mean_iou);
    write_manifest(&cfg.model, "train-head", cfg, &[("best_epoch", trained.best_epoch.to_string())])
}

fn calibrate(cfg: &RunConfig) -> Result<()> {
    let head = Artifacts::load(&cfg.model)?.head;
    let train = tiles_from(cfg, required(&cfg.train, "train")?)?;
    let artifacts = Artifacts::calibrate(head, &train, &cfg.shift, cfg.react_percentile)?;
    artifacts.save(&cfg.model)?;
    if let Some(s) = &artifacts.stats_raw {
        println!("calibrated on {} pixels, ridge {:e}", s.total(), s.lambda());
    }
    write_manifest(&cfg.model, "calibrate", cfg, &[])
}

fn methods(cfg: &RunConfig, all: bool) -> Vec<Method> {
    if all {
        Method::ALL.to_vec()
    } else {
        vec![cfg.method]
    }
}

fn fit_thresholds(cfg: &RunConfig, args: &FitArgs) -> Result<()> {
    let artifacts = Artifacts::load(&cfg.model)?;
    let tiles = calibration_tiles(cfg)?;
    let options = FitOptions {
        fallback_to_global: cfg.fallback_to_global,
    };
    for method in methods(cfg, args.all_methods) {
        let th = pipeline::fit_thresholds(&artifacts, method, cfg.mode, cfg.p, &tiles, &cfg.shift, options)?;
        let path = pipeline::thresholds_path(&cfg.model, method, cfg.mode);
        fs::create_dir_all(path.parent().expect("thresholds live in a directory"))?;
        th.save(&path)?;
        println!("{method} {}: global {:.6}, wrote {}", cfg.mode.tag(), th.global(), path.display());
    }
    write_manifest(&cfg.model, "fit-thresholds", cfg, &[])
}

fn score(cfg: &RunConfig) -> Result<()> {
    let output = pipeline::run_inference(cfg)?;
    println!("scored {} tiles into {}", output.tiles.len(), cfg.out.display());
    write_manifest(&cfg.out, "score", cfg, &[])
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let output = pipeline::run_inference(cfg)?;
    let Some(m) = output.metrics()? else {
        bail!("evaluation needs ground truth for every tile");
    };
    let column = format!("{}-{}", cfg.mode.display_name(), cfg.method.display_name());
    print!("{}", metrics::format_table(&[(column, m.clone())]));
    write_manifest(
        &cfg.out,
        "evaluate",
        cfg,
        &[("fnr_bar", m.fnr_bar.to_string()), ("fpr", m.fpr.to_string()), ("ber", m.ber.to_string())],
    )
}

fn sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    let artifacts = Artifacts::load(&cfg.model)?;
    let calibration = calibration_tiles(cfg)?;
    let selection = tiles_from(cfg, &args.select_on)?;
    let classes = cfg.classes()?;
    let fit = FitOptions {
        fallback_to_global: cfg.fallback_to_global,
    };
    let mut results: Vec<SweepResult> = Vec::new();
    for method in methods(cfg, args.all_methods) {
        for mode in [Mode::Standard, Mode::Adaptive] {
            let r = pipeline::sweep_method(
                &artifacts,
                method,
                mode,
                &calibration,
                &selection,
                &classes,
                InferOptions::from(cfg),
                fit,
            )?;
            let best = r.rows.iter().find(|row| row.p == r.best_p).expect("best p is on the grid");
            println!(
                "{method} {}: best p {} (BER {:.3}, FNR_bar {:.3}, FPR {:.3})",
                mode.tag(),
                r.best_p,
                best.ber,
                best.fnr_bar,
                best.fpr
            );
            results.push(r);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("sweep.csv"), pipeline::emit_sweep_plot_data(&results)?)?;
    write_manifest(&cfg.out, "sweep", cfg, &[("select_on", args.select_on.display().to_string())])
}

/// Reads `<slide>/<tile>.ext.oods` maps below `dir`.
fn read_extended(dir: &Path) -> Result<Vec<(String, LabelMap)>> {
    let mut out = Vec::new();
    let mut slides: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    slides.sort();
    for slide in slides {
        let name = slide.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&slide)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".ext.oods")))
            .collect();
        files.sort();
        for f in files {
            out.push((name.clone(), LabelMap::read(&f)?));
        }
    }
    if out.is_empty() {
        bail!("no extended label maps below {}", dir.display());
    }
    Ok(out)
}

fn report_cmd(cfg: &RunConfig, args: &ReportArgs) -> Result<()> {
    let pred = args.pred.clone().unwrap_or_else(|| cfg.out.clone());
    let maps = read_extended(&pred)?;
    let classes = cfg.classes()?;
    let mut rep = pipeline::wsi_report(maps.iter().map(|(w, m)| (w.as_str(), m)), &classes)?;
    if let Some(groups) = &cfg.groups {
        rep = rep.with_groups(&report::read_group_manifest(groups)?)?;
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("report.csv"), rep.to_csv()?)?;
    if !rep.groups.is_empty() {
        fs::write(cfg.out.join("groups.csv"), rep.groups_csv()?)?;
    }
    for row in &rep.rows {
        println!("{}: {:.3}% anomalous tissue", row.wsi, row.anomaly_pct);
    }
    write_manifest(&cfg.out, "report", cfg, &[("pred", pred.display().to_string())])
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    cfg.shift.validate()?;
    cfg.classes()?;
    if !(cfg.p > 0.0 && cfg.p <= 1.0) {
        bail!("p = {} must lie in (0, 1]", cfg.p);
    }
    match &cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Split(a) => split(&cfg, a),
        Command::TrainHead => train_head(&cfg),
        Command::Calibrate => calibrate(&cfg),
        Command::FitThresholds(a) => fit_thresholds(&cfg, a),
        Command::Score => score(&cfg),
        Command::Evaluate => evaluate(&cfg),
        Command::Sweep(a) => sweep(&cfg, a),
        Command::Report(a) => report_cmd(&cfg, a),
    }
}
