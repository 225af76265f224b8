//! End-to-end inference: ingest tiles, shift-average, classify, score,
//! threshold, post-filter, evaluate and report.
//!
//! Tile directories hold `<tile>.feat.oods` (already aggregated features)
//! or per-window `<tile>@<x>_<y>.feat.oods` files, optionally with
//! `<tile>.label.oods` ground truth. Files directly inside the root belong
//! to a slide named after the root; each immediate subdirectory is a slide.

pub mod config;
pub mod postprocess;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::calib::ClassStats;
use crate::error::{Error, Result};
use crate::head::{self, LinearHead, TrainConfig, TrainedHead};
use crate::maps::{ClassSet, FeatureMap, LabelMap, LabeledPixels, LogitMap, ProbMap};
use crate::metrics::{self, ExtendedConfusion, MetricReport};
use crate::scores::{self, fit_kl_profiles, KlProfiles, Method, ReactClamp, ScoreMap, Scorer};
use crate::synthgen::{SynthSet, SynthSplit};
use crate::tensorio;
use crate::thresholds::{self, FitOptions, Mode, ScoredPixels, SweepResult, ThresholdSet};
use crate::tiles::{self, Shift, ShiftConfig, ShiftedMap};

pub use config::{Interpolation, RunConfig};
pub use postprocess::{filter_small_components, upsample_bilinear, upsample_nearest};
pub use report::{emit_sweep_plot_data, wsi_report, WsiReport};

/// Feature input of one tile.
#[derive(Clone, Debug, PartialEq)]
pub enum TileFeatures {
    Aggregated(FeatureMap),
    Shifted(Vec<ShiftedMap>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileInput {
    pub wsi: String,
    pub id: String,
    pub features: TileFeatures,
    pub labels: Option<LabelMap>,
}

fn parse_window(stem: &str) -> Option<(&str, Shift)> {
    let (tile, pos) = stem.rsplit_once('@')?;
    let (x, y) = pos.split_once('_')?;
    Some((tile, Shift { x: x.parse().ok()?, y: y.parse().ok()? }))
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(suffix)) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every tile below `dir`; ground truth comes from `labels`, mirroring
/// the slide layout, or from `dir` itself.
pub fn load_tiles(dir: impl AsRef<Path>, labels: Option<&Path>) -> Result<Vec<TileInput>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!("{} is not a directory", dir.display())));
    }
    let root_name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("slide")
        .to_string();
    let mut slides = vec![(root_name, dir.to_path_buf(), labels.map_or(dir.to_path_buf(), Path::to_path_buf))];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let label_dir = labels.map_or(sub.clone(), |l| l.join(&name));
        slides.push((name, sub, label_dir));
    }

    let mut tiles = Vec::new();
    for (wsi, feat_dir, label_dir) in slides {
        let mut windows: BTreeMap<String, Vec<(Shift, PathBuf)>> = BTreeMap::new();
        let mut aggregated = Vec::new();
        for (stem, path) in files_with_suffix(&feat_dir, ".feat.oods")? {
            match parse_window(&stem) {
                Some((tile, shift)) => windows.entry(tile.to_string()).or_default().push((shift, path)),
                None => aggregated.push((stem, path)),
            }
        }
        let mut found: Vec<(String, TileFeatures)> = Vec::new();
        for (id, path) in aggregated {
            if windows.contains_key(&id) {
                return Err(Error::InvalidArgument(format!(
                    "tile {id} in {} has both aggregated and per-window features",
                    feat_dir.display()
                )));
            }
            found.push((id, TileFeatures::Aggregated(FeatureMap::read(path)?)));
        }
        for (id, mut list) in windows {
            list.sort();
            let maps = list
                .into_iter()
                .map(|(shift, path)| Ok(ShiftedMap { shift, map: FeatureMap::read(path)? }))
                .collect::<Result<Vec<_>>>()?;
            found.push((id, TileFeatures::Shifted(maps)));
        }
        found.sort_by(|a, b| a.0.cmp(&b.0));
        for (id, features) in found {
            let label_path = label_dir.join(format!("{id}.label.oods"));
            let labels = if label_path.exists() {
                Some(LabelMap::read(&label_path)?)
            } else {
                None
            };
            tiles.push(TileInput {
                wsi: wsi.clone(),
                id,
                features,
                labels,
            });
        }
    }
    if tiles.is_empty() {
        return Err(Error::NoInputTiles(dir.to_path_buf()));
    }
    Ok(tiles)
}

/// Shift-averaged features of a tile.
pub fn aggregate_features(features: &TileFeatures, shift: &ShiftConfig) -> Result<FeatureMap> {
    match features {
        TileFeatures::Aggregated(f) => Ok(f.clone()),
        TileFeatures::Shifted(windows) => tiles::average_features(windows, shift),
    }
}

/// Aggregated features, logits and probabilities of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub features: FeatureMap,
    pub logits: LogitMap,
    pub probs: ProbMap,
}

/// Runs the head per window and averages features, logits and softmax
/// outputs over the windows covering each cell.
pub fn prepare(head: &LinearHead, features: &TileFeatures, shift: &ShiftConfig) -> Result<Prepared> {
    match features {
        TileFeatures::Aggregated(f) => {
            let (logits, probs) = head::infer(head, f)?;
            Ok(Prepared {
                features: f.clone(),
                logits,
                probs,
            })
        }
        TileFeatures::Shifted(windows) => {
            let mut logit_windows = Vec::with_capacity(windows.len());
            let mut prob_windows = Vec::with_capacity(windows.len());
            for w in windows {
                let (z, p) = head::infer(head, &w.map)?;
                logit_windows.push(ShiftedMap { shift: w.shift, map: z });
                prob_windows.push(ShiftedMap { shift: w.shift, map: p });
            }
            Ok(Prepared {
                features: tiles::average_features(windows, shift)?,
                logits: tiles::average_over_windows(&logit_windows, shift)?,
                probs: tiles::average_probs(&prob_windows, shift)?,
            })
        }
    }
}

/// Ground truth at the resolution of a `side × side` map (centre-pixel
/// subsampling when labels are finer).
pub fn labels_at(labels: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    if labels.height() == height && labels.width() == width {
        return Ok(labels.clone());
    }
    let fy = postprocess::scale_factor(height, labels.height())?;
    let fx = postprocess::scale_factor(width, labels.width())?;
    if fy != fx {
        return Err(Error::DimensionMismatch(format!(
            "labels {}x{} and features {height}x{width} differ in aspect",
            labels.height(),
            labels.width()
        )));
    }
    postprocess::downsample_nearest(labels, fy)
}

fn require_labels(tile: &TileInput) -> Result<&LabelMap> {
    tile.labels
        .as_ref()
        .ok_or_else(|| Error::MissingArtifact(format!("ground truth for tile {}/{}", tile.wsi, tile.id)))
}

/// Labeled feature vectors of ID classes, at feature resolution.
pub fn labeled_features(tiles: &[TileInput], shift: &ShiftConfig, n_id: usize) -> Result<LabeledPixels> {
    let mut pairs = Vec::with_capacity(tiles.len());
    for t in tiles {
        let f = aggregate_features(&t.features, shift)?;
        let l = labels_at(require_labels(t)?, f.height(), f.width())?;
        pairs.push((f, l));
    }
    LabeledPixels::from_maps(pairs.iter().map(|(f, l)| (f, l)), n_id)
}

pub fn train_head(
    train: &[TileInput],
    val: &[TileInput],
    shift: &ShiftConfig,
    n_id: usize,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    let tr = labeled_features(train, shift, n_id)?;
    let va = labeled_features(val, shift, n_id)?;
    info!("training head on {} pixels, validating on {}", tr.len(), va.len());
    head::train(&tr, &va, n_id, cfg)
}

/// Head plus every calibration artifact a scorer may need.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub head: LinearHead,
    pub stats_raw: Option<ClassStats>,
    pub stats_l2: Option<ClassStats>,
    pub react: Option<ReactClamp>,
    pub kl: Option<KlProfiles>,
}

impl Artifacts {
    pub fn new(head: LinearHead) -> Self {
        Self {
            head,
            stats_raw: None,
            stats_l2: None,
            react: None,
            kl: None,
        }
    }

    /// Estimates class statistics (raw and l2-normalized), the ReAct clamp
    /// and KL profiles from labeled calibration tiles.
    pub fn calibrate(head: LinearHead, tiles: &[TileInput], shift: &ShiftConfig, react_percentile: f64) -> Result<Self> {
        let n_id = head.classes();
        let mut features = LabeledPixels::new(head.dim());
        let mut probs: Vec<Vec<f64>> = Vec::new();
        let mut prob_labels = Vec::new();
        for t in tiles {
            let prep = prepare(&head, &t.features, shift)?;
            let l = labels_at(require_labels(t)?, prep.features.height(), prep.features.width())?;
            for y in 0..l.height() {
                for x in 0..l.width() {
                    let c = l.get(y, x);
                    if c < 0 || c as usize >= n_id {
                        continue;
                    }
                    features.push(&prep.features.pixel(y, x), c as usize)?;
                    probs.push(prep.probs.pixel(y, x));
                    prob_labels.push(c as usize);
                }
            }
        }
        if features.is_empty() {
            return Err(Error::NoSupervisedPixels);
        }
        let stats_raw = ClassStats::estimate(&features, n_id, false)?;
        let stats_l2 = ClassStats::estimate(&features, n_id, true)?;
        let react = ReactClamp::calibrate(features.rows(), react_percentile)?;
        let kl = fit_kl_profiles(probs.iter().map(Vec::as_slice), &prob_labels, n_id)?;
        Ok(Self {
            head,
            stats_raw: Some(stats_raw),
            stats_l2: Some(stats_l2),
            react: Some(react),
            kl: Some(kl),
        })
    }

    pub fn scorer(&self, method: Method) -> Result<Scorer<'_>> {
        let missing = |what: &str| Error::MissingArtifact(format!("{what} (needed by {method})"));
        Ok(match method {
            Method::Maha => Scorer::Maha(self.stats_raw.as_ref().ok_or_else(|| missing("raw class statistics"))?),
            Method::MahaPlus => {
                Scorer::MahaPlus(self.stats_l2.as_ref().ok_or_else(|| missing("normalized class statistics"))?)
            }
            Method::Msp => Scorer::Msp,
            Method::MaxLogit => Scorer::MaxLogit,
            Method::Energy => Scorer::Energy,
            Method::React => Scorer::React {
                head: &self.head,
                clamp: self.react.as_ref().ok_or_else(|| missing("react clamp"))?,
            },
            Method::KlMatching => Scorer::KlMatching(self.kl.as_ref().ok_or_else(|| missing("KL profiles"))?),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.head.save(dir.join("head"))?;
        if let Some(s) = &self.stats_raw {
            s.save(dir.join("stats_raw"))?;
        }
        if let Some(s) = &self.stats_l2 {
            s.save(dir.join("stats_l2"))?;
        }
        if let Some(r) = &self.react {
            let path = dir.join("react.txt");
            let text = format!(
                "kind = react\npercentile = {:?}\nthreshold = {:?}\n",
                r.percentile(),
                r.threshold().unwrap_or(f64::INFINITY)
            );
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(k) = &self.kl {
            tensorio::write_tensor(dir.join("kl_profiles.oods"), &k.to_tensor())?;
        }
        Ok(())
    }

    /// Loads whatever artifacts exist; only the head is mandatory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let head_dir = dir.join("head");
        if !head_dir.exists() {
            return Err(Error::MissingArtifact(head_dir.display().to_string()));
        }
        let mut out = Self::new(LinearHead::load(head_dir)?);
        if dir.join("stats_raw").exists() {
            out.stats_raw = Some(ClassStats::load(dir.join("stats_raw"))?);
        }
        if dir.join("stats_l2").exists() {
            out.stats_l2 = Some(ClassStats::load(dir.join("stats_l2"))?);
        }
        let react = dir.join("react.txt");
        if react.exists() {
            let text = fs::read_to_string(&react).map_err(|e| Error::io(&react, e))?;
            let kv = crate::calib::parse_sidecar(&text);
            let threshold: f64 = kv
                .get("threshold")
                .ok_or_else(|| Error::Parse("react.txt lacks `threshold`".into()))?
                .parse()
                .map_err(|e| Error::Parse(format!("react threshold: {e}")))?;
            out.react = Some(ReactClamp::fixed(threshold));
        }
        let kl = dir.join("kl_profiles.oods");
        if kl.exists() {
            out.kl = Some(KlProfiles::from_tensor(&tensorio::read_tensor(kl)?)?);
        }
        Ok(out)
    }
}

pub fn thresholds_path(model: &Path, method: Method, mode: Mode) -> PathBuf {
    model.join("thresholds").join(format!("{}-{}.txt", method.tag(), mode.tag()))
}

/// Scores of ID-labeled pixels on calibration tiles (at feature resolution).
pub fn calibration_scores(
    artifacts: &Artifacts,
    method: Method,
    tiles: &[TileInput],
    shift: &ShiftConfig,
) -> Result<ScoredPixels> {
    let scorer = artifacts.scorer(method)?;
    let n_id = artifacts.head.classes();
    let mut out = ScoredPixels::default();
    for t in tiles {
        let prep = prepare(&artifacts.head, &t.features, shift)?;
        let sm = scores::score_map(&scorer, &prep.features, &prep.logits, &prep.probs)?;
        let l = labels_at(require_labels(t)?, sm.height(), sm.width())?;
        for ((&s, &c), &truth) in sm.scores().iter().zip(sm.predicted()).zip(l.values()) {
            if truth >= 0 && (truth as usize) < n_id {
                out.push(s, c, truth);
            }
        }
    }
    Ok(out)
}

pub fn fit_thresholds(
    artifacts: &Artifacts,
    method: Method,
    mode: Mode,
    p: f64,
    tiles: &[TileInput],
    shift: &ShiftConfig,
    options: FitOptions,
) -> Result<ThresholdSet> {
    let cal = calibration_scores(artifacts, method, tiles, shift)?;
    let th = thresholds::fit_with(&cal.scores, &cal.predicted, artifacts.head.classes(), mode, p, options)?;
    Ok(th.with_method(method))
}

/// Score map at the output resolution `out_side` (score maps resampled per
/// `interpolation`, predicted classes by nearest neighbour).
pub fn score_tile(scorer: &Scorer<'_>, prep: &Prepared, out: Option<(usize, usize)>, interpolation: Interpolation) -> Result<ScoreMap> {
    let sm = scores::score_map(scorer, &prep.features, &prep.logits, &prep.probs)?;
    let Some((oh, ow)) = out else { return Ok(sm) };
    if (oh, ow) == (sm.height(), sm.width()) {
        return Ok(sm);
    }
    let fy = postprocess::scale_factor(sm.height(), oh)?;
    let fx = postprocess::scale_factor(sm.width(), ow)?;
    if fy != fx {
        return Err(Error::DimensionMismatch(format!(
            "cannot resample {}x{} scores to {oh}x{ow}",
            sm.height(),
            sm.width()
        )));
    }
    let scores = match interpolation {
        Interpolation::Bilinear => upsample_bilinear(sm.scores(), sm.height(), sm.width(), fy)?,
        Interpolation::Nearest => upsample_nearest(sm.scores(), sm.height(), sm.width(), fy)?,
    };
    let predicted = upsample_nearest(sm.predicted(), sm.height(), sm.width(), fy)?;
    ScoreMap::new(oh, ow, sm.method(), scores, predicted)
}

/// Extended labels: predicted class where the score clears its threshold,
/// OOD otherwise.
pub fn extended_labels(sm: &ScoreMap, th: &ThresholdSet, classes: &ClassSet) -> Result<LabelMap> {
    let values = sm
        .scores()
        .iter()
        .zip(sm.predicted())
        .map(|(&s, &c)| th.decide(s, c).label(classes))
        .collect();
    LabelMap::new(sm.height(), sm.width(), values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileOutput {
    pub wsi: String,
    pub id: String,
    pub scores: ScoreMap,
    pub extended: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub tiles: Vec<TileOutput>,
    /// Present when every tile has ground truth.
    pub confusion: Option<ExtendedConfusion>,
    pub report: WsiReport,
}

impl InferenceOutput {
    pub fn metrics(&self) -> Result<Option<MetricReport>> {
        self.confusion.as_ref().map(metrics::breakdown).transpose()
    }
}

/// Options of [`infer_tiles`] taken from a [`RunConfig`].
#[derive(Clone, Copy, Debug)]
pub struct InferOptions {
    pub shift: ShiftConfig,
    /// Smallest kept anomaly component, in latent cells.
    pub min_area: usize,
    pub interpolation: Interpolation,
}

impl From<&RunConfig> for InferOptions {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            shift: cfg.shift,
            min_area: cfg.min_area,
            interpolation: cfg.interpolation,
        }
    }
}

/// Applies `f` to every item on scoped worker threads; results keep input
/// order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("tile worker panicked"))
            .collect()
    })
}

/// Processes tiles independently (in parallel) and merges confusion
/// matrices and slide reports in tile order.
pub fn infer_tiles(
    artifacts: &Artifacts,
    th: &ThresholdSet,
    classes: &ClassSet,
    tiles: &[TileInput],
    opts: InferOptions,
) -> Result<InferenceOutput> {
    let method = th
        .method()
        .ok_or_else(|| Error::InvalidArgument("threshold set does not name its scoring method".into()))?;
    if th.per_class().len() != classes.n_id() {
        return Err(Error::DimensionMismatch(format!(
            "{} thresholds for {} ID classes",
            th.per_class().len(),
            classes.n_id()
        )));
    }
    let scorer = artifacts.scorer(method)?;
    let labeled = tiles.iter().all(|t| t.labels.is_some());
    let results = parallel_map(tiles, |t| -> Result<(TileOutput, Option<ExtendedConfusion>)> {
        let prep = prepare(&artifacts.head, &t.features, &opts.shift)?;
        let out_side = t.labels.as_ref().map(|l| (l.height(), l.width()));
        let sm = score_tile(&scorer, &prep, out_side, opts.interpolation)?;
        let ext = extended_labels(&sm, th, classes)?;
        // min_area counts latent cells; scale to the output resolution
        let factor = sm.height() / prep.features.height();
        let ext = filter_small_components(&ext, classes, opts.min_area * factor * factor);
        let cm = match (&t.labels, labeled) {
            (Some(truth), true) => Some(metrics::accumulate(classes, truth, &ext)?),
            _ => None,
        };
        let out = TileOutput {
            wsi: t.wsi.clone(),
            id: t.id.clone(),
            scores: sm,
            extended: ext,
        };
        Ok((out, cm))
    });
    let mut outputs = Vec::with_capacity(tiles.len());
    let mut confusion = labeled.then(|| ExtendedConfusion::new(classes.clone()));
    for r in results {
        let (out, cm) = r?;
        if let (Some(total), Some(cm)) = (confusion.as_mut(), cm) {
            total.merge(&cm)?;
        }
        outputs.push(out);
    }
    let report = wsi_report(outputs.iter().map(|o| (o.wsi.as_str(), &o.extended)), classes)?;
    Ok(InferenceOutput {
        tiles: outputs,
        confusion,
        report,
    })
}

/// Loads artifacts, thresholds and evaluation tiles named by `cfg`, runs
/// inference and writes maps and reports below `cfg.out`.
pub fn run_inference(cfg: &RunConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    let classes = cfg.classes()?;
    let eval = cfg
        .eval
        .as_ref()
        .ok_or_else(|| Error::MissingArtifact("no evaluation tile directory configured".into()))?;
    let artifacts = Artifacts::load(&cfg.model)?;
    let th = ThresholdSet::load(thresholds_path(&cfg.model, cfg.method, cfg.mode))?;
    if th.p() != cfg.p {
        warn!("thresholds were fitted at p = {}, configuration asks for {}", th.p(), cfg.p);
    }
    let tiles = load_tiles(eval, cfg.labels.as_deref())?;
    let mut output = infer_tiles(&artifacts, &th, &classes, &tiles, cfg.into())?;
    if let Some(groups) = &cfg.groups {
        output.report = output.report.with_groups(&report::read_group_manifest(groups)?)?;
    }
    write_outputs(&output, &cfg.out)?;
    Ok(output)
}

pub fn write_outputs(output: &InferenceOutput, out: &Path) -> Result<()> {
    for t in &output.tiles {
        let dir = out.join(&t.wsi);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        t.scores.write(&dir, &t.id)?;
        t.extended.write(dir.join(format!("{}.ext.oods", t.id)))?;
    }
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("report.csv", output.report.to_csv()?)?;
    if !output.report.groups.is_empty() {
        write("groups.csv", output.report.groups_csv()?)?;
    }
    if let Some(m) = output.metrics()? {
        let col = vec![("run".to_string(), m)];
        write("metrics.csv", metrics::reports_csv(&col))?;
        write("metrics.txt", metrics::format_table(&col))?;
    }
    Ok(())
}

/// Evaluation pixels with ground truth at label resolution (unfiltered).
pub fn evaluation_scores(
    artifacts: &Artifacts,
    method: Method,
    tiles: &[TileInput],
    opts: InferOptions,
) -> Result<ScoredPixels> {
    let scorer = artifacts.scorer(method)?;
    let mut out = ScoredPixels::default();
    for t in tiles {
        let truth = require_labels(t)?;
        let prep = prepare(&artifacts.head, &t.features, &opts.shift)?;
        let sm = score_tile(&scorer, &prep, Some((truth.height(), truth.width())), opts.interpolation)?;
        for ((&s, &c), &l) in sm.scores().iter().zip(sm.predicted()).zip(truth.values()) {
            out.push(s, c, l);
        }
    }
    Ok(out)
}

/// Threshold sweep of one method and mode: thresholds from `calibration`,
/// metrics on `evaluation`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_method(
    artifacts: &Artifacts,
    method: Method,
    mode: Mode,
    calibration: &[TileInput],
    evaluation: &[TileInput],
    classes: &ClassSet,
    opts: InferOptions,
    fit: FitOptions,
) -> Result<SweepResult> {
    let cal = calibration_scores(artifacts, method, calibration, &opts.shift)?;
    let eval = evaluation_scores(artifacts, method, evaluation, opts)?;
    let mut result = thresholds::sweep(&cal, &eval, classes, mode, fit)?;
    result.method = Some(method);
    Ok(result)
}

/// Tiles of one synthetic split as aggregated pipeline inputs; the split
/// tag serves as slide name.
pub fn synth_tiles(set: &SynthSet, split: SynthSplit) -> Vec<TileInput> {
    set.split(split)
        .iter()
        .map(|t| TileInput {
            wsi: split.tag().into(),
            id: t.id.clone(),
            features: TileFeatures::Aggregated(t.features.clone()),
            labels: Some(t.labels.clone()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::HEALTHY;
    use crate::synthgen::{self, SynthSpec};


    fn small_spec() -> SynthSpec {
        SynthSpec {
            dim: 6,
            k_id: 2,
            counts: vec![200],
            ood_count: 200,
            tile_side: 16,
            ..Default::default()
        }
    }

    fn trained(set: &synthgen::SynthSet) -> (Artifacts, Vec<TileInput>) {
        let train = synth_tiles(set, SynthSplit::Calibration);
        let val = synth_tiles(set, SynthSplit::Validation);
        let shift = ShiftConfig::default();
        let cfg = TrainConfig {
            epochs: 15,
            learning_rate: 0.05,
            batch_size: 64,
            ..Default::default()
        };
        let head = train_head(&train, &val, &shift, set.classes.n_id(), &cfg).unwrap().head;
        let artifacts = Artifacts::calibrate(head, &train, &shift, 90.0).unwrap();
        let mut cal = train;
        cal.extend(val);
        (artifacts, cal)
    }

    #[test]
    fn empty_directory_has_no_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_tiles(dir.path(), None).unwrap_err();
        assert!(err.to_string().starts_with("no input tiles"), "{err}");
    }

    #[test]
    fn loader_groups_windows_and_slides() {
        let dir = tempfile::tempdir().unwrap();
        let slide = dir.path().join("wsi1");
        fs::create_dir_all(&slide).unwrap();
        let f = FeatureMap::zeros(2, 3, 3);
        f.write(slide.join("t0@0_0.feat.oods")).unwrap();
        f.write(slide.join("t0@2_0.feat.oods")).unwrap();
        f.write(dir.path().join("t1.feat.oods")).unwrap();
        LabelMap::filled(3, 3, 0).write(dir.path().join("t1.label.oods")).unwrap();
        let tiles = load_tiles(dir.path(), None).unwrap();
        assert_eq!(tiles.len(), 2);
        assert_eq!(tiles[0].id, "t1");
        assert!(tiles[0].labels.is_some());
        assert_eq!(tiles[1].wsi, "wsi1");
        match &tiles[1].features {
            TileFeatures::Shifted(w) => {
                assert_eq!(w.iter().map(|m| m.shift).collect::<Vec<_>>(), vec![Shift { x: 0, y: 0 }, Shift { x: 2, y: 0 }]);
            }
            other => panic!("expected windows, got {other:?}"),
        }
    }

    #[test]
    fn artifacts_round_trip() {
        let set = synthgen::generate(&small_spec()).unwrap();
        let (artifacts, _) = trained(&set);
        let dir = tempfile::tempdir().unwrap();
        artifacts.save(dir.path()).unwrap();
        let back = Artifacts::load(dir.path()).unwrap();
        assert_eq!(back.head, artifacts.head);
        assert_eq!(back.stats_l2, artifacts.stats_l2);
        assert_eq!(back.react.unwrap().threshold(), artifacts.react.unwrap().threshold());
        assert_eq!(back.kl, artifacts.kl);
        assert!(matches!(Artifacts::new(back.head.clone()).scorer(Method::Maha), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn composition_matches_pipeline_and_is_deterministic() {
        let set = synthgen::generate(&small_spec()).unwrap();
        let (artifacts, cal) = trained(&set);
        let shift = ShiftConfig::default();
        let th = fit_thresholds(&artifacts, Method::MahaPlus, Mode::Adaptive, 0.99, &cal, &shift, FitOptions::default()).unwrap();
        let eval = synth_tiles(&set, SynthSplit::Evaluation);
        let opts = InferOptions {
            shift,
            min_area: 0,
            interpolation: Interpolation::Bilinear,
        };
        let out = infer_tiles(&artifacts, &th, &set.classes, &eval, opts).unwrap();
        assert_eq!(out, infer_tiles(&artifacts, &th, &set.classes, &eval, opts).unwrap());

        // module by module on the first tile
        let t = &set.evaluation[0];
        let (z, p) = head::infer(&artifacts.head, &t.features).unwrap();
        let sm = scores::score_map(&Scorer::MahaPlus(artifacts.stats_l2.as_ref().unwrap()), &t.features, &z, &p).unwrap();
        let ext = extended_labels(&sm, &th, &set.classes).unwrap();
        assert_eq!(out.tiles[0].scores, sm);
        assert_eq!(out.tiles[0].extended, ext);

        let m = out.metrics().unwrap().unwrap();
        // metrics are percentages
        assert!(m.fnr_bar <= 5.0 && m.fpr <= 5.0, "{m:?}");
    }

    #[test]
    fn all_healthy_slide_stays_near_acceptance_rate() {
        let set = synthgen::generate(&small_spec()).unwrap();
        let (artifacts, cal) = trained(&set);
        let shift = ShiftConfig::default();
        let p = 0.99;
        let th = fit_thresholds(&artifacts, Method::MahaPlus, Mode::Adaptive, p, &cal, &shift, FitOptions::default()).unwrap();
        let healthy = synthgen::generate(&SynthSpec {
            seed: 99,
            ..small_spec()
        })
        .unwrap();
        let tiles: Vec<TileInput> = synth_tiles(&healthy, SynthSplit::Calibration)
            .into_iter()
            .map(|mut t| {
                // keep only healthy pixels labeled; drop the rest from the slide
                let labels = t.labels.take().unwrap();
                let f = match &t.features {
                    TileFeatures::Aggregated(f) => f.clone(),
                    _ => unreachable!(),
                };
                let mut pixels = Vec::new();
                for y in 0..labels.height() {
                    for x in 0..labels.width() {
                        if labels.get(y, x) == HEALTHY as i32 {
                            pixels.push(f.pixel(y, x));
                        }
                    }
                }
                let side = (pixels.len() as f64).sqrt() as usize;
                pixels.truncate(side * side);
                t.features = TileFeatures::Aggregated(FeatureMap::from_pixels(side, side, &pixels).unwrap());
                t.wsi = "healthy".into();
                t
            })
            .collect();
        let opts = InferOptions {
            shift,
            min_area: 0,
            interpolation: Interpolation::Bilinear,
        };
        let out = infer_tiles(&artifacts, &th, &set.classes, &tiles, opts).unwrap();
        assert!(out.confusion.is_none());
        assert!(out.report.rows[0].anomaly_pct <= 2.0 * (1.0 - p) * 100.0 + 1.0, "{:?}", out.report.rows[0]);
    }

    #[test]
    fn latent_scores_are_upsampled_to_labels() {
        let set = synthgen::generate(&small_spec()).unwrap();
        let (artifacts, _) = trained(&set);
        let prep = prepare(&artifacts.head, &TileFeatures::Aggregated(set.evaluation[0].features.clone()), &ShiftConfig::default()).unwrap();
        let scorer = artifacts.scorer(Method::Energy).unwrap();
        let lat = score_tile(&scorer, &prep, None, Interpolation::Bilinear).unwrap();
        let up = score_tile(&scorer, &prep, Some((32, 32)), Interpolation::Nearest).unwrap();
        assert_eq!(up.scores()[0], lat.scores()[0]);
        assert_eq!(up.scores()[33], lat.scores()[0]);
        assert_eq!(up.predicted()[2], lat.predicted()[1]);
        assert!(score_tile(&scorer, &prep, Some((30, 30)), Interpolation::Nearest).is_err());
    }
}
