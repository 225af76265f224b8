//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maps::ClassSet;
use crate::scores::{Method, DEFAULT_REACT_PERCENTILE};
use crate::thresholds::Mode;
use crate::tiles::ShiftConfig;

/// Resampling of continuous score maps from latent to label resolution.
/// Label maps always use nearest neighbour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            other => Err(Error::Parse(format!("unknown interpolation `{other}`"))),
        }
    }
}

impl Interpolation {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Bilinear => "bilinear",
            Self::Nearest => "nearest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Tiles used for head training and calibration statistics.
    pub train: Option<PathBuf>,
    /// Validation tiles (head model selection; added to threshold fitting).
    pub val: Option<PathBuf>,
    /// Tiles to score and evaluate.
    pub eval: Option<PathBuf>,
    /// Directory of `.label.oods` files when labels live apart from features.
    pub labels: Option<PathBuf>,
    /// Head, statistics and threshold artifacts.
    pub model: PathBuf,
    pub out: PathBuf,
    pub groups: Option<PathBuf>,
    pub method: Method,
    pub mode: Mode,
    pub p: f64,
    pub shift: ShiftConfig,
    /// Smallest kept anomaly component, in latent cells.
    pub min_area: usize,
    pub interpolation: Interpolation,
    pub seeds: Vec<u64>,
    pub n_id: usize,
    pub neutral: Vec<usize>,
    pub no_tissue: Option<usize>,
    pub fallback_to_global: bool,
    pub react_percentile: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            eval: None,
            labels: None,
            model: PathBuf::from("model"),
            out: PathBuf::from("out"),
            groups: None,
            method: Method::MahaPlus,
            mode: Mode::Adaptive,
            p: 0.99,
            shift: ShiftConfig::default(),
            min_area: 0,
            interpolation: Interpolation::Bilinear,
            seeds: vec![0],
            n_id: 2,
            neutral: Vec::new(),
            no_tissue: None,
            fallback_to_global: false,
            react_percentile: DEFAULT_REACT_PERCENTILE,
            epochs: 50,
            learning_rate: 3e-4,
            batch_size: 256,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse(format!("{key} = {value}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one setting; used by the file parser and by flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train" => self.train = optional_path(value),
            "val" => self.val = optional_path(value),
            "eval" => self.eval = optional_path(value),
            "labels" => self.labels = optional_path(value),
            "model" => self.model = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "groups" => self.groups = optional_path(value),
            "method" => self.method = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "p" => self.p = parse(key, value)?,
            "tile" => self.shift.tile = parse(key, value)?,
            "inner" => self.shift.inner = parse(key, value)?,
            "stride" => self.shift.stride = parse(key, value)?,
            "latent_scale" => self.shift.latent_scale = parse(key, value)?,
            "min_area" => self.min_area = parse(key, value)?,
            "interpolation" => self.interpolation = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "n_id" => self.n_id = parse(key, value)?,
            "neutral" => self.neutral = parse_list(key, value)?,
            "no_tissue" => self.no_tissue = if value.is_empty() { None } else { Some(parse(key, value)?) },
            "fallback_to_global" => self.fallback_to_global = parse(key, value)?,
            "react_percentile" => self.react_percentile = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            other => return Err(Error::Parse(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidArgument(format!("p = {} must lie in (0, 1]", self.p)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seed list is empty".into()));
        }
        self.classes()?;
        for path in [&self.train, &self.val, &self.eval, &self.labels, &self.groups]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::MissingArtifact(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Result<ClassSet> {
        let mut classes = ClassSet::new(self.n_id)?.with_neutral(self.neutral.clone())?;
        if let Some(c) = self.no_tissue {
            classes = classes.with_no_tissue(c)?;
        }
        Ok(classes)
    }

    /// Canonical `key = value` rendering; identical configurations render
    /// identically.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("train", path(&self.train));
        kv("val", path(&self.val));
        kv("eval", path(&self.eval));
        kv("labels", path(&self.labels));
        kv("model", self.model.display().to_string());
        kv("out", self.out.display().to_string());
        kv("groups", path(&self.groups));
        kv("method", self.method.tag().into());
        kv("mode", self.mode.tag().into());
        kv("p", format!("{:?}", self.p));
        kv("tile", self.shift.tile.to_string());
        kv("inner", self.shift.inner.to_string());
        kv("stride", self.shift.stride.to_string());
        kv("latent_scale", self.shift.latent_scale.to_string());
        kv("min_area", self.min_area.to_string());
        kv("interpolation", self.interpolation.tag().into());
        kv(
            "seeds",
            self.seeds.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        kv("n_id", self.n_id.to_string());
        kv("neutral", list(&self.neutral));
        kv("no_tissue", self.no_tissue.map(|c| c.to_string()).unwrap_or_default());
        kv("fallback_to_global", self.fallback_to_global.to_string());
        kv("react_percentile", format!("{:?}", self.react_percentile));
        kv("epochs", self.epochs.to_string());
        kv("lr", format!("{:?}", self.learning_rate));
        kv("batch_size", self.batch_size.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# run\nmethod = maha+\nmode = standard\np = 0.996\nseeds = 1, 2,3\nneutral = 4\nno_tissue = 5\nn_id = 6\n";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.method, Method::MahaPlus);
        assert_eq!(cfg.mode, Mode::Standard);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.no_tissue, Some(5));
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_text("nonsense").is_err());
        assert!(RunConfig::from_text("colour = red").is_err());
        assert!(RunConfig::from_text("method = knn").is_err());
        assert!(RunConfig::from_text("p = high").is_err());
        let cfg = RunConfig {
            p: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            eval: Some(PathBuf::from("/definitely/not/here")),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::MissingArtifact(_))));
    }
}
