//! Standard (global) and adaptive (per-predicted-class) thresholds, the
//! ID/OOD decision rule and the acceptance-level sweep.
//!
//! A threshold for acceptance level `p` is the lower order statistic at rank
//! `⌊(1−p)·n⌋ + 1`. On the calibration scores themselves this keeps between
//! `p·n` and `p·n + 1` samples (exclusive) whenever scores are distinct.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::calib::parse_sidecar;
use crate::error::{Error, Result};
use crate::maps::ClassSet;
use crate::metrics::{self, ExtendedConfusion};
use crate::scores::Method;

/// Tolerance for deciding that `p·n` is an integer despite rounding in `p`.
const RANK_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Standard,
    Adaptive,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Adaptive => "adaptive",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Mode::Standard => "Standard",
            Mode::Adaptive => "Adaptive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::Parse(format!("unknown threshold mode `{other}`"))),
        }
    }
}

/// Number of calibration samples that must be kept to accept at least a
/// fraction `p` of `n`.
fn kept_count(n: usize, p: f64) -> usize {
    let target = p * n as f64;
    let rounded = target.round();
    let kept = if (target - rounded).abs() <= RANK_EPS * n.max(1) as f64 {
        rounded
    } else {
        target.ceil()
    };
    (kept.max(0.0) as usize).min(n)
}

/// Empirical `q`-quantile as a lower order statistic, with `q = 1 − p`.
/// Returns `−∞` for `q = 0` so that nothing is rejected.
pub fn empirical_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile level {q} outside [0, 1)")));
    }
    if q == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    threshold_for_acceptance(scores, 1.0 - q)
}

/// Threshold keeping the top `⌈p·n⌉` scores (at least a fraction `p`).
pub fn threshold_for_acceptance(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("acceptance level {p} outside (0, 1]")));
    }
    let n = scores.len();
    let kept = kept_count(n, p).max(1);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[n - kept])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSet {
    mode: Mode,
    p: f64,
    method: Option<Method>,
    global: f64,
    per_class: Vec<f64>,
}

/// Options for [`fit`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitOptions {
    /// In adaptive mode, substitute the global threshold for classes never
    /// predicted on calibration data instead of failing.
    pub fallback_to_global: bool,
}

/// Fits thresholds from calibration scores and predicted classes.
pub fn fit(scores: &[f64], predicted: &[usize], n_classes: usize, mode: Mode, p: f64) -> Result<ThresholdSet> {
    fit_with(scores, predicted, n_classes, mode, p, FitOptions::default())
}

pub fn fit_with(
    scores: &[f64],
    predicted: &[usize],
    n_classes: usize,
    mode: Mode,
    p: f64,
    options: FitOptions,
) -> Result<ThresholdSet> {
    if scores.len() != predicted.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} predictions",
            scores.len(),
            predicted.len()
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("acceptance level {p} outside (0, 1)")));
    }
    if let Some(&c) = predicted.iter().find(|&&c| c >= n_classes) {
        return Err(Error::ClassOutOfRange(c));
    }
    let global = threshold_for_acceptance(scores, p)?;
    let per_class = match mode {
        Mode::Standard => vec![global; n_classes],
        Mode::Adaptive => {
            let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
            for (&s, &c) in scores.iter().zip(predicted) {
                by_class[c].push(s);
            }
            by_class
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if s.is_empty() {
                        if options.fallback_to_global {
                            warn!("class {c} never predicted on calibration data; using global threshold");
                            Ok(global)
                        } else {
                            Err(Error::UnpredictedClass(c))
                        }
                    } else {
                        threshold_for_acceptance(s, p)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(ThresholdSet {
        mode,
        p,
        method: None,
        global,
        per_class,
    })
}

/// Outcome of thresholding one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Id(usize),
    Ood,
}

impl Decision {
    pub fn label(self, classes: &ClassSet) -> i32 {
        match self {
            Decision::Id(c) => c as i32,
            Decision::Ood => classes.ood() as i32,
        }
    }
}

impl ThresholdSet {
    pub fn manual(mode: Mode, p: f64, global: f64, per_class: Vec<f64>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::InvalidArgument("threshold set needs at least one class".into()));
        }
        Ok(Self {
            mode,
            p,
            method: None,
            global,
            per_class,
        })
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = Some(method);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn method(&self) -> Option<Method> {
        self.method
    }

    pub fn global(&self) -> f64 {
        self.global
    }

    pub fn per_class(&self) -> &[f64] {
        &self.per_class
    }

    pub fn threshold(&self, class: usize) -> f64 {
        match self.mode {
            Mode::Standard => self.global,
            Mode::Adaptive => self.per_class[class],
        }
    }

    /// `s < τ` is OOD; a score equal to the threshold stays ID.
    pub fn decide(&self, score: f64, predicted: usize) -> Decision {
        if score < self.threshold(predicted) {
            Decision::Ood
        } else {
            Decision::Id(predicted)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "kind = thresholds").unwrap();
        writeln!(out, "mode = {}", self.mode).unwrap();
        writeln!(out, "p = {:?}", self.p).unwrap();
        if let Some(m) = self.method {
            writeln!(out, "method = {m}").unwrap();
        }
        writeln!(out, "classes = {}", self.per_class.len()).unwrap();
        writeln!(out, "global = {:?}", self.global).unwrap();
        for (c, t) in self.per_class.iter().enumerate() {
            writeln!(out, "class.{c} = {t:?}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_sidecar(text);
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("threshold file lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            parse_f64(get(k)?).map_err(|e| Error::Parse(format!("{k}: {e}")))
        };
        let mode: Mode = get("mode")?.parse()?;
        let p = num("p")?;
        let global = num("global")?;
        let n: usize = get("classes")?
            .parse()
            .map_err(|e| Error::Parse(format!("classes: {e}")))?;
        let per_class = (0..n)
            .map(|c| num(&format!("class.{c}")))
            .collect::<Result<Vec<_>>>()?;
        let method = kv.get("method").map(|m| m.parse()).transpose()?;
        Ok(Self {
            mode,
            p,
            method,
            global,
            per_class,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    match s {
        "-inf" => Ok(f64::NEG_INFINITY),
        "inf" => Ok(f64::INFINITY),
        other => other.parse(),
    }
}

/// The acceptance levels `0.950, 0.952, …, 0.998`.
pub fn sweep_grid() -> Vec<f64> {
    (0..25).map(|i| (950 + 2 * i) as f64 / 1000.0).collect()
}

/// Scored pixels with predicted classes and (for evaluation) ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredPixels {
    pub scores: Vec<f64>,
    pub predicted: Vec<usize>,
    pub truth: Vec<i32>,
}

impl ScoredPixels {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn push(&mut self, score: f64, predicted: usize, truth: i32) {
        self.scores.push(score);
        self.predicted.push(predicted);
        self.truth.push(truth);
    }

    pub fn extend(&mut self, other: &ScoredPixels) {
        self.scores.extend_from_slice(&other.scores);
        self.predicted.extend_from_slice(&other.predicted);
        self.truth.extend_from_slice(&other.truth);
    }

    /// Extended confusion after thresholding every pixel.
    pub fn confusion(&self, classes: &ClassSet, thresholds: &ThresholdSet) -> Result<ExtendedConfusion> {
        let mut cm = ExtendedConfusion::new(classes.clone());
        for ((&s, &c), &t) in self.scores.iter().zip(&self.predicted).zip(&self.truth) {
            cm.record(t, thresholds.decide(s, c).label(classes))?;
        }
        Ok(cm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub fnr_bar: f64,
    pub fpr: f64,
    pub ber: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub method: Option<Method>,
    pub mode: Mode,
    pub best_p: f64,
    pub rows: Vec<SweepRow>,
}

/// Fits thresholds on `calibration` at every grid level, evaluates them on
/// `evaluation` and picks the level with the lowest BER (first on ties).
pub fn sweep(
    calibration: &ScoredPixels,
    evaluation: &ScoredPixels,
    classes: &ClassSet,
    mode: Mode,
    options: FitOptions,
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for p in sweep_grid() {
        let th = fit_with(
            &calibration.scores,
            &calibration.predicted,
            classes.n_id(),
            mode,
            p,
            options,
        )?;
        let cm = evaluation.confusion(classes, &th)?;
        let fnr = metrics::fnr_bar(&cm)?;
        let fp = metrics::fpr(&cm)?;
        rows.push(SweepRow {
            p,
            fnr_bar: fnr,
            fpr: fp,
            ber: metrics::ber(fnr, fp),
        });
    }
    let best = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.ber <= r.ber => Some(b),
            _ => Some(r),
        })
        .expect("grid is non-empty");
    Ok(SweepResult {
        method: None,
        mode,
        best_p: best.p,
        rows,
    })
}

/// Per-class acceptance counts on calibration data, keyed by predicted class.
pub fn acceptance_by_class(scores: &[f64], predicted: &[usize], th: &ThresholdSet) -> BTreeMap<usize, (usize, usize)> {
    let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&s, &c) in scores.iter().zip(predicted) {
        let e = out.entry(c).or_default();
        e.1 += 1;
        if matches!(th.decide(s, c), Decision::Id(_)) {
            e.0 += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_scores_flag_nothing() {
        let s = vec![-2.5; 50];
        for q in [0.0, 0.01, 0.5, 0.99] {
            let t = empirical_quantile(&s, q).unwrap();
            assert!(q == 0.0 || t == -2.5);
            assert!(s.iter().all(|&v| v >= t));
        }
    }

    #[test]
    fn integer_rank_keeps_exactly_p() {
        // with 100 distinct scores and q = 0.01, the 2nd smallest is the
        // threshold: 99 kept (fraction 0.99), one rejected
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&s, 0.01).unwrap(), 2.0);
        assert_eq!(threshold_for_acceptance(&s, 0.99).unwrap(), 2.0);
        assert_eq!(threshold_for_acceptance(&s, 0.995).unwrap(), 1.0);
    }

    #[test]
    fn normal_sample_order_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let t = empirical_quantile(&s, 0.01).unwrap();
        assert!(t >= sorted[9] && t <= sorted[10]);
    }

    #[test]
    fn empty_scores_error() {
        assert!(matches!(empirical_quantile(&[], 0.1), Err(Error::EmptyScores)));
    }

    #[test]
    fn boundary_semantics() {
        let th = ThresholdSet::manual(Mode::Standard, 0.99, -1.0, vec![-1.0; 2]).unwrap();
        assert_eq!(th.decide(-1.0, 1), Decision::Id(1));
        assert_eq!(th.decide(-1.0 - 1e-12, 1), Decision::Ood);
    }

    #[test]
    fn single_class_modes_coincide() {
        let s: Vec<f64> = (0..37).map(|v| -(v as f64).sqrt()).collect();
        let c = vec![0; s.len()];
        let a = fit(&s, &c, 1, Mode::Standard, 0.9).unwrap();
        let b = fit(&s, &c, 1, Mode::Adaptive, 0.9).unwrap();
        assert_eq!(a.threshold(0), b.threshold(0));
    }

    #[test]
    fn two_populations_get_separate_thresholds() {
        // class 0 scores in [-1, 0], class 1 in [-100, -50]
        let mut s = Vec::new();
        let mut c = Vec::new();
        for i in 0..=1000 {
            s.push(-(i as f64) / 1000.0);
            c.push(0);
        }
        for i in 0..=100 {
            s.push(-50.0 - i as f64 / 2.0);
            c.push(1);
        }
        let std = fit(&s, &c, 2, Mode::Standard, 0.99).unwrap();
        let ada = fit(&s, &c, 2, Mode::Adaptive, 0.99).unwrap();
        assert!(ada.threshold(0) != ada.threshold(1));
        let rejected_std = s
            .iter()
            .zip(&c)
            .filter(|(&v, &k)| k == 1 && std.decide(v, k) == Decision::Ood)
            .count();
        // the 11 lowest of 1102 scores all belong to class 1
        assert_eq!(rejected_std, 11);
        let acc = acceptance_by_class(&s, &c, &ada);
        assert!(acc[&1].1 - acc[&1].0 <= 1);
        for (_, (kept, n)) in acc {
            assert!(kept as f64 / n as f64 >= 0.99);
        }
    }

    #[test]
    fn unpredicted_class_errors_or_falls_back() {
        let s = [1.0, 2.0, 3.0];
        let c = [0, 0, 0];
        assert!(matches!(
            fit(&s, &c, 2, Mode::Adaptive, 0.5),
            Err(Error::UnpredictedClass(1))
        ));
        let th = fit_with(&s, &c, 2, Mode::Adaptive, 0.5, FitOptions { fallback_to_global: true }).unwrap();
        assert_eq!(th.threshold(1), th.global());
    }

    #[test]
    fn grid_has_25_levels() {
        let g = sweep_grid();
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], 0.95);
        assert_eq!(g[24], 0.998);
        assert!(g.windows(2).all(|w| ((w[1] - w[0]) - 0.002).abs() < 1e-12));
    }

    #[test]
    fn text_round_trip_preserves_bits() {
        let th = ThresholdSet::manual(Mode::Adaptive, 0.996, -1.0 / 3.0, vec![-0.1, f64::NEG_INFINITY, -7.25])
            .unwrap()
            .with_method(Method::MahaPlus);
        let back = ThresholdSet::from_text(&th.to_text()).unwrap();
        assert_eq!(back, th);
    }

    #[test]
    fn lowering_threshold_shrinks_ood_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hi = ThresholdSet::manual(Mode::Standard, 0.9, 0.5, vec![0.5]).unwrap();
        let lo = ThresholdSet::manual(Mode::Standard, 0.9, -0.5, vec![-0.5]).unwrap();
        for &v in &s {
            if lo.decide(v, 0) == Decision::Ood {
                assert_eq!(hi.decide(v, 0), Decision::Ood);
            }
        }
    }
}
