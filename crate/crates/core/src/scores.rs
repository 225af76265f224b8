//! Per-pixel anomaly scores. Lower scores mean "more likely OOD" for every
//! method.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::calib::ClassStats;
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::maps::{argmax, ChannelMap, FeatureMap, LabelMap, LogitMap, ProbMap};
use crate::numeric::log_sum_exp;
use crate::tensorio::{self, Tensor};

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
pub const KL_FLOOR: f64 = 1e-12;
pub const DEFAULT_REACT_PERCENTILE: f64 = 90.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Maha,
    MahaPlus,
    Msp,
    MaxLogit,
    Energy,
    React,
    KlMatching,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Msp,
        Method::MaxLogit,
        Method::Energy,
        Method::React,
        Method::KlMatching,
        Method::Maha,
        Method::MahaPlus,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Maha => "maha",
            Method::MahaPlus => "maha+",
            Method::Msp => "msp",
            Method::MaxLogit => "maxlogit",
            Method::Energy => "energy",
            Method::React => "react",
            Method::KlMatching => "klm",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Maha => "Maha",
            Method::MahaPlus => "Maha+",
            Method::Msp => "MSP",
            Method::MaxLogit => "Max-Logit",
            Method::Energy => "Energy",
            Method::React => "ReAct",
            Method::KlMatching => "KL-M",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

fn check_dim(h: &[f64], stats: &ClassStats) -> Result<()> {
    if h.len() != stats.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature of length {} against {}-dimensional stats",
            h.len(),
            stats.dim()
        )));
    }
    Ok(())
}

/// `−min_c D(h, μ_c)` for a feature already prepared to match `stats`
/// (l2-normalized when the stats are).
pub fn maha_score(h: &[f64], stats: &ClassStats) -> Result<f64> {
    check_dim(h, stats)?;
    let min_sq = (0..stats.n_classes())
        .map(|c| stats.mahalanobis_sq(h, c))
        .fold(f64::INFINITY, f64::min);
    Ok(-min_sq.sqrt())
}

/// `−D(ĥ, μ_ĉ)`: distance to the predicted class only. Requires statistics
/// estimated on l2-normalized features.
pub fn maha_plus_score(h: &[f64], predicted: usize, stats: &ClassStats) -> Result<f64> {
    check_dim(h, stats)?;
    if !stats.normalized() {
        return Err(Error::NotNormalized);
    }
    if predicted >= stats.n_classes() {
        return Err(Error::ClassOutOfRange(predicted));
    }
    Ok(-stats.mahalanobis_sq(h, predicted).sqrt())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOLERANCE || p.iter().any(|&v| v < -SIMPLEX_TOLERANCE) {
        return Err(Error::NotSimplex(sum));
    }
    Ok(())
}

pub fn msp_score(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn maxlogit_score(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(z)`, evaluated with max subtraction.
pub fn energy_score(z: &[f64]) -> f64 {
    log_sum_exp(z)
}

/// Activation ceiling for ReAct, taken as a percentile of all calibration
/// activation values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReactClamp {
    threshold: Option<f64>,
    percentile: f64,
}

impl ReactClamp {
    pub fn uncalibrated(percentile: f64) -> Result<Self> {
        if !(percentile > 0.0 && percentile <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "react percentile must lie in (0, 100], got {percentile}"
            )));
        }
        Ok(Self {
            threshold: None,
            percentile,
        })
    }

    pub fn fixed(threshold: f64) -> Self {
        Self {
            threshold: Some(threshold),
            percentile: 100.0,
        }
    }

    /// Nearest-rank percentile over every entry of every calibration feature.
    pub fn calibrate<'a>(activations: impl IntoIterator<Item = &'a [f64]>, percentile: f64) -> Result<Self> {
        let mut clamp = Self::uncalibrated(percentile)?;
        let mut values: Vec<f64> = activations.into_iter().flatten().copied().collect();
        if values.is_empty() {
            return Err(Error::EmptyScores);
        }
        values.sort_by(f64::total_cmp);
        let rank = ((percentile / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
        clamp.threshold = Some(values[rank.min(values.len()) - 1]);
        Ok(clamp)
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn percentile(&self) -> f64 {
        self.percentile
    }
}

pub fn react_score(h: &[f64], head: &LinearHead, clamp: &ReactClamp) -> Result<f64> {
    let c = clamp.threshold.ok_or(Error::UncalibratedClamp)?;
    let clipped: Vec<f64> = h.iter().map(|&v| v.min(c)).collect();
    Ok(energy_score(&head.logits(&clipped)?))
}

/// Per-class mean probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct KlProfiles {
    profiles: Vec<Vec<f64>>,
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = p.iter().map(|&v| v.max(KL_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / total).collect()
}

impl KlProfiles {
    pub fn new(profiles: Vec<Vec<f64>>) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::InvalidArgument("no KL profiles".into()));
        }
        for p in &profiles {
            check_simplex(p)?;
        }
        Ok(Self {
            profiles: profiles.iter().map(|p| smooth(p)).collect(),
        })
    }

    pub fn profiles(&self) -> &[Vec<f64>] {
        &self.profiles
    }

    pub fn to_tensor(&self) -> Tensor {
        let c = self.profiles.len();
        let k = self.profiles[0].len();
        Tensor::f64(vec![c, k], self.profiles.iter().flatten().copied().collect())
            .expect("profile dims are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims().len() != 2 {
            return Err(Error::DimensionMismatch("profiles must be a matrix".into()));
        }
        let k = t.dims()[1];
        let profiles: Vec<Vec<f64>> = t.as_f64()?.chunks_exact(k).map(<[f64]>::to_vec).collect();
        if profiles.is_empty() {
            return Err(Error::InvalidArgument("no KL profiles".into()));
        }
        // stored profiles are already smoothed
        for p in &profiles {
            check_simplex(p)?;
        }
        Ok(Self { profiles })
    }
}

/// Profiles from the true labels of calibration pixels. Every class in
/// `0..n_classes` needs at least one pixel.
pub fn fit_kl_profiles<'a>(
    probabilities: impl IntoIterator<Item = &'a [f64]>,
    labels: &[usize],
    n_classes: usize,
) -> Result<KlProfiles> {
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts = vec![0usize; n_classes];
    for (p, &l) in probabilities.into_iter().zip(labels) {
        if l >= n_classes {
            continue;
        }
        if sums.is_empty() {
            sums = vec![vec![0.0; p.len()]; n_classes];
        }
        check_simplex(p)?;
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InsufficientSamples(format!(
            "class {c} has no pixels for its KL profile"
        )));
    }
    let profiles = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    KlProfiles::new(profiles)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// `−min_i KL(p ‖ d_i)` in nats, both sides floored and renormalized.
pub fn kl_matching_score(p: &[f64], profiles: &KlProfiles) -> Result<f64> {
    check_simplex(p)?;
    if p.len() != profiles.profiles[0].len() {
        return Err(Error::DimensionMismatch(format!(
            "probability vector of length {} against profiles of length {}",
            p.len(),
            profiles.profiles[0].len()
        )));
    }
    let ps = smooth(p);
    let min = profiles
        .profiles
        .iter()
        .map(|d| kl_divergence(&ps, d))
        .fold(f64::INFINITY, f64::min);
    Ok(-min)
}

/// Everything a scorer may look at for one pixel.
#[derive(Clone, Copy, Debug)]
pub struct PixelInputs<'a> {
    pub features: &'a [f64],
    pub logits: &'a [f64],
    pub probs: &'a [f64],
    pub predicted: usize,
}

/// A scoring method bound to its calibration artifacts.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    Maha(&'a ClassStats),
    MahaPlus(&'a ClassStats),
    Msp,
    MaxLogit,
    Energy,
    React {
        head: &'a LinearHead,
        clamp: &'a ReactClamp,
    },
    KlMatching(&'a KlProfiles),
}

impl Scorer<'_> {
    pub fn method(&self) -> Method {
        match self {
            Scorer::Maha(_) => Method::Maha,
            Scorer::MahaPlus(_) => Method::MahaPlus,
            Scorer::Msp => Method::Msp,
            Scorer::MaxLogit => Method::MaxLogit,
            Scorer::Energy => Method::Energy,
            Scorer::React { .. } => Method::React,
            Scorer::KlMatching(_) => Method::KlMatching,
        }
    }

    pub fn score(&self, px: PixelInputs<'_>) -> Result<f64> {
        match self {
            Scorer::Maha(stats) => maha_score(&stats.prepare(px.features)?, stats),
            Scorer::MahaPlus(stats) => maha_plus_score(&stats.prepare(px.features)?, px.predicted, stats),
            Scorer::Msp => msp_score(px.probs),
            Scorer::MaxLogit => Ok(maxlogit_score(px.logits)),
            Scorer::Energy => Ok(energy_score(px.logits)),
            Scorer::React { head, clamp } => react_score(px.features, head, clamp),
            Scorer::KlMatching(profiles) => kl_matching_score(px.probs, profiles),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    method: Method,
    scores: Vec<f64>,
    predicted: Vec<usize>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, method: Method, scores: Vec<f64>, predicted: Vec<usize>) -> Result<Self> {
        if scores.len() != height * width || predicted.len() != scores.len() {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} score map given {} scores and {} predictions",
                scores.len(),
                predicted.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            method,
            scores,
            predicted,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn predicted_labels(&self) -> LabelMap {
        LabelMap::new(
            self.height,
            self.width,
            self.predicted.iter().map(|&c| c as i32).collect(),
        )
        .expect("dims are validated at construction")
    }

    /// Writes `<stem>.score.oods` (float64 scores) and `<stem>.pred.oods`
    /// (int32 predicted classes).
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        tensorio::write_tensor(
            dir.join(format!("{stem}.score.oods")),
            &Tensor::f64(vec![self.height, self.width], self.scores.clone())?,
        )?;
        self.predicted_labels().write(dir.join(format!("{stem}.pred.oods")))
    }

    pub fn read(dir: impl AsRef<Path>, stem: &str, method: Method) -> Result<Self> {
        let dir = dir.as_ref();
        let t = tensorio::read_tensor(dir.join(format!("{stem}.score.oods")))?;
        let pred = LabelMap::read(dir.join(format!("{stem}.pred.oods")))?;
        let (h, w) = (t.dims()[0], t.dims()[1]);
        let predicted = pred
            .values()
            .iter()
            .map(|&v| usize::try_from(v).map_err(|_| Error::UnknownLabel(v as i64)))
            .collect::<Result<_>>()?;
        Self::new(h, w, method, t.as_f64()?.to_vec(), predicted)
    }
}

/// Scores every pixel of a tile; the predicted class is the argmax of the
/// probability map.
pub fn score_map(scorer: &Scorer<'_>, features: &FeatureMap, logits: &LogitMap, probs: &ProbMap) -> Result<ScoreMap> {
    same_grid(features, logits)?;
    same_grid(features, probs)?;
    let (h, w) = (features.height(), features.width());
    let mut scores = Vec::with_capacity(h * w);
    let mut predicted = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let f = features.pixel(y, x);
            let z = logits.pixel(y, x);
            let p = probs.pixel(y, x);
            let c = argmax(&p);
            scores.push(scorer.score(PixelInputs {
                features: &f,
                logits: &z,
                probs: &p,
                predicted: c,
            })?);
            predicted.push(c);
        }
    }
    ScoreMap::new(h, w, scorer.method(), scores, predicted)
}

fn same_grid(a: &ChannelMap, b: &ChannelMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::DimensionMismatch(format!(
            "maps are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn stats(means: Vec<Vec<f64>>, diag: &[f64], normalized: bool) -> ClassStats {
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag));
        ClassStats::with_precision(means, p, normalized).unwrap()
    }

    #[test]
    fn maha_examples() {
        let s = stats(vec![vec![0.0, 0.0], vec![10.0, 0.0]], &[1.0, 1.0], false);
        assert_eq!(maha_score(&[0.0, 0.0], &s).unwrap(), 0.0);
        assert_eq!(maha_score(&[1.0, 0.0], &s).unwrap(), -1.0);
        let s = stats(vec![vec![0.0, 0.0]], &[0.25, 1.0], false);
        assert_eq!(maha_score(&[2.0, 0.0], &s).unwrap(), -1.0);
        assert!(matches!(maha_score(&[1.0], &s), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn maha_plus_examples() {
        let single = stats(vec![vec![0.6, 0.8]], &[2.0, 3.0], true);
        for h in [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]] {
            assert_eq!(maha_plus_score(&h, 0, &single).unwrap(), maha_score(&h, &single).unwrap());
        }
        let two = stats(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0], true);
        let h = [0.9, (1.0f64 - 0.81).sqrt()];
        assert!(maha_plus_score(&h, 1, &two).unwrap() < maha_score(&h, &two).unwrap());
        assert_eq!(maha_plus_score(&[0.0, 1.0], 1, &two).unwrap(), 0.0);
        assert!(matches!(maha_plus_score(&h, 2, &two), Err(Error::ClassOutOfRange(2))));
        let raw = stats(vec![vec![1.0, 0.0]], &[1.0, 1.0], false);
        assert!(matches!(maha_plus_score(&h, 0, &raw), Err(Error::NotNormalized)));
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(msp_score(&[0.25; 4]).unwrap(), 0.25);
        assert_eq!(msp_score(&[0.7, 0.2, 0.1]).unwrap(), 0.7);
        assert_eq!(msp_score(&[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(msp_score(&[0.5, 0.6]), Err(Error::NotSimplex(_))));

        assert_eq!(maxlogit_score(&[0.0; 3]), 0.0);
        assert_eq!(maxlogit_score(&[2.0, 0.0, -1.0]), 2.0);
        assert_eq!(maxlogit_score(&[2.5, 0.5, -0.5]), 2.5);

        assert!((energy_score(&[0.0; 3]) - 3f64.ln()).abs() < 1e-15);
        // direct summation oracle
        let direct = (2f64.exp() + 1.0 + (-1f64).exp()).ln();
        assert!((energy_score(&[2.0, 0.0, -1.0]) - direct).abs() < 1e-14);
        assert!((direct - 2.169_85).abs() < 1e-5);
        assert_eq!(energy_score(&[-3.5]), -3.5);
    }

    #[test]
    fn react_examples() {
        let head = LinearHead::new(2, 2, vec![1.0, -1.0, 0.5, 2.0], vec![0.1, 0.0]).unwrap();
        let h = [5.0, 0.1];
        let unclamped = react_score(&h, &head, &ReactClamp::fixed(f64::INFINITY)).unwrap();
        assert_eq!(unclamped, energy_score(&head.logits(&h).unwrap()));
        let clamped = react_score(&h, &head, &ReactClamp::fixed(1.0)).unwrap();
        let z = [1.0 - 0.1 + 0.1, 0.5 + 0.2];
        assert!((clamped - energy_score(&z)).abs() < 1e-14);
        let low = [0.2, 0.3];
        assert_eq!(
            react_score(&low, &head, &ReactClamp::fixed(1.0)).unwrap(),
            energy_score(&head.logits(&low).unwrap())
        );
        let none = ReactClamp::uncalibrated(90.0).unwrap();
        assert!(matches!(react_score(&h, &head, &none), Err(Error::UncalibratedClamp)));
    }

    #[test]
    fn react_percentile_is_nearest_rank() {
        let rows: Vec<Vec<f64>> = (1..=10).map(|v| vec![v as f64]).collect();
        let clamp = ReactClamp::calibrate(rows.iter().map(Vec::as_slice), 90.0).unwrap();
        assert_eq!(clamp.threshold(), Some(9.0));
    }

    #[test]
    fn kl_examples() {
        let profiles = KlProfiles::new(vec![vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert!(kl_matching_score(&[0.2, 0.8], &profiles).unwrap().abs() < 1e-12);
        let single = KlProfiles::new(vec![vec![0.5, 0.5]]).unwrap();
        let expected = -(0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln());
        let got = kl_matching_score(&[0.7, 0.3], &single).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got + 0.082_28).abs() < 1e-5);

        let p = vec![0.1, 0.6, 0.3];
        let rows = vec![p.clone(); 4];
        let fitted = fit_kl_profiles(rows.iter().map(Vec::as_slice), &[0, 0, 0, 0], 1).unwrap();
        for (a, b) in fitted.profiles()[0].iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_handles_one_hot() {
        let profiles = KlProfiles::new(vec![vec![1.0, 0.0]]).unwrap();
        let s = kl_matching_score(&[0.0, 1.0], &profiles).unwrap();
        assert!(s.is_finite() && s < 0.0);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("ocsvm".parse::<Method>().is_err());
    }
}
