//! Synthetic class-conditional feature maps with ground truth.
//!
//! Class means sit on orthogonal coordinate axes at distance
//! `separation × max spread` from the origin, so pairwise distances are
//! `√2` times that. Every feature carries a large common offset along the
//! all-ones direction; it keeps `‖h‖` nearly constant so l2 normalization is
//! close to a uniform rescaling. Pixels are shuffled and packed into square
//! tiles, with `UNLABELED` padding.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calib::ClassStats;
use crate::error::{Error, Result};
use crate::maps::{ClassSet, FeatureMap, LabelMap, LabeledPixels, UNLABELED};
use crate::scores::maha_plus_score;

/// Offset norm as a multiple of the mean radius.
const OFFSET_FACTOR: f64 = 50.0;
/// Minimum score-IQR ratio for a heterogeneous instance.
pub const MIN_IQR_RATIO: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    /// Known anomaly classes.
    pub k_id: usize,
    pub include_healthy: bool,
    pub n_ood_classes: usize,
    pub separation: f64,
    /// Pixels per ID class in the calibration and evaluation splits; one
    /// value applies to all classes.
    pub counts: Vec<usize>,
    /// Pixels per OOD class in the evaluation split.
    pub ood_count: usize,
    /// Spread multipliers, ID classes first then OOD; empty means all 1.
    pub spreads: Vec<f64>,
    /// Validation split size as a fraction of the calibration counts.
    pub val_fraction: f64,
    pub tile_side: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            k_id: 4,
            include_healthy: true,
            n_ood_classes: 1,
            separation: 6.0,
            counts: vec![2000],
            ood_count: 2000,
            spreads: Vec::new(),
            val_fraction: 0.25,
            tile_side: 32,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_id(&self) -> usize {
        self.k_id + usize::from(self.include_healthy)
    }

    pub fn n_total(&self) -> usize {
        self.n_id() + self.n_ood_classes
    }

    /// Without a healthy class, index 0 is the first known anomaly class but
    /// is still treated as the reference class by the metrics.
    pub fn classes(&self) -> Result<ClassSet> {
        ClassSet::new(self.n_id())
    }

    pub fn count(&self, class: usize) -> usize {
        if self.counts.len() == 1 {
            self.counts[0]
        } else {
            self.counts[class]
        }
    }

    pub fn spread(&self, class: usize) -> f64 {
        if self.spreads.is_empty() {
            1.0
        } else {
            self.spreads[class]
        }
    }

    fn val_count(&self, class: usize) -> usize {
        (self.val_fraction * self.count(class) as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim < 2 {
            return bad(format!("dimension {} must be at least 2", self.dim));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return bad(format!("separation {} must be positive", self.separation));
        }
        if self.n_id() < 2 {
            return bad("need at least two ID classes".into());
        }
        if self.n_total() > self.dim {
            return bad(format!(
                "{} classes need an embedding dimension of at least {}",
                self.n_total(),
                self.n_total()
            ));
        }
        if self.counts.len() != 1 && self.counts.len() != self.n_id() {
            return bad(format!("expected 1 or {} counts, got {}", self.n_id(), self.counts.len()));
        }
        if !self.spreads.is_empty() && self.spreads.len() != self.n_total() {
            return bad(format!("expected {} spreads, got {}", self.n_total(), self.spreads.len()));
        }
        if self.spreads.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("spreads must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction.is_finite()) {
            return bad(format!("validation fraction {} must be positive", self.val_fraction));
        }
        if self.tile_side == 0 {
            return bad("tile side must be positive".into());
        }
        let need = self.dim + 2;
        for c in 0..self.n_id() {
            if self.count(c) < need || self.val_count(c) < 1 {
                return Err(Error::InsufficientSamples(format!(
                    "class {c} has {} samples, covariance estimation in dimension {} needs at least {need}",
                    self.count(c),
                    self.dim
                )));
            }
        }
        if self.n_ood_classes > 0 && self.ood_count == 0 {
            return bad("OOD classes need a positive count".into());
        }
        Ok(())
    }

    fn max_spread(&self) -> f64 {
        (0..self.n_total()).map(|c| self.spread(c)).fold(0.0, f64::max)
    }

    /// Distance of every class mean from the origin (before the offset).
    pub fn mean_radius(&self) -> f64 {
        self.separation * self.max_spread()
    }

    fn offset(&self) -> Vec<f64> {
        let norm = OFFSET_FACTOR * self.mean_radius();
        vec![norm / (self.dim as f64).sqrt(); self.dim]
    }

    /// Configured means including the common offset, ID classes first.
    pub fn means(&self) -> Vec<Vec<f64>> {
        let offset = self.offset();
        let r = self.mean_radius();
        (0..self.n_total())
            .map(|c| {
                let mut m = offset.clone();
                m[c] += r;
                m
            })
            .collect()
    }
}

/// A mixture class: two equal-weight components at `mean ± offset · v`
/// where `v` is orthogonal to all means and the common offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mixture {
    pub class: usize,
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthSplit {
    Calibration,
    Validation,
    Evaluation,
}

impl SynthSplit {
    pub const ALL: [SynthSplit; 3] = [SynthSplit::Calibration, SynthSplit::Validation, SynthSplit::Evaluation];

    pub fn tag(self) -> &'static str {
        match self {
            SynthSplit::Calibration => "calibration",
            SynthSplit::Validation => "validation",
            SynthSplit::Evaluation => "evaluation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTile {
    pub id: String,
    pub features: FeatureMap,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub spec: SynthSpec,
    pub classes: ClassSet,
    pub means: Vec<Vec<f64>>,
    pub calibration: Vec<SynthTile>,
    pub validation: Vec<SynthTile>,
    pub evaluation: Vec<SynthTile>,
}

impl SynthSet {
    pub fn split(&self, split: SynthSplit) -> &[SynthTile] {
        match split {
            SynthSplit::Calibration => &self.calibration,
            SynthSplit::Validation => &self.validation,
            SynthSplit::Evaluation => &self.evaluation,
        }
    }

    /// Labeled pixels of a split; OOD pixels (all OOD classes share the OOD
    /// label) are included.
    pub fn pixels(&self, split: SynthSplit) -> Result<LabeledPixels> {
        let tiles = self.split(split);
        LabeledPixels::from_maps(
            tiles.iter().map(|t| (&t.features, &t.labels)),
            self.classes.n_extended(),
        )
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from("file\tsplit\tcomposition\n");
        for split in SynthSplit::ALL {
            for tile in self.split(split) {
                let mut counts = vec![0usize; self.classes.n_extended()];
                for &l in tile.labels.values() {
                    if l >= 0 {
                        counts[l as usize] += 1;
                    }
                }
                let comp: Vec<String> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &n)| n > 0)
                    .map(|(c, n)| format!("{c}:{n}"))
                    .collect();
                writeln!(out, "{}/{}.feat.oods\t{}\t{}", split.tag(), tile.id, split.tag(), comp.join(",")).unwrap();
            }
        }
        out
    }

    /// Writes `<split>/<tile>.feat.oods`, `<split>/<tile>.label.oods` and a
    /// `manifest.tsv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for split in SynthSplit::ALL {
            let sub = dir.join(split.tag());
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for tile in self.split(split) {
                tile.features.write(sub.join(format!("{}.feat.oods", tile.id)))?;
                tile.labels.write(sub.join(format!("{}.label.oods", tile.id)))?;
            }
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthSet> {
    generate_with(spec, None)
}

fn generate_with(spec: &SynthSpec, mixture: Option<Mixture>) -> Result<SynthSet> {
    spec.validate()?;
    let n_total = spec.n_total();
    if let Some(m) = mixture {
        if m.class >= spec.n_id() {
            return Err(Error::ClassOutOfRange(m.class));
        }
        if n_total + 2 > spec.dim {
            return Err(Error::InvalidArgument(format!(
                "a mixture class needs dimension at least {}",
                n_total + 2
            )));
        }
    }
    let classes = spec.classes()?;
    let means = spec.means();
    let mut direction = vec![0.0; spec.dim];
    if mixture.is_some() {
        direction[n_total] = std::f64::consts::FRAC_1_SQRT_2;
        direction[n_total + 1] = -std::f64::consts::FRAC_1_SQRT_2;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let draw = |class: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<(Vec<f64>, i32)> {
        let label = if class < spec.n_id() { class as i32 } else { classes.ood() as i32 };
        let sigma = spec.spread(class);
        (0..n)
            .map(|_| {
                let sign = match mixture {
                    Some(m) if m.class == class => {
                        if rng.random::<bool>() {
                            m.offset
                        } else {
                            -m.offset
                        }
                    }
                    _ => 0.0,
                };
                let h = means[class]
                    .iter()
                    .zip(&direction)
                    .map(|(&mu, &v)| mu + sign * v + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (h, label)
            })
            .collect()
    };

    let mut splits: Vec<Vec<(Vec<f64>, i32)>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for c in 0..spec.n_id() {
        splits[0].extend(draw(c, spec.count(c), &mut rng));
        splits[1].extend(draw(c, spec.val_count(c), &mut rng));
        splits[2].extend(draw(c, spec.count(c), &mut rng));
    }
    for c in spec.n_id()..n_total {
        splits[2].extend(draw(c, spec.ood_count, &mut rng));
    }

    let offset = spec.offset();
    let mut tiles = Vec::with_capacity(3);
    for (split, mut pixels) in SynthSplit::ALL.into_iter().zip(splits) {
        pixels.shuffle(&mut rng);
        tiles.push(pack_tiles(split, &pixels, spec.tile_side, &offset)?);
    }
    let evaluation = tiles.pop().unwrap();
    let validation = tiles.pop().unwrap();
    let calibration = tiles.pop().unwrap();
    Ok(SynthSet {
        spec: spec.clone(),
        classes,
        means,
        calibration,
        validation,
        evaluation,
    })
}

fn pack_tiles(split: SynthSplit, pixels: &[(Vec<f64>, i32)], side: usize, pad: &[f64]) -> Result<Vec<SynthTile>> {
    let per_tile = side * side;
    let mut out = Vec::new();
    for (i, chunk) in pixels.chunks(per_tile).enumerate() {
        let mut rows: Vec<Vec<f64>> = chunk.iter().map(|(h, _)| h.clone()).collect();
        let mut labels: Vec<i32> = chunk.iter().map(|&(_, l)| l).collect();
        rows.resize(per_tile, pad.to_vec());
        labels.resize(per_tile, UNLABELED);
        out.push(SynthTile {
            id: format!("{}_{i:04}", split.tag()),
            features: FeatureMap::from_pixels(side, side, &rows)?,
            labels: LabelMap::new(side, side, labels)?,
        });
    }
    Ok(out)
}

/// Spreads and mixture layout for [`heterogeneous_instance_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroConfig {
    /// Healthy, three known anomalies, one OOD class.
    pub spreads: Vec<f64>,
    pub mixture: Option<Mixture>,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        Self {
            spreads: vec![1.0, 1.0, 4.0, 1.0, 1.0],
            mixture: Some(Mixture { class: 3, offset: 4.0 }),
        }
    }
}

/// Default instance: tight healthy and anomaly classes, one broad anomaly
/// class and one two-component mixture, plus a held-out OOD class.
pub fn heterogeneous_instance(seed: u64) -> Result<SynthSet> {
    heterogeneous_instance_with(seed, &HeteroConfig::default())
}

pub fn heterogeneous_instance_with(seed: u64, cfg: &HeteroConfig) -> Result<SynthSet> {
    let spec = SynthSpec {
        dim: 16,
        k_id: 3,
        include_healthy: true,
        n_ood_classes: 1,
        separation: 6.0,
        counts: vec![6000, 2000, 2000, 2000],
        ood_count: 2000,
        spreads: cfg.spreads.clone(),
        val_fraction: 0.25,
        tile_side: 32,
        seed,
    };
    let set = generate_with(&spec, cfg.mixture)?;
    let ratio = score_iqr_ratio(&set)?;
    if ratio < MIN_IQR_RATIO {
        return Err(Error::InsufficientHeterogeneity {
            ratio,
            required: MIN_IQR_RATIO,
        });
    }
    Ok(set)
}

/// Ratio of the largest to the smallest interquartile range of per-class
/// Maha+ scores (true class as the predicted class), with statistics
/// estimated on the calibration split.
pub fn score_iqr_ratio(set: &SynthSet) -> Result<f64> {
    let n_id = set.classes.n_id();
    let calib = set.pixels(SynthSplit::Calibration)?;
    let stats = ClassStats::estimate(&calib, n_id, true)?;
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); n_id];
    for (row, &l) in calib.rows().zip(calib.labels()) {
        let h = stats.prepare(row)?;
        per_class[l].push(maha_plus_score(&h, l, &stats)?);
    }
    let iqrs: Vec<f64> = per_class.iter_mut().map(|s| iqr(s)).collect();
    let max = iqrs.iter().copied().fold(f64::MIN, f64::max);
    let min = iqrs.iter().copied().fold(f64::MAX, f64::min);
    Ok(max / min)
}

fn iqr(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let at = |q: f64| values[((values.len() - 1) as f64 * q).round() as usize];
    at(0.75) - at(0.25)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            dim: 2,
            k_id: 1,
            n_ood_classes: 0,
            separation: 10.0,
            counts: vec![50],
            tile_side: 8,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.calibration, c.calibration);
    }

    #[test]
    fn too_few_samples() {
        let spec = SynthSpec {
            dim: 8,
            counts: vec![3],
            ..Default::default()
        };
        let err = generate(&spec).unwrap_err();
        assert!(err.to_string().contains("insufficient samples"), "{err}");
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec { dim: 1, ..small() }).is_err());
        assert!(generate(&SynthSpec { separation: 0.0, ..small() }).is_err());
        assert!(generate(&SynthSpec { dim: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn means_are_separated() {
        let spec = SynthSpec {
            spreads: vec![1.0, 2.0, 1.0, 1.0, 1.0, 0.5],
            ..Default::default()
        };
        let means = spec.means();
        let bound = spec.separation * 2.0;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= bound, "{i} {j} {d}");
            }
        }
    }

    #[test]
    fn empirical_means_match_configuration() {
        let set = generate(&SynthSpec::default()).unwrap();
        let px = set.pixels(SynthSplit::Calibration).unwrap();
        let n = set.classes.n_id();
        let mut sums = vec![vec![0.0f64; 16]; n];
        let mut counts = vec![0usize; n];
        for i in 0..px.len() {
            let l = px.labels()[i];
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(px.row(i)) {
                *s += v;
            }
        }
        for c in 0..n {
            for (k, s) in sums[c].iter().enumerate() {
                assert!((s / counts[c] as f64 - set.means[c][k]).abs() < 0.2);
            }
        }
    }

    #[test]
    fn ood_only_in_evaluation() {
        let set = generate(&SynthSpec::default()).unwrap();
        let ood = set.classes.ood();
        for split in [SynthSplit::Calibration, SynthSplit::Validation] {
            let px = set.pixels(split).unwrap();
            assert!(!px.labels().contains(&ood));
        }
        let eval = set.pixels(SynthSplit::Evaluation).unwrap();
        assert_eq!(eval.labels().iter().filter(|&&l| l == ood).count(), 2000);
        assert_eq!(eval.len(), 5 * 2000 + 2000);
        let padded = set.evaluation.iter().flat_map(|t| t.labels.values()).filter(|&&l| l == UNLABELED).count();
        assert_eq!(padded, set.evaluation.len() * 32 * 32 - 12000);
    }

    #[test]
    fn heterogeneous_default_passes_and_control_is_rejected() {
        let a = heterogeneous_instance(1).unwrap();
        assert_eq!(a, heterogeneous_instance(1).unwrap());
        assert!(score_iqr_ratio(&a).unwrap() >= MIN_IQR_RATIO);
        let flat = HeteroConfig {
            spreads: vec![1.0; 5],
            mixture: None,
        };
        match heterogeneous_instance_with(1, &flat) {
            Err(Error::InsufficientHeterogeneity { ratio, .. }) => assert!((ratio - 1.0).abs() < 0.25, "{ratio}"),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn write_produces_manifest() {
        let set = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write(dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(manifest.lines().count() > 3);
        let tile = &set.calibration[0];
        let back = FeatureMap::read(dir.path().join("calibration").join(format!("{}.feat.oods", tile.id))).unwrap();
        assert_eq!(back, tile.features);
    }
}
