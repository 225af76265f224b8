//! Class-conditional Gaussian calibration with a pooled covariance.
//!
//! Means are per-class averages, the covariance is the within-class scatter
//! pooled over all classes and divided by the total count `N`. The precision
//! is `(Σ + λI)⁻¹` with `λ = 1e-6 · trace(Σ) / d` (floored at [`LAMBDA_FLOOR`]).
//! All accumulation runs in `f64` with compensated summation, so the result
//! does not depend on sample order beyond rounding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::maps::LabeledPixels;
use crate::numeric::CompensatedSum;
use crate::tensorio::{self, Tensor};

pub const RIDGE_SCALE: f64 = 1e-6;
pub const LAMBDA_FLOOR: f64 = 1e-12;

pub fn l2_normalize(h: &[f64]) -> Result<Vec<f64>> {
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    Ok(h.iter().map(|v| v / norm).collect())
}

/// Means, pooled covariance and regularized precision for `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    means: Vec<Vec<f64>>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    counts: Vec<usize>,
    normalized: bool,
    lambda: f64,
}

impl ClassStats {
    /// Estimates statistics for classes `0..n_classes` from labeled pixels.
    /// Pixels with labels outside that range are ignored.
    pub fn estimate(pixels: &LabeledPixels, n_classes: usize, normalize: bool) -> Result<Self> {
        let d = pixels.dim();
        if d == 0 {
            return Err(Error::InsufficientSamples("no calibration pixels".into()));
        }

        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(pixels.len());
        for (i, (row, &label)) in pixels.rows().zip(pixels.labels()).enumerate() {
            if label >= n_classes {
                continue;
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
            let h = if normalize {
                l2_normalize(row)?
            } else {
                row.to_vec()
            };
            rows.push((label, h));
        }

        let mut counts = vec![0usize; n_classes];
        let mut sums = vec![vec![CompensatedSum::default(); d]; n_classes];
        for (label, h) in &rows {
            counts[*label] += 1;
            for (acc, &v) in sums[*label].iter_mut().zip(h) {
                acc.add(v);
            }
        }
        if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
            return Err(Error::InsufficientSamples(format!(
                "class {c} has {n} calibration samples, need at least 2"
            )));
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|acc| acc.value() / n as f64).collect())
            .collect();

        // Upper triangle of the pooled scatter matrix.
        let mut scatter = vec![CompensatedSum::default(); d * d];
        let mut delta = vec![0.0; d];
        for (label, h) in &rows {
            for ((dst, &v), &m) in delta.iter_mut().zip(h).zip(&means[*label]) {
                *dst = v - m;
            }
            for i in 0..d {
                for j in i..d {
                    scatter[i * d + j].add(delta[i] * delta[j]);
                }
            }
        }
        let total = rows.len() as f64;
        let covariance = DMatrix::from_fn(d, d, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            scatter[a * d + b].value() / total
        });
        let (precision, lambda) = regularized_inverse(&covariance);
        Ok(Self {
            means,
            covariance,
            precision,
            counts,
            normalized: normalize,
            lambda,
        })
    }

    /// Assembles statistics from explicit parts, e.g. hand-built fixtures or
    /// loaded artifacts.
    pub fn from_parts(
        means: Vec<Vec<f64>>,
        covariance: DMatrix<f64>,
        precision: DMatrix<f64>,
        counts: Vec<usize>,
        normalized: bool,
        lambda: f64,
    ) -> Result<Self> {
        let d = covariance.nrows();
        if means.is_empty() {
            return Err(Error::InvalidArgument("stats need at least one class".into()));
        }
        if covariance.ncols() != d || precision.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "covariance {:?} and precision {:?} must both be {d}x{d}",
                covariance.shape(),
                precision.shape()
            )));
        }
        if let Some(m) = means.iter().find(|m| m.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "class mean of length {} in {d}-dimensional stats",
                m.len()
            )));
        }
        if counts.len() != means.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for {} classes",
                counts.len(),
                means.len()
            )));
        }
        Ok(Self {
            means,
            covariance,
            precision,
            counts,
            normalized,
            lambda,
        })
    }

    /// Statistics with a given precision and no recorded covariance; the
    /// covariance is recovered as the inverse of the precision.
    pub fn with_precision(means: Vec<Vec<f64>>, precision: DMatrix<f64>, normalized: bool) -> Result<Self> {
        let covariance = precision
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("precision is singular".into()))?;
        let counts = vec![0; means.len()];
        Self::from_parts(means, covariance, precision, counts, normalized, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Applies the feature transform the statistics were estimated under.
    pub fn prepare(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature of length {} against {}-dimensional stats",
                h.len(),
                self.dim()
            )));
        }
        if self.normalized {
            l2_normalize(h)
        } else {
            Ok(h.to_vec())
        }
    }

    /// Squared Mahalanobis distance of a prepared feature to a class mean.
    pub fn mahalanobis_sq(&self, h: &[f64], class: usize) -> f64 {
        let mean = &self.means[class];
        let d = self.dim();
        let delta: Vec<f64> = h.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut acc = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.precision[(i, j)] * delta[j];
            }
            acc += delta[i] * row;
        }
        acc.max(0.0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = self.n_classes();
        let d = self.dim();
        let means: Vec<f64> = self.means.iter().flatten().copied().collect();
        tensorio::write_tensor(dir.join("means.oods"), &Tensor::f64(vec![c, d], means)?)?;
        tensorio::write_tensor(
            dir.join("covariance.oods"),
            &Tensor::f64(vec![d, d], row_major(&self.covariance))?,
        )?;
        tensorio::write_tensor(
            dir.join("precision.oods"),
            &Tensor::f64(vec![d, d], row_major(&self.precision))?,
        )?;
        let mut side = String::new();
        writeln!(side, "kind = stats").unwrap();
        writeln!(side, "classes = {c}").unwrap();
        writeln!(side, "dim = {d}").unwrap();
        writeln!(side, "normalized = {}", self.normalized).unwrap();
        writeln!(side, "lambda = {:e}", self.lambda).unwrap();
        writeln!(side, "total = {}", self.total()).unwrap();
        let counts: Vec<String> = self.counts.iter().map(ToString::to_string).collect();
        writeln!(side, "counts = {}", counts.join(",")).unwrap();
        let path = dir.join("stats.txt");
        fs::write(&path, side).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let side_path = dir.join("stats.txt");
        if !side_path.exists() {
            return Err(Error::MissingArtifact(side_path.display().to_string()));
        }
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let kv = parse_sidecar(&text);
        let field = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("stats sidecar lacks `{k}`")))
        };
        let normalized = field("normalized")? == "true";
        let lambda: f64 = field("lambda")?
            .parse()
            .map_err(|e| Error::Parse(format!("lambda: {e}")))?;
        let counts: Vec<usize> = field("counts")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("counts: {e}")))?;

        let means_t = tensorio::read_tensor(dir.join("means.oods"))?;
        let (c, d) = (means_t.dims()[0], means_t.dims()[1]);
        let means = means_t.as_f64()?.chunks_exact(d).map(<[f64]>::to_vec).collect();
        let covariance = square_from_tensor(&tensorio::read_tensor(dir.join("covariance.oods"))?, d)?;
        let precision = square_from_tensor(&tensorio::read_tensor(dir.join("precision.oods"))?, d)?;
        if counts.len() != c {
            return Err(Error::Parse(format!("{} counts for {c} classes", counts.len())));
        }
        Self::from_parts(means, covariance, precision, counts, normalized, lambda)
    }
}

/// `(Σ + λI)⁻¹` via Cholesky, falling back to eigenvalue clipping at `λ` when
/// the factorization fails.
pub fn regularized_inverse(covariance: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let d = covariance.nrows();
    let lambda = (RIDGE_SCALE * covariance.trace() / d as f64).max(LAMBDA_FLOOR);
    let shifted = covariance + DMatrix::identity(d, d) * lambda;
    let inverse = match shifted.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => {
            let eig = covariance.clone().symmetric_eigen();
            let inv_vals = DVector::from_iterator(
                d,
                eig.eigenvalues.iter().map(|&v| 1.0 / v.max(lambda)),
            );
            &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
        }
    };
    let symmetric = (&inverse + inverse.transpose()) * 0.5;
    (symmetric, lambda)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn square_from_tensor(t: &Tensor, d: usize) -> Result<DMatrix<f64>> {
    if t.dims() != [d, d] {
        return Err(Error::DimensionMismatch(format!(
            "expected {d}x{d} matrix, found {:?}",
            t.dims()
        )));
    }
    Ok(DMatrix::from_row_slice(d, d, t.as_f64()?))
}

pub(crate) fn parse_sidecar(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixels(rows: &[&[f64]], labels: &[usize]) -> LabeledPixels {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        LabeledPixels::from_rows(&rows, labels).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = l2_normalize(&v).unwrap();
        assert!((u[0] - v[0]).abs() < 1e-15 && (u[1] - v[1]).abs() < 1e-15);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateFeature)));
    }

    #[test]
    fn zero_scatter_gives_ridge_precision() {
        let v = [1.5, -2.0, 0.25];
        let px = pixels(&[&v, &v, &v, &v], &[0, 0, 0, 0]);
        let stats = ClassStats::estimate(&px, 1, false).unwrap();
        assert_eq!(stats.means()[0], v.to_vec());
        assert!(stats.covariance().iter().all(|&x| x == 0.0));
        assert_eq!(stats.lambda(), LAMBDA_FLOOR);
        let expected = DMatrix::<f64>::identity(3, 3) / LAMBDA_FLOOR;
        assert!((stats.precision() - expected).abs().max() <= 1e-12 / LAMBDA_FLOOR);
    }

    #[test]
    fn two_class_hand_instance() {
        // class 0: (0,0), (2,0), (1,3) -> mean (1,1)
        // class 1: (5,5), (7,5), (6,2) -> mean (6,4)
        let px = pixels(
            &[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 3.0], &[5.0, 5.0], &[7.0, 5.0], &[6.0, 2.0]],
            &[0, 0, 0, 1, 1, 1],
        );
        let stats = ClassStats::estimate(&px, 2, false).unwrap();
        assert_eq!(stats.means()[0], vec![1.0, 1.0]);
        assert_eq!(stats.means()[1], vec![6.0, 4.0]);
        // deviations per class: (-1,-1), (1,-1), (0,2) for both classes
        // scatter xx = 2+2 per class, xy = (1 - 1 + 0) = 0, yy = 1+1+4 = 6
        let expected = DMatrix::from_row_slice(2, 2, &[4.0 / 6.0, 0.0, 0.0, 12.0 / 6.0]);
        assert!((stats.covariance() - expected).abs().max() < 1e-12);
        assert_eq!(stats.counts(), &[3, 3]);
    }

    #[test]
    fn singleton_class_is_rejected() {
        let px = pixels(&[&[0.0], &[1.0], &[5.0]], &[0, 0, 1]);
        let err = ClassStats::estimate(&px, 2, false).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples(_)));
    }

    #[test]
    fn non_finite_feature_is_rejected() {
        let px = pixels(&[&[0.0], &[f64::NAN], &[1.0]], &[0, 0, 0]);
        assert!(matches!(
            ClassStats::estimate(&px, 1, false),
            Err(Error::NonFinite(1))
        ));
    }

    fn random_instance(rng: &mut ChaCha8Rng, d: usize, classes: usize, n: usize) -> LabeledPixels {
        let mut set = LabeledPixels::new(d);
        for i in 0..n {
            let c = i % classes;
            let row: Vec<f64> = (0..d)
                .map(|k| rng.random_range(-1.0..1.0) + (c * 3 + k) as f64 * 0.5)
                .collect();
            set.push(&row, c).unwrap();
        }
        set
    }

    #[test]
    fn order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_instance(&mut rng, 5, 3, 600);
        let a = ClassStats::estimate(&set, 3, false).unwrap();
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng);
        let b = ClassStats::estimate(&set.select(&idx), 3, false).unwrap();
        for (ma, mb) in a.means().iter().zip(b.means()) {
            for (x, y) in ma.iter().zip(mb) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert!((a.covariance() - b.covariance()).abs().max() <= 1e-12);
    }

    #[test]
    fn pooled_covariance_is_count_weighted_scatter_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_instance(&mut rng, 4, 3, 301);
        let stats = ClassStats::estimate(&set, 3, false).unwrap();
        // per-class covariance computed independently, then weighted by N_c / N
        let mut pooled = DMatrix::<f64>::zeros(4, 4);
        for c in 0..3 {
            let rows: Vec<&[f64]> = set
                .rows()
                .zip(set.labels())
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..4).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
            let mut cov = DMatrix::<f64>::zeros(4, 4);
            for r in &rows {
                let dv = DVector::from_iterator(4, r.iter().zip(&mean).map(|(a, b)| a - b));
                cov += &dv * dv.transpose() / n;
            }
            pooled += cov * (n / set.len() as f64);
        }
        assert!((stats.covariance() - pooled).abs().max() < 1e-12);
    }

    #[test]
    fn precision_inverts_regularized_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_instance(&mut rng, 6, 2, 400);
        let stats = ClassStats::estimate(&set, 2, false).unwrap();
        let shifted = stats.covariance() + DMatrix::identity(6, 6) * stats.lambda();
        let residual = shifted * stats.precision() - DMatrix::<f64>::identity(6, 6);
        assert!(residual.norm() < 1e-8);
        assert!((stats.covariance() - stats.covariance().transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn eigen_fallback_handles_indefinite_input() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let (p, lambda) = regularized_inverse(&cov);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[(1, 1)] - 1.0 / lambda).abs() < 1e-3 / lambda);
        assert!(p.clone().cholesky().is_some());
    }

    #[test]
    fn normalized_means_lie_in_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_instance(&mut rng, 3, 3, 90);
        let stats = ClassStats::estimate(&set, 3, true).unwrap();
        for m in stats.means() {
            assert!(m.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_instance(&mut rng, 3, 2, 40);
        let stats = ClassStats::estimate(&set, 2, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        stats.save(dir.path()).unwrap();
        assert_eq!(ClassStats::load(dir.path()).unwrap(), stats);
    }
}
