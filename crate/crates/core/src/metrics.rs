//! Evaluation on the extended confusion matrix.
//!
//! Rows are ground truth, columns are predictions, both indexed by extended
//! label: ID classes `0..n_id` (0 = healthy) followed by the joint OOD label
//! `n_id`. Anomaly rates follow the set definitions: an anomaly pixel counts
//! as detected when predicted as anything other than healthy, so FNR̄ does not
//! care which anomaly type was predicted. Neutral classes are segmented but
//! their ground-truth rows are left out of every anomaly rate.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::maps::{ClassSet, LabelMap, HEALTHY, UNLABELED};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedConfusion {
    classes: ClassSet,
    counts: Vec<u64>,
}

impl ExtendedConfusion {
    pub fn new(classes: ClassSet) -> Self {
        let n = classes.n_extended();
        Self {
            classes,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(classes: ClassSet, counts: Vec<u64>) -> Result<Self> {
        let n = classes.n_extended();
        if counts.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{n}x{n} confusion needs {} counts, got {}",
                n * n,
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn size(&self) -> usize {
        self.classes.n_extended()
    }

    #[inline]
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.size() + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize, n: u64) {
        let size = self.size();
        self.counts[truth * size + predicted] += n;
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        let n = self.size();
        self.counts[truth * n..(truth + 1) * n].iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Records one pixel pair; `UNLABELED` truth is skipped.
    pub fn record(&mut self, truth: i32, predicted: i32) -> Result<()> {
        if truth == UNLABELED {
            return Ok(());
        }
        let n = self.size() as i32;
        if !(0..n).contains(&truth) {
            return Err(Error::UnknownLabel(truth as i64));
        }
        if !(0..n).contains(&predicted) {
            return Err(Error::UnknownLabel(predicted as i64));
        }
        self.add(truth as usize, predicted as usize, 1);
        Ok(())
    }

    pub fn merge(&mut self, other: &ExtendedConfusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch("confusion matrices use different class sets".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Counts `(truth, prediction)` pixel pairs over one map.
pub fn accumulate(classes: &ClassSet, truth: &LabelMap, predicted: &LabelMap) -> Result<ExtendedConfusion> {
    if truth.height() != predicted.height() || truth.width() != predicted.width() {
        return Err(Error::DimensionMismatch(format!(
            "truth is {}x{} but prediction is {}x{}",
            truth.height(),
            truth.width(),
            predicted.height(),
            predicted.width()
        )));
    }
    accumulate_flat(classes, truth.values(), predicted.values())
}

pub fn accumulate_flat(classes: &ClassSet, truth: &[i32], predicted: &[i32]) -> Result<ExtendedConfusion> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} truth labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ExtendedConfusion::new(classes.clone());
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Class-averaged false-negative rate over the known anomaly classes and the
/// OOD class, in percent. Classes absent from the ground truth are skipped.
pub fn fnr_bar(cm: &ExtendedConfusion) -> Result<f64> {
    let mut rates = Vec::new();
    for c in cm.classes.anomaly_classes() {
        let total = cm.row_total(c);
        if total == 0 {
            warn!("anomaly class {c} has no ground-truth pixels; excluded from FNR average");
            continue;
        }
        rates.push(pct(cm.get(c, HEALTHY), total));
    }
    if rates.is_empty() {
        return Err(Error::NoAnomalyPixels);
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Healthy pixels predicted as anything but healthy, in percent.
pub fn fpr(cm: &ExtendedConfusion) -> Result<f64> {
    let total = cm.row_total(HEALTHY);
    if total == 0 {
        return Err(Error::NoHealthyPixels);
    }
    Ok(pct(total - cm.get(HEALTHY, HEALTHY), total))
}

pub fn ber(fnr_bar: f64, fpr: f64) -> f64 {
    (fnr_bar + fpr) / 2.0
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HealthyBreakdown {
    pub as_id_anomaly: f64,
    pub as_ood: f64,
    pub as_neutral: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdAnomalyBreakdown {
    pub misclassified: f64,
    pub as_other_id_anomaly: f64,
    pub as_ood: f64,
    pub as_healthy: f64,
    pub as_neutral: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OodBreakdown {
    pub misclassified: f64,
    pub as_id_anomaly: f64,
    pub as_healthy: f64,
    pub as_neutral: f64,
}

/// All rates in percent. Categories without ground-truth pixels report 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub fnr_bar: f64,
    pub fpr: f64,
    pub ber: f64,
    pub healthy: HealthyBreakdown,
    pub id_anomaly: IdAnomalyBreakdown,
    pub ood: OodBreakdown,
    pub has_neutral: bool,
}

pub fn breakdown(cm: &ExtendedConfusion) -> Result<MetricReport> {
    let cs = &cm.classes;
    let ood = cs.ood();
    let n = cm.size();
    let fnr = fnr_bar(cm)?;
    let fp = fpr(cm)?;

    let healthy_total = cm.row_total(HEALTHY);
    let mut h_id = 0;
    let mut h_ood = 0;
    let mut h_neutral = 0;
    for p in 0..n {
        let v = cm.get(HEALTHY, p);
        if p == ood {
            h_ood += v;
        } else if cs.is_id_anomaly(p) {
            h_id += v;
        } else if cs.is_neutral(p) {
            h_neutral += v;
        }
    }

    let mut a_total = 0;
    let mut a_other = 0;
    let mut a_ood = 0;
    let mut a_healthy = 0;
    let mut a_neutral = 0;
    for t in (0..cs.n_id()).filter(|&t| cs.is_id_anomaly(t)) {
        a_total += cm.row_total(t);
        for p in 0..n {
            let v = cm.get(t, p);
            if p == t {
                continue;
            } else if p == ood {
                a_ood += v;
            } else if p == HEALTHY {
                a_healthy += v;
            } else if cs.is_neutral(p) {
                a_neutral += v;
            } else {
                a_other += v;
            }
        }
    }

    let o_total = cm.row_total(ood);
    let mut o_id = 0;
    let mut o_healthy = 0;
    let mut o_neutral = 0;
    for p in 0..n {
        let v = cm.get(ood, p);
        if p == HEALTHY {
            o_healthy += v;
        } else if cs.is_id_anomaly(p) {
            o_id += v;
        } else if cs.is_neutral(p) {
            o_neutral += v;
        }
    }

    Ok(MetricReport {
        fnr_bar: fnr,
        fpr: fp,
        ber: ber(fnr, fp),
        healthy: HealthyBreakdown {
            as_id_anomaly: pct(h_id, healthy_total),
            as_ood: pct(h_ood, healthy_total),
            as_neutral: pct(h_neutral, healthy_total),
        },
        id_anomaly: IdAnomalyBreakdown {
            misclassified: pct(a_other + a_ood + a_healthy + a_neutral, a_total),
            as_other_id_anomaly: pct(a_other, a_total),
            as_ood: pct(a_ood, a_total),
            as_healthy: pct(a_healthy, a_total),
            as_neutral: pct(a_neutral, a_total),
        },
        ood: OodBreakdown {
            misclassified: pct(o_id + o_healthy + o_neutral, o_total),
            as_id_anomaly: pct(o_id, o_total),
            as_healthy: pct(o_healthy, o_total),
            as_neutral: pct(o_neutral, o_total),
        },
        has_neutral: !cs.neutral().is_empty(),
    })
}

/// One table row: block name, row name, value.
pub type ReportRow = (&'static str, &'static str, f64);

impl MetricReport {
    /// Rows in table order: Anomaly, Healthy, ID-Anomaly, OOD-Anomaly, then BER.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = vec![
            ("Anomaly", "FNR_bar", self.fnr_bar),
            ("Healthy", "FPR", self.fpr),
            ("Healthy", "Misclass. as ID-anomaly", self.healthy.as_id_anomaly),
            ("Healthy", "Misclass. as OOD-anomaly", self.healthy.as_ood),
        ];
        if self.has_neutral {
            rows.push(("Healthy", "Misclass. as neutral", self.healthy.as_neutral));
        }
        rows.extend([
            ("ID-Anomaly", "Misclassified", self.id_anomaly.misclassified),
            ("ID-Anomaly", "Misclass. as ID-anomaly", self.id_anomaly.as_other_id_anomaly),
            ("ID-Anomaly", "Misclass. as OOD-anomaly", self.id_anomaly.as_ood),
            ("ID-Anomaly", "Misclass. as healthy", self.id_anomaly.as_healthy),
        ]);
        if self.has_neutral {
            rows.push(("ID-Anomaly", "Misclass. as neutral", self.id_anomaly.as_neutral));
        }
        rows.extend([
            ("OOD-Anomaly", "Misclassified", self.ood.misclassified),
            ("OOD-Anomaly", "Misclass. as ID-anomaly", self.ood.as_id_anomaly),
            ("OOD-Anomaly", "Misclass. as healthy", self.ood.as_healthy),
        ]);
        if self.has_neutral {
            rows.push(("OOD-Anomaly", "Misclass. as neutral", self.ood.as_neutral));
        }
        rows.push(("Summary", "BER", self.ber));
        rows
    }

    fn values(&self) -> [f64; 15] {
        [
            self.fnr_bar,
            self.fpr,
            self.ber,
            self.healthy.as_id_anomaly,
            self.healthy.as_ood,
            self.healthy.as_neutral,
            self.id_anomaly.misclassified,
            self.id_anomaly.as_other_id_anomaly,
            self.id_anomaly.as_ood,
            self.id_anomaly.as_healthy,
            self.id_anomaly.as_neutral,
            self.ood.misclassified,
            self.ood.as_id_anomaly,
            self.ood.as_healthy,
            self.ood.as_neutral,
        ]
    }

    fn from_values(v: [f64; 15], has_neutral: bool) -> Self {
        Self {
            fnr_bar: v[0],
            fpr: v[1],
            ber: v[2],
            healthy: HealthyBreakdown {
                as_id_anomaly: v[3],
                as_ood: v[4],
                as_neutral: v[5],
            },
            id_anomaly: IdAnomalyBreakdown {
                misclassified: v[6],
                as_other_id_anomaly: v[7],
                as_ood: v[8],
                as_healthy: v[9],
                as_neutral: v[10],
            },
            ood: OodBreakdown {
                misclassified: v[11],
                as_id_anomaly: v[12],
                as_healthy: v[13],
                as_neutral: v[14],
            },
            has_neutral,
        }
    }
}

/// Mean and standard error of the mean across trained models.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: MetricReport,
    pub stderr: MetricReport,
    /// False for a single report, where the standard error is reported as 0.
    pub stderr_defined: bool,
}

pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<SeedSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    let n = reports.len();
    let has_neutral = reports.iter().any(|r| r.has_neutral);
    let vals: Vec<[f64; 15]> = reports.iter().map(MetricReport::values).collect();
    let mut mean = [0.0; 15];
    let mut se = [0.0; 15];
    for k in 0..15 {
        mean[k] = vals.iter().map(|v| v[k]).sum::<f64>() / n as f64;
        if n > 1 {
            let var = vals.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1) as f64;
            se[k] = var.sqrt() / (n as f64).sqrt();
        }
    }
    Ok(SeedSummary {
        n,
        mean: MetricReport::from_values(mean, has_neutral),
        stderr: MetricReport::from_values(se, has_neutral),
        stderr_defined: n > 1,
    })
}

/// Human-readable table, one column per labeled report, values with two
/// decimals.
pub fn format_table(columns: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    if columns.is_empty() {
        return out;
    }
    let rows = columns[0].1.rows();
    write!(out, "{:<12} {:<26}", "", "").unwrap();
    for (label, _) in columns {
        write!(out, " {label:>16}").unwrap();
    }
    out.push('\n');
    let mut last_block = "";
    for (i, (block, name, _)) in rows.iter().enumerate() {
        let shown = if *block == last_block { "" } else { block };
        last_block = block;
        write!(out, "{shown:<12} {name:<26}").unwrap();
        for (_, report) in columns {
            write!(out, " {:>16.2}", report.rows()[i].2).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn format_summary_table(columns: &[(String, SeedSummary)]) -> String {
    let mut out = String::new();
    if columns.is_empty() {
        return out;
    }
    let rows = columns[0].1.mean.rows();
    write!(out, "{:<12} {:<26}", "", "").unwrap();
    for (label, _) in columns {
        write!(out, " {label:>16}").unwrap();
    }
    out.push('\n');
    let mut last_block = "";
    for (i, (block, name, _)) in rows.iter().enumerate() {
        let shown = if *block == last_block { "" } else { block };
        last_block = block;
        write!(out, "{shown:<12} {name:<26}").unwrap();
        for (_, s) in columns {
            let cell = format!("{:.2}±{:.2}", s.mean.rows()[i].2, s.stderr.rows()[i].2);
            write!(out, " {cell:>16}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// CSV with one row per metric and one column per labeled report.
pub fn reports_csv(columns: &[(String, MetricReport)]) -> String {
    let mut out = String::from("block,metric");
    for (label, _) in columns {
        write!(out, ",{label}").unwrap();
    }
    out.push('\n');
    if let Some((_, first)) = columns.first() {
        for (i, (block, name, _)) in first.rows().iter().enumerate() {
            write!(out, "{block},{name}").unwrap();
            for (_, report) in columns {
                write!(out, ",{}", report.rows()[i].2).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Mean IoU over classes present in the ground truth; unlabeled pixels are
/// ignored.
pub fn mean_iou(truth: &LabelMap, predicted: &LabelMap, classes: usize) -> Result<f64> {
    if truth.height() != predicted.height() || truth.width() != predicted.width() {
        return Err(Error::DimensionMismatch("truth and prediction sizes differ".into()));
    }
    let mut t = Vec::new();
    let mut p = Vec::new();
    for (&a, &b) in truth.values().iter().zip(predicted.values()) {
        if a == UNLABELED {
            continue;
        }
        if a < 0 || b < 0 {
            return Err(Error::UnknownLabel(a.min(b) as i64));
        }
        t.push(a as usize);
        p.push(b as usize);
    }
    mean_iou_flat(&t, &p, classes)
}

pub fn mean_iou_flat(truth: &[usize], predicted: &[usize], classes: usize) -> Result<f64> {
    let mut inter = vec![0u64; classes];
    let mut t_count = vec![0u64; classes];
    let mut p_count = vec![0u64; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes {
            return Err(Error::UnknownLabel(t as i64));
        }
        if p >= classes {
            return Err(Error::UnknownLabel(p as i64));
        }
        t_count[t] += 1;
        p_count[p] += 1;
        if t == p {
            inter[t] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| t_count[c] > 0)
        .map(|c| inter[c] as f64 / (t_count[c] + p_count[c] - inter[c]) as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::NoSupervisedPixels);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k1() -> ClassSet {
        ClassSet::new(2).unwrap()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let truth = [0, 1, 2, 1, 0];
        let cm = accumulate_flat(&k1(), &truth, &truth).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        let r = breakdown(&cm).unwrap();
        assert!(r.rows().iter().all(|(_, _, v)| *v == 0.0));
    }

    #[test]
    fn hand_count_with_one_false_positive() {
        let mut truth = vec![0; 10];
        truth.extend([1; 10]);
        let mut pred = vec![0; 9];
        pred.push(2);
        pred.extend([1; 10]);
        let cm = accumulate_flat(&k1(), &truth, &pred).unwrap();
        assert_eq!(cm.row_total(0), 10);
        assert_eq!(cm.row_total(1), 10);
        assert_eq!(cm.row_total(0) - cm.get(0, 0), 1);
        assert_eq!(fpr(&cm).unwrap(), 10.0);
    }

    #[test]
    fn unlabeled_only_gives_zero_matrix() {
        let cm = accumulate_flat(&k1(), &[UNLABELED; 4], &[0, 1, 2, 0]).unwrap();
        assert!(cm.counts().iter().all(|&c| c == 0));
        assert!(matches!(fnr_bar(&cm), Err(Error::NoAnomalyPixels)));
    }

    #[test]
    fn unknown_label_is_rejected() {
        assert!(matches!(
            accumulate_flat(&k1(), &[5], &[0]),
            Err(Error::UnknownLabel(5))
        ));
    }

    #[test]
    fn fnr_is_prevalence_independent() {
        // anomaly 1: 1000 pixels, none missed; anomaly 2: 2 pixels, one missed
        let cs = ClassSet::new(3).unwrap();
        let mut cm = ExtendedConfusion::new(cs);
        cm.add(0, 0, 10);
        cm.add(1, 1, 1000);
        cm.add(2, 2, 1);
        cm.add(2, 0, 1);
        // OOD class has no pixels and is skipped
        assert_eq!(fnr_bar(&cm).unwrap(), 25.0);
    }

    #[test]
    fn all_missed_is_hundred_percent() {
        let cm = accumulate_flat(&k1(), &[0, 1, 1, 2], &[0, 0, 0, 0]).unwrap();
        assert_eq!(fnr_bar(&cm).unwrap(), 100.0);
    }

    #[test]
    fn fpr_and_ber_examples() {
        let mut cm = ExtendedConfusion::new(k1());
        cm.add(0, 0, 99);
        cm.add(0, 2, 1);
        cm.add(1, 1, 5);
        assert_eq!(fpr(&cm).unwrap(), 1.0);
        assert!((ber(0.16, 0.35) - 0.255).abs() < 1e-15);
        assert_eq!(ber(0.0, 0.0), 0.0);
    }

    #[test]
    fn id_anomaly_breakdown_hand_instance() {
        let mut cm = ExtendedConfusion::new(k1());
        cm.add(0, 0, 5);
        cm.add(1, 1, 8);
        cm.add(1, 2, 1);
        cm.add(1, 0, 1);
        let r = breakdown(&cm).unwrap();
        assert_eq!(r.id_anomaly.misclassified, 20.0);
        assert_eq!(r.id_anomaly.as_ood, 10.0);
        assert_eq!(r.id_anomaly.as_healthy, 10.0);
        assert_eq!(r.id_anomaly.as_other_id_anomaly, 0.0);
    }

    #[test]
    fn table_follows_block_order() {
        let r = MetricReport::default();
        let blocks: Vec<&str> = r.rows().iter().map(|(b, _, _)| *b).collect();
        let mut dedup = blocks.clone();
        dedup.dedup();
        assert_eq!(dedup, vec!["Anomaly", "Healthy", "ID-Anomaly", "OOD-Anomaly", "Summary"]);
        let table = format_table(&[("Adaptive-Maha+".into(), r)]);
        assert!(table.contains("0.00"));
    }

    #[test]
    fn mean_iou_examples() {
        let t = [0, 0, 1];
        assert_eq!(mean_iou_flat(&t, &t, 2).unwrap(), 1.0);
        // class 0: intersection 1, union 2; class 1: 1/1; class 2 absent from truth
        let truth = [0, 0, 1];
        let pred = [0, 2, 1];
        assert_eq!(mean_iou_flat(&truth, &pred, 3).unwrap(), 0.75);
        assert_eq!(mean_iou_flat(&[0, 0], &[1, 1], 2).unwrap(), 0.0);
    }

    #[test]
    fn seed_aggregation() {
        let mut a = MetricReport::default();
        let mut b = MetricReport::default();
        a.fpr = 0.1;
        b.fpr = 0.2;
        let s = aggregate_seeds(&[a.clone(), b]).unwrap();
        assert!((s.mean.fpr - 0.15).abs() < 1e-15);
        assert!((s.stderr.fpr - 0.05).abs() < 1e-15);
        let same = aggregate_seeds(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same.stderr.fpr, 0.0);
        let single = aggregate_seeds(&[a]).unwrap();
        assert!(!single.stderr_defined);
        assert_eq!(single.stderr.fpr, 0.0);
    }
}
