//! Slide-level area reports and sweep plot data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{ClassSet, LabelMap};
use crate::thresholds::SweepResult;

#[derive(Clone, Debug, PartialEq)]
pub struct WsiRow {
    pub wsi: String,
    pub tissue_pixels: u64,
    /// Percentage of tissue area per extended class (the no-tissue class
    /// reports 0).
    pub class_pct: Vec<f64>,
    /// Known anomalies plus OOD.
    pub anomaly_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub group: String,
    pub slides: usize,
    pub class_pct: Vec<f64>,
    pub anomaly_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsiReport {
    pub classes: ClassSet,
    pub rows: Vec<WsiRow>,
    pub groups: Vec<GroupRow>,
}

/// Aggregates extended label maps per slide. Negative labels and the
/// no-tissue class are left out of the tissue area.
pub fn wsi_report<'a>(
    maps: impl IntoIterator<Item = (&'a str, &'a LabelMap)>,
    classes: &ClassSet,
) -> Result<WsiReport> {
    let n = classes.n_extended();
    let mut counts: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (wsi, labels) in maps {
        let c = counts.entry(wsi).or_insert_with(|| vec![0; n]);
        for &v in labels.values() {
            if v < 0 {
                continue;
            }
            let v = v as usize;
            if v >= n {
                return Err(Error::UnknownLabel(v as i64));
            }
            c[v] += 1;
        }
    }
    let rows = counts
        .into_iter()
        .map(|(wsi, c)| {
            let tissue: u64 = c
                .iter()
                .enumerate()
                .filter(|&(k, _)| Some(k) != classes.no_tissue())
                .map(|(_, &v)| v)
                .sum();
            let pct = |v: u64| if tissue == 0 { 0.0 } else { 100.0 * v as f64 / tissue as f64 };
            let class_pct: Vec<f64> = (0..n)
                .map(|k| if Some(k) == classes.no_tissue() { 0.0 } else { pct(c[k]) })
                .collect();
            let anomaly = classes.anomaly_classes().iter().map(|&k| c[k]).sum();
            WsiRow {
                wsi: wsi.to_string(),
                tissue_pixels: tissue,
                class_pct,
                anomaly_pct: pct(anomaly),
            }
        })
        .collect();
    Ok(WsiReport {
        classes: classes.clone(),
        rows,
        groups: Vec::new(),
    })
}

impl WsiReport {
    /// Averages slide percentages within each group of `manifest`
    /// (slide → group); slides missing from the manifest are an error.
    pub fn with_groups(mut self, manifest: &BTreeMap<String, String>) -> Result<Self> {
        let mut acc: BTreeMap<&str, Vec<&WsiRow>> = BTreeMap::new();
        for row in &self.rows {
            let g = manifest
                .get(&row.wsi)
                .ok_or_else(|| Error::InvalidArgument(format!("slide {} is not in the group manifest", row.wsi)))?;
            acc.entry(g).or_default().push(row);
        }
        let n = self.classes.n_extended();
        self.groups = acc
            .into_iter()
            .map(|(g, rows)| {
                let k = rows.len() as f64;
                GroupRow {
                    group: g.to_string(),
                    slides: rows.len(),
                    class_pct: (0..n).map(|c| rows.iter().map(|r| r.class_pct[c]).sum::<f64>() / k).collect(),
                    anomaly_pct: rows.iter().map(|r| r.anomaly_pct).sum::<f64>() / k,
                }
            })
            .collect();
        Ok(self)
    }

    fn class_header(&self) -> Vec<String> {
        (0..self.classes.n_extended())
            .map(|c| {
                if c == self.classes.ood() {
                    "pct_ood".to_string()
                } else {
                    format!("pct_class_{c}")
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["wsi".to_string(), "tissue_pixels".to_string()];
        header.extend(self.class_header());
        header.push("pct_anomaly".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.wsi.clone(), r.tissue_pixels.to_string()];
            rec.extend(r.class_pct.iter().map(|v| v.to_string()));
            rec.push(r.anomaly_pct.to_string());
            w.write_record(&rec)?;
        }
        finish(w)
    }

    pub fn groups_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string(), "slides".to_string()];
        header.extend(self.class_header());
        header.push("pct_anomaly".into());
        w.write_record(&header)?;
        for g in &self.groups {
            let mut rec = vec![g.group.clone(), g.slides.to_string()];
            rec.extend(g.class_pct.iter().map(|v| v.to_string()));
            rec.push(g.anomaly_pct.to_string());
            w.write_record(&rec)?;
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Parse(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Reads a two-column `wsi,group` CSV.
pub fn read_group_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse(format!("{}: expected wsi,group rows", path.display())));
        }
        out.insert(rec[0].to_string(), rec[1].to_string());
    }
    Ok(out)
}

pub const SWEEP_HEADER: [&str; 6] = ["p", "method", "mode", "fnr_bar", "fpr", "ber"];

/// One CSV row per (p, method, mode); floats use shortest round-trip text.
pub fn emit_sweep_plot_data(results: &[SweepResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for r in results {
        let method = r.method.map_or("", |m| m.tag());
        for row in &r.rows {
            w.write_record([
                row.p.to_string(),
                method.to_string(),
                r.mode.tag().to_string(),
                row.fnr_bar.to_string(),
                row.fpr.to_string(),
                row.ber.to_string(),
            ])?;
        }
    }
    finish(w)
}
