//! Small-component filtering and resolution changes.

use crate::error::{Error, Result};
use crate::maps::{ClassSet, LabelMap, HEALTHY};

/// Relabels 4-connected components of anomaly pixels (known anomalies and
/// OOD) smaller than `min_area` to healthy. Neutral classes are left alone.
pub fn filter_small_components(labels: &LabelMap, classes: &ClassSet, min_area: usize) -> LabelMap {
    let mut out = labels.clone();
    if min_area <= 1 {
        return out;
    }
    let (h, w) = (labels.height(), labels.width());
    let ood = classes.ood() as i32;
    let is_anomaly = |v: i32| v == ood || (v >= 0 && classes.is_id_anomaly(v as usize));
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if seen[start] || !is_anomaly(labels.values()[start]) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        component.clear();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && is_anomaly(labels.values()[j]) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if component.len() < min_area {
            for &i in &component {
                out.values_mut()[i] = HEALTHY as i32;
            }
        }
    }
    out
}

/// Bilinear upsampling by an integer factor with half-pixel-centred
/// sampling and edge clamping.
pub fn upsample_bilinear(values: &[f64], height: usize, width: usize, factor: usize) -> Result<Vec<f64>> {
    check_grid(values.len(), height, width, factor)?;
    let (oh, ow) = (height * factor, width * factor);
    let f = factor as f64;
    let src = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, ty) = src(oy, height);
        for ox in 0..ow {
            let (x0, x1, tx) = src(ox, width);
            let at = |y: usize, x: usize| values[y * width + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(out)
}

pub fn upsample_nearest<T: Copy>(values: &[T], height: usize, width: usize, factor: usize) -> Result<Vec<T>> {
    check_grid(values.len(), height, width, factor)?;
    let ow = width * factor;
    Ok((0..height * factor * ow)
        .map(|i| values[(i / ow / factor) * width + (i % ow) / factor])
        .collect())
}

/// Label of the cell-centre pixel of each `factor × factor` block.
pub fn downsample_nearest(labels: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || !labels.height().is_multiple_of(factor) || !labels.width().is_multiple_of(factor) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} labels are not divisible by factor {factor}",
            labels.height(),
            labels.width()
        )));
    }
    let (h, w) = (labels.height() / factor, labels.width() / factor);
    let c = factor / 2;
    let values = (0..h * w)
        .map(|i| labels.get((i / w) * factor + c, (i % w) * factor + c))
        .collect();
    LabelMap::new(h, w, values)
}

fn check_grid(len: usize, height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 || height == 0 || width == 0 || len != height * width {
        return Err(Error::DimensionMismatch(format!(
            "{len} values on a {height}x{width} grid with factor {factor}"
        )));
    }
    Ok(())
}

/// Integer factor between a map side and a target side.
pub fn scale_factor(from: usize, to: usize) -> Result<usize> {
    if from == 0 || !to.is_multiple_of(from) {
        return Err(Error::DimensionMismatch(format!(
            "side {to} is not an integer multiple of {from}"
        )));
    }
    Ok(to / from)
}
