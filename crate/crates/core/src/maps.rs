//! In-memory map types shared by every stage of the pipeline.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorio::{self, Tensor};

/// Label value for pixels without annotation.
pub const UNLABELED: i32 = -1;

/// Channel-first dense map (`[channels, height, width]`), used for features,
/// logits and probabilities alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub type FeatureMap = ChannelMap;
pub type LogitMap = ChannelMap;
pub type ProbMap = ChannelMap;

impl ChannelMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{channels}x{height}x{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a map from pixel-major rows (`height * width` rows of `channels`).
    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<f64>]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} map needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        let channels = pixels.first().map_or(0, Vec::len);
        let mut map = Self::zeros(channels.max(1), height, width);
        if channels == 0 {
            return Err(Error::DimensionMismatch("pixels have no channels".into()));
        }
        for (i, px) in pixels.iter().enumerate() {
            if px.len() != channels {
                return Err(Error::DimensionMismatch(format!(
                    "pixel {i} has {} channels, expected {channels}",
                    px.len()
                )));
            }
            map.set_pixel(i / width, i % width, px);
        }
        Ok(map)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x) as f64).collect()
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, values: &[f64]) {
        for (c, &v) in values.iter().enumerate() {
            self.set(c, y, x, v as f32);
        }
    }

    /// Pixel vectors in row-major pixel order.
    pub fn pixels(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.height * self.width).map(move |i| self.pixel(i / self.width, i % self.width))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("map dims are validated at construction")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "channel map needs rank 3, got dims {dims:?}"
            )));
        }
        let data = tensor.as_f32()?.to_vec();
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(tensorio::read_tensor(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        tensorio::write_tensor(path, &self.to_tensor())
    }
}

/// Per-pixel class identifiers, `UNLABELED` for missing annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<i32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<i32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: i32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [i32] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: i32) {
        self.values[y * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::i32(vec![self.height, self.width], self.values.clone())
            .expect("label dims are validated at construction")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "label map needs rank 2, got dims {dims:?}"
            )));
        }
        Self::new(dims[0], dims[1], tensor.as_i32()?.to_vec())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(tensorio::read_tensor(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        tensorio::write_tensor(path, &self.to_tensor())
    }
}

/// Class vocabulary: `n_id` in-distribution classes with class 0 healthy,
/// optional neutral classes (segmented but excluded from anomaly accounting),
/// and one extended OOD label equal to `n_id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet {
    n_id: usize,
    neutral: Vec<usize>,
    no_tissue: Option<usize>,
}

pub const HEALTHY: usize = 0;

impl ClassSet {
    pub fn new(n_id: usize) -> Result<Self> {
        if n_id < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 ID classes, got {n_id}"
            )));
        }
        Ok(Self {
            n_id,
            neutral: Vec::new(),
            no_tissue: None,
        })
    }

    pub fn with_neutral(mut self, neutral: Vec<usize>) -> Result<Self> {
        for &c in &neutral {
            if c == HEALTHY || c >= self.n_id {
                return Err(Error::InvalidArgument(format!(
                    "neutral class {c} must be a non-healthy ID class"
                )));
            }
        }
        let mut neutral = neutral;
        neutral.sort_unstable();
        neutral.dedup();
        self.neutral = neutral;
        Ok(self)
    }

    /// Marks one neutral class as background, excluded from tissue area.
    pub fn with_no_tissue(mut self, class: usize) -> Result<Self> {
        if class == HEALTHY || class >= self.n_id {
            return Err(Error::InvalidArgument(format!(
                "no-tissue class {class} must be a non-healthy ID class"
            )));
        }
        if !self.neutral.contains(&class) {
            self.neutral.push(class);
            self.neutral.sort_unstable();
        }
        self.no_tissue = Some(class);
        Ok(self)
    }

    pub fn n_id(&self) -> usize {
        self.n_id
    }

    /// Extended label value for OOD predictions and OOD ground truth.
    pub fn ood(&self) -> usize {
        self.n_id
    }

    pub fn n_extended(&self) -> usize {
        self.n_id + 1
    }

    pub fn neutral(&self) -> &[usize] {
        &self.neutral
    }

    pub fn no_tissue(&self) -> Option<usize> {
        self.no_tissue
    }

    pub fn is_neutral(&self, c: usize) -> bool {
        self.neutral.contains(&c)
    }

    pub fn is_id_anomaly(&self, c: usize) -> bool {
        c != HEALTHY && c < self.n_id && !self.is_neutral(c)
    }

    /// Known anomaly classes followed by the OOD class.
    pub fn anomaly_classes(&self) -> Vec<usize> {
        (1..self.n_id)
            .filter(|&c| !self.is_neutral(c))
            .chain(std::iter::once(self.ood()))
            .collect()
    }
}

/// Labeled feature vectors flattened out of their maps, in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPixels {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledPixels {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut set = Self::new(dim);
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (row, &l) in rows.iter().zip(labels) {
            set.push(row, l)?;
        }
        Ok(set)
    }

    /// Collects all pixels whose label lies in `0..n_classes`, skipping
    /// `UNLABELED` and anything at or above `n_classes` (e.g. OOD truth).
    pub fn from_maps<'a>(
        maps: impl IntoIterator<Item = (&'a FeatureMap, &'a LabelMap)>,
        n_classes: usize,
    ) -> Result<Self> {
        let mut set: Option<Self> = None;
        for (features, labels) in maps {
            check_geometry(features, labels)?;
            let set = set.get_or_insert_with(|| Self::new(features.channels()));
            if set.dim != features.channels() {
                return Err(Error::DimensionMismatch(format!(
                    "feature dim {} differs from earlier maps ({})",
                    features.channels(),
                    set.dim
                )));
            }
            for y in 0..labels.height() {
                for x in 0..labels.width() {
                    let l = labels.get(y, x);
                    if l < 0 || l as usize >= n_classes {
                        continue;
                    }
                    set.push(&features.pixel(y, x), l as usize)?;
                }
            }
        }
        Ok(set.unwrap_or_default())
    }

    pub fn push(&mut self, features: &[f64], label: usize) -> Result<()> {
        if self.features.is_empty() && self.labels.is_empty() && self.dim == 0 {
            self.dim = features.len();
        }
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "feature of length {} in a set of dim {}",
                features.len(),
                self.dim
            )));
        }
        self.features.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &LabeledPixels) -> Result<()> {
        for i in 0..other.len() {
            self.push(other.row(i), other.labels[i])?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim.max(1))
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.labels {
            if l < n_classes {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Subset by index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in indices {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

pub fn check_geometry(features: &ChannelMap, labels: &LabelMap) -> Result<()> {
    if features.height() != labels.height() || features.width() != labels.width() {
        return Err(Error::DimensionMismatch(format!(
            "features are {}x{} but labels are {}x{}",
            features.height(),
            features.width(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
