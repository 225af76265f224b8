//! Linear segmentation head `z = W h + b` trained with class-weighted
//! cross-entropy by mini-batch gradient descent.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{argmax, ChannelMap, FeatureMap, LabeledPixels, LogitMap, ProbMap};
use crate::metrics;
use crate::numeric::{log_sum_exp, softmax, CompensatedSum};
use crate::tensorio::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        Self::new(classes, dim, vec![0.0; classes * dim], vec![0.0; classes])
    }

    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a head needs at least 2 classes, got {classes}"
            )));
        }
        if dim == 0 || weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::DimensionMismatch(format!(
                "head {classes}x{dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("head parameters must be finite".into()));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "feature of length {} for a head of dim {}",
                h.len(),
                self.dim
            )));
        }
        Ok(self.logits_unchecked(h))
    }

    fn logits_unchecked(&self, h: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, h: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(h)?))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tensorio::write_tensor(
            dir.join("weights.oods"),
            &Tensor::f64(vec![self.classes, self.dim], self.weights.clone())?,
        )?;
        tensorio::write_tensor(
            dir.join("bias.oods"),
            &Tensor::f64(vec![1, self.classes], self.bias.clone())?,
        )?;
        let side = format!("kind = head\nclasses = {}\ndim = {}\n", self.classes, self.dim);
        let path = dir.join("head.txt");
        fs::write(&path, side).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let w_path = dir.join("weights.oods");
        if !w_path.exists() {
            return Err(Error::MissingArtifact(w_path.display().to_string()));
        }
        let w = tensorio::read_tensor(&w_path)?;
        let b = tensorio::read_tensor(dir.join("bias.oods"))?;
        let (classes, dim) = (w.dims()[0], w.dims()[1]);
        if w.dims().len() != 2 || b.dims() != [1, classes] {
            return Err(Error::DimensionMismatch(format!(
                "head weights {:?} and bias {:?} disagree",
                w.dims(),
                b.dims()
            )));
        }
        Self::new(classes, dim, w.as_f64()?.to_vec(), b.as_f64()?.to_vec())
    }
}

/// Per-pixel logits and softmax probabilities.
pub fn infer(head: &LinearHead, features: &FeatureMap) -> Result<(LogitMap, ProbMap)> {
    if features.channels() != head.dim {
        return Err(Error::DimensionMismatch(format!(
            "features have {} channels, head expects {}",
            features.channels(),
            head.dim
        )));
    }
    let (h, w) = (features.height(), features.width());
    let mut logits = ChannelMap::zeros(head.classes, h, w);
    let mut probs = ChannelMap::zeros(head.classes, h, w);
    for y in 0..h {
        for x in 0..w {
            let z = head.logits_unchecked(&features.pixel(y, x));
            logits.set_pixel(y, x, &z);
            probs.set_pixel(y, x, &softmax(&z));
        }
    }
    Ok((logits, probs))
}

/// Inverse-frequency class weights rescaled to mean 1.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes to weight".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroCountClass(c));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    InverseFrequency,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 3e-4,
            batch_size: 256,
            lr_decay: 0.5,
            patience: 2,
            seed: 0,
            weighting: ClassWeighting::InverseFrequency,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument("lr decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to `W` (row-major) and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Weighted cross-entropy `Σ w_y (−log p_y) / Σ w_y` over the given pixels.
/// `None` weights mean the plain mean cross-entropy.
pub fn cross_entropy(head: &LinearHead, pixels: &LabeledPixels, weights: Option<&[f64]>) -> Result<f64> {
    let all: Vec<usize> = (0..pixels.len()).collect();
    Ok(loss_and_gradient_on(head, pixels, weights, &all, false)?.0)
}

pub fn loss_and_gradient(
    head: &LinearHead,
    pixels: &LabeledPixels,
    weights: Option<&[f64]>,
) -> Result<(f64, Gradient)> {
    let all: Vec<usize> = (0..pixels.len()).collect();
    let (loss, grad) = loss_and_gradient_on(head, pixels, weights, &all, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn loss_and_gradient_on(
    head: &LinearHead,
    pixels: &LabeledPixels,
    weights: Option<&[f64]>,
    indices: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<Gradient>)> {
    if pixels.dim() != head.dim {
        return Err(Error::DimensionMismatch(format!(
            "pixels have dim {}, head expects {}",
            pixels.dim(),
            head.dim
        )));
    }
    if indices.is_empty() {
        return Err(Error::NoSupervisedPixels);
    }
    let (c, d) = (head.classes, head.dim);
    let mut loss = CompensatedSum::default();
    let mut norm = CompensatedSum::default();
    let mut gw = vec![0.0; if with_grad { c * d } else { 0 }];
    let mut gb = vec![0.0; if with_grad { c } else { 0 }];
    for &i in indices {
        let y = pixels.labels()[i];
        if y >= c {
            return Err(Error::ClassOutOfRange(y));
        }
        let w = weights.map_or(1.0, |ws| ws[y]);
        let h = pixels.row(i);
        let z = head.logits_unchecked(h);
        loss.add(w * (log_sum_exp(&z) - z[y]));
        norm.add(w);
        if with_grad {
            let p = softmax(&z);
            for k in 0..c {
                let g = w * (p[k] - if k == y { 1.0 } else { 0.0 });
                gb[k] += g;
                for (dst, &x) in gw[k * d..(k + 1) * d].iter_mut().zip(h) {
                    *dst += g * x;
                }
            }
        }
    }
    let total = norm.value();
    let grad = with_grad.then(|| Gradient {
        weights: gw.into_iter().map(|g| g / total).collect(),
        bias: gb.into_iter().map(|g| g / total).collect(),
    });
    Ok((loss.value() / total, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_iou: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedHead {
    pub head: LinearHead,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains a head on `train`, keeping the parameters with the best validation
/// mean IoU. The learning rate is multiplied by `lr_decay` whenever the
/// validation loss fails to improve for `patience` consecutive epochs.
pub fn train(
    train: &LabeledPixels,
    val: &LabeledPixels,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::NoSupervisedPixels);
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set has no labeled pixels".into()));
    }
    if let Some(&bad) = train.labels().iter().chain(val.labels()).find(|&&l| l >= classes) {
        return Err(Error::ClassOutOfRange(bad));
    }
    let counts = train.class_counts(classes);
    let weights = match cfg.weighting {
        ClassWeighting::InverseFrequency => class_weights(&counts)?,
        ClassWeighting::Uniform => {
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(Error::ZeroCountClass(c));
            }
            vec![1.0; classes]
        }
    };

    let order = canonical_order(train);
    let standard = Standardizer::fit(train, &order);
    let (train, val) = (&standard.apply(train)?, &standard.apply(val)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = LinearHead::zeros(classes, train.dim())?;
    let mut lr = cfg.learning_rate;
    let mut best_val_loss = f64::INFINITY;
    let mut stale = 0;
    let mut best: Option<(f64, usize, LinearHead)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut epoch_order = order.clone();
        epoch_order.shuffle(&mut rng);
        for batch in epoch_order.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_gradient_on(&head, train, Some(&weights), batch, true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grad = grad.expect("gradient requested");
            for (w, g) in head.weights.iter_mut().zip(&grad.weights) {
                *w -= lr * g;
            }
            for (b, g) in head.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
        }
        let train_loss = cross_entropy(&head, train, Some(&weights))?;
        let val_loss = cross_entropy(&head, val, Some(&weights))?;
        if !train_loss.is_finite() || !val_loss.is_finite() || head.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let predicted: Vec<usize> = val
            .rows()
            .map(|h| argmax(&head.logits_unchecked(h)))
            .collect();
        let miou = metrics::mean_iou_flat(val.labels(), &predicted, classes)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_mean_iou: miou,
            learning_rate: lr,
        });
        if best.as_ref().is_none_or(|(m, _, _)| miou > *m) {
            best = Some((miou, epoch, head.clone()));
        }
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr *= cfg.lr_decay;
                stale = 0;
            }
        }
    }
    let (_, best_epoch, head) = best.expect("at least one epoch ran");
    Ok(TrainedHead {
        head: standard.unfold(&head),
        best_epoch,
        history,
    })
}

/// Per-dimension centring and scaling of the training features. Training
/// runs in standardized coordinates, which keeps plain SGD well conditioned
/// when embeddings share a large common offset; the trained head is mapped
/// back to raw coordinates.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Moments are accumulated in canonical order so the result does not
    /// depend on input order.
    fn fit(pixels: &LabeledPixels, order: &[usize]) -> Self {
        let (d, n) = (pixels.dim(), order.len() as f64);
        let mut mean = vec![0.0; d];
        for &i in order {
            for (m, v) in mean.iter_mut().zip(pixels.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in order {
            for ((s, v), m) in var.iter_mut().zip(pixels.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(&s, m)| {
                let sd = (s / n).sqrt();
                if sd.is_finite() && sd > 1e-12 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, pixels: &LabeledPixels) -> Result<LabeledPixels> {
        let mut out = LabeledPixels::new(pixels.dim());
        let mut z = vec![0.0; pixels.dim()];
        for (row, &l) in pixels.rows().zip(pixels.labels()) {
            for (j, v) in row.iter().enumerate() {
                z[j] = (v - self.mean[j]) / self.scale[j];
            }
            out.push(&z, l)?;
        }
        Ok(out)
    }

    /// `W z + b` with `z = (h − μ) / σ` rewritten as `W' h + b'`.
    fn unfold(&self, head: &LinearHead) -> LinearHead {
        let mut weights = head.weights.clone();
        let mut bias = head.bias.clone();
        for (row, b) in weights.chunks_exact_mut(head.dim).zip(&mut bias) {
            for (j, w) in row.iter_mut().enumerate() {
                *w /= self.scale[j];
                *b -= *w * self.mean[j];
            }
        }
        LinearHead {
            classes: head.classes,
            dim: head.dim,
            weights,
            bias,
        }
    }
}

/// Order pixels by label, then by feature bits, so the seeded shuffle sees the
/// same sequence regardless of input order.
fn canonical_order(pixels: &LabeledPixels) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pixels.len()).collect();
    idx.sort_by(|&a, &b| {
        pixels.labels()[a].cmp(&pixels.labels()[b]).then_with(|| {
            pixels
                .row(a)
                .iter()
                .map(|v| v.to_bits())
                .cmp(pixels.row(b).iter().map(|v| v.to_bits()))
        })
    });
    idx
}
