//! Extended-tile geometry, training-crop sampling and shift averaging.
//!
//! An extended `T × T` tile is evaluated with `t × t` windows whose origins
//! run over `{0, k, …, T − t}` on both axes. The aggregation region Ω is the
//! central `t × t` square of the extended tile; central squares of adjacent
//! tiles form a non-overlapping grid over the slide. With `2t ≤ T < 3t` no
//! window covers all of Ω but every window overlaps it, so each pixel of Ω is
//! averaged over exactly the windows that contain it.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::maps::{ChannelMap, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftConfig {
    /// Extended tile side `T` in pixels.
    pub tile: usize,
    /// Window side `t` in pixels.
    pub inner: usize,
    /// Shift stride `k` in pixels.
    pub stride: usize,
    /// Pixels per latent cell.
    pub latent_scale: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            tile: 672,
            inner: 252,
            stride: 84,
            latent_scale: 14,
        }
    }
}

impl ShiftConfig {
    pub fn new(tile: usize, inner: usize, stride: usize, latent_scale: usize) -> Result<Self> {
        let cfg = Self {
            tile,
            inner,
            stride,
            latent_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            tile,
            inner,
            stride,
            latent_scale,
        } = *self;
        let fail = |msg: String| Err(Error::InvalidGeometry(msg));
        if inner == 0 || stride == 0 || latent_scale == 0 {
            return fail(format!("sizes must be positive: {self:?}"));
        }
        if inner >= tile {
            return fail(format!("window {inner} must be smaller than tile {tile}"));
        }
        if tile >= 3 * inner {
            return fail(format!("tile {tile} must be smaller than 3 × window {inner}"));
        }
        if (tile - inner) % stride != 0 {
            return fail(format!("tile − window = {} is not a multiple of stride {stride}", tile - inner));
        }
        if (tile - inner) % 2 != 0 {
            return fail(format!("tile − window = {} must be even to centre the window", tile - inner));
        }
        if inner % latent_scale != 0 || stride % latent_scale != 0 || !self.margin().is_multiple_of(latent_scale) {
            return fail(format!(
                "window {inner}, stride {stride} and margin {} must be multiples of latent scale {latent_scale}",
                self.margin()
            ));
        }
        Ok(())
    }

    /// Offset of Ω inside the extended tile.
    pub fn margin(&self) -> usize {
        (self.tile - self.inner) / 2
    }

    pub fn latent_inner(&self) -> usize {
        self.inner / self.latent_scale
    }

    pub fn shift_count(&self) -> usize {
        let per_axis = (self.tile - self.inner) / self.stride + 1;
        per_axis * per_axis
    }
}

/// Window origin `(x, y)` inside the extended tile, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shift {
    pub x: usize,
    pub y: usize,
}

pub fn enumerate_shifts(cfg: &ShiftConfig) -> Result<Vec<Shift>> {
    cfg.validate()?;
    let positions: Vec<usize> = (0..=cfg.tile - cfg.inner).step_by(cfg.stride).collect();
    let mut out = Vec::with_capacity(positions.len() * positions.len());
    for &y in &positions {
        for &x in &positions {
            out.push(Shift { x, y });
        }
    }
    Ok(out)
}

/// One window's output: a `channels × side × side` map for window `shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedMap {
    pub shift: Shift,
    pub map: ChannelMap,
}

/// Averages per-window maps over Ω at the resolution implied by their side
/// (`t` for pixel maps, `t / latent_scale` for latent maps).
pub fn average_over_windows(maps: &[ShiftedMap], cfg: &ShiftConfig) -> Result<ChannelMap> {
    cfg.validate()?;
    let first = maps.first().ok_or_else(|| Error::Coverage("shift set is empty".into()))?;
    let side = first.map.height();
    let cell = if side == cfg.inner {
        1
    } else if side * cfg.latent_scale == cfg.inner {
        cfg.latent_scale
    } else {
        return Err(Error::DimensionMismatch(format!(
            "window maps are {side} cells wide; expected {} (pixels) or {} (latent)",
            cfg.inner,
            cfg.latent_inner()
        )));
    };
    let channels = first.map.channels();
    let valid = enumerate_shifts(cfg)?;
    for m in maps {
        if m.map.height() != side || m.map.width() != side || m.map.channels() != channels {
            return Err(Error::DimensionMismatch(format!(
                "window map at {:?} is {}x{}x{}, expected {channels}x{side}x{side}",
                m.shift,
                m.map.channels(),
                m.map.height(),
                m.map.width()
            )));
        }
        if !valid.contains(&m.shift) {
            return Err(Error::InvalidGeometry(format!("{:?} is not on the shift grid", m.shift)));
        }
    }

    let margin = cfg.margin() / cell;
    let mut sums = vec![0.0f64; channels * side * side];
    let mut hits = vec![0u32; side * side];
    for m in maps {
        let (sx, sy) = (m.shift.x / cell, m.shift.y / cell);
        for oy in 0..side {
            // row of Ω in extended-tile coordinates, then in window coordinates
            let ty = margin + oy;
            if ty < sy || ty >= sy + side {
                continue;
            }
            let wy = ty - sy;
            for ox in 0..side {
                let tx = margin + ox;
                if tx < sx || tx >= sx + side {
                    continue;
                }
                let wx = tx - sx;
                hits[oy * side + ox] += 1;
                for c in 0..channels {
                    sums[(c * side + oy) * side + ox] += m.map.get(c, wy, wx) as f64;
                }
            }
        }
    }
    if let Some(i) = hits.iter().position(|&h| h == 0) {
        return Err(Error::Coverage(format!(
            "cell ({}, {}) of the central region is covered by no window",
            i % side,
            i / side
        )));
    }
    let mut out = ChannelMap::zeros(channels, side, side);
    for c in 0..channels {
        for oy in 0..side {
            for ox in 0..side {
                let v = sums[(c * side + oy) * side + ox] / hits[oy * side + ox] as f64;
                out.set(c, oy, ox, v as f32);
            }
        }
    }
    Ok(out)
}

/// Mean of the per-window class probabilities over Ω.
pub fn average_probs(maps: &[ShiftedMap], cfg: &ShiftConfig) -> Result<ChannelMap> {
    average_over_windows(maps, cfg)
}

/// Mean of the per-window feature embeddings over the latent Ω′.
pub fn average_features(maps: &[ShiftedMap], cfg: &ShiftConfig) -> Result<ChannelMap> {
    average_over_windows(maps, cfg)
}

/// Number of windows covering each cell of Ω at resolution `cell`.
pub fn coverage_counts(cfg: &ShiftConfig, cell: usize) -> Result<Vec<usize>> {
    let shifts = enumerate_shifts(cfg)?;
    let side = cfg.inner / cell;
    let margin = cfg.margin() / cell;
    let mut hits = vec![0; side * side];
    for s in shifts {
        let (sx, sy) = (s.x / cell, s.y / cell);
        for oy in 0..side {
            for ox in 0..side {
                let (ty, tx) = (margin + oy, margin + ox);
                if ty >= sy && ty < sy + side && tx >= sx && tx < sx + side {
                    hits[oy * side + ox] += 1;
                }
            }
        }
    }
    Ok(hits)
}

/// Which annotated-pixel minimum a training crop must meet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CropRule {
    MinPixels(usize),
    MinFraction(f64),
}

impl CropRule {
    fn required(&self, area: usize) -> usize {
        match *self {
            CropRule::MinPixels(n) => n.max(1),
            CropRule::MinFraction(f) => ((f * area as f64).ceil() as usize).max(1),
        }
    }
}

/// Class → rule mapping with a default for unlisted classes.
#[derive(Clone, Debug, PartialEq)]
pub struct CropRules {
    pub default: CropRule,
    pub per_class: Vec<(usize, CropRule)>,
    pub max_attempts: usize,
}

impl Default for CropRules {
    fn default() -> Self {
        Self {
            default: CropRule::MinFraction(0.01),
            per_class: Vec::new(),
            max_attempts: 64,
        }
    }
}

impl CropRules {
    /// Rules with one-pixel classes (sparse, small structures) and half-percent
    /// classes; everything else needs 1 % of the crop.
    pub fn with_classes(single_pixel: &[usize], half_percent: &[usize]) -> Self {
        let mut rules = Self::default();
        rules
            .per_class
            .extend(single_pixel.iter().map(|&c| (c, CropRule::MinPixels(1))));
        rules
            .per_class
            .extend(half_percent.iter().map(|&c| (c, CropRule::MinFraction(0.005))));
        rules
    }

    pub fn rule_for(&self, class: usize) -> CropRule {
        self.per_class
            .iter()
            .find(|(c, _)| *c == class)
            .map_or(self.default, |&(_, r)| r)
    }
}

/// Summed-area table of `label == class` indicators.
struct IntegralCount {
    width: usize,
    table: Vec<usize>,
}

impl IntegralCount {
    fn new(labels: &LabelMap, class: usize) -> Self {
        let (h, w) = (labels.height(), labels.width());
        let mut table = vec![0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = usize::from(labels.get(y, x) == class as i32);
                table[(y + 1) * (w + 1) + x + 1] =
                    v + table[y * (w + 1) + x + 1] + table[(y + 1) * (w + 1) + x] - table[y * (w + 1) + x];
            }
        }
        Self { width: w + 1, table }
    }

    fn count(&self, x: usize, y: usize, side: usize) -> usize {
        let w = self.width;
        self.table[(y + side) * w + x + side] + self.table[y * w + x]
            - self.table[y * w + x + side]
            - self.table[(y + side) * w + x]
    }
}

/// Draws random `side × side` crop origins until one holds enough pixels of
/// `class` under `rules`.
pub fn sample_training_crop<R: Rng + ?Sized>(
    labels: &LabelMap,
    side: usize,
    class: usize,
    rules: &CropRules,
    rng: &mut R,
) -> Result<Shift> {
    if side == 0 || side > labels.height() || side > labels.width() {
        return Err(Error::InvalidGeometry(format!(
            "crop side {side} does not fit a {}x{} tile",
            labels.height(),
            labels.width()
        )));
    }
    let counts = IntegralCount::new(labels, class);
    let no_attempts = Error::NoAdmissibleCrop {
        class,
        attempts: rules.max_attempts,
    };
    if counts.table.last() == Some(&0) {
        return Err(no_attempts);
    }
    let required = rules.rule_for(class).required(side * side);
    for _ in 0..rules.max_attempts {
        let x = rng.random_range(0..=labels.width() - side);
        let y = rng.random_range(0..=labels.height() - side);
        if counts.count(x, y, side) >= required {
            return Ok(Shift { x, y });
        }
    }
    Err(no_attempts)
}

/// Origins of admissible crops, by exhaustive scan.
pub fn admissible_crops(labels: &LabelMap, side: usize, class: usize, rules: &CropRules) -> Vec<Shift> {
    let counts = IntegralCount::new(labels, class);
    let required = rules.rule_for(class).required(side * side);
    let mut out = Vec::new();
    for y in 0..=labels.height().saturating_sub(side) {
        for x in 0..=labels.width().saturating_sub(side) {
            if counts.count(x, y, side) >= required {
                out.push(Shift { x, y });
            }
        }
    }
    out
}

/// One extended tile of a slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridTile {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    /// Origin of the central `t × t` region in slide pixels.
    pub central: (usize, usize),
    /// Origin of the extended tile; negative when it overhangs the slide.
    pub extended: (i64, i64),
}

/// Non-overlapping grid of central regions covering a slide.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub cfg: ShiftConfig,
    pub tiles: Vec<GridTile>,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, cfg: ShiftConfig) -> Result<Self> {
        cfg.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::InvalidGeometry("slide extent must be positive".into()));
        }
        let t = cfg.inner;
        let cols = width.div_ceil(t);
        let rows = height.div_ceil(t);
        let margin = cfg.margin() as i64;
        let mut tiles = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                let central = (col * t, row * t);
                tiles.push(GridTile {
                    id: tiles.len(),
                    row,
                    col,
                    central,
                    extended: (central.0 as i64 - margin, central.1 as i64 - margin),
                });
            }
        }
        Ok(Self {
            width,
            height,
            cfg,
            tiles,
        })
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from("tile_id\trow\tcol\tcentral_x\tcentral_y\textended_x\textended_y\tshifts\n");
        let shifts = self.cfg.shift_count();
        for t in &self.tiles {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.id, t.row, t.col, t.central.0, t.central.1, t.extended.0, t.extended.1, shifts
            )
            .unwrap();
        }
        out
    }

    /// Cuts the extended tile out of a slide-sized map, reflecting at the
    /// borders.
    pub fn extract_extended(&self, slide: &ChannelMap, tile: &GridTile) -> Result<ChannelMap> {
        if slide.width() != self.width || slide.height() != self.height {
            return Err(Error::DimensionMismatch(format!(
                "slide map is {}x{}, grid was built for {}x{}",
                slide.width(),
                slide.height(),
                self.width,
                self.height
            )));
        }
        let side = self.cfg.tile;
        let mut out = ChannelMap::zeros(slide.channels(), side, side);
        for y in 0..side {
            let sy = reflect(tile.extended.1 + y as i64, self.height);
            for x in 0..side {
                let sx = reflect(tile.extended.0 + x as i64, self.width);
                for c in 0..slide.channels() {
                    out.set(c, y, x, slide.get(c, sy, sx));
                }
            }
        }
        Ok(out)
    }
}

/// Mirror index into `0..len` without repeating the edge sample.
pub fn reflect(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < len as i64 { m } else { period - m }) as usize
}
