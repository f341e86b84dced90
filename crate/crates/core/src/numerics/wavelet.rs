//! Orthonormal 2-D Haar analysis and synthesis.
//!
//! On every 2x2 block `[a b; c d]` one level produces
//! `LL = (a+b+c+d)/2`, `LH = (a+b-c-d)/2`, `HL = (a-b+c-d)/2`,
//! `HH = (a-b-c+d)/2`. Level 1 is the finest level; the approximation band
//! left after the last level carries the block means.

use super::ImageTensor;
use crate::error::{Axis, Error, Result};

/// One coefficient plane set (`height x width x channels`, row-major, `f64`).
#[derive(Debug, Clone, PartialEq)]
pub struct Subband {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Subband {
    fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn scale(&mut self, w: f64) {
        self.data.iter_mut().for_each(|v| *v *= w);
    }

    fn same_shape(&self, h: usize, w: usize, c: usize) -> bool {
        self.height == h && self.width == w && self.channels == c
    }
}

/// Detail orientation within one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetailBand {
    /// `LH`: top rows minus bottom rows.
    Horizontal = 0,
    /// `HL`: left columns minus right columns.
    Vertical = 1,
    /// `HH`
    Diagonal = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    approx: Subband,
    /// `details[0]` is level 1 (finest).
    details: Vec<[Subband; 3]>,
}

impl WaveletPyramid {
    pub fn new(approx: Subband, details: Vec<[Subband; 3]>) -> Result<Self> {
        if details.is_empty() {
            return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
        }
        let pyramid = Self { approx, details };
        pyramid.validate()?;
        Ok(pyramid)
    }

    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn approx(&self) -> &Subband {
        &self.approx
    }

    /// Detail band at `level` (1-based, 1 = finest).
    pub fn detail(&self, level: usize, band: DetailBand) -> &Subband {
        &self.details[level - 1][band as usize]
    }

    pub fn detail_mut(&mut self, level: usize, band: DetailBand) -> &mut Subband {
        &mut self.details[level - 1][band as usize]
    }

    pub fn approx_mut(&mut self) -> &mut Subband {
        &mut self.approx
    }

    pub fn coefficient_count(&self) -> usize {
        self.approx.data.len()
            + self
                .details
                .iter()
                .flat_map(|l| l.iter())
                .map(|b| b.data.len())
                .sum::<usize>()
    }

    /// Sum of squared coefficients.
    pub fn energy(&self) -> f64 {
        self.all_bands().flat_map(|b| b.data.iter()).map(|v| v * v).sum()
    }

    /// Largest magnitude found in any subband the mask drops.
    pub fn max_abs_dropped(&self, mask: &ScaleMask) -> f64 {
        let mut worst = 0.0f64;
        if !mask.keep_approx {
            worst = worst.max(self.approx.max_abs());
        }
        for (level, bands) in self.details.iter().enumerate() {
            if !mask.keeps_level(level) {
                for b in bands {
                    worst = worst.max(b.max_abs());
                }
            }
        }
        worst
    }

    fn all_bands(&self) -> impl Iterator<Item = &Subband> {
        std::iter::once(&self.approx).chain(self.details.iter().flat_map(|l| l.iter()))
    }

    fn validate(&self) -> Result<()> {
        let (mut h, mut w, c) = (self.approx.height, self.approx.width, self.approx.channels);
        if self.approx.data.len() != h * w * c {
            return Err(Error::ShapeMismatch("approximation band length".into()));
        }
        for (level, bands) in self.details.iter().enumerate().rev() {
            for b in bands {
                if !b.same_shape(h, w, c) || b.data.len() != h * w * c {
                    return Err(Error::ShapeMismatch(format!(
                        "level {} detail band is {}x{}x{}, expected {h}x{w}x{c}",
                        level + 1,
                        b.height,
                        b.width,
                        b.channels
                    )));
                }
            }
            h *= 2;
            w *= 2;
        }
        Ok(())
    }
}

/// Selects which subbands survive the texture constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMask {
    pub keep_approx: bool,
    /// Per level, finest first.
    pub keep_detail: Vec<bool>,
    /// Per level multiplier for kept detail bands. The approximation band is
    /// never reweighted.
    pub level_weights: Vec<f64>,
}

impl ScaleMask {
    pub fn new(keep_approx: bool, keep_detail: Vec<bool>, level_weights: Vec<f64>) -> Result<Self> {
        let mask = Self {
            keep_approx,
            keep_detail,
            level_weights,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn keep_all(levels: usize) -> Self {
        Self {
            keep_approx: true,
            keep_detail: vec![true; levels],
            level_weights: vec![1.0; levels],
        }
    }

    /// Three levels: keeps the approximation and the two coarser detail
    /// levels, drops the finest (pixel-scale) details.
    pub fn texture_default() -> Self {
        Self {
            keep_approx: true,
            keep_detail: vec![false, true, true],
            level_weights: vec![1.0; 3],
        }
    }

    pub fn levels(&self) -> usize {
        self.keep_detail.len()
    }

    pub(crate) fn keeps_level(&self, level: usize) -> bool {
        self.keep_detail[level] && self.level_weights[level] != 0.0
    }

    /// True when every weight is 0 or 1, so masking is a projection.
    pub fn is_binary(&self) -> bool {
        self.level_weights.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keep_detail.is_empty() {
            return Err(Error::InvalidParameter("mask needs at least one level".into()));
        }
        if self.level_weights.len() != self.keep_detail.len() {
            return Err(Error::InvalidParameter(format!(
                "{} level weights for {} levels",
                self.level_weights.len(),
                self.keep_detail.len()
            )));
        }
        if let Some(w) = self.level_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidParameter(format!("level weight {w} must be >= 0")));
        }
        let any_detail = (0..self.levels()).any(|l| self.keeps_level(l));
        if !self.keep_approx && !any_detail {
            return Err(Error::InvalidParameter("mask drops every subband".into()));
        }
        Ok(())
    }
}

impl Default for ScaleMask {
    fn default() -> Self {
        Self::texture_default()
    }
}

pub fn haar_dwt2(image: &ImageTensor, levels: usize) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(Error::InvalidParameter("levels must be >= 1".into()));
    }
    let divisor = 1usize << levels;
    if image.height() % divisor != 0 {
        return Err(Error::NotDivisible {
            axis: Axis::Height,
            extent: image.height(),
            divisor,
        });
    }
    if image.width() % divisor != 0 {
        return Err(Error::NotDivisible {
            axis: Axis::Width,
            extent: image.width(),
            divisor,
        });
    }
    let mut current = Subband {
        height: image.height(),
        width: image.width(),
        channels: image.channels(),
        data: image.to_f64(),
    };
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (ll, bands) = analyze(&current);
        details.push(bands);
        current = ll;
    }
    Ok(WaveletPyramid {
        approx: current,
        details,
    })
}

pub fn haar_idwt2(pyramid: &WaveletPyramid) -> Result<ImageTensor> {
    pyramid.validate()?;
    let mut current = pyramid.approx.clone();
    for bands in pyramid.details.iter().rev() {
        current = synthesize(&current, bands);
    }
    ImageTensor::from_f64(current.height, current.width, current.channels, &current.data)
}

/// Multiplies kept bands by their level weight and zeroes dropped ones.
pub fn apply_scale_mask(pyramid: &WaveletPyramid, mask: &ScaleMask) -> Result<WaveletPyramid> {
    mask.validate()?;
    if mask.levels() != pyramid.levels() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} levels, pyramid has {}",
            mask.levels(),
            pyramid.levels()
        )));
    }
    let mut out = pyramid.clone();
    if !mask.keep_approx {
        out.approx.scale(0.0);
    }
    for (level, bands) in out.details.iter_mut().enumerate() {
        let w = if mask.keep_detail[level] {
            mask.level_weights[level]
        } else {
            0.0
        };
        if w != 1.0 {
            bands.iter_mut().for_each(|b| b.scale(w));
        }
    }
    Ok(out)
}

fn analyze(src: &Subband) -> (Subband, [Subband; 3]) {
    let (h, w, c) = (src.height / 2, src.width / 2, src.channels);
    let mut ll = Subband::zeros(h, w, c);
    let mut lh = Subband::zeros(h, w, c);
    let mut hl = Subband::zeros(h, w, c);
    let mut hh = Subband::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let a = src.at(2 * r, 2 * col, ch);
                let b = src.at(2 * r, 2 * col + 1, ch);
                let cc = src.at(2 * r + 1, 2 * col, ch);
                let d = src.at(2 * r + 1, 2 * col + 1, ch);
                let i = (r * w + col) * c + ch;
                ll.data[i] = (a + b + cc + d) * 0.5;
                lh.data[i] = (a + b - cc - d) * 0.5;
                hl.data[i] = (a - b + cc - d) * 0.5;
                hh.data[i] = (a - b - cc + d) * 0.5;
            }
        }
    }
    (ll, [lh, hl, hh])
}

fn synthesize(ll: &Subband, bands: &[Subband; 3]) -> Subband {
    let (h, w, c) = (ll.height, ll.width, ll.channels);
    let mut out = Subband::zeros(2 * h, 2 * w, c);
    let [lh, hl, hh] = bands;
    let row_stride = 2 * w * c;
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let i = (r * w + col) * c + ch;
                let (s, x, y, z) = (ll.data[i], lh.data[i], hl.data[i], hh.data[i]);
                let top = (2 * r) * row_stride + (2 * col) * c + ch;
                let bottom = top + row_stride;
                out.data[top] = (s + x + y + z) * 0.5;
                out.data[top + c] = (s + x - y - z) * 0.5;
                out.data[bottom] = (s - x + y - z) * 0.5;
                out.data[bottom + c] = (s - x - y + z) * 0.5;
            }
        }
    }
    out
}
