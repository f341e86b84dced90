//! Input transformations applied in front of the victim.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{ImageTensor, RngStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefenseKind {
    None,
    /// Nearest-neighbour downscale by a random factor in
    /// `[min_scale, max_scale]`, zero-padded back at a random offset.
    Randomization { min_scale: f64, max_scale: f64 },
    /// Uniform `bits`-bit pixel quantization.
    Quantize { bits: u32 },
    /// 8x8 block DCT with a quality-scaled quantization table.
    DctQuantize { quality: u32 },
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Randomization { .. } => "randomization",
            Self::Quantize { .. } => "quantize",
            Self::DctQuantize { .. } => "dct_quantize",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Randomization { min_scale, max_scale } => {
                write!(f, "randomization(scale {min_scale}..{max_scale})")
            }
            Self::Quantize { bits } => write!(f, "quantize({bits} bits)"),
            Self::DctQuantize { quality } => write!(f, "dct_quantize(quality {quality})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub seed: u64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            seed: 0,
        }
    }
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::Randomization { min_scale, max_scale } => {
                if !(0.9..=1.0).contains(&min_scale) || !(0.9..=1.0).contains(&max_scale) || min_scale > max_scale {
                    bad(format!("resize range must lie in [0.9, 1.0], got [{min_scale}, {max_scale}]"))
                } else {
                    Ok(())
                }
            }
            DefenseKind::Quantize { bits } if !(1..=16).contains(&bits) => {
                bad(format!("bit depth must be in 1..=16, got {bits}"))
            }
            DefenseKind::DctQuantize { quality } if !(1..=100).contains(&quality) => {
                bad(format!("quality must be in 1..=100, got {quality}"))
            }
            _ => Ok(()),
        }
    }
}

/// Parses the kind name; parameters take their defaults.
impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "randomization" => Ok(Self::Randomization {
                min_scale: 0.9,
                max_scale: 1.0,
            }),
            "quantize" => Ok(Self::Quantize { bits: 4 }),
            "dct_quantize" => Ok(Self::DctQuantize { quality: 75 }),
            other => Err(Error::InvalidParameter(format!("unknown defense {other:?}"))),
        }
    }
}

/// Applies the defense with randomness drawn from `spec.seed`.
pub fn defend(image: &ImageTensor, spec: &DefenseSpec) -> Result<ImageTensor> {
    defend_with(image, spec, &mut RngStream::new(spec.seed, "defense"))
}

pub fn defend_with(image: &ImageTensor, spec: &DefenseSpec, rng: &mut RngStream) -> Result<ImageTensor> {
    spec.validate()?;
    match spec.kind {
        DefenseKind::None => Ok(image.clone()),
        DefenseKind::Randomization { min_scale, max_scale } => randomize(image, min_scale, max_scale, rng),
        DefenseKind::Quantize { bits } => Ok(quantize(image, bits)),
        DefenseKind::DctQuantize { quality } => dct_quantize(image, quality),
    }
}

fn randomize(image: &ImageTensor, lo: f64, hi: f64, rng: &mut RngStream) -> Result<ImageTensor> {
    let (h, w, c) = image.shape();
    let scale = rng.uniform(lo, hi);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, h);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let oy = rng.below(h - nh + 1);
    let ox = rng.below(w - nw + 1);
    let mut out = ImageTensor::zeros(h, w, c);
    for r in 0..nh {
        let sr = r * h / nh;
        for col in 0..nw {
            let sc = col * w / nw;
            for ch in 0..c {
                out.set(oy + r, ox + col, ch, image.get(sr, sc, ch));
            }
        }
    }
    Ok(out)
}

fn quantize(image: &ImageTensor, bits: u32) -> ImageTensor {
    let levels = ((1u32 << bits) - 1) as f64;
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = ((*v as f64).clamp(0.0, 1.0) * levels).round() as f32 / levels as f32;
    }
    out
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality as f64;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_TABLE.map(|t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    b
}

fn dct_quantize(image: &ImageTensor, quality: u32) -> Result<ImageTensor> {
    let (h, w, c) = image.shape();
    for (axis, extent) in [(crate::Axis::Height, h), (crate::Axis::Width, w)] {
        if extent % 8 != 0 {
            return Err(Error::NotDivisible { axis, extent, divisor: 8 });
        }
    }
    let table = quant_table(quality);
    let basis = dct_basis();
    let mut out = image.clone();
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = image.get(by + y, bx + x, ch) as f64 * 255.0 - 128.0;
                    }
                }
                // rows then columns
                for y in 0..8 {
                    for k in 0..8 {
                        tmp[y][k] = (0..8).map(|n| basis[k][n] * block[y][n]).sum();
                    }
                }
                for k in 0..8 {
                    for x in 0..8 {
                        let coef: f64 = (0..8).map(|n| basis[k][n] * tmp[n][x]).sum();
                        let q = table[k * 8 + x];
                        block[k][x] = (coef / q).round() * q;
                    }
                }
                for n in 0..8 {
                    for x in 0..8 {
                        tmp[n][x] = (0..8).map(|k| basis[k][n] * block[k][x]).sum();
                    }
                }
                for y in 0..8 {
                    for n in 0..8 {
                        let v: f64 = (0..8).map(|k| basis[k][n] * tmp[y][k]).sum();
                        out.set(by + y, bx + n, ch, ((v + 128.0) / 255.0).clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}
