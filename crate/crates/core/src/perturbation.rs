//! The universal image perturbation (a texture patch tiled over the image and
//! kept inside selected wavelet subbands) and the prompt-embedding delta.

use crate::error::{Error, Result};
use crate::numerics::{
    apply_scale_mask, haar_dwt2, haar_idwt2, l2_norm, project_l2, project_linf, ImageTensor,
    RngStream, ScaleMask,
};
use crate::victim::PromptEmbedding;

/// Side length of the base texture patch.
pub const PATCH_SIZE: usize = 64;

/// Allowed tile scales: the rendered perturbation is an `s x s` grid of tiles.
pub const TILE_SCALES: [usize; 4] = [1, 2, 4, 8];

pub fn check_tile_scale(scale: usize) -> Result<()> {
    if TILE_SCALES.contains(&scale) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "tile scale must be one of {TILE_SCALES:?}, got {scale}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureUAP {
    pub base_patch: ImageTensor,
    pub tile_scale: usize,
    pub eps_v: f64,
    pub mask: ScaleMask,
}

impl TextureUAP {
    pub fn zeros(channels: usize, tile_scale: usize, eps_v: f64, mask: ScaleMask) -> Result<Self> {
        check_tile_scale(tile_scale)?;
        Ok(Self {
            base_patch: ImageTensor::zeros(PATCH_SIZE, PATCH_SIZE, channels),
            tile_scale,
            eps_v,
            mask,
        })
    }

    pub fn linf_norm(&self) -> f32 {
        self.base_patch.linf_norm()
    }

    /// Largest coefficient left in a subband the mask drops.
    pub fn mask_residual(&self) -> Result<f64> {
        let p = haar_dwt2(&self.base_patch, self.mask.levels())?;
        Ok(p.max_abs_dropped(&self.mask))
    }
}

/// Draws the base patch uniformly from `[-eps_v, eps_v]` and constrains it.
pub fn init_uap(
    rng: &mut RngStream,
    eps_v: f64,
    tile_scale: usize,
    mask: ScaleMask,
    channels: usize,
) -> Result<TextureUAP> {
    check_tile_scale(tile_scale)?;
    if !(eps_v > 0.0 && eps_v.is_finite()) {
        return Err(Error::InvalidEpsilon(eps_v));
    }
    mask.validate()?;
    let data = (0..PATCH_SIZE * PATCH_SIZE * channels)
        .map(|_| rng.uniform(-eps_v, eps_v) as f32)
        .collect();
    let uap = TextureUAP {
        base_patch: ImageTensor::new(PATCH_SIZE, PATCH_SIZE, channels, data)?,
        tile_scale,
        eps_v,
        mask,
    };
    apply_texture_constraint(&uap)
}

/// Masks the patch's wavelet pyramid and projects it into the l-infinity ball.
///
/// When the clamp is active and the mask is not a pure averaging mask, the
/// clamp can leak energy back into dropped subbands; in that case the clamped
/// patch is masked again and uniformly rescaled into the ball, which keeps
/// both constraints exact.
pub fn constrain_patch(patch: &ImageTensor, mask: &ScaleMask, eps_v: f64) -> Result<ImageTensor> {
    let pyramid = haar_dwt2(patch, mask.levels())?;
    let masked = haar_idwt2(&apply_scale_mask(&pyramid, mask)?)?;
    let bound = eps_v as f32;
    if masked.linf_norm() <= bound {
        return Ok(masked);
    }
    let clamped = project_linf(&masked, eps_v)?;
    let remasked = haar_idwt2(&apply_scale_mask(&haar_dwt2(&clamped, mask.levels())?, mask)?)?;
    let peak = remasked.linf_norm();
    if peak <= bound {
        return Ok(remasked);
    }
    let mut scale = eps_v / peak as f64;
    loop {
        let data = remasked
            .data()
            .iter()
            .map(|&v| (v as f64 * scale) as f32)
            .collect();
        let out = ImageTensor::new(patch.height(), patch.width(), patch.channels(), data)?;
        if out.linf_norm() <= bound {
            return Ok(out);
        }
        scale *= 1.0 - f32::EPSILON as f64;
    }
}

pub fn apply_texture_constraint(uap: &TextureUAP) -> Result<TextureUAP> {
    Ok(TextureUAP {
        base_patch: constrain_patch(&uap.base_patch, &uap.mask, uap.eps_v)?,
        ..uap.clone()
    })
}

/// Source patch index for each output coordinate of one tile.
fn tile_index_map(tile: usize, patch: usize) -> Vec<usize> {
    (0..tile).map(|i| i * patch / tile).collect()
}

fn check_render_dims(scale: usize, height: usize, width: usize) -> Result<()> {
    check_tile_scale(scale)?;
    for (axis, extent) in [(crate::Axis::Height, height), (crate::Axis::Width, width)] {
        if extent == 0 || extent % scale != 0 {
            return Err(Error::NotDivisible {
                axis,
                extent,
                divisor: scale,
            });
        }
    }
    Ok(())
}

/// Tiles `patch` as a `scale x scale` grid over a `height x width` canvas,
/// each tile being the patch resampled by nearest neighbour.
pub fn render_patch(patch: &ImageTensor, scale: usize, height: usize, width: usize) -> Result<ImageTensor> {
    check_render_dims(scale, height, width)?;
    let (ph, pw, c) = patch.shape();
    let (th, tw) = (height / scale, width / scale);
    let rows = tile_index_map(th, ph);
    let cols = tile_index_map(tw, pw);
    let src = patch.data();
    let mut out = Vec::with_capacity(height * width * c);
    for r in 0..height {
        let sr = rows[r % th];
        for col in 0..width {
            let base = (sr * pw + cols[col % tw]) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    ImageTensor::new(height, width, c, out)
}

/// Adjoint of [`render_patch`]: accumulates an image-space gradient back onto
/// the patch entries each pixel was copied from.
pub fn render_adjoint(
    grad: &ImageTensor,
    scale: usize,
    patch_height: usize,
    patch_width: usize,
) -> Result<Vec<f64>> {
    let (height, width, c) = grad.shape();
    check_render_dims(scale, height, width)?;
    let (th, tw) = (height / scale, width / scale);
    let rows = tile_index_map(th, patch_height);
    let cols = tile_index_map(tw, patch_width);
    let mut out = vec![0.0f64; patch_height * patch_width * c];
    for r in 0..height {
        for col in 0..width {
            let dst = (rows[r % th] * patch_width + cols[col % tw]) * c;
            for ch in 0..c {
                out[dst + ch] += grad.get(r, col, ch) as f64;
            }
        }
    }
    Ok(out)
}

pub fn render_uap(uap: &TextureUAP, height: usize, width: usize) -> Result<ImageTensor> {
    render_patch(&uap.base_patch, uap.tile_scale, height, width)
}

/// `clamp(image + rendered, 0, 1)`.
pub fn compose(image: &ImageTensor, rendered: &ImageTensor) -> Result<ImageTensor> {
    if !image.same_shape(rendered) {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs perturbation {:?}",
            image.shape(),
            rendered.shape()
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(rendered.data())
        .map(|(a, b)| (a + b).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(image.height(), image.width(), image.channels(), data)
}

pub fn apply_to_image(image: &ImageTensor, uap: &TextureUAP) -> Result<ImageTensor> {
    if image.channels() != uap.base_patch.channels() {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, patch has {}",
            image.channels(),
            uap.base_patch.channels()
        )));
    }
    compose(image, &render_uap(uap, image.height(), image.width())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptDelta {
    pub vector: Vec<f32>,
    pub eps_t: f64,
}

impl PromptDelta {
    pub fn zeros(dim: usize, eps_t: f64) -> Self {
        Self {
            vector: vec![0.0; dim],
            eps_t,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.vector)
    }
}

/// I.i.d. normal draws with standard deviation `eps_t`, projected onto the
/// `eps_t` ball.
pub fn init_prompt_delta(rng: &mut RngStream, eps_t: f64, dim: usize) -> Result<PromptDelta> {
    if !(eps_t > 0.0 && eps_t.is_finite()) {
        return Err(Error::InvalidEpsilon(eps_t));
    }
    let raw: Vec<f32> = (0..dim).map(|_| (eps_t * rng.normal()) as f32).collect();
    Ok(PromptDelta {
        vector: project_l2(&raw, eps_t)?,
        eps_t,
    })
}

/// `e + delta`, without renormalising.
pub fn apply_to_prompt(e: &PromptEmbedding, delta: &PromptDelta) -> Result<PromptEmbedding> {
    if e.dim() != delta.vector.len() {
        return Err(Error::ShapeMismatch(format!(
            "prompt embedding has dimension {}, delta has {}",
            e.dim(),
            delta.vector.len()
        )));
    }
    Ok(PromptEmbedding {
        vector: e
            .vector
            .iter()
            .zip(&delta.vector)
            .map(|(a, &d)| a + d as f64)
            .collect(),
        source_text: e.source_text.clone(),
    })
}
