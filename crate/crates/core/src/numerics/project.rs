//! Euclidean projections onto the l-infinity and l2 balls.

use super::ImageTensor;
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidEpsilon(eps))
    }
}

/// Euclidean norm accumulated in `f64`.
pub fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Elementwise clamp to `[-eps, eps]`.
pub fn project_linf(t: &ImageTensor, eps: f64) -> Result<ImageTensor> {
    check_eps(eps)?;
    let bound = eps as f32;
    let mut out = t.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(-bound, bound));
    Ok(out)
}

/// Radial projection onto the l2 ball of radius `eps`.
///
/// The rescaled vector is nudged until its `f64` norm is at most `eps`, so the
/// result is a fixed point of a second projection.
pub fn project_l2(vec: &[f32], eps: f64) -> Result<Vec<f32>> {
    check_eps(eps)?;
    if let Some(i) = vec.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let norm = l2_norm(vec);
    if norm <= eps {
        return Ok(vec.to_vec());
    }
    let mut scale = eps / norm;
    loop {
        let out: Vec<f32> = vec.iter().map(|&v| (v as f64 * scale) as f32).collect();
        if l2_norm(&out) <= eps {
            return Ok(out);
        }
        scale *= 1.0 - f32::EPSILON as f64;
    }
}
