use super::ImagePatch;
use crate::{Error, Result};

/// Default per-channel divisors for a 4-channel (red, green, blue, NIR)
/// raster: 3000 for the visible channels, 7000 for NIR.
pub fn default_divisors(channels: usize) -> Result<Vec<f32>> {
    match channels {
        4 => Ok(vec![3000.0, 3000.0, 3000.0, 7000.0]),
        0 => Err(Error::config("cannot derive divisors for zero channels")),
        c => Ok(vec![3000.0; c]),
    }
}

/// Normalize a raw integer raster `(C, H, W)` to reflectance-like `[0, 1]`
/// values: `clip(raw / divisor, 0, 1)` per channel.
pub fn normalize_s2(
    raw: &[u32],
    channels: usize,
    height: usize,
    width: usize,
    divisors: &[f32],
) -> Result<ImagePatch> {
    if divisors.len() != channels {
        return Err(Error::config(format!(
            "{} divisors for {channels} channels",
            divisors.len()
        )));
    }
    for &d in divisors {
        if d.is_nan() || d <= 0.0 {
            return Err(Error::config(format!("non-positive divisor {d}")));
        }
    }
    if raw.len() != channels * height * width {
        return Err(Error::validation(format!(
            "raw buffer has {} entries, expected {}",
            raw.len(),
            channels * height * width
        )));
    }
    let plane = height * width;
    let values = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f32 / divisors[i / plane]).clamp(0.0, 1.0))
        .collect();
    ImagePatch::new(channels, height, width, values)
}
