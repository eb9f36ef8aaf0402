//! Low-pass light maps and high-pass HF-maps.
//!
//! A light map is a blurred, pixel-sampled and re-upsampled copy of an image:
//! it keeps shading and colour but loses geometry. An HF-map is the image
//! minus its blur, shifted by `hf_offset` so that it can be stored as an
//! ordinary image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub sigma_low: f64,
    pub sample_stride: usize,
    pub sigma_high: f64,
    pub hf_offset: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            sigma_low: 8.0,
            sample_stride: 4,
            sigma_high: 2.0,
            hf_offset: 0.5,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_low > 0.0 && self.sigma_low.is_finite()) {
            return Err(Error::param("sigma_low", "must be > 0"));
        }
        if !(self.sigma_high > 0.0 && self.sigma_high.is_finite()) {
            return Err(Error::param("sigma_high", "must be > 0"));
        }
        if self.sample_stride == 0 {
            return Err(Error::param("sample_stride", "must be >= 1"));
        }
        if !self.hf_offset.is_finite() {
            return Err(Error::param("hf_offset", "must be finite"));
        }
        Ok(())
    }
}

/// The two control maps handed to the shading stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub light_map: ImageGrid,
    pub hf_map: ImageGrid,
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / sum).collect()
}

/// Separable Gaussian blur with edge clamping. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, c) = img.shape();
    let src = img.data();

    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += wk * src[(y * w + xx) * c + ch];
                }
                horiz[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += wk * horiz[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Ok(ImageGrid::from_parts_unchecked(h, w, c, out, img.is_signed()))
}

/// Takes the top-left pixel of every `stride x stride` block.
pub fn pixel_sample(img: &ImageGrid, stride: usize) -> Result<ImageGrid> {
    if stride == 0 {
        return Err(Error::param("sample_stride", "must be >= 1"));
    }
    if stride == 1 {
        return Ok(img.clone());
    }
    let (h, w, c) = img.shape();
    let (sh, sw) = (h.div_ceil(stride), w.div_ceil(stride));
    let sampled = ImageGrid::from_fn(sh, sw, c, |y, x, ch| img.get(y * stride, x * stride, ch))?;
    Ok(sampled.with_signed(img.is_signed()))
}

/// Blur, sample and upsample without the final clamp. The shading denoiser
/// uses this on unbounded x0 estimates.
pub(crate) fn low_band(img: &ImageGrid, p: &FilterParams) -> Result<ImageGrid> {
    let blurred = gaussian_blur(img, p.sigma_low)?;
    let sampled = pixel_sample(&blurred, p.sample_stride)?;
    resize_bilinear(&sampled, img.height(), img.width())
}

/// `img - blur(img, sigma_high)`, not recentred.
pub(crate) fn high_band(img: &ImageGrid, sigma_high: f64) -> Result<ImageGrid> {
    let blurred = gaussian_blur(img, sigma_high)?;
    let data = img.data().iter().zip(blurred.data()).map(|(a, b)| a - b).collect();
    let (h, w, c) = img.shape();
    Ok(ImageGrid::from_parts_unchecked(h, w, c, data, true))
}

pub fn extract_light_map(img: &ImageGrid, p: &FilterParams) -> Result<ImageGrid> {
    p.validate()?;
    Ok(low_band(img, p)?.clamped())
}

/// `img - blur(img, sigma_high) + hf_offset`, marked signed.
///
/// `sigma_high` may be zero here (the map is then constant `hf_offset`) even
/// though [`FilterParams::validate`] rejects it for pipeline use.
pub fn extract_hf_map(img: &ImageGrid, p: &FilterParams) -> Result<ImageGrid> {
    let band = high_band(img, p.sigma_high)?;
    Ok(band.map(|v| v + p.hf_offset).with_signed(true))
}

/// Light map from the reference-like image, HF-map from the source-like one.
pub fn extract_controls(ref_like: &ImageGrid, src_like: &ImageGrid, p: &FilterParams) -> Result<ControlSet> {
    if !ref_like.same_shape(src_like) {
        return Err(Error::dims(format!(
            "ref_like {:?} vs src_like {:?}",
            ref_like.shape(),
            src_like.shape()
        )));
    }
    Ok(ControlSet {
        light_map: extract_light_map(ref_like, p)?,
        hf_map: extract_hf_map(src_like, p)?,
    })
}
