//! Procedural portraits, masks and oracle models used as the test corpus.
//!
//! A portrait is an identity (face geometry and albedo) rendered under a
//! lighting (smooth shading ramp and tint). Identities differ in high
//! frequencies, lightings in low frequencies, which is the split the
//! frequency-map controls exploit.

use std::collections::BTreeMap;

use crate::diffusion::{encode, NoiseRng};
use crate::error::Result;
use crate::image::{ImageGrid, Mask};
use crate::oracle::{ComponentSpec, ConditionSpec, CovarianceSpec, GmmScoreModel, GmmSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identity {
    /// Face centre and radii as fractions of the frame.
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_radius: f64,
    pub mouth_width: f64,
    pub skin: f64,
    pub hair: f64,
}

impl Identity {
    pub fn alice() -> Self {
        Self {
            center: (0.52, 0.5),
            radii: (0.30, 0.23),
            eye_spacing: 0.18,
            eye_height: 0.44,
            eye_radius: 0.045,
            mouth_width: 0.16,
            skin: 0.78,
            hair: 0.18,
        }
    }

    pub fn bob() -> Self {
        Self {
            center: (0.52, 0.5),
            radii: (0.30, 0.23),
            eye_spacing: 0.24,
            eye_height: 0.48,
            eye_radius: 0.035,
            mouth_width: 0.10,
            skin: 0.62,
            hair: 0.40,
        }
    }

    pub fn carol() -> Self {
        Self {
            center: (0.52, 0.5),
            radii: (0.30, 0.23),
            eye_spacing: 0.20,
            eye_height: 0.41,
            eye_radius: 0.055,
            mouth_width: 0.20,
            skin: 0.70,
            hair: 0.08,
        }
    }

    fn face_value(&self, fy: f64, fx: f64) -> Option<f64> {
        let dy = (fy - self.center.0) / self.radii.0;
        let dx = (fx - self.center.1) / self.radii.1;
        if dy * dy + dx * dx > 1.0 {
            return None;
        }
        let mut v = self.skin;
        for side in [-1.0, 1.0] {
            let ex = self.center.1 + side * self.eye_spacing / 2.0;
            let r = ((fy - self.eye_height).powi(2) + (fx - ex).powi(2)).sqrt();
            if r < self.eye_radius {
                v = 0.12;
            } else if r < self.eye_radius * 1.6 {
                v = 0.95;
            }
        }
        let nose = (fx - self.center.1).abs() < 0.012 && fy > self.eye_height + 0.04 && fy < self.center.0 + 0.1;
        if nose {
            v *= 0.7;
        }
        let mouth_y = self.center.0 + 0.16;
        if (fy - mouth_y).abs() < 0.015 && (fx - self.center.1).abs() < self.mouth_width / 2.0 {
            v = 0.3;
        }
        Some(v)
    }

    fn in_face(&self, fy: f64, fx: f64) -> bool {
        let dy = (fy - self.center.0) / self.radii.0;
        let dx = (fx - self.center.1) / self.radii.1;
        dy * dy + dx * dx <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lighting {
    /// Shading ramp direction (radians) and its peak-to-peak strength.
    pub angle: f64,
    pub strength: f64,
    pub ambient: f64,
    pub tint: [f64; 3],
    pub background: f64,
}

impl Lighting {
    pub fn left() -> Self {
        Self {
            angle: std::f64::consts::PI,
            strength: 0.5,
            ambient: 0.75,
            tint: [1.0, 0.92, 0.85],
            background: 0.55,
        }
    }

    pub fn right_warm() -> Self {
        Self {
            angle: 0.3,
            strength: 0.6,
            ambient: 0.7,
            tint: [1.0, 0.8, 0.6],
            background: 0.35,
        }
    }

    pub fn top_cool() -> Self {
        Self {
            angle: -std::f64::consts::FRAC_PI_2,
            strength: 0.4,
            ambient: 0.8,
            tint: [0.8, 0.9, 1.0],
            background: 0.7,
        }
    }

    fn shade(&self, fy: f64, fx: f64) -> f64 {
        let proj = (fx - 0.5) * self.angle.cos() + (fy - 0.5) * self.angle.sin();
        self.ambient + self.strength * proj
    }
}

pub fn portrait(h: usize, w: usize, channels: usize, id: &Identity, light: &Lighting) -> Result<ImageGrid> {
    ImageGrid::from_fn(h, w, channels, |y, x, c| {
        let fy = (y as f64 + 0.5) / h as f64;
        let fx = (x as f64 + 0.5) / w as f64;
        let albedo = match id.face_value(fy, fx) {
            Some(v) => v,
            None if fy < id.center.0 - id.radii.0 * 0.6 && (fx - id.center.1).abs() < id.radii.1 * 1.3 => id.hair,
            None => light.background,
        };
        let tint = if channels == 3 { light.tint[c] } else { 1.0 };
        (albedo * light.shade(fy, fx) * tint).clamp(0.0, 1.0)
    })
}

/// Binary face ellipse of `id`.
pub fn face_mask(h: usize, w: usize, id: &Identity) -> Result<Mask> {
    Mask::from_fn(h, w, |y, x| {
        let fy = (y as f64 + 0.5) / h as f64;
        let fx = (x as f64 + 0.5) / w as f64;
        f64::from(u8::from(id.in_face(fy, fx)))
    })
}

/// Binary band covering both eyes of `id`.
pub fn eye_mask(h: usize, w: usize, id: &Identity) -> Result<Mask> {
    Mask::from_fn(h, w, |y, x| {
        let fy = (y as f64 + 0.5) / h as f64;
        let fx = (x as f64 + 0.5) / w as f64;
        let inside = (fy - id.eye_height).abs() < id.eye_radius * 2.0
            && (fx - id.center.1).abs() < id.eye_spacing / 2.0 + id.eye_radius * 2.0;
        f64::from(u8::from(inside))
    })
}

/// Uniform noise in `[0, 1]`.
pub fn noise_image(h: usize, w: usize, channels: usize, seed: u64) -> Result<ImageGrid> {
    let mut rng = NoiseRng::new(seed);
    ImageGrid::from_fn(h, w, channels, |_, _, _| rng.uniform())
}

/// Black left of column `edge`, white from it onward.
pub fn step_edge(h: usize, w: usize, edge: usize) -> Result<ImageGrid> {
    ImageGrid::from_fn(h, w, 1, |_, x, _| f64::from(u8::from(x >= edge)))
}

/// Replaces the pixels of `base` under the binary mask with those of `inset`.
pub fn splice(base: &ImageGrid, inset: &ImageGrid, mask: &Mask) -> Result<ImageGrid> {
    ImageGrid::from_fn(base.height(), base.width(), base.channels(), |y, x, c| {
        if mask.get(y, x) > 0.5 {
            inset.get(y, x, c)
        } else {
            base.get(y, x, c)
        }
    })
}

/// One isotropic component per image, centred on its encoded latent. With
/// `conditions`, each `(id, k)` pair puts all weight of condition `id` on
/// component `k` with equal priors; otherwise the components are weighted
/// uniformly.
pub fn image_oracle(images: &[ImageGrid], variance: f64, conditions: &[(&str, usize)]) -> Result<GmmScoreModel> {
    let k = images.len();
    let dims = images.first().map_or(0, |i| i.data().len());
    let components = images
        .iter()
        .map(|img| ComponentSpec {
            weight: if conditions.is_empty() { Some(1.0 / k as f64) } else { None },
            mean: encode(img).into_data(),
            covariance: CovarianceSpec::Isotropic(variance),
        })
        .collect();
    let prior = 1.0 / conditions.len().max(1) as f64;
    let conditions: BTreeMap<String, ConditionSpec> = conditions
        .iter()
        .map(|&(id, comp)| {
            let mut weights = vec![0.0; k];
            weights[comp] = 1.0;
            (id.to_string(), ConditionSpec { prior, weights })
        })
        .collect();
    GmmScoreModel::from_spec(&GmmSpec {
        dims,
        components,
        conditions,
    })
}

/// The default small oracle: 2-D latent, three components, identity
/// conditions `a`/`b`, concept `open`/`closed` pair. Mirrors
/// `fixtures/oracle/default.json`.
pub fn default_oracle_spec() -> GmmSpec {
    serde_json::from_str(DEFAULT_ORACLE_JSON).expect("embedded oracle fixture parses")
}

pub const DEFAULT_ORACLE_JSON: &str = include_str!("../fixtures/oracle/default.json");
pub const TWO_MODE_ORACLE_JSON: &str = include_str!("../fixtures/oracle/two_mode.json");
