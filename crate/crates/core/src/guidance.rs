//! Score composition: classifier guidance, classifier-free guidance, concept
//! versus negative-concept guidance, mask-restricted combination and momentum
//! accumulation of the concept term.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, Denoiser, LatentGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Mask;

/// `(1 + w) * eps_cond - w * eps_uncond`, evaluated as `c + w * (c - u)` so
/// equal inputs come back bit-exact for any `w`.
pub fn cfg_score(eps_cond: &LatentGrid, eps_uncond: &LatentGrid, w: f64) -> Result<LatentGrid> {
    eps_cond.zip_with(eps_uncond, |c, u| c + w * (c - u))
}

/// `(1 + w) * eps_s - w * eps_sbar`: steer toward concept `S`, away from `S̄`.
pub fn concept_score(eps_s: &LatentGrid, eps_sbar: &LatentGrid, w: f64) -> Result<LatentGrid> {
    eps_s.zip_with(eps_sbar, |s, b| s + w * (s - b))
}

/// `eps - w * sigma_t * grad log p(c | z)`.
pub fn classifier_guidance(eps: &LatentGrid, grad_log_p: &LatentGrid, w: f64, sigma_t: f64) -> Result<LatentGrid> {
    if sigma_t.is_nan() || sigma_t <= 0.0 {
        return Err(Error::param("sigma_t", format!("must be > 0, got {sigma_t}")));
    }
    eps.zip_with(grad_log_p, |e, g| e - w * sigma_t * g)
}

/// `eps_base + m ⊙ delta`, with the spatial mask broadcast over channels.
pub fn masked_combine(eps_base: &LatentGrid, delta: &LatentGrid, m: &Mask) -> Result<LatentGrid> {
    eps_base.ensure_same_shape(delta, "masked_combine")?;
    if !m.matches(eps_base.height(), eps_base.width()) {
        return Err(Error::dims(format!(
            "mask {}x{} vs latent {}x{}",
            m.height(),
            m.width(),
            eps_base.height(),
            eps_base.width()
        )));
    }
    let c = eps_base.channels();
    let data = eps_base
        .data()
        .iter()
        .zip(delta.data())
        .enumerate()
        .map(|(i, (&b, &d))| {
            // Zero-mask pixels keep `b` itself; `b + 0 * d` would turn -0.0 into +0.0.
            let w = m.data()[i / c];
            if w == 0.0 {
                b
            } else {
                b + w * d
            }
        })
        .collect();
    eps_base.like(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    None,
    /// `t / T`: the term fades out as sampling approaches `t = 0`.
    #[default]
    Linear,
    AlphaBar,
}

impl Decay {
    pub fn factor(self, t: usize, s: &NoiseSchedule) -> f64 {
        match self {
            Decay::None => 1.0,
            Decay::Linear => t as f64 / s.len() as f64,
            Decay::AlphaBar => s.alpha_bar(t),
        }
    }
}

impl std::str::FromStr for Decay {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Decay::None),
            "linear" => Ok(Decay::Linear),
            "alpha_bar" => Ok(Decay::AlphaBar),
            other => Err(format!("unknown decay `{other}` (expected none, linear or alpha_bar)")),
        }
    }
}

/// Exponential moving average of the concept term. Starts at zero; the shape
/// is fixed by the first update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentumState {
    m: Option<LatentGrid>,
}

impl MomentumState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros_like(z: &LatentGrid) -> Self {
        let (h, w, c) = z.shape();
        Self {
            m: Some(LatentGrid::zeros(h, w, c)),
        }
    }

    pub fn value(&self) -> Option<&LatentGrid> {
        self.m.as_ref()
    }
}

/// `m <- beta * m + (1 - beta) * g`; returns the new state and the applied
/// term `decay(t) * m`.
pub fn momentum_update(
    st: MomentumState,
    g: &LatentGrid,
    beta: f64,
    t: usize,
    decay: Decay,
    s: &NoiseSchedule,
) -> Result<(MomentumState, LatentGrid)> {
    s.check(t)?;
    let prev = match st.m {
        Some(m) => m,
        None => MomentumState::zeros_like(g).m.expect("just built"),
    };
    let m = prev.zip_with(g, |m, g| beta * m + (1.0 - beta) * g)?;
    let k = decay.factor(t, s);
    let applied = m.map(|v| k * v);
    Ok((MomentumState { m: Some(m) }, applied))
}

/// Weights, concept ids, mask and momentum settings for guided scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub w_cfg: f64,
    pub w_concept: f64,
    /// Concept `S`; the concept branch is active only when both ids are set.
    pub concept_s: Option<String>,
    /// Negative concept `S̄`.
    pub concept_sbar: Option<String>,
    /// Editing region of the concept term; `None` means the whole frame.
    pub mask: Option<Mask>,
    pub momentum_beta: f64,
    pub decay: Decay,
    /// Add the raw concept score inside the mask instead of its difference
    /// from the unconditional prediction.
    pub literal_eq4: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_cfg: 0.0,
            w_concept: 0.0,
            concept_s: None,
            concept_sbar: None,
            mask: None,
            momentum_beta: 0.9,
            decay: Decay::Linear,
            literal_eq4: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_cfg.is_finite() && self.w_cfg >= 0.0) {
            return Err(Error::validation("w_cfg", "must be finite and >= 0"));
        }
        if !(self.w_concept.is_finite() && self.w_concept >= 0.0) {
            return Err(Error::validation("w_concept", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::validation("momentum_beta", "must be in [0, 1)"));
        }
        if self.concept_s.is_some() != self.concept_sbar.is_some() {
            return Err(Error::validation(
                "concept_sbar",
                "concept_s and concept_sbar must be set together",
            ));
        }
        Ok(())
    }

    pub fn concept_active(&self) -> bool {
        self.concept_s.is_some() && self.concept_sbar.is_some()
    }
}

/// A denoiser plus guidance settings and the momentum state of one sampling
/// run. Not shareable between concurrent runs.
pub struct GuidedScorer<'a> {
    denoiser: &'a dyn Denoiser,
    schedule: &'a NoiseSchedule,
    config: GuidanceConfig,
    condition: Condition,
    momentum: MomentumState,
}

impl<'a> GuidedScorer<'a> {
    pub fn new(
        denoiser: &'a dyn Denoiser,
        schedule: &'a NoiseSchedule,
        config: GuidanceConfig,
        condition: Condition,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            denoiser,
            schedule,
            config,
            condition,
            momentum: MomentumState::new(),
        })
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    pub fn condition(&self) -> &Condition {
        &self.condition
    }

    pub fn momentum(&self) -> &MomentumState {
        &self.momentum
    }

    pub fn reset(&mut self) {
        self.momentum = MomentumState::new();
    }

    /// CFG base score plus the masked, momentum-averaged concept term.
    pub fn guided_eps(&mut self, z: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.schedule.check(t)?;
        let cfg = &self.config;
        let d = self.denoiser;
        let eps_c = d.predict(z, t, &self.condition)?;
        let need_uncond = cfg.w_cfg != 0.0 || (cfg.concept_active() && !cfg.literal_eq4);
        let eps_u = if need_uncond {
            Some(d.predict(z, t, &Condition::Unconditional)?)
        } else {
            None
        };
        // With w_cfg = 0 the CFG combination is eps_c bit for bit, so the
        // unconditional query is skipped when nothing else needs it.
        let base = match &eps_u {
            Some(u) => cfg_score(&eps_c, u, cfg.w_cfg)?,
            None => eps_c,
        };
        let (Some(s_id), Some(sbar_id)) = (&cfg.concept_s, &cfg.concept_sbar) else {
            return Ok(base);
        };
        let eps_s = d.predict(z, t, &Condition::Concept(s_id.clone()))?;
        let eps_sbar = d.predict(z, t, &Condition::Concept(sbar_id.clone()))?;
        let mut delta = concept_score(&eps_s, &eps_sbar, cfg.w_concept)?;
        if let (false, Some(u)) = (cfg.literal_eq4, &eps_u) {
            delta = delta.zip_with(u, |a, b| a - b)?;
        }
        let state = std::mem::take(&mut self.momentum);
        let (state, applied) = momentum_update(state, &delta, cfg.momentum_beta, t, cfg.decay, self.schedule)?;
        self.momentum = state;
        match &cfg.mask {
            Some(m) => masked_combine(&base, &applied, m),
            None => base.zip_with(&applied, |b, a| b + a),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> LatentGrid {
        LatentGrid::from_vec(x.to_vec()).unwrap()
    }

    #[test]
    fn cfg_examples() {
        let c = v(&[0.3, -1.2]);
        let u = v(&[2.0, 0.5]);
        assert_eq!(cfg_score(&c, &u, 0.0).unwrap(), c);
        let same = cfg_score(&c, &c, 3.7).unwrap();
        for (a, b) in same.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(cfg_score(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 1.0).unwrap().data(), &[2.0, -1.0]);
        assert!(cfg_score(&c, &v(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn concept_examples() {
        let s = v(&[0.5]);
        assert_eq!(concept_score(&s, &v(&[9.0]), 0.0).unwrap(), s);
        assert_eq!(concept_score(&s, &s, 4.0).unwrap(), s);
        assert_eq!(concept_score(&s, &v(&[-0.5]), 2.0).unwrap().data(), &[2.5]);
        assert!(concept_score(&s, &v(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn classifier_guidance_examples() {
        let e = v(&[0.1, 0.2]);
        let g = v(&[3.0, -1.0]);
        assert_eq!(classifier_guidance(&e, &g, 0.0, 0.5).unwrap(), e);
        assert_eq!(classifier_guidance(&e, &v(&[0.0, 0.0]), 2.0, 0.5).unwrap(), e);
        assert_eq!(classifier_guidance(&e, &g, 2.0, 0.5).unwrap().data(), &[0.1 - 3.0, 0.2 + 1.0]);
        assert!(classifier_guidance(&e, &g, 1.0, 0.0).is_err());
        assert!(classifier_guidance(&e, &v(&[1.0]), 1.0, 0.5).is_err());
    }

    #[test]
    fn masked_combine_gates() {
        let base = LatentGrid::new(2, 2, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let delta = LatentGrid::new(2, 2, 3, (0..12).map(|i| 1.0 - i as f64 * 0.3).collect()).unwrap();
        let zero = Mask::filled(2, 2, 0.0).unwrap();
        assert_eq!(masked_combine(&base, &delta, &zero).unwrap(), base);
        let one = Mask::filled(2, 2, 1.0).unwrap();
        let sum = base.zip_with(&delta, |a, b| a + b).unwrap();
        assert_eq!(masked_combine(&base, &delta, &one).unwrap(), sum);
        let wrong = Mask::filled(3, 2, 1.0).unwrap();
        assert!(masked_combine(&base, &delta, &wrong).is_err());
    }

    #[test]
    fn masked_combine_checkerboard_matches_brute_force() {
        let mut rng = crate::diffusion::NoiseRng::new(11);
        let (h, w, c) = (5, 6, 3);
        let base = LatentGrid::new(h, w, c, rng.normal_vec(h * w * c)).unwrap();
        let delta = LatentGrid::new(h, w, c, rng.normal_vec(h * w * c)).unwrap();
        let m = Mask::from_fn(h, w, |y, x| if (y + x) % 2 == 0 { 1.0 } else { 0.25 }).unwrap();
        let out = masked_combine(&base, &delta, &m).unwrap();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    let weight = m.get(y, x);
                    let expected = base.data()[i] + weight * delta.data()[i];
                    assert_eq!(out.data()[i], expected);
                }
            }
        }
    }

    #[test]
    fn momentum_examples() {
        let s = NoiseSchedule::default();
        let zero = v(&[0.0, 0.0]);
        let mut st = MomentumState::new();
        for t in (900..910).rev() {
            let (next, applied) = momentum_update(st, &zero, 0.9, t, Decay::Linear, &s).unwrap();
            assert!(applied.data().iter().all(|&x| x == 0.0));
            st = next;
        }
        assert_eq!(st.value().unwrap().data(), &[0.0, 0.0]);

        let g = v(&[1.5, -2.0]);
        let (st, applied) = momentum_update(MomentumState::new(), &v(&[9.0, 9.0]), 0.0, 10, Decay::None, &s).unwrap();
        let (st, _) = momentum_update(st, &g, 0.0, 10, Decay::None, &s).unwrap();
        assert_eq!(st.value().unwrap(), &g);
        assert_eq!(applied.data(), &[9.0, 9.0]);

        let (_, applied) = momentum_update(MomentumState::new(), &g, 0.0, 500, Decay::Linear, &s).unwrap();
        assert_eq!(applied.data(), &[1.5 * 0.5, -2.0 * 0.5]);
        let (_, applied) = momentum_update(MomentumState::new(), &g, 0.0, 500, Decay::AlphaBar, &s).unwrap();
        assert_eq!(applied.data()[0], 1.5 * s.alpha_bar(500));

        let mismatched = MomentumState::zeros_like(&v(&[0.0; 3]));
        assert!(momentum_update(mismatched, &g, 0.9, 1, Decay::None, &s).is_err());
    }

    #[test]
    fn momentum_geometric_closed_form() {
        let s = NoiseSchedule::default();
        let g = v(&[0.7, -1.3, 2.2]);
        let mut st = MomentumState::new();
        for k in 1..=20 {
            st = momentum_update(st, &g, 0.9, 100, Decay::None, &s).unwrap().0;
            let factor = 1.0 - 0.9f64.powi(k);
            for (m, gi) in st.value().unwrap().data().iter().zip(g.data()) {
                assert!((m - factor * gi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_is_linear_in_input() {
        let s = NoiseSchedule::default();
        let prev = MomentumState::zeros_like(&v(&[0.0; 2]));
        let prev = momentum_update(prev, &v(&[0.4, -0.1]), 0.8, 50, Decay::None, &s).unwrap().0;
        let g1 = v(&[1.0, 2.0]);
        let g2 = v(&[-3.0, 0.5]);
        let upd = |g: &LatentGrid| momentum_update(prev.clone(), g, 0.8, 50, Decay::Linear, &s).unwrap().1;
        let zero = upd(&v(&[0.0, 0.0]));
        let sum = upd(&g1.zip_with(&g2, |a, b| a + b).unwrap());
        let a = upd(&g1);
        let b = upd(&g2);
        for i in 0..2 {
            // Affine in g with the carried state as offset.
            let lhs = sum.data()[i] - zero.data()[i];
            let rhs = (a.data()[i] - zero.data()[i]) + (b.data()[i] - zero.data()[i]);
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let ok = GuidanceConfig::default();
        assert!(ok.validate().is_ok());
        assert!(GuidanceConfig { w_cfg: -1.0, ..ok.clone() }.validate().is_err());
        assert!(GuidanceConfig { momentum_beta: 1.0, ..ok.clone() }.validate().is_err());
        assert!(GuidanceConfig {
            concept_s: Some("s".into()),
            ..ok
        }
        .validate()
        .is_err());
    }
}
