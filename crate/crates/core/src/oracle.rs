//! Analytic Gaussian-mixture diffusion oracle.
//!
//! Every condition shares the same diagonal-covariance components and only
//! reweights them, so the diffused densities, their scores and the posteriors
//! `p(c | z_t)` all have closed forms. A component `N(mu, diag(v))` diffused
//! to timestep `t` is `N(sqrt(ab) mu, ab v + (1 - ab))`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, Denoiser, LatentGrid, NoiseSchedule};
use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-9;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Marginal weight; derived from the condition table when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub mean: Vec<f64>,
    pub covariance: CovarianceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub prior: f64,
    pub weights: Vec<f64>,
}

/// On-disk model description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub dims: usize,
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub conditions: BTreeMap<String, ConditionSpec>,
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConditionWeights {
    prior: f64,
    weights: Vec<f64>,
}

/// Validated mixture model. Immutable; all queries are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmScoreModel {
    dims: usize,
    components: Vec<Component>,
    marginal: Vec<f64>,
    conditions: BTreeMap<String, ConditionWeights>,
}

fn check_weights(field: &str, weights: &[f64], allow_zero: bool) -> Result<()> {
    for (i, &w) in weights.iter().enumerate() {
        let ok = w.is_finite() && if allow_zero { w >= 0.0 } else { w > 0.0 };
        if !ok {
            let bound = if allow_zero { ">= 0" } else { "> 0" };
            return Err(Error::validation(format!("{field}[{i}]"), format!("weight {w} must be {bound}")));
        }
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::validation(field, format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

impl GmmSpec {
    pub fn validate(&self) -> Result<GmmScoreModel> {
        GmmScoreModel::from_spec(self)
    }
}

impl GmmScoreModel {
    pub fn from_spec(spec: &GmmSpec) -> Result<Self> {
        if spec.dims == 0 {
            return Err(Error::validation("dims", "must be >= 1"));
        }
        if spec.components.is_empty() {
            return Err(Error::validation("components", "at least one component required"));
        }
        let k = spec.components.len();
        let mut components = Vec::with_capacity(k);
        for (i, c) in spec.components.iter().enumerate() {
            if c.mean.len() != spec.dims {
                return Err(Error::validation(
                    format!("components[{i}].mean"),
                    format!("length {} != dims {}", c.mean.len(), spec.dims),
                ));
            }
            if let Some(j) = c.mean.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!("components[{i}].mean[{j}]"), "must be finite"));
            }
            let var = match &c.covariance {
                CovarianceSpec::Isotropic(v) => vec![*v; spec.dims],
                CovarianceSpec::Diagonal(v) => {
                    if v.len() != spec.dims {
                        return Err(Error::validation(
                            format!("components[{i}].covariance"),
                            format!("length {} != dims {}", v.len(), spec.dims),
                        ));
                    }
                    v.clone()
                }
            };
            if let Some(j) = var.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::validation(
                    format!("components[{i}].covariance[{j}]"),
                    "must be finite and > 0",
                ));
            }
            components.push(Component {
                mean: c.mean.clone(),
                var,
            });
        }

        let mut conditions = BTreeMap::new();
        for (id, c) in &spec.conditions {
            let field = format!("conditions.{id}");
            if id.is_empty() {
                return Err(Error::validation("conditions", "empty condition id"));
            }
            if c.weights.len() != k {
                return Err(Error::validation(
                    format!("{field}.weights"),
                    format!("length {} != component count {k}", c.weights.len()),
                ));
            }
            check_weights(&format!("{field}.weights"), &c.weights, true)?;
            if !(c.prior.is_finite() && c.prior > 0.0) {
                return Err(Error::validation(format!("{field}.prior"), "must be > 0"));
            }
            conditions.insert(
                id.clone(),
                ConditionWeights {
                    prior: c.prior,
                    weights: c.weights.clone(),
                },
            );
        }

        let given: Option<Vec<f64>> = spec.components.iter().map(|c| c.weight).collect();
        let any_given = spec.components.iter().any(|c| c.weight.is_some());
        if any_given && given.is_none() {
            return Err(Error::validation(
                "components",
                "either every component or none must carry a weight",
            ));
        }
        let marginal = if conditions.is_empty() {
            let w = given.ok_or_else(|| {
                Error::validation("components", "weights required when no conditions are defined")
            })?;
            check_weights("components.weight", &w, false)?;
            w
        } else {
            let prior_sum: f64 = conditions.values().map(|c| c.prior).sum();
            if (prior_sum - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::validation(
                    "conditions",
                    format!("priors sum to {prior_sum}, expected 1"),
                ));
            }
            let derived: Vec<f64> = (0..k)
                .map(|j| conditions.values().map(|c| c.prior * c.weights[j]).sum())
                .collect();
            if let Some(j) = derived.iter().position(|&w| w <= 0.0) {
                return Err(Error::validation(
                    format!("components[{j}]"),
                    "component has zero weight under every condition",
                ));
            }
            if let Some(w) = given {
                for (j, (a, b)) in w.iter().zip(&derived).enumerate() {
                    if (a - b).abs() > WEIGHT_TOL {
                        return Err(Error::validation(
                            format!("components[{j}].weight"),
                            format!("{a} disagrees with prior-weighted condition weights {b}"),
                        ));
                    }
                }
            }
            derived
        };

        Ok(Self {
            dims: spec.dims,
            components,
            marginal,
            conditions,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GmmSpec = serde_json::from_str(text).map_err(|e| {
            Error::validation(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        Self::from_spec(&spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::Io {
                    path: path.to_path_buf(),
                    source,
                }
            }
        })?;
        Self::from_json(&text)
    }

    pub fn to_spec(&self) -> GmmSpec {
        GmmSpec {
            dims: self.dims,
            components: self
                .components
                .iter()
                .zip(&self.marginal)
                .map(|(c, &w)| ComponentSpec {
                    weight: Some(w),
                    mean: c.mean.clone(),
                    covariance: CovarianceSpec::Diagonal(c.var.clone()),
                })
                .collect(),
            conditions: self
                .conditions
                .iter()
                .map(|(id, c)| {
                    (
                        id.clone(),
                        ConditionSpec {
                            prior: c.prior,
                            weights: c.weights.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn condition_ids(&self) -> impl Iterator<Item = &str> {
        self.conditions.keys().map(String::as_str)
    }

    pub fn prior(&self, c: &str) -> Result<f64> {
        self.conditions
            .get(c)
            .map(|w| w.prior)
            .ok_or_else(|| Error::UnknownCondition(c.to_string()))
    }

    /// Mixture weights under condition `c`; `None` selects the marginal.
    pub fn weights(&self, c: Option<&str>) -> Result<&[f64]> {
        match c {
            None => Ok(&self.marginal),
            Some(id) => self
                .conditions
                .get(id)
                .map(|w| w.weights.as_slice())
                .ok_or_else(|| Error::UnknownCondition(id.to_string())),
        }
    }

    fn check_dims(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dims {
            return Err(Error::dims(format!("point has {} dims, model has {}", z.len(), self.dims)));
        }
        Ok(())
    }

    /// Per-component `log N(z; sqrt(ab) mu, ab v + 1 - ab)` and scores.
    fn component_terms(&self, z: &[f64], t: usize, s: &NoiseSchedule, want_scores: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
        let ab = s.alpha_bar(t);
        let sqrt_ab = ab.sqrt();
        let mut logs = Vec::with_capacity(self.components.len());
        let mut scores = Vec::with_capacity(if want_scores { self.components.len() } else { 0 });
        for comp in &self.components {
            let mut acc = 0.0;
            let mut score = if want_scores { Vec::with_capacity(self.dims) } else { Vec::new() };
            for ((&x, &mu), &v) in z.iter().zip(&comp.mean).zip(&comp.var) {
                let var = ab * v + (1.0 - ab);
                let d = x - sqrt_ab * mu;
                acc += LN_2PI + var.ln() + d * d / var;
                if want_scores {
                    score.push(-d / var);
                }
            }
            logs.push(-0.5 * acc);
            if want_scores {
                scores.push(score);
            }
        }
        (logs, scores)
    }

    /// Log mixture terms `ln w_k + log N_k`, with zero weights dropped to -inf.
    fn weighted_logs(logs: &[f64], weights: &[f64]) -> Vec<f64> {
        logs.iter()
            .zip(weights)
            .map(|(&l, &w)| if w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
            .collect()
    }

    fn log_sum_exp(xs: &[f64]) -> f64 {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }

    fn responsibilities(weighted: &[f64]) -> Vec<f64> {
        let lse = Self::log_sum_exp(weighted);
        weighted.iter().map(|x| (x - lse).exp()).collect()
    }

    fn mix_scores(resp: &[f64], scores: &[Vec<f64>], dims: usize) -> Vec<f64> {
        let mut out = vec![0.0; dims];
        for (r, sc) in resp.iter().zip(scores) {
            if *r == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(sc) {
                *o += r * s;
            }
        }
        out
    }

    /// `log p_t(z | c)`; `c = None` is the marginal.
    pub fn log_density(&self, z: &[f64], t: usize, c: Option<&str>, s: &NoiseSchedule) -> Result<f64> {
        self.check_dims(z)?;
        s.check(t)?;
        let w = self.weights(c)?;
        let (logs, _) = self.component_terms(z, t, s, false);
        Ok(Self::log_sum_exp(&Self::weighted_logs(&logs, w)))
    }

    /// `grad_z log p_t(z | c)` in closed form.
    pub fn score(&self, z: &[f64], t: usize, c: Option<&str>, s: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dims(z)?;
        s.check(t)?;
        let w = self.weights(c)?;
        let (logs, scores) = self.component_terms(z, t, s, true);
        let resp = Self::responsibilities(&Self::weighted_logs(&logs, w));
        Ok(Self::mix_scores(&resp, &scores, self.dims))
    }

    /// Exact noise prediction `-sigma_t * grad log p_t(z | c)`.
    pub fn eps(&self, z: &[f64], t: usize, c: Option<&str>, s: &NoiseSchedule) -> Result<Vec<f64>> {
        let score = self.score(z, t, c, s)?;
        let sigma = s.sigma(t);
        Ok(score.into_iter().map(|g| -sigma * g).collect())
    }

    /// `p(c | z_t) = prior_c p_t(z | c) / p_t(z)`.
    pub fn posterior(&self, z: &[f64], t: usize, c: &str, s: &NoiseSchedule) -> Result<f64> {
        self.check_dims(z)?;
        s.check(t)?;
        let prior = self.prior(c)?;
        let (logs, _) = self.component_terms(z, t, s, false);
        let cond = Self::log_sum_exp(&Self::weighted_logs(&logs, self.weights(Some(c))?));
        let marg = Self::log_sum_exp(&Self::weighted_logs(&logs, &self.marginal));
        Ok((prior.ln() + cond - marg).exp())
    }

    /// `grad_z log p(c | z_t)`, as the responsibility-difference weighted sum
    /// of component scores.
    pub fn log_posterior_grad(&self, z: &[f64], t: usize, c: &str, s: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dims(z)?;
        s.check(t)?;
        let (logs, scores) = self.component_terms(z, t, s, true);
        let r_cond = Self::responsibilities(&Self::weighted_logs(&logs, self.weights(Some(c))?));
        let r_marg = Self::responsibilities(&Self::weighted_logs(&logs, &self.marginal));
        let diff: Vec<f64> = r_cond.iter().zip(&r_marg).map(|(a, b)| a - b).collect();
        let mut out = vec![0.0; self.dims];
        for (d, sc) in diff.iter().zip(&scores) {
            for (o, s) in out.iter_mut().zip(sc) {
                *o += d * s;
            }
        }
        Ok(out)
    }

    pub fn as_denoiser<'a>(&'a self, s: &'a NoiseSchedule) -> GmmDenoiser<'a> {
        GmmDenoiser { model: self, schedule: s }
    }
}

/// Adapts the oracle to [`Denoiser`] by flattening latents row-major.
#[derive(Debug, Clone, Copy)]
pub struct GmmDenoiser<'a> {
    model: &'a GmmScoreModel,
    schedule: &'a NoiseSchedule,
}

impl GmmDenoiser<'_> {
    pub fn model(&self) -> &GmmScoreModel {
        self.model
    }
}

impl Denoiser for GmmDenoiser<'_> {
    fn predict(&self, z: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid> {
        let c = match cond {
            Condition::Unconditional => None,
            Condition::Concept(id) => Some(id.as_str()),
            Condition::Control(_) => {
                return Err(Error::UnknownCondition("control maps (oracle has no control input)".into()))
            }
        };
        let eps = self.model.eps(z.data(), t, c, self.schedule)?;
        z.like(eps)
    }
}
