#![allow(dead_code)]

use std::collections::BTreeMap;

use portrait_core::diffusion::NoiseRng;
use portrait_core::oracle::{ComponentSpec, ConditionSpec, CovarianceSpec, GmmScoreModel, GmmSpec};

pub fn uniform_in(rng: &mut NoiseRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub fn index_below(rng: &mut NoiseRng, n: usize) -> usize {
    ((rng.uniform() * n as f64) as usize).min(n - 1)
}

/// Random diagonal mixture with conditions `c0..c{n-1}` and random priors.
pub fn random_model(rng: &mut NoiseRng, dims: usize, k: usize, n_cond: usize) -> GmmScoreModel {
    let components = (0..k)
        .map(|_| ComponentSpec {
            weight: None,
            mean: (0..dims).map(|_| uniform_in(rng, -3.0, 3.0)).collect(),
            covariance: CovarianceSpec::Diagonal((0..dims).map(|_| uniform_in(rng, 0.2, 2.0)).collect()),
        })
        .collect();
    let raw: Vec<f64> = (0..n_cond).map(|_| uniform_in(rng, 0.2, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let conditions: BTreeMap<String, ConditionSpec> = raw
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w: Vec<f64> = (0..k).map(|_| uniform_in(rng, 0.05, 1.0)).collect();
            let sw: f64 = w.iter().sum();
            (
                format!("c{i}"),
                ConditionSpec {
                    prior: p / total,
                    weights: w.iter().map(|x| x / sw).collect(),
                },
            )
        })
        .collect();
    GmmScoreModel::from_spec(&GmmSpec {
        dims,
        components,
        conditions,
    })
    .expect("random model is valid")
}

/// A point drawn near the diffused mixture at `t`.
pub fn typical_point(rng: &mut NoiseRng, m: &GmmScoreModel, ab: f64) -> Vec<f64> {
    let spec = m.to_spec();
    let comp = &spec.components[index_below(rng, spec.components.len())];
    comp.mean
        .iter()
        .enumerate()
        .map(|(i, mu)| {
            let v = match &comp.covariance {
                CovarianceSpec::Isotropic(v) => *v,
                CovarianceSpec::Diagonal(d) => d[i],
            };
            ab.sqrt() * mu + (ab * v + 1.0 - ab).sqrt() * rng.standard_normal()
        })
        .collect()
}

/// Textbook mixture density and score written out term by term, without
/// log-sum-exp; used as an independent reference.
pub struct NaiveMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl NaiveMixture {
    pub fn from_model(m: &GmmScoreModel, c: Option<&str>) -> Self {
        let spec = m.to_spec();
        let weights = m.weights(c).unwrap().to_vec();
        let means = spec.components.iter().map(|c| c.mean.clone()).collect();
        let vars = spec
            .components
            .iter()
            .map(|c| match &c.covariance {
                CovarianceSpec::Isotropic(v) => vec![*v; spec.dims],
                CovarianceSpec::Diagonal(d) => d.clone(),
            })
            .collect();
        Self { weights, means, vars }
    }

    fn component(&self, k: usize, z: &[f64], ab: f64) -> f64 {
        let mut p = 1.0;
        for (i, zi) in z.iter().enumerate() {
            let var = ab * self.vars[k][i] + 1.0 - ab;
            let d = zi - ab.sqrt() * self.means[k][i];
            p *= (-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        }
        p
    }

    pub fn density(&self, z: &[f64], ab: f64) -> f64 {
        (0..self.weights.len()).map(|k| self.weights[k] * self.component(k, z, ab)).sum()
    }

    /// Gradient of the log-density: sum_k w_k N_k * (-(z - m_k) / var_k) / p.
    pub fn score(&self, z: &[f64], ab: f64) -> Vec<f64> {
        let p = self.density(z, ab);
        let mut g = vec![0.0; z.len()];
        for k in 0..self.weights.len() {
            let wk = self.weights[k] * self.component(k, z, ab) / p;
            for (i, gi) in g.iter_mut().enumerate() {
                let var = ab * self.vars[k][i] + 1.0 - ab;
                *gi -= wk * (z[i] - ab.sqrt() * self.means[k][i]) / var;
            }
        }
        g
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
