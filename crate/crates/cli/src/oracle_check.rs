use std::path::PathBuf;

use portrait_core::diffusion::{LatentGrid, NoiseRng, NoiseSchedule};
use portrait_core::guidance::{cfg_score, classifier_guidance, masked_combine, momentum_update, Decay, MomentumState};
use portrait_core::image::Mask;
use portrait_core::oracle::{CovarianceSpec, GmmScoreModel};
use portrait_core::synth::DEFAULT_ORACLE_JSON;
use serde::Serialize;

use crate::command_config;
use crate::config::canonical;
use crate::error::CliError;
use crate::util::write_file;

command_config! {
    /// Settings of `oracle-check`.
    OracleCheckConfig / OracleCheckArgs {
        /// Mixture model to check; the built-in default fixture when unset.
        model_path: Option<PathBuf> => PathBuf = None,
        /// Random (z, t) draws per check.
        trials: usize => usize = 1000,
        /// Seed of the random draws.
        seed: u64 => u64 = 0,
        /// Max |classifier guidance - classifier-free guidance|.
        tol_guidance: f64 => f64 = 1e-9,
        /// Max relative error of eps against finite differences of the log-density.
        tol_score_fd: f64 => f64 = 1e-4,
        /// Max |grad log p(c|z) - (score(z|c) - score(z))|.
        tol_bayes: f64 => f64 = 1e-9,
        /// Max |sum of posteriors - 1|.
        tol_posterior_sum: f64 => f64 = 1e-12,
        /// Max |momentum state - (1 - 0.9^k) g| for k = 1, 5, 20.
        tol_momentum: f64 => f64 = 1e-12,
        /// Also write the report to this file.
        report: Option<PathBuf> => PathBuf = None,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub achieved: f64,
    pub required: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub model: String,
    pub trials: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub max_bayes_residual: f64,
    pub passed: bool,
}

impl OracleReport {
    pub fn breaches(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: achieved {:e}, required < {:e}", c.name, c.achieved, c.required))
            .collect()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn index_below(rng: &mut NoiseRng, n: usize) -> usize {
    ((rng.uniform() * n as f64) as usize).min(n - 1)
}

/// A draw from one component of the mixture diffused to `t`.
fn typical_point(rng: &mut NoiseRng, m: &GmmScoreModel, t: usize, s: &NoiseSchedule) -> Vec<f64> {
    let spec = m.to_spec();
    let comp = &spec.components[index_below(rng, spec.components.len())];
    let ab = s.alpha_bar(t);
    (0..spec.dims)
        .map(|i| {
            let v = match &comp.covariance {
                CovarianceSpec::Isotropic(v) => *v,
                CovarianceSpec::Diagonal(d) => d[i],
            };
            ab.sqrt() * comp.mean[i] + (ab * v + 1.0 - ab).sqrt() * rng.standard_normal()
        })
        .collect()
}

fn check(name: &'static str, achieved: f64, required: f64) -> CheckResult {
    CheckResult {
        name,
        achieved,
        required,
        passed: achieved < required,
    }
}

/// Runs every check; never fails on a breach, the report records it.
pub fn check_model(model: &GmmScoreModel, cfg: &OracleCheckConfig) -> Result<Vec<CheckResult>, CliError> {
    let s = NoiseSchedule::default();
    let conds: Vec<String> = model.condition_ids().map(str::to_string).collect();
    let mut rng = NoiseRng::new(cfg.seed);
    let dims = model.dims();
    let h = 1e-5;

    let (mut guidance, mut fd, mut bayes, mut post_sum) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..cfg.trials {
        let t = index_below(&mut rng, s.len());
        let z = typical_point(&mut rng, model, t, &s);
        let sigma = s.sigma(t);

        let c = if conds.is_empty() || trial % 3 == 0 {
            None
        } else {
            Some(conds[index_below(&mut rng, conds.len())].as_str())
        };
        let eps = model.eps(&z, t, c, &s)?;
        let grad: Vec<f64> = (0..dims)
            .map(|i| {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                Ok((model.log_density(&zp, t, c, &s)? - model.log_density(&zm, t, c, &s)?) / (2.0 * h))
            })
            .collect::<Result<_, portrait_core::Error>>()?;
        let fd_eps: Vec<f64> = grad.iter().map(|g| -sigma * g).collect();
        let err = eps.iter().zip(&fd_eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = eps.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-3);
        fd = fd.max(err / scale);

        if conds.is_empty() {
            continue;
        }
        let c = conds[index_below(&mut rng, conds.len())].as_str();
        let w = 5.0 * rng.uniform();
        let eps_c = LatentGrid::from_vec(model.eps(&z, t, Some(c), &s)?)?;
        let eps_u = LatentGrid::from_vec(model.eps(&z, t, None, &s)?)?;
        let post_grad = model.log_posterior_grad(&z, t, c, &s)?;
        let cg = classifier_guidance(&eps_c, &LatentGrid::from_vec(post_grad.clone())?, w, sigma)?;
        let cfg_eps = cfg_score(&eps_c, &eps_u, w)?;
        guidance = guidance.max(max_abs_diff(cg.data(), cfg_eps.data()));

        let sc = model.score(&z, t, Some(c), &s)?;
        let su = model.score(&z, t, None, &s)?;
        let diff: Vec<f64> = sc.iter().zip(&su).map(|(a, b)| a - b).collect();
        bayes = bayes.max(max_abs_diff(&post_grad, &diff));

        let total = conds
            .iter()
            .map(|c| model.posterior(&z, t, c, &s))
            .sum::<portrait_core::Result<f64>>()?;
        post_sum = post_sum.max((total - 1.0).abs());
    }

    let mut results = vec![check("score_finite_difference", fd, cfg.tol_score_fd)];
    if !conds.is_empty() {
        results.push(check("classifier_vs_free_guidance", guidance, cfg.tol_guidance));
        results.push(check("bayes_identity", bayes, cfg.tol_bayes));
        results.push(check("posterior_sum", post_sum, cfg.tol_posterior_sum));
    }
    results.push(check("mask_isolation_violations", mask_violations(&mut rng, cfg.trials.min(100))? as f64, 0.5));
    results.push(check("momentum_closed_form", momentum_residual(&mut rng, &s)?, cfg.tol_momentum));
    Ok(results)
}

/// Zero-mask pixels whose combined value differs in any bit from the base.
fn mask_violations(rng: &mut NoiseRng, configs: usize) -> Result<usize, CliError> {
    let mut bad = 0;
    for _ in 0..configs {
        let (h, w, c) = (1 + index_below(rng, 8), 1 + index_below(rng, 8), 1 + index_below(rng, 3));
        let base = LatentGrid::new(h, w, c, rng.normal_vec(h * w * c))?;
        let delta = LatentGrid::new(h, w, c, rng.normal_vec(h * w * c).iter().map(|v| 50.0 * v).collect())?;
        let mask = Mask::from_fn(h, w, |_, _| if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() })?;
        let out = masked_combine(&base, &delta, &mask)?;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) != 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    bad += usize::from(out.data()[i].to_bits() != base.data()[i].to_bits());
                }
            }
        }
    }
    Ok(bad)
}

fn momentum_residual(rng: &mut NoiseRng, s: &NoiseSchedule) -> Result<f64, CliError> {
    let g = LatentGrid::from_vec(rng.normal_vec(16))?;
    let mut worst = 0.0f64;
    for k in [1, 5, 20] {
        let mut st = MomentumState::new();
        for _ in 0..k {
            st = momentum_update(st, &g, 0.9, s.len() - 1, Decay::None, s)?.0;
        }
        let m = st.value().expect("updated at least once");
        let scale = 1.0 - 0.9f64.powi(k);
        let expected: Vec<f64> = g.data().iter().map(|v| scale * v).collect();
        worst = worst.max(max_abs_diff(m.data(), &expected));
    }
    Ok(worst)
}

pub fn build_report(cfg: &OracleCheckConfig) -> Result<OracleReport, CliError> {
    if cfg.trials == 0 {
        return Err(CliError::validation("trials", "must be >= 1"));
    }
    let (model, name) = match &cfg.model_path {
        Some(p) => (GmmScoreModel::load(p)?, p.display().to_string()),
        None => (GmmScoreModel::from_json(DEFAULT_ORACLE_JSON)?, "builtin:default".to_string()),
    };
    let checks = check_model(&model, cfg)?;
    let max_bayes_residual = checks
        .iter()
        .find(|c| c.name == "bayes_identity")
        .map_or(0.0, |c| c.achieved);
    let passed = checks.iter().all(|c| c.passed);
    Ok(OracleReport {
        model: name,
        trials: cfg.trials,
        seed: cfg.seed,
        checks,
        max_bayes_residual,
        passed,
    })
}

pub fn run(cfg: &OracleCheckConfig) -> Result<(), CliError> {
    let report = build_report(cfg)?;
    let text = canonical(&report);
    if let Some(p) = &cfg.report {
        write_file(p, text.as_bytes())?;
    }
    print!("{text}");
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Tolerance(report.breaches()))
    }
}
