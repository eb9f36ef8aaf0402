mod common;

use std::collections::BTreeMap;

use portrait_core::diffusion::{
    ddim_step, ddim_steps, ddpm_step, ddpm_steps, forward_diffuse, sample, sample_traced, validate_steps, Condition,
    Denoiser, LatentGrid, NoiseRng, NoiseSchedule, SamplerKind,
};
use portrait_core::guidance::{GuidanceConfig, GuidedScorer};
use portrait_core::oracle::{ComponentSpec, ConditionSpec, CovarianceSpec, GmmScoreModel, GmmSpec};
use portrait_core::synth::TWO_MODE_ORACLE_JSON;
use portrait_core::{Error, Result};

fn gaussian(dims: usize, mean: f64, var: f64) -> GmmScoreModel {
    GmmScoreModel::from_spec(&GmmSpec {
        dims,
        components: vec![ComponentSpec {
            weight: Some(1.0),
            mean: vec![mean; dims],
            covariance: CovarianceSpec::Isotropic(var),
        }],
        conditions: BTreeMap::<String, ConditionSpec>::new(),
    })
    .unwrap()
}

fn scorer<'a>(d: &'a dyn Denoiser, s: &'a NoiseSchedule) -> GuidedScorer<'a> {
    GuidedScorer::new(d, s, GuidanceConfig::default(), Condition::Unconditional).unwrap()
}

#[test]
fn forward_moments_at_operating_points() {
    let s = NoiseSchedule::default();
    let z0 = LatentGrid::new(1, 4, 1, vec![-1.0, -0.25, 0.5, 1.0]).unwrap();
    let n = 100_000;
    for t in [399, 699] {
        let mut rng = NoiseRng::new(t as u64);
        let mut sum = [0.0; 4];
        let mut sum_sq = [0.0; 4];
        for _ in 0..n {
            let noise = rng.normal_like(&z0);
            let zt = forward_diffuse(&z0, t, &noise, &s).unwrap();
            for (i, v) in zt.data().iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        let var_true = 1.0 - s.alpha_bar(t);
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            let want = s.alpha_bar(t).sqrt() * z0.data()[i];
            let se = (var_true / n as f64).sqrt();
            assert!((mean - want).abs() < 3.0 * se, "t={t} i={i}: mean {mean} vs {want}");
            assert!((var / var_true - 1.0).abs() < 0.02, "t={t} i={i}: var {var} vs {var_true}");
        }
    }
}

#[test]
fn forward_diffuse_limits() {
    let s = NoiseSchedule::default();
    let z0 = LatentGrid::new(2, 2, 1, vec![0.5, -2.0, 1.0, 0.0]).unwrap();
    let zeros = LatentGrid::zeros(2, 2, 1);
    let scaled = forward_diffuse(&z0, 500, &zeros, &s).unwrap();
    for (a, b) in scaled.data().iter().zip(z0.data()) {
        assert_eq!(*a, s.alpha_bar(500).sqrt() * b);
    }
    assert!(forward_diffuse(&z0, 1000, &zeros, &s).is_err());
    assert!(forward_diffuse(&z0, 10, &LatentGrid::zeros(1, 4, 1), &s).is_err());
}

#[test]
fn ddpm_concentrates_on_gaussian_mean() {
    let s = NoiseSchedule::default();
    let (mu, var) = (0.8, 0.3);
    // A diagonal Gaussian factorizes, so each coordinate is an independent run.
    let runs = 10_000;
    let model = gaussian(runs, mu, var);
    let d = model.as_denoiser(&s);
    let mut rng = NoiseRng::new(21);
    let init = rng.normal_like(&LatentGrid::zeros(1, runs, 1));
    let out = sample(&mut scorer(&d, &s), &s, &init, &ddpm_steps(999), SamplerKind::Ddpm, &mut rng).unwrap();
    let mean = out.data().iter().sum::<f64>() / runs as f64;
    let sample_var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    assert!((mean - mu).abs() < 0.05, "mean {mean}");
    assert!((sample_var / var - 1.0).abs() < 0.1, "variance {sample_var}");
}

/// Per-step gain of DDIM on a centred Gaussian coordinate: with
/// `u = z - sqrt(ab) mu`, the exact eps is `sigma u / (ab v + sigma^2)`.
fn ddim_gain(s: &NoiseSchedule, v: f64, t: usize, t_prev: Option<usize>) -> f64 {
    let (ab, sg) = (s.alpha_bar(t), s.sigma(t));
    let (ab_p, sg_p) = t_prev.map_or((1.0, 0.0), |tp| (s.alpha_bar(tp), s.sigma(tp)));
    (ab_p.sqrt() * ab.sqrt() * v + sg_p * sg) / (ab * v + sg * sg)
}

#[test]
fn ddim_follows_closed_form_trajectory() {
    let s = NoiseSchedule::default();
    let spec = GmmSpec {
        dims: 3,
        components: vec![ComponentSpec {
            weight: Some(1.0),
            mean: vec![1.0, -0.5, 0.2],
            covariance: CovarianceSpec::Diagonal(vec![0.05, 0.5, 1.0]),
        }],
        conditions: BTreeMap::new(),
    };
    let model = GmmScoreModel::from_spec(&spec).unwrap();
    let d = model.as_denoiser(&s);
    let init = LatentGrid::new(1, 3, 1, vec![0.7, -1.3, 2.1]).unwrap();
    let steps = ddim_steps(999, 50);
    assert_eq!(steps.len(), 50);
    let out = sample(&mut scorer(&d, &s), &s, &init, &steps, SamplerKind::Ddim, &mut NoiseRng::new(0)).unwrap();
    let cov = [0.05, 0.5, 1.0];
    for i in 0..3 {
        let mu = spec.components[0].mean[i];
        let mut u = init.data()[i] - s.alpha_bar(999).sqrt() * mu;
        for (k, &t) in steps.iter().enumerate() {
            u *= ddim_gain(&s, cov[i], t, steps.get(k + 1).copied());
        }
        let want = mu + u;
        assert!((out.data()[i] - want).abs() < 1e-3, "coord {i}: {} vs {want}", out.data()[i]);
    }
}

/// Returns the noise that produced `z_t` from a known clean latent, which is
/// what a perfect denoiser predicts on the forward path.
struct KnownNoise {
    x0: LatentGrid,
    schedule: NoiseSchedule,
}

impl Denoiser for KnownNoise {
    fn predict(&self, z: &LatentGrid, t: usize, _: &Condition) -> Result<LatentGrid> {
        let (a, b) = (self.schedule.alpha_bar(t).sqrt(), self.schedule.sigma(t));
        z.zip_with(&self.x0, |zv, x| (zv - a * x) / b)
    }
}

#[test]
fn ddim_is_invariant_to_step_refinement() {
    let s = NoiseSchedule::default();
    let x0 = LatentGrid::new(1, 3, 1, vec![0.9, -0.4, 0.1]).unwrap();
    let noise = LatentGrid::new(1, 3, 1, vec![0.3, 1.7, -0.8]).unwrap();
    let zt = forward_diffuse(&x0, 899, &noise, &s).unwrap();
    let d = KnownNoise { x0: x0.clone(), schedule: s.clone() };
    let mut ends = Vec::new();
    for n in [5, 20, 50, 200] {
        let out = sample(&mut scorer(&d, &s), &s, &zt, &ddim_steps(899, n), SamplerKind::Ddim, &mut NoiseRng::new(0)).unwrap();
        ends.push(out);
    }
    for e in &ends {
        for (a, b) in e.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn ddim_inversion_identity() {
    let s = NoiseSchedule::default();
    let z0 = LatentGrid::new(1, 2, 1, vec![0.4, -1.1]).unwrap();
    let noise = LatentGrid::new(1, 2, 1, vec![-0.6, 0.9]).unwrap();
    let zt = forward_diffuse(&z0, 600, &noise, &s).unwrap();
    let out = ddim_step(&zt, &noise, 600, Some(250), &s).unwrap();
    let want = forward_diffuse(&z0, 250, &noise, &s).unwrap();
    for (a, b) in out.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let clean = ddim_step(&zt, &noise, 600, None, &s).unwrap();
    for (a, b) in clean.data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(ddim_step(&zt, &noise, 600, Some(600), &s).is_err());
}

fn two_mode_samples(n: usize, seed: u64) -> Vec<f64> {
    let s = NoiseSchedule::default();
    let model = GmmScoreModel::from_json(TWO_MODE_ORACLE_JSON).unwrap();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16);
    let steps = ddpm_steps(999);
    let mut out = vec![0.0; n];
    std::thread::scope(|scope| {
        for (chunk_idx, chunk) in out.chunks_mut(n.div_ceil(threads)).enumerate() {
            let (model, s, steps) = (&model, &s, &steps);
            scope.spawn(move || {
                let d = model.as_denoiser(s);
                for (j, slot) in chunk.iter_mut().enumerate() {
                    let run = (chunk_idx * n.div_ceil(threads) + j) as u64;
                    let mut rng = NoiseRng::new(seed).with_stream(run);
                    let init = rng.normal_like(&LatentGrid::zeros(1, 1, 1));
                    let z = sample(&mut scorer(&d, s), s, &init, steps, SamplerKind::Ddpm, &mut rng).unwrap();
                    *slot = z.data()[0];
                }
            });
        }
    });
    out
}

#[test]
fn ddpm_recovers_two_mode_mixture() {
    let samples = two_mode_samples(10_000, 5);
    let (pos, neg): (Vec<f64>, Vec<f64>) = samples.iter().partition(|v| **v > 0.0);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&pos) - 2.0).abs() < 0.1, "positive mode at {}", mean(&pos));
    assert!((mean(&neg) + 2.0).abs() < 0.1, "negative mode at {}", mean(&neg));
    let frac = pos.len() as f64 / samples.len() as f64;
    assert!((frac / 0.5 - 1.0).abs() < 0.05, "positive fraction {frac}");
    // Chains started from different streams agree with a rerun bit for bit.
    assert_eq!(two_mode_samples(64, 5), samples[..64].to_vec());
}

#[test]
fn sampling_is_bit_deterministic() {
    let s = NoiseSchedule::default();
    let model = gaussian(16, 0.3, 0.2);
    let d = model.as_denoiser(&s);
    let run = |seed| {
        let mut rng = NoiseRng::new(seed);
        let init = rng.normal_like(&LatentGrid::zeros(4, 4, 1));
        let mut trace = Vec::new();
        let out = sample_traced(&mut scorer(&d, &s), &s, &init, &ddpm_steps(300), SamplerKind::Ddpm, &mut rng, |t, z| {
            trace.push((t, z.data()[0].to_bits()))
        })
        .unwrap();
        (out, trace)
    };
    let (a, ta) = run(3);
    let (b, tb) = run(3);
    assert_eq!(ta, tb);
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_ne!(run(4).0, a);
}

#[test]
fn single_step_equals_direct_step() {
    let s = NoiseSchedule::default();
    let model = gaussian(4, -0.2, 0.4);
    let d = model.as_denoiser(&s);
    let z = LatentGrid::new(2, 2, 1, vec![0.1, 0.5, -0.7, 1.2]).unwrap();
    let eps = d.predict(&z, 1, &Condition::Unconditional).unwrap();
    let direct = ddpm_step(&z, &eps, 1, &s, &mut NoiseRng::new(0)).unwrap();
    let via = sample(&mut scorer(&d, &s), &s, &z, &[1], SamplerKind::Ddpm, &mut NoiseRng::new(0)).unwrap();
    assert_eq!(direct, via);
    let eps = d.predict(&z, 400, &Condition::Unconditional).unwrap();
    let direct = ddim_step(&z, &eps, 400, None, &s).unwrap();
    let via = sample(&mut scorer(&d, &s), &s, &z, &[400], SamplerKind::Ddim, &mut NoiseRng::new(0)).unwrap();
    assert_eq!(direct, via);
}

#[test]
fn step_lists_are_validated() {
    let s = NoiseSchedule::default();
    let field = |r: std::result::Result<(), Error>| match r {
        Err(Error::Validation { field, .. }) => field,
        other => panic!("expected validation error, got {other:?}"),
    };
    assert_eq!(field(validate_steps(SamplerKind::Ddim, &[], &s)), "steps");
    assert_eq!(field(validate_steps(SamplerKind::Ddim, &[10, 10], &s)), "steps[1]");
    assert_eq!(field(validate_steps(SamplerKind::Ddim, &[5, 1000], &s)), "steps[1]");
    assert_eq!(field(validate_steps(SamplerKind::Ddpm, &[5, 3], &s)), "steps[1]");
    assert_eq!(field(validate_steps(SamplerKind::Ddpm, &[1, 0], &s)), "steps[1]");
    assert!(validate_steps(SamplerKind::Ddim, &[900, 450, 0], &s).is_ok());
    assert!(validate_steps(SamplerKind::Ddpm, &ddpm_steps(999), &s).is_ok());
}
