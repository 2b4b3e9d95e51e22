//! Synthetic peak tables drawn from the random-intercept model, with known
//! latent intensities.
//!
//! Each cluster gets a peak pattern `mⱼ`, a random-intercept variance τ²
//! and a noise variance σ². Latent log intensities are
//! `ỹᵢⱼ = mⱼ + aᵢ + εᵢⱼ` with `aᵢ ~ N(0, τ²)`, plus a shift for cases on the
//! informative clusters. Cells below a per-cluster threshold are censored;
//! every peak keeps at least two observed cells.
//!
//! Zero-variance clusters use τ² = 0 and noise centred within each
//! patient, and are left uncensored, so every patient has the same mean
//! residual and the fitted τ² is exactly 0.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DataError, Labels, LodPolicy, PeakSpec, PeakTable};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("censoring target {0} is infeasible")]
    Censoring(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_cases: usize,
    pub n_clusters: usize,
    pub min_peaks: usize,
    pub max_peaks: usize,
    /// Target fraction of censored cells over the whole table.
    pub censoring: f64,
    pub n_informative: usize,
    /// Shift of the case intercepts on informative clusters.
    pub effect: f64,
    pub n_zero_variance: usize,
    /// τ² of informative clusters.
    pub tau2_range: (f64, f64),
    /// τ² of the remaining (non-informative, non-zero-variance) clusters.
    pub noise_tau2_range: (f64, f64),
    pub sigma2_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 160,
            n_cases: 49,
            n_clusters: 120,
            min_peaks: 3,
            max_peaks: 8,
            censoring: 0.85,
            n_informative: 20,
            effect: 0.5,
            n_zero_variance: 10,
            tau2_range: (0.05, 0.4),
            noise_tau2_range: (0.05, 0.4),
            sigma2_range: (0.02, 0.1),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_samples < 4 || self.n_cases < 2 || self.n_cases + 2 > self.n_samples {
            return bad("need at least 2 cases and 2 controls");
        }
        if self.n_clusters == 0 || self.min_peaks == 0 || self.min_peaks > self.max_peaks {
            return bad("cluster and peak counts must be positive with min_peaks ≤ max_peaks");
        }
        if self.n_informative + self.n_zero_variance > self.n_clusters {
            return bad("informative plus zero-variance clusters exceed the cluster count");
        }
        if !(0.0..1.0).contains(&self.censoring) {
            return Err(SynthError::Censoring(self.censoring));
        }
        let ok_range = |r: (f64, f64)| r.0 >= 0.0 && r.0 <= r.1 && r.1.is_finite();
        if !ok_range(self.tau2_range)
            || !ok_range(self.noise_tau2_range)
            || !ok_range(self.sigma2_range)
            || self.sigma2_range.0 <= 0.0
        {
            return bad("variance ranges must be ordered, finite and non-negative (σ² positive)");
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic table.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub informative: Vec<usize>,
    pub zero_variance: Vec<usize>,
    pub tau2: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub peaks_per_cluster: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub table: PeakTable,
    pub labels: Labels,
    pub truth: SynthTruth,
}

struct ClusterSpec {
    k: usize,
    pattern: Vec<f64>,
    tau2: f64,
    sigma2: f64,
    informative: bool,
    zero_variance: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const LABEL_STREAM: u64 = 0;
const ROLE_STREAM: u64 = 1;
const PARAM_BASE: u64 = 1 << 20;
const PATIENT_BASE: u64 = 2 << 20;
const VAL_PATIENT_BASE: u64 = 3 << 20;
const VAL_LABEL_STREAM: u64 = 4 << 20;

fn cluster_specs(cfg: &SynthConfig, seed: u64) -> Vec<ClusterSpec> {
    let mut roles: Vec<usize> = (0..cfg.n_clusters).collect();
    roles.shuffle(&mut stream(seed, ROLE_STREAM));
    let informative: Vec<usize> = roles[..cfg.n_informative].to_vec();
    let zero: Vec<usize> =
        roles[cfg.n_informative..cfg.n_informative + cfg.n_zero_variance].to_vec();
    (0..cfg.n_clusters)
        .map(|c| {
            let mut rng = stream(seed, PARAM_BASE + c as u64);
            let k = rng.gen_range(cfg.min_peaks..=cfg.max_peaks);
            let level = rng.gen_range(1.0..3.0);
            let decay = rng.gen_range(0.15..0.45);
            let pattern = (0..k).map(|j| level - decay * j as f64).collect();
            let zero_variance = zero.contains(&c);
            let informative = informative.contains(&c);
            let range = if informative {
                cfg.tau2_range
            } else {
                cfg.noise_tau2_range
            };
            let tau2 = if zero_variance {
                0.0
            } else {
                rng.gen_range(range.0..=range.1)
            };
            let sigma2 = rng.gen_range(cfg.sigma2_range.0..=cfg.sigma2_range.1);
            ClusterSpec {
                k,
                pattern,
                tau2,
                sigma2,
                informative,
                zero_variance,
            }
        })
        .collect()
}

fn draw_labels(n: usize, n_cases: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut g: Vec<bool> = (0..n).map(|i| i < n_cases).collect();
    g.shuffle(rng);
    g
}

/// Latent cells of one cluster, patient-major.
fn draw_latent(
    spec: &ClusterSpec,
    outcome: &[bool],
    effect: f64,
    shift: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let k = spec.k;
    let (tau, sigma) = (spec.tau2.sqrt(), spec.sigma2.sqrt());
    let mut out = Vec::with_capacity(outcome.len() * k);
    for &case in outcome {
        let mut a = tau * rng.sample::<f64, _>(StandardNormal) + shift;
        if spec.informative && case {
            a += effect;
        }
        let mut eps: Vec<f64> = (0..k)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if spec.zero_variance {
            let m = eps.iter().sum::<f64>() / k as f64;
            eps.iter_mut().for_each(|e| *e -= m);
        }
        out.extend(spec.pattern.iter().zip(&eps).map(|(m, e)| m + a + e));
    }
    out
}

/// Empirical quantile by sorting (lower order statistic).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).floor() as usize).min(v.len() - 1);
    v[idx]
}

/// Observed flags for one cluster: censored below `threshold`, each peak
/// capped at its second-largest value.
fn censor(latent: &[f64], n: usize, k: usize, threshold: Option<f64>) -> Vec<bool> {
    let Some(t) = threshold else {
        return vec![true; latent.len()];
    };
    let mut observed = vec![true; latent.len()];
    for j in 0..k {
        let mut col: Vec<f64> = (0..n).map(|i| latent[i * k + j]).collect();
        col.sort_by(f64::total_cmp);
        let cap = if n >= 2 { col[n - 2] } else { col[0] };
        let tj = t.min(cap);
        for i in 0..n {
            observed[i * k + j] = latent[i * k + j] >= tj;
        }
    }
    observed
}

/// Per-cluster thresholds hitting the overall censoring target with the
/// zero-variance clusters left uncensored.
fn thresholds(
    cfg: &SynthConfig,
    specs: &[ClusterSpec],
    latent: &[Vec<f64>],
) -> Result<Vec<Option<f64>>, SynthError> {
    if cfg.censoring == 0.0 {
        return Ok(vec![None; specs.len()]);
    }
    let total: usize = latent.iter().map(Vec::len).sum();
    let censorable: usize = specs
        .iter()
        .zip(latent)
        .filter(|(s, _)| !s.zero_variance)
        .map(|(_, l)| l.len())
        .sum();
    let q = cfg.censoring * total as f64 / censorable.max(1) as f64;
    if q >= 1.0 {
        return Err(SynthError::Censoring(cfg.censoring));
    }
    Ok(specs
        .iter()
        .zip(latent)
        .map(|(s, l)| (!s.zero_variance).then(|| quantile(l, q)))
        .collect())
}

fn assemble(
    prefix: &str,
    specs: &[ClusterSpec],
    latent: &[Vec<f64>],
    observed: &[Vec<bool>],
    outcome: Vec<bool>,
) -> Result<SyntheticWorld, SynthError> {
    let n = outcome.len();
    let p: usize = specs.iter().map(|s| s.k).sum();
    let mut peaks = Vec::with_capacity(p);
    for (c, s) in specs.iter().enumerate() {
        for _ in 0..s.k {
            peaks.push(PeakSpec {
                id: (peaks.len() + 1).to_string(),
                cluster: c + 1,
            });
        }
    }
    let mut lat = vec![0.0; n * p];
    let mut obs = vec![true; n * p];
    let mut offset = 0;
    for (c, s) in specs.iter().enumerate() {
        for i in 0..n {
            for j in 0..s.k {
                lat[i * p + offset + j] = latent[c][i * s.k + j];
                obs[i * p + offset + j] = observed[c][i * s.k + j];
            }
        }
        offset += s.k;
    }
    let sample_ids: Vec<String> = (1..=n).map(|i| format!("{prefix}{i:04}")).collect();
    let table = PeakTable::from_parts(
        sample_ids.clone(),
        peaks,
        lat.clone(),
        obs,
        LodPolicy::MinObserved,
        Some(lat),
    )?;
    let labels = Labels::new(sample_ids, outcome)?;
    let truth = SynthTruth {
        informative: specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.informative)
            .map(|(c, _)| c + 1)
            .collect(),
        zero_variance: specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.zero_variance)
            .map(|(c, _)| c + 1)
            .collect(),
        tau2: specs.iter().map(|s| s.tau2).collect(),
        sigma2: specs.iter().map(|s| s.sigma2).collect(),
        peaks_per_cluster: specs.iter().map(|s| s.k).collect(),
    };
    Ok(SyntheticWorld {
        table,
        labels,
        truth,
    })
}

/// One synthetic study population.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticWorld, SynthError> {
    config.validate()?;
    let specs = cluster_specs(config, seed);
    let outcome = draw_labels(
        config.n_samples,
        config.n_cases,
        &mut stream(seed, LABEL_STREAM),
    );
    let latent: Vec<Vec<f64>> = specs
        .iter()
        .enumerate()
        .map(|(c, s)| {
            draw_latent(
                s,
                &outcome,
                config.effect,
                0.0,
                &mut stream(seed, PATIENT_BASE + c as u64),
            )
        })
        .collect();
    let cuts = thresholds(config, &specs, &latent)?;
    let observed: Vec<Vec<bool>> = specs
        .iter()
        .zip(&latent)
        .zip(&cuts)
        .map(|((s, l), t)| censor(l, config.n_samples, s.k, *t))
        .collect();
    assemble("S", &specs, &latent, &observed, outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalConfig {
    pub base: SynthConfig,
    pub n_val: usize,
    pub n_val_cases: usize,
    /// Added to every latent intensity of the validation population.
    pub intercept_shift: f64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            base: SynthConfig::default(),
            n_val: 114,
            n_val_cases: 39,
            intercept_shift: 0.0,
        }
    }
}

/// A calibration population and an independent validation population from
/// the same clusters. Validation cells use the calibration thresholds
/// (the same detection limits) after the intercept shift.
pub fn generate_external(
    config: &ExternalConfig,
    seed: u64,
) -> Result<(SyntheticWorld, SyntheticWorld), SynthError> {
    let cal = generate_synthetic(&config.base, seed)?;
    let val_cfg = SynthConfig {
        n_samples: config.n_val,
        n_cases: config.n_val_cases,
        ..config.base.clone()
    };
    val_cfg.validate()?;
    let specs = cluster_specs(&config.base, seed);
    let outcome = draw_labels(
        config.n_val,
        config.n_val_cases,
        &mut stream(seed, VAL_LABEL_STREAM),
    );
    let cal_latent: Vec<Vec<f64>> = specs
        .iter()
        .enumerate()
        .map(|(c, s)| {
            draw_latent(
                s,
                &cal.labels.outcome,
                config.base.effect,
                0.0,
                &mut stream(seed, PATIENT_BASE + c as u64),
            )
        })
        .collect();
    let cuts = thresholds(&config.base, &specs, &cal_latent)?;
    let latent: Vec<Vec<f64>> = specs
        .iter()
        .enumerate()
        .map(|(c, s)| {
            draw_latent(
                s,
                &outcome,
                config.base.effect,
                config.intercept_shift,
                &mut stream(seed, VAL_PATIENT_BASE + c as u64),
            )
        })
        .collect();
    let observed: Vec<Vec<bool>> = specs
        .iter()
        .zip(&latent)
        .zip(&cuts)
        .map(|((s, l), t)| censor(l, config.n_val, s.k, *t))
        .collect();
    let val = assemble("V", &specs, &latent, &observed, outcome)?;
    Ok((cal, val))
}
