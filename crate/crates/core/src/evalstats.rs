//! Inter-subject correlation, permutation thresholds and ρ selection.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccasolvers::{transform_embedded, CcaModel, EmbeddedTrial, FitConfig, PreparedTraining};
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::seeding::rng_from;

/// Centered copy of `z` scaled to unit norm.
fn unit_centered(z: &[f64]) -> Result<Vec<f64>> {
    let n = z.len();
    if n == 0 {
        return Err(Error::UndefinedCorrelation("empty signal".into()));
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = z.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    // relative to the signal scale, so rounding noise of a constant signal counts as zero
    let scale = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(norm > 1e-12 * scale * (n as f64).sqrt()) || !norm.is_finite() {
        return Err(Error::UndefinedCorrelation("zero-variance signal".into()));
    }
    Ok(centered.into_iter().map(|v| v / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "signals of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot(&unit_centered(a)?, &unit_centered(b)?).clamp(-1.0, 1.0))
}

fn check_latents(latents: &[&[f64]]) -> Result<()> {
    if latents.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ISC needs at least 2 signals, got {}",
            latents.len()
        )));
    }
    let n = latents[0].len();
    if latents.iter().any(|z| z.len() != n) {
        return Err(Error::DimensionMismatch("latent signals differ in length".into()));
    }
    Ok(())
}

/// Pairwise Pearson correlations (unit diagonal).
pub fn pairwise_correlations(latents: &[&[f64]]) -> Result<DMatrix<f64>> {
    check_latents(latents)?;
    let units = latents
        .iter()
        .map(|z| unit_centered(z))
        .collect::<Result<Vec<_>>>()?;
    let k = units.len();
    let mut out = DMatrix::identity(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let r = dot(&units[a], &units[b]).clamp(-1.0, 1.0);
            out[(a, b)] = r;
            out[(b, a)] = r;
        }
    }
    Ok(out)
}

/// Average pairwise correlation `2/(K(K-1)) Σ_{k<l} corr(z_k, z_l)`.
pub fn isc(latents: &[&[f64]]) -> Result<f64> {
    let c = pairwise_correlations(latents)?;
    let k = c.nrows();
    let mut total = 0.0;
    for a in 0..k {
        for b in (a + 1)..k {
            total += c[(a, b)];
        }
    }
    Ok(2.0 * total / (k * (k - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IscReport {
    pub per_trial_isc: Vec<f64>,
    pub mean_isc: f64,
    #[serde(skip)]
    pub pairwise: Option<Vec<DMatrix<f64>>>,
}

/// `per_trial[i][k]` is subject `k`'s latent signal in trial `i`.
pub fn isc_report(per_trial: &[Vec<Vec<f64>>], keep_pairwise: bool) -> Result<IscReport> {
    if per_trial.is_empty() {
        return Err(Error::InvalidArgument("no trials to score".into()));
    }
    let mut per_trial_isc = Vec::with_capacity(per_trial.len());
    let mut pairwise = Vec::new();
    for trial in per_trial {
        let refs: Vec<&[f64]> = trial.iter().map(|z| z.as_slice()).collect();
        let c = pairwise_correlations(&refs)?;
        let k = c.nrows();
        let mut total = 0.0;
        for a in 0..k {
            for b in (a + 1)..k {
                total += c[(a, b)];
            }
        }
        per_trial_isc.push(2.0 * total / (k * (k - 1)) as f64);
        if keep_pairwise {
            pairwise.push(c);
        }
    }
    let mean_isc = per_trial_isc.iter().sum::<f64>() / per_trial_isc.len() as f64;
    Ok(IscReport {
        per_trial_isc,
        mean_isc,
        pairwise: keep_pairwise.then_some(pairwise),
    })
}

/// Component `component` of the model output for each embedded trial.
pub fn latents_embedded(
    model: &CcaModel,
    trials: &[EmbeddedTrial],
    component: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if component >= model.q {
        return Err(Error::InvalidArgument(format!(
            "component {component} out of range for Q = {}",
            model.q
        )));
    }
    trials
        .iter()
        .map(|t| {
            Ok(transform_embedded(model, t)?
                .iter()
                .map(|z| z.column(component).iter().copied().collect())
                .collect())
        })
        .collect()
}

pub fn latents(model: &CcaModel, trials: &[Dataset], component: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let embedded = trials
        .iter()
        .map(|t| model.embed(t, false))
        .collect::<Result<Vec<_>>>()?;
    latents_embedded(model, &embedded, component)
}

/// ISC of the first component on each trial; the stimulus is never used.
pub fn evaluate_model(model: &CcaModel, trials: &[Dataset]) -> Result<IscReport> {
    isc_report(&latents(model, trials, 0)?, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestResult {
    pub null_isc: Vec<f64>,
    pub sig_level_05: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

/// Nearest-rank 95th percentile.
pub fn percentile_95(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// For every subject an independent shuffle of trial indices:
/// `out[k][i]` is the trial subject `k` contributes to slot `i`.
pub fn shuffled_assignment<R: Rng + ?Sized>(n_subjects: usize, n_trials: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..n_subjects)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n_trials).collect();
            idx.shuffle(rng);
            idx
        })
        .collect()
}

/// Null distribution of the trial-averaged ISC when each subject's trials are
/// shuffled independently, destroying cross-subject alignment.
///
/// `per_trial[i][k]` is subject `k`'s latent signal in trial `i`. Permutation
/// `p` draws from a stream derived from `(seed, p)`, so the result does not
/// depend on thread scheduling.
pub fn permutation_null(per_trial: &[Vec<Vec<f64>>], n_perm: usize, seed: u64) -> Result<PermTestResult> {
    let n_trials = per_trial.len();
    if n_trials < 2 {
        return Err(Error::InvalidArgument(format!(
            "permutation needs at least 2 trials, got {n_trials}"
        )));
    }
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be >= 1".into()));
    }
    let k = per_trial[0].len();
    if k < 2 || per_trial.iter().any(|t| t.len() != k) {
        return Err(Error::InvalidArgument(
            "every trial needs the same number (>= 2) of subjects".into(),
        ));
    }
    let len = per_trial[0][0].len();
    if per_trial.iter().flatten().any(|z| z.len() != len) {
        return Err(Error::DimensionMismatch(
            "permutation requires equal-length trials".into(),
        ));
    }
    // units[k][i]: centered unit-norm latent of subject k in trial i
    let units: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|s| {
            per_trial
                .iter()
                .map(|t| unit_centered(&t[s]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    // cross[(a, b)][i * n + j] = corr of subject a trial i with subject b trial j
    let mut cross = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in (a + 1)..k {
            let mut m = vec![0.0; n_trials * n_trials];
            for i in 0..n_trials {
                for j in 0..n_trials {
                    m[i * n_trials + j] = dot(&units[a][i], &units[b][j]);
                }
            }
            cross.push(m);
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let null_isc: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng_from(seed, &[p as u64]);
            let assign = shuffled_assignment(k, n_trials, &mut rng);
            let mut total = 0.0;
            for slot in 0..n_trials {
                let mut pair = 0;
                let mut sum = 0.0;
                for a in 0..k {
                    for b in (a + 1)..k {
                        sum += cross[pair][assign[a][slot] * n_trials + assign[b][slot]];
                        pair += 1;
                    }
                }
                total += sum / pairs;
            }
            total / n_trials as f64
        })
        .collect();
    Ok(PermTestResult {
        sig_level_05: percentile_95(&null_isc),
        null_isc,
        n_permutations: n_perm,
        seed,
    })
}

/// `{0, 10^-1, 10^-0.5, …, 10^3}`.
pub fn default_rho_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((-2..=6).map(|i| 10f64.powf(i as f64 * 0.5)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RhoSweep {
    pub best_rho: f64,
    /// `(rho, validation ISC)` in ascending ρ.
    pub scores: Vec<(f64, f64)>,
    pub best_model: CcaModel,
    /// Every fitted model, aligned with `scores`.
    pub models: Vec<CcaModel>,
}

impl RhoSweep {
    pub fn model_at(&self, rho: f64) -> Option<&CcaModel> {
        self.scores.iter().position(|s| s.0 == rho).map(|i| &self.models[i])
    }
}

/// Fits one model per ρ (ρ = 0 is plain GCCA) and keeps the one with the
/// highest validation ISC; ties go to the smaller ρ.
pub fn sweep_rho(train: &[Dataset], val: &[Dataset], grid: &[f64], cfg: &FitConfig) -> Result<RhoSweep> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let with_stim = grid.iter().any(|&r| r > 0.0);
    let prep = PreparedTraining::new(train, cfg, with_stim)?;
    sweep_rho_prepared(&prep, val, grid)
}

pub fn sweep_rho_prepared(prep: &PreparedTraining, val: &[Dataset], grid: &[f64]) -> Result<RhoSweep> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty rho grid".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let fits = grid
        .par_iter()
        .map(|&rho| {
            let model = prep.fit(rho)?;
            let score = evaluate_model(&model, val)?.mean_isc;
            Ok((rho, score, model))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.1 > fits[best].1 {
            best = i;
        }
    }
    let scores = fits.iter().map(|f| (f.0, f.1)).collect();
    let best_rho = fits[best].0;
    let best_model = fits[best].2.clone();
    Ok(RhoSweep {
        best_rho,
        scores,
        best_model,
        models: fits.into_iter().map(|f| f.2).collect(),
    })
}
