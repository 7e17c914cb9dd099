//! Synthetic multi-subject recordings with a known stimulus-driven latent.
//!
//! The stimulus is a nonnegative low-pass envelope `y`. Each latent column is
//! `y` convolved with its own random causal filter. Subject `k` observes
//! `X_k = D A_kᵀ + N_k`, with spatially correlated, temporally smoothed noise
//! `N_k` scaled to the requested SNR.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::seeding::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    pub samples: usize,
    pub channels: usize,
    /// Signal-to-noise power ratio per subject; `+inf` disables noise.
    pub snr_db: f64,
    pub latent_dim: usize,
    pub stimulus_filter_len: usize,
    pub seed: u64,
    pub sample_rate_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 10,
            samples: 40 * 60 * 8,
            channels: 8,
            snr_db: -15.0,
            latent_dim: 1,
            stimulus_filter_len: 6,
            seed: 0,
            sample_rate_hz: 8.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.subjects < 2 {
            return bad(format!("need at least 2 subjects, got {}", self.subjects));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.channels < self.latent_dim {
            return bad(format!(
                "channels ({}) must be >= latent_dim ({})",
                self.channels, self.latent_dim
            ));
        }
        if self.stimulus_filter_len == 0 {
            return bad("stimulus_filter_len must be >= 1".into());
        }
        if self.samples < 2 || self.samples < self.stimulus_filter_len {
            return bad(format!("too few samples: {}", self.samples));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return bad(format!("invalid snr_db {}", self.snr_db));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("invalid sample rate {}", self.sample_rate_hz));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Ground-truth latent `D`, `T x latent_dim`.
    pub latent: DMatrix<f64>,
    /// Causal filter taps producing each latent column from the stimulus.
    pub latent_filters: Vec<Vec<f64>>,
    /// Mixing matrices `A_k`, `C x latent_dim`.
    pub mixing: Vec<DMatrix<f64>>,
    /// Noise realizations `N_k` as added to each subject.
    pub noise: Vec<DMatrix<f64>>,
}

const SMOOTHING: f64 = 0.6;
const BURN_IN: usize = 64;

/// One-pole low-pass `y[t] = a y[t-1] + (1-a) x[t]`, run over a burn-in prefix.
fn low_pass(x: &[f64]) -> Vec<f64> {
    let mut state = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        state = SMOOTHING * state + (1.0 - SMOOTHING) * v;
        out.push(state);
    }
    out
}

fn smoothed_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n + BURN_IN).map(|_| StandardNormal.sample(rng)).collect();
    low_pass(&low_pass(&raw))[BURN_IN..].to_vec()
}

/// Noise with the envelope's spectral shape, so temporal filtering alone
/// cannot separate it from the latent.
fn background_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    low_pass(&smoothed_noise(n, rng))
}

/// Random SPD covariance with eigenvalues log-spaced over two decades.
fn noise_mixing<R: Rng>(c: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(c, c, |_, _| StandardNormal.sample(rng));
    let u = g.qr().q();
    let spectrum = DVector::from_fn(c, |i, _| {
        if c == 1 {
            1.0
        } else {
            10f64.powf(-2.0 * i as f64 / (c - 1) as f64).sqrt()
        }
    });
    // N = Z Lᵀ with L = U diag(sqrt σ): Cov = U diag(σ) Uᵀ, condition number 100
    &u * DMatrix::from_diagonal(&spectrum)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let t = cfg.samples;
    let mut rng = rng_from(cfg.seed, &[0]);

    // envelope: rectified then re-smoothed low-pass noise
    let base = smoothed_noise(t, &mut rng);
    let rectified: Vec<f64> = base.iter().map(|v| v.abs()).collect();
    let y = low_pass(&rectified);
    let stimulus = DMatrix::from_column_slice(t, 1, &y);

    let mut latent = DMatrix::zeros(t, cfg.latent_dim);
    let mut latent_filters = Vec::with_capacity(cfg.latent_dim);
    for j in 0..cfg.latent_dim {
        let h: Vec<f64> = (0..cfg.stimulus_filter_len)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for row in 0..t {
            let mut acc = 0.0;
            for (lag, &tap) in h.iter().enumerate() {
                if row >= lag {
                    acc += tap * y[row - lag];
                }
            }
            latent[(row, j)] = acc;
        }
        latent_filters.push(h);
    }

    let mut views = Vec::with_capacity(cfg.subjects);
    let mut mixing = Vec::with_capacity(cfg.subjects);
    let mut noises = Vec::with_capacity(cfg.subjects);
    for k in 0..cfg.subjects {
        let mut srng = rng_from(cfg.seed, &[1, k as u64]);
        let a = DMatrix::<f64>::from_fn(cfg.channels, cfg.latent_dim, |_, _| StandardNormal.sample(&mut srng));
        let mut signal = &latent * a.transpose();
        // remove the envelope offset so powers compare fluctuations
        for mut col in signal.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        let noise = if cfg.snr_db == f64::INFINITY {
            DMatrix::zeros(t, cfg.channels)
        } else {
            let l = noise_mixing(cfg.channels, &mut srng);
            let mut z = DMatrix::zeros(t, cfg.channels);
            for c in 0..cfg.channels {
                let col = background_noise(t, &mut srng);
                z.set_column(c, &DVector::from_vec(col));
            }
            let n = z * l.transpose();
            let target = signal.norm_squared() / 10f64.powf(cfg.snr_db / 10.0);
            &n * (target / n.norm_squared()).sqrt()
        };
        views.push(&signal + &noise);
        mixing.push(a);
        noises.push(noise);
    }
    let dataset = Dataset::with_default_labels(views, Some(stimulus), cfg.sample_rate_hz)?;
    Ok(SynthData {
        dataset,
        latent,
        latent_filters,
        mixing,
        noise: noises,
    })
}

/// Measured SNR of subject `k` in dB.
pub fn measured_snr_db(data: &SynthData, k: usize) -> f64 {
    let x = &data.dataset.views()[k];
    let noise = &data.noise[k];
    let signal = x - noise;
    10.0 * (signal.norm_squared() / noise.norm_squared()).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccasolvers::{fit_gcca, shared_subspace, FitConfig, PreparedTraining};
    use crate::covest::Shrinkage;
    use crate::datamodel::segment_trials;
    use crate::evalstats::{evaluate_model, latents, pearson, permutation_null};
    use crate::lagmat::{eeg_lagspec, lag_embed, LagSpec};

    fn cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            subjects: 3,
            samples: 1000,
            channels: 4,
            snr_db: -5.0,
            latent_dim: 1,
            stimulus_filter_len: 5,
            seed,
            sample_rate_hz: 8.0,
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&cfg(3)).unwrap();
        let b = generate(&cfg(3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate(&cfg(4)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn snr_matches_request() {
        for snr in [-15.0, -3.0, 0.0, 10.0] {
            let data = generate(&SynthConfig { snr_db: snr, ..cfg(5) }).unwrap();
            for k in 0..3 {
                assert!((measured_snr_db(&data, k) - snr).abs() < 0.5);
            }
        }
    }

    #[test]
    fn stimulus_is_nonnegative() {
        let data = generate(&cfg(6)).unwrap();
        assert!(data.dataset.stimulus().unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn latent_depends_on_declared_taps_only() {
        let data = generate(&cfg(7)).unwrap();
        let y = data.dataset.stimulus().unwrap();
        // regress d on y(t-j) for j in -8..=12
        let lags = LagSpec::new((-12..=8).collect()).unwrap();
        let design = lag_embed(y, &lags).unwrap();
        let d = data.latent.column(0).into_owned();
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&d, 1e-12)
            .unwrap();
        let resid = (&design * &coef - &d).norm() / d.norm();
        assert!(resid < 1e-10);
        for (i, &lag) in lags.lags().iter().enumerate() {
            let tap = if lag <= 0 && ((-lag) as usize) < 5 {
                data.latent_filters[0][(-lag) as usize]
            } else {
                0.0
            };
            assert!((coef[i] - tap).abs() < 1e-8, "lag {lag}: {} vs {tap}", coef[i]);
        }
    }

    #[test]
    fn noiseless_latent_is_identifiable() {
        let data = generate(&SynthConfig {
            snr_db: f64::INFINITY,
            channels: 2,
            ..cfg(8)
        })
        .unwrap();
        let fit_cfg = FitConfig {
            eeg_lags: eeg_lagspec(1).unwrap(),
            shrinkage: Shrinkage::LedoitWolf,
            ..FitConfig::default()
        };
        let prep = PreparedTraining::new(&[data.dataset.clone()], &fit_cfg, false).unwrap();
        let model = prep.fit(0.0).unwrap();
        let s = shared_subspace(&model, prep.trials()).unwrap();
        let s1: Vec<f64> = s.column(0).iter().copied().collect();
        let d: Vec<f64> = data.latent.column(0).iter().copied().collect();
        assert!(pearson(&s1, &d).unwrap().abs() > 0.999);
    }

    #[test]
    fn low_snr_isc_exceeds_permutation_threshold() {
        let data = generate(&SynthConfig {
            subjects: 5,
            samples: 20 * 480,
            snr_db: -10.0,
            ..cfg(9)
        })
        .unwrap();
        let trials = segment_trials(&data.dataset, 60.0).unwrap().trials;
        let (train, test) = trials.split_at(10);
        let model = fit_gcca(train, &FitConfig::default()).unwrap();
        let report = evaluate_model(&model, test).unwrap();
        let null = permutation_null(&latents(&model, test, 0).unwrap(), 1000, 1).unwrap();
        assert!(
            report.mean_isc > null.sig_level_05,
            "{} vs {}",
            report.mean_isc,
            null.sig_level_05
        );
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate(&SynthConfig { subjects: 1, ..cfg(1) }).is_err());
        assert!(generate(&SynthConfig { latent_dim: 0, ..cfg(1) }).is_err());
        assert!(generate(&SynthConfig { channels: 1, latent_dim: 2, ..cfg(1) }).is_err());
        assert!(generate(&SynthConfig { snr_db: f64::NAN, ..cfg(1) }).is_err());
    }
}
