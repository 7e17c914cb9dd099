//! Seeded Monte Carlo protocols comparing GCCA with stimulus-informed GCCA.
//!
//! Every random draw comes from `rng_from(seed, path)` with a path naming the
//! run, size, subset or fold, so jobs run in parallel and the sorted rows are
//! identical across thread counts.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::ccasolvers::{CcaModel, FitConfig, Method, PreparedTraining};
use crate::datamodel::{segment_trials, Dataset};
use crate::error::{Error, Result};
use crate::evalstats::{isc_report, latents, permutation_null, sweep_rho_prepared, RhoSweep};
use crate::seeding::{derive_seed, rng_from};
use crate::synthgen::{generate, SynthConfig};

pub const TRAINING_SIZE_HEADER: &str = "method,minutes,run,mean_isc,best_rho,sig_level";
pub const SUBJECTS_HEADER: &str = "method,subjects,combo,fold,mean_isc,best_rho,sig_level";

/// Where recordings come from: a fixed dataset or a fresh synthetic draw per seed.
#[derive(Debug, Clone)]
pub enum DataSource {
    Recording(Dataset),
    Synthetic(SynthConfig),
}

impl DataSource {
    fn draw(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Recording(ds) => Ok(ds.clone()),
            DataSource::Synthetic(cfg) => Ok(generate(&SynthConfig { seed, ..cfg.clone() })?.dataset),
        }
    }

    fn n_subjects(&self) -> usize {
        match self {
            DataSource::Recording(ds) => ds.n_views(),
            DataSource::Synthetic(cfg) => cfg.subjects,
        }
    }

    fn is_fixed(&self) -> bool {
        matches!(self, DataSource::Recording(_))
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSizeConfig {
    pub source: DataSource,
    pub trial_len_s: f64,
    pub sizes_min: Vec<f64>,
    pub runs: usize,
    pub n_permutations: usize,
    pub rho_grid: Vec<f64>,
    pub fit: FitConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SubjectsConfig {
    pub source: DataSource,
    pub trial_len_s: f64,
    pub counts: Vec<usize>,
    pub combos: usize,
    pub folds: usize,
    pub n_permutations: usize,
    pub rho_grid: Vec<f64>,
    pub fit: FitConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSizeRow {
    pub method: &'static str,
    pub minutes: f64,
    pub run: usize,
    pub mean_isc: f64,
    pub best_rho: f64,
    pub sig_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectsRow {
    pub method: &'static str,
    pub subjects: usize,
    pub combo: usize,
    pub fold: usize,
    pub mean_isc: f64,
    pub best_rho: f64,
    pub sig_level: f64,
}

struct Scored {
    isc: f64,
    sig_level: f64,
}

fn score(model: &CcaModel, test: &[Dataset], n_perm: usize, seed: u64) -> Result<Scored> {
    let z = latents(model, test, 0)?;
    let report = isc_report(&z, false)?;
    let null = permutation_null(&z, n_perm, seed)?;
    Ok(Scored {
        isc: report.mean_isc,
        sig_level: null.sig_level_05,
    })
}

/// The GCCA fit, reused from the sweep when the grid contains 0.
fn baseline(prep: &PreparedTraining, sweep: &RhoSweep) -> Result<CcaModel> {
    match sweep.model_at(0.0) {
        Some(m) => Ok(m.clone()),
        None => prep.fit(0.0),
    }
}

fn validation_count(n: usize) -> usize {
    ((0.2 * n as f64).round() as usize).max(1)
}

fn trials_for_minutes(minutes: f64, trial_len_s: f64) -> Result<usize> {
    let n = minutes * 60.0 / trial_len_s;
    if !(n >= 1.0 && (n - n.round()).abs() < 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "{minutes} min is not a whole number of {trial_len_s} s trials"
        )));
    }
    Ok(n.round() as usize)
}

fn method_code(m: Method) -> u64 {
    match m {
        Method::Gcca => 0,
        Method::Sigcca => 1,
    }
}

fn check_common(trial_len_s: f64, n_perm: usize, grid: &[f64]) -> Result<()> {
    if !(trial_len_s.is_finite() && trial_len_s > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid trial length {trial_len_s}")));
    }
    if n_perm == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty rho grid".into()));
    }
    Ok(())
}

/// Training-size sweep. For every run and size: draw `size` training trials,
/// split the rest into validation (20 %) and test; GCCA trains directly,
/// SI-GCCA picks ρ on validation. Both score on the same test trials.
pub fn training_size_rows(cfg: &TrainingSizeConfig) -> Result<Vec<TrainingSizeRow>> {
    check_common(cfg.trial_len_s, cfg.n_permutations, &cfg.rho_grid)?;
    if cfg.runs == 0 || cfg.sizes_min.is_empty() {
        return Err(Error::InvalidArgument("need at least one run and one size".into()));
    }
    let sizes = cfg
        .sizes_min
        .iter()
        .map(|&m| trials_for_minutes(m, cfg.trial_len_s))
        .collect::<Result<Vec<_>>>()?;

    let fixed = if cfg.source.is_fixed() {
        Some(segment_trials(&cfg.source.draw(0)?, cfg.trial_len_s)?.trials)
    } else {
        None
    };
    let pools: Vec<Vec<Dataset>> = match fixed {
        Some(trials) => vec![trials],
        None => (0..cfg.runs)
            .into_par_iter()
            .map(|run| {
                let ds = cfg.source.draw(derive_seed(cfg.seed, &[0, run as u64]))?;
                Ok(segment_trials(&ds, cfg.trial_len_s)?.trials)
            })
            .collect::<Result<_>>()?,
    };
    for pool in &pools {
        let largest = *sizes.iter().max().unwrap();
        let rest = pool.len().saturating_sub(largest);
        if rest < validation_count(rest) + 2 {
            return Err(Error::InvalidArgument(format!(
                "{} trials leave too few for validation and test at {largest} training trials",
                pool.len()
            )));
        }
    }

    let jobs: Vec<(usize, usize)> = (0..cfg.runs)
        .flat_map(|r| (0..sizes.len()).map(move |s| (r, s)))
        .collect();
    let mut rows: Vec<TrainingSizeRow> = jobs
        .par_iter()
        .map(|&(run, si)| {
            let pool = if pools.len() == 1 { &pools[0] } else { &pools[run] };
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng_from(cfg.seed, &[1, run as u64, si as u64]));
            let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
            let n_train = sizes[si];
            let n_val = validation_count(pool.len() - n_train);
            let train = pick(&order[..n_train]);
            let val = pick(&order[n_train..n_train + n_val]);
            let test = pick(&order[n_train + n_val..]);

            let prep = PreparedTraining::new(&train, &cfg.fit, true)?;
            let sweep = sweep_rho_prepared(&prep, &val, &cfg.rho_grid)?;
            let gcca = baseline(&prep, &sweep)?;
            let perm_seed = |m: Method| derive_seed(cfg.seed, &[2, run as u64, si as u64, method_code(m)]);
            let g = score(&gcca, &test, cfg.n_permutations, perm_seed(Method::Gcca))?;
            let s = score(&sweep.best_model, &test, cfg.n_permutations, perm_seed(Method::Sigcca))?;
            let minutes = cfg.sizes_min[si];
            Ok(vec![
                TrainingSizeRow {
                    method: Method::Gcca.as_str(),
                    minutes,
                    run,
                    mean_isc: g.isc,
                    best_rho: 0.0,
                    sig_level: g.sig_level,
                },
                TrainingSizeRow {
                    method: Method::Sigcca.as_str(),
                    minutes,
                    run,
                    mean_isc: s.isc,
                    best_rho: sweep.best_rho,
                    sig_level: s.sig_level,
                },
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(b.method)
            .then(a.minutes.total_cmp(&b.minutes))
            .then(a.run.cmp(&b.run))
    });
    Ok(rows)
}

/// Subject-count sweep. For every count, `combos` random subsets are scored
/// by `folds`-fold cross-validation over contiguous trial blocks. 20 % of each
/// held-out fold selects ρ for SI-GCCA and is dropped from its test set.
pub fn subjects_rows(cfg: &SubjectsConfig) -> Result<Vec<SubjectsRow>> {
    check_common(cfg.trial_len_s, cfg.n_permutations, &cfg.rho_grid)?;
    let total = cfg.source.n_subjects();
    if cfg.counts.is_empty() || cfg.combos == 0 {
        return Err(Error::InvalidArgument("need at least one count and one combination".into()));
    }
    if let Some(&c) = cfg.counts.iter().find(|&&c| c < 2 || c > total) {
        return Err(Error::InvalidArgument(format!(
            "subject count {c} outside 2..={total}"
        )));
    }
    if cfg.folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    let trials = segment_trials(&cfg.source.draw(derive_seed(cfg.seed, &[0]))?, cfg.trial_len_s)?.trials;
    let n = trials.len();
    let fold_len = n / cfg.folds;
    if fold_len < validation_count(fold_len) + 2 {
        return Err(Error::InvalidArgument(format!(
            "{n} trials are too few for {} folds with a validation and 2 test trials each",
            cfg.folds
        )));
    }

    let jobs: Vec<(usize, usize, usize)> = cfg
        .counts
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| {
            (0..cfg.combos).flat_map(move |combo| (0..cfg.folds).map(move |f| (ci, combo, f)))
        })
        .collect();
    let mut rows: Vec<SubjectsRow> = jobs
        .par_iter()
        .map(|&(ci, combo, fold)| {
            let count = cfg.counts[ci];
            let mut subjects: Vec<usize> = (0..total).collect();
            subjects.shuffle(&mut rng_from(cfg.seed, &[1, count as u64, combo as u64]));
            let mut subset = subjects[..count].to_vec();
            subset.sort_unstable();
            let selected = trials
                .iter()
                .map(|t| t.select_views(&subset))
                .collect::<Result<Vec<_>>>()?;

            let lo = fold * n / cfg.folds;
            let hi = (fold + 1) * n / cfg.folds;
            let train: Vec<Dataset> = selected[..lo].iter().chain(&selected[hi..]).cloned().collect();
            let mut held_out = selected[lo..hi].to_vec();
            held_out.shuffle(&mut rng_from(cfg.seed, &[3, count as u64, combo as u64, fold as u64]));
            let test = held_out.split_off(validation_count(held_out.len()));
            let val = held_out;

            let prep = PreparedTraining::new(&train, &cfg.fit, true)?;
            let sweep = sweep_rho_prepared(&prep, &val, &cfg.rho_grid)?;
            let gcca = baseline(&prep, &sweep)?;
            let si = &sweep.best_model;
            let perm_seed = |m: Method| derive_seed(cfg.seed, &[2, count as u64, combo as u64, fold as u64, method_code(m)]);
            let g = score(&gcca, &test, cfg.n_permutations, perm_seed(Method::Gcca))?;
            let s = score(si, &test, cfg.n_permutations, perm_seed(Method::Sigcca))?;
            Ok(vec![
                SubjectsRow {
                    method: Method::Gcca.as_str(),
                    subjects: count,
                    combo,
                    fold,
                    mean_isc: g.isc,
                    best_rho: 0.0,
                    sig_level: g.sig_level,
                },
                SubjectsRow {
                    method: Method::Sigcca.as_str(),
                    subjects: count,
                    combo,
                    fold,
                    mean_isc: s.isc,
                    best_rho: sweep.best_rho,
                    sig_level: s.sig_level,
                },
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(b.method)
            .then(a.subjects.cmp(&b.subjects))
            .then(a.combo.cmp(&b.combo))
            .then(a.fold.cmp(&b.fold))
    });
    Ok(rows)
}

pub fn to_csv<T: Serialize>(rows: &[T], header: &str) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidArgument(format!("csv encoding failed: {e}")))?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv encoding failed: {e}")))?;
    let mut out = Vec::with_capacity(header.len() + 1 + body.len());
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

/// Mean of `value` over rows grouped by `(method, key)`, keys ascending.
pub fn group_means<T, K: PartialOrd + Copy>(
    rows: &[T],
    method: &str,
    key: impl Fn(&T) -> K,
    value: impl Fn(&T) -> f64,
    row_method: impl Fn(&T) -> &str,
) -> Vec<(K, f64)> {
    let mut out: Vec<(K, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| row_method(r) == method) {
        let k = key(r);
        match out.iter_mut().find(|e| e.0 == k) {
            Some(e) => {
                e.1 += value(r);
                e.2 += 1;
            }
            None => out.push((k, value(r), 1)),
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out.into_iter().map(|(k, s, c)| (k, s / c as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::default_rho_grid;

    fn synth(subjects: usize, trials: usize) -> DataSource {
        DataSource::Synthetic(SynthConfig {
            subjects,
            samples: trials * 480,
            channels: 3,
            snr_db: -10.0,
            ..SynthConfig::default()
        })
    }

    fn small_training_size() -> TrainingSizeConfig {
        TrainingSizeConfig {
            source: synth(4, 8),
            trial_len_s: 60.0,
            sizes_min: vec![1.0, 2.0],
            runs: 3,
            n_permutations: 50,
            rho_grid: vec![0.0, 1.0, 10.0],
            fit: FitConfig::default(),
            seed: 11,
        }
    }

    #[test]
    fn training_size_row_count_and_order() {
        let rows = training_size_rows(&small_training_size()).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert!(rows[..6].iter().all(|r| r.method == "gcca" && r.best_rho == 0.0));
        assert!(rows[6..].iter().all(|r| r.method == "sigcca"));
        assert_eq!((rows[0].minutes, rows[0].run), (1.0, 0));
        assert_eq!((rows[5].minutes, rows[5].run), (2.0, 2));
    }

    #[test]
    fn training_size_csv_is_deterministic() {
        let cfg = small_training_size();
        let a = to_csv(&training_size_rows(&cfg).unwrap(), TRAINING_SIZE_HEADER).unwrap();
        let b = to_csv(&training_size_rows(&cfg).unwrap(), TRAINING_SIZE_HEADER).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAINING_SIZE_HEADER);
        assert_eq!(text.lines().count(), 13);
        let c = to_csv(
            &training_size_rows(&TrainingSizeConfig { seed: 12, ..cfg }).unwrap(),
            TRAINING_SIZE_HEADER,
        )
        .unwrap();
        assert_ne!(text.as_bytes(), &c[..]);
    }

    #[test]
    fn subjects_row_count() {
        let cfg = SubjectsConfig {
            source: synth(6, 15),
            trial_len_s: 60.0,
            counts: vec![2, 4],
            combos: 2,
            folds: 5,
            n_permutations: 50,
            rho_grid: default_rho_grid(),
            fit: FitConfig::default(),
            seed: 5,
        };
        let rows = subjects_rows(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2 * 5);
        let csv = to_csv(&rows, SUBJECTS_HEADER).unwrap();
        assert_eq!(csv, to_csv(&subjects_rows(&cfg).unwrap(), SUBJECTS_HEADER).unwrap());
    }

    #[test]
    fn rejects_bad_protocols() {
        let base = small_training_size();
        assert!(training_size_rows(&TrainingSizeConfig { sizes_min: vec![7.0], ..base.clone() }).is_err());
        assert!(training_size_rows(&TrainingSizeConfig { sizes_min: vec![1.5], ..base.clone() }).is_err());
        assert!(training_size_rows(&TrainingSizeConfig { runs: 0, ..base }).is_err());
        let sub = SubjectsConfig {
            source: synth(4, 10),
            trial_len_s: 60.0,
            counts: vec![5],
            combos: 1,
            folds: 5,
            n_permutations: 10,
            rho_grid: vec![0.0],
            fit: FitConfig::default(),
            seed: 0,
        };
        assert!(subjects_rows(&sub).is_err());
        assert!(subjects_rows(&SubjectsConfig { counts: vec![3], folds: 6, ..sub }).is_err());
    }

    #[test]
    fn group_means_by_key() {
        let rows = vec![("a", 1, 2.0), ("a", 1, 4.0), ("b", 1, 9.0), ("a", 0, 1.0)];
        let m = group_means(&rows, "a", |r| r.1, |r| r.2, |r| r.0);
        assert_eq!(m, vec![(0, 1.0), (1, 3.0)]);
    }
}
