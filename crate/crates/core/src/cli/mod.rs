//! Command-line front end. Every command is deterministic given `--seed`.

pub mod experiments;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::ccasolvers::{fit_gcca, fit_sigcca, CcaModel, FitConfig, Method};
use crate::covest::Shrinkage;
use crate::datamodel::{load_dataset, segment_trials, write_dataset, Dataset, MatrixFormat};
use crate::evalstats::{default_rho_grid, evaluate_model, IscReport};
use crate::lagmat::{eeg_lagspec, stimulus_lagspec};
use crate::synthgen::{generate, SynthConfig};
use experiments::{
    subjects_rows, to_csv, training_size_rows, DataSource, SubjectsConfig, TrainingSizeConfig,
    SUBJECTS_HEADER, TRAINING_SIZE_HEADER,
};

#[derive(Debug, Parser)]
#[command(name = "sigcca", version, about = "Generalized CCA with optional stimulus information for multi-subject recordings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-subject dataset with a stimulus envelope.
    Synth(SynthArgs),
    /// Fit GCCA or SI-GCCA filters and write the model as JSON.
    Train(TrainArgs),
    /// Score a model on a held-out recording.
    #[command(after_help = "Per-trial CSV header: trial,offset,isc")]
    Evaluate(EvaluateArgs),
    /// Test ISC as a function of the amount of training data.
    #[command(after_help = concat!(
        "CSV header: method,minutes,run,mean_isc,best_rho,sig_level\n",
        "Rows are sorted by method, minutes, run. best_rho is 0 for gcca."
    ))]
    ExperimentTrainingSize(TrainingSizeArgs),
    /// Cross-validated test ISC as a function of the number of subjects.
    #[command(after_help = concat!(
        "CSV header: method,subjects,combo,fold,mean_isc,best_rho,sig_level\n",
        "Rows are sorted by method, subjects, combo, fold. best_rho is 0 for gcca."
    ))]
    ExperimentSubjects(SubjectsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Raw,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    /// Samples per subject.
    #[arg(long, default_value_t = 9600)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Per-subject SNR in dB; `inf` disables noise.
    #[arg(long, default_value_t = -15.0, allow_hyphen_values = true)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 1)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 6)]
    pub filter_len: usize,
    #[arg(long, default_value_t = 8.0)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Number of shared components.
    #[arg(long, default_value_t = 1)]
    pub q: usize,
    /// Number of centered EEG lags (odd).
    #[arg(long, default_value_t = 5)]
    pub lags: usize,
    /// Number of causal stimulus lags.
    #[arg(long, default_value_t = 11)]
    pub stim_lags: usize,
    /// `ledoit-wolf`, `none`, or a fixed intensity in [0, 1].
    #[arg(long, default_value = "ledoit-wolf", value_parser = parse_shrinkage)]
    pub shrinkage: Shrinkage,
    /// Skip per-trial centering and normalization.
    #[arg(long)]
    pub no_normalize: bool,
}

impl ModelArgs {
    fn fit_config(&self) -> anyhow::Result<FitConfig> {
        Ok(FitConfig {
            q: self.q,
            eeg_lags: eeg_lagspec(self.lags)?,
            stim_lags: stimulus_lagspec(self.stim_lags)?,
            shrinkage: self.shrinkage,
            normalize: !self.no_normalize,
        })
    }
}

fn parse_shrinkage(s: &str) -> Result<Shrinkage, String> {
    match s {
        "ledoit-wolf" | "lw" => Ok(Shrinkage::LedoitWolf),
        "none" => Ok(Shrinkage::None),
        other => match other.parse::<f64>() {
            Ok(v) if (0.0..=1.0).contains(&v) => Ok(Shrinkage::Fixed(v)),
            _ => Err(format!("expected ledoit-wolf, none, or a number in [0, 1], got {other:?}")),
        },
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Gcca,
    Sigcca,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Gcca)]
    pub method: MethodArg,
    /// Stimulus weight for sigcca.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Pool statistics over trials of this length; default is one trial.
    #[arg(long)]
    pub trial_len: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    pub trial_len: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write per-trial ISC as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Use a recorded dataset instead of synthetic data.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Switch defaults to the full-size protocol.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Synthetic SNR in dB [default: -15 for training size, -25 for subjects].
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    /// Trials in each synthetic recording.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 60.0)]
    pub trial_len: f64,
    #[arg(long, default_value_t = 8.0)]
    pub sample_rate: f64,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output CSV path; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainingSizeArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Training sizes in minutes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<f64>>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SubjectsArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Subjects in the synthetic pool.
    #[arg(long)]
    pub total_subjects: Option<usize>,
    /// Subject counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long)]
    pub combos: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::ExperimentTrainingSize(a) => {
            let csv = cmd_experiment_training_size(&a)?;
            emit(&csv, a.common.out.as_deref())
        }
        Command::ExperimentSubjects(a) => {
            let csv = cmd_experiment_subjects(&a)?;
            emit(&csv, a.common.out.as_deref())
        }
    }
}

fn emit(bytes: &[u8], out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(bytes).context("writing stdout"),
    }
}

/// Returns the manifest path.
pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<PathBuf> {
    let data = generate(&SynthConfig {
        subjects: a.subjects,
        samples: a.samples,
        channels: a.channels,
        snr_db: a.snr_db,
        latent_dim: a.latent_dim,
        stimulus_filter_len: a.filter_len,
        seed: a.seed,
        sample_rate_hz: a.sample_rate,
    })?;
    let format = match a.format {
        FormatArg::Csv => MatrixFormat::Csv,
        FormatArg::Raw => MatrixFormat::Raw,
    };
    Ok(write_dataset(&data.dataset, &a.out, format)?)
}

fn training_trials(ds: &Dataset, trial_len: Option<f64>) -> anyhow::Result<Vec<Dataset>> {
    Ok(match trial_len {
        Some(len) => segment_trials(ds, len)?.trials,
        None => vec![ds.clone()],
    })
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<CcaModel> {
    let ds = load_dataset(&a.manifest)?;
    let cfg = a.model.fit_config()?;
    let trials = training_trials(&ds, a.trial_len)?;
    let model = match a.method {
        MethodArg::Gcca => fit_gcca(&trials, &cfg)?,
        MethodArg::Sigcca => {
            if ds.stimulus().is_none() {
                bail!("sigcca needs a stimulus, but {} has none", a.manifest.display());
            }
            if !(a.rho > 0.0) {
                bail!("sigcca needs --rho > 0, got {}", a.rho);
            }
            fit_sigcca(&trials, a.rho, &cfg)?
        }
    };
    model.save(&a.out)?;
    Ok(model)
}

#[derive(Debug, Serialize)]
struct EvaluationJson<'a> {
    method: Method,
    rho: f64,
    trial_len_s: f64,
    offsets: &'a [usize],
    #[serde(flatten)]
    report: &'a IscReport,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<IscReport> {
    let model = CcaModel::load(&a.model)?;
    let ds = load_dataset(&a.manifest)?;
    let set = segment_trials(&ds, a.trial_len)?;
    let report = evaluate_model(&model, &set.trials)?;
    let json = serde_json::to_string_pretty(&EvaluationJson {
        method: model.method,
        rho: model.rho,
        trial_len_s: a.trial_len,
        offsets: &set.origin_offsets,
        report: &report,
    })?;
    match &a.json {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(["trial", "offset", "isc"])?;
        for (i, (isc, off)) in report.per_trial_isc.iter().zip(&set.origin_offsets).enumerate() {
            w.write_record([i.to_string(), off.to_string(), isc.to_string()])?;
        }
        w.flush()?;
    }
    Ok(report)
}

fn load_source(c: &ExperimentArgs, subjects: usize, trials: usize, snr_db: f64) -> anyhow::Result<DataSource> {
    if let Some(p) = &c.manifest {
        return Ok(DataSource::Recording(load_dataset(p)?));
    }
    let samples_per_trial = c.trial_len * c.sample_rate;
    if (samples_per_trial - samples_per_trial.round()).abs() > 1e-9 {
        bail!("trial length {} s is not a whole number of samples", c.trial_len);
    }
    Ok(DataSource::Synthetic(SynthConfig {
        subjects,
        samples: trials * samples_per_trial.round() as usize,
        channels: c.channels.unwrap_or(8),
        snr_db: c.snr_db.unwrap_or(snr_db),
        sample_rate_hz: c.sample_rate,
        ..SynthConfig::default()
    }))
}

/// Returns the CSV bytes.
pub fn cmd_experiment_training_size(a: &TrainingSizeArgs) -> anyhow::Result<Vec<u8>> {
    Ok(to_csv(&training_size_rows(&training_size_config(a)?)?, TRAINING_SIZE_HEADER)?)
}

/// Returns the CSV bytes.
pub fn cmd_experiment_subjects(a: &SubjectsArgs) -> anyhow::Result<Vec<u8>> {
    Ok(to_csv(&subjects_rows(&subjects_config(a)?)?, SUBJECTS_HEADER)?)
}

/// Flags resolved against desk-scale or `--full-scale` defaults.
pub fn training_size_config(a: &TrainingSizeArgs) -> anyhow::Result<TrainingSizeConfig> {
    let c = &a.common;
    let full = c.full_scale;
    let default_sizes = if full {
        vec![1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0]
    } else {
        vec![1.0, 2.0, 4.0, 8.0]
    };
    let sizes = a.sizes.clone().unwrap_or(default_sizes);
    let trials = c.trials.unwrap_or(if full { 60 } else { 40 });
    let cfg = TrainingSizeConfig {
        source: load_source(c, a.subjects.unwrap_or(if full { 19 } else { 10 }), trials, -15.0)?,
        trial_len_s: c.trial_len,
        sizes_min: sizes,
        runs: a.runs.unwrap_or(if full { 50 } else { 10 }),
        n_permutations: c.permutations.unwrap_or(if full { 10_000 } else { 1000 }),
        rho_grid: default_rho_grid(),
        fit: c.model.fit_config()?,
        seed: c.seed,
    };
    Ok(cfg)
}

pub fn subjects_config(a: &SubjectsArgs) -> anyhow::Result<SubjectsConfig> {
    let c = &a.common;
    let full = c.full_scale;
    let total = a.total_subjects.unwrap_or(if full { 19 } else { 10 });
    let counts = a
        .counts
        .clone()
        .unwrap_or_else(|| if full { (2..=total).collect() } else { vec![3, 5, 7] });
    let cfg = SubjectsConfig {
        source: load_source(c, total, c.trials.unwrap_or(20), -25.0)?,
        trial_len_s: c.trial_len,
        counts,
        combos: a.combos.unwrap_or(if full { 25 } else { 5 }),
        folds: a.folds,
        n_permutations: c.permutations.unwrap_or(if full { 10_000 } else { 1000 }),
        rho_grid: default_rho_grid(),
        fit: c.model.fit_config()?,
        seed: c.seed,
    };
    Ok(cfg)
}
