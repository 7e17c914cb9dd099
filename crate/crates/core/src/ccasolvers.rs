//! GCCA and SI-GCCA estimators.
//!
//! Filters are the generalized eigenvectors of `(R_D, R̃)` with the smallest
//! eigenvalues, scaled so that the shared signal
//! `S = Σ_k X_k W_k + ρ Y V` has orthonormal columns on the training data.
//! Numerically the solver works on the reciprocal pencil `R̃ w = μ R_D w`,
//! whose right-hand matrix is always positive definite after shrinkage, and
//! reports `λ = 1/μ`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covest::{normalize_matrix, CorrelationStructure, CovarianceAccumulator, Shrinkage};
use crate::datamodel::{Dataset, ViewMatrix};
use crate::eigsolver::solve_gevd_largest;
use crate::error::{Error, Result};
use crate::lagmat::{eeg_lagspec, lag_embed, stimulus_lagspec, LagSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gcca,
    Sigcca,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gcca => "gcca",
            Method::Sigcca => "sigcca",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub q: usize,
    pub eeg_lags: LagSpec,
    pub stim_lags: LagSpec,
    pub shrinkage: Shrinkage,
    /// Center and unit-Frobenius-normalize each trial before embedding.
    pub normalize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            q: 1,
            eeg_lags: eeg_lagspec(5).expect("odd lag count"),
            stim_lags: stimulus_lagspec(11).expect("positive lag count"),
            shrinkage: Shrinkage::LedoitWolf,
            normalize: true,
        }
    }
}

/// One trial after normalization and lag embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTrial {
    pub views: Vec<ViewMatrix>,
    pub stimulus: Option<ViewMatrix>,
}

impl EmbeddedTrial {
    pub fn n_samples(&self) -> usize {
        self.views.first().map(|v| v.n_samples()).unwrap_or(0)
    }
}

fn prepare_signal(m: &DMatrix<f64>, lags: &LagSpec, normalize: bool, label: &str) -> Result<DMatrix<f64>> {
    if normalize {
        lag_embed(&normalize_matrix(m, label)?, lags)
    } else {
        lag_embed(m, lags)
    }
}

pub fn embed_trial(
    trial: &Dataset,
    eeg_lags: &LagSpec,
    stim_lags: Option<&LagSpec>,
    normalize: bool,
) -> Result<EmbeddedTrial> {
    let views = trial
        .views()
        .iter()
        .zip(trial.labels())
        .map(|(v, label)| ViewMatrix::new(prepare_signal(v, eeg_lags, normalize, label)?, label.clone()))
        .collect::<Result<Vec<_>>>()?;
    let stimulus = match stim_lags {
        Some(lags) => {
            let y = trial
                .stimulus()
                .ok_or_else(|| Error::InvalidArgument("trial has no stimulus".into()))?;
            Some(ViewMatrix::new(prepare_signal(y, lags, normalize, "stimulus")?, "stimulus")?)
        }
        None => None,
    };
    Ok(EmbeddedTrial { views, stimulus })
}

/// A trained GCCA or SI-GCCA model.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub method: Method,
    pub q: usize,
    pub rho: f64,
    /// Generalized eigenvalues `λ` of `(R_D, R̃)`, ascending.
    pub eigenvalues: Vec<f64>,
    /// `W_k`, one `M_k x Q` matrix per view.
    pub filters: Vec<DMatrix<f64>>,
    /// `V` (`P x Q`), present iff `rho > 0`.
    pub stimulus_encoder: Option<DMatrix<f64>>,
    pub labels: Vec<String>,
    pub channels: Vec<usize>,
    pub stim_channels: Option<usize>,
    pub eeg_lags: LagSpec,
    pub stim_lags: Option<LagSpec>,
    pub shrinkage: Shrinkage,
    pub normalize: bool,
}

impl CcaModel {
    pub fn n_views(&self) -> usize {
        self.filters.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.filters.iter().map(|w| w.nrows()).collect()
    }

    /// `(K + ρ) Q - Σ_q 1/λ_q`: the objective value at the optimum implied by
    /// the eigenvalues.
    pub fn closed_form_objective(&self) -> f64 {
        let weight = self.n_views() as f64 + self.rho;
        weight * self.q as f64 - self.eigenvalues.iter().map(|l| 1.0 / l).sum::<f64>()
    }

    /// Normalizes (if configured) and lag-embeds a trial with fit-time specs.
    pub fn embed(&self, trial: &Dataset, with_stimulus: bool) -> Result<EmbeddedTrial> {
        let stim = if with_stimulus { self.stim_lags.as_ref() } else { None };
        embed_trial(trial, &self.eeg_lags, stim, self.normalize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&ModelFile::from(self))?;
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// Trials embedded once, with their covariance sums, ready to be fit at any ρ.
#[derive(Debug, Clone)]
pub struct PreparedTraining {
    trials: Vec<EmbeddedTrial>,
    acc: CovarianceAccumulator,
    cfg: FitConfig,
    channels: Vec<usize>,
    stim_channels: Option<usize>,
}

impl PreparedTraining {
    pub fn new(trials: &[Dataset], cfg: &FitConfig, with_stimulus: bool) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InvalidArgument("no training trials".into()))?;
        if with_stimulus && first.stimulus().is_none() {
            return Err(Error::InvalidArgument(
                "SI-GCCA requires a stimulus in the training data".into(),
            ));
        }
        let stim_lags = with_stimulus.then_some(&cfg.stim_lags);
        let embedded = trials
            .iter()
            .map(|t| embed_trial(t, &cfg.eeg_lags, stim_lags, cfg.normalize))
            .collect::<Result<Vec<_>>>()?;
        Self::from_embedded(embedded, cfg)
    }

    /// Trials that are already normalized and embedded with `cfg`'s lags.
    pub fn from_embedded(trials: Vec<EmbeddedTrial>, cfg: &FitConfig) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InvalidArgument("no training trials".into()))?;
        let n_lags = cfg.eeg_lags.len();
        let view_dims: Vec<usize> = first.views.iter().map(|v| v.dim()).collect();
        if view_dims.iter().any(|d| d % n_lags != 0) {
            return Err(Error::DimensionMismatch(format!(
                "view dimensions {view_dims:?} are not multiples of {n_lags} lags"
            )));
        }
        let stim_dim = first.stimulus.as_ref().map(|s| s.dim());
        if let Some(d) = stim_dim {
            if d % cfg.stim_lags.len() != 0 {
                return Err(Error::DimensionMismatch(format!(
                    "stimulus dimension {d} is not a multiple of {} lags",
                    cfg.stim_lags.len()
                )));
            }
        }
        let mut acc = CovarianceAccumulator::new(view_dims.clone(), stim_dim);
        for t in &trials {
            acc.add(&t.views, t.stimulus.as_ref())?;
        }
        Ok(Self {
            channels: view_dims.iter().map(|d| d / n_lags).collect(),
            stim_channels: stim_dim.map(|d| d / cfg.stim_lags.len()),
            trials,
            acc,
            cfg: cfg.clone(),
        })
    }

    pub fn trials(&self) -> &[EmbeddedTrial] {
        &self.trials
    }

    pub fn structure(&self, rho: f64) -> Result<CorrelationStructure> {
        self.acc.structure(rho, self.cfg.shrinkage)
    }

    /// GCCA for `rho == 0`, SI-GCCA otherwise.
    pub fn fit(&self, rho: f64) -> Result<CcaModel> {
        let structure = self.structure(rho)?;
        let q = self.cfg.q;
        let min_dim = *self.acc.view_dims().iter().min().unwrap();
        if q == 0 || q > min_dim {
            return Err(Error::InvalidArgument(format!(
                "Q = {q} must lie in 1..={min_dim}"
            )));
        }
        let gevd = solve_gevd_largest(&structure.r_full, &structure.r_blockdiag, q)?;
        let mut eigenvalues = Vec::with_capacity(q);
        for (i, &mu) in gevd.eigenvalues.iter().enumerate() {
            if !(mu > 0.0) {
                return Err(Error::DegenerateComponent(i));
            }
            eigenvalues.push(1.0 / mu);
        }
        let filters: Vec<DMatrix<f64>> = (0..structure.n_views)
            .map(|k| {
                let r = structure.block_range(k);
                gevd.eigenvectors.rows(r.start, r.len()).into_owned()
            })
            .collect();
        let stimulus_encoder = structure.has_stimulus.then(|| {
            let r = structure.block_range(structure.n_views);
            gevd.eigenvectors.rows(r.start, r.len()).into_owned()
        });
        let with_stim = structure.has_stimulus;
        let unscaled = CcaModel {
            method: if with_stim { Method::Sigcca } else { Method::Gcca },
            q,
            rho: structure.rho,
            eigenvalues,
            filters,
            stimulus_encoder,
            labels: self.trials[0].views.iter().map(|v| v.view_id.clone()).collect(),
            channels: self.channels.clone(),
            stim_channels: if with_stim { self.stim_channels } else { None },
            eeg_lags: self.cfg.eeg_lags.clone(),
            stim_lags: with_stim.then(|| self.cfg.stim_lags.clone()),
            shrinkage: self.cfg.shrinkage,
            normalize: self.cfg.normalize,
        };
        scale_filters(&unscaled, &self.trials)
    }
}

pub fn fit_gcca(trials: &[Dataset], cfg: &FitConfig) -> Result<CcaModel> {
    PreparedTraining::new(trials, cfg, false)?.fit(0.0)
}

/// SI-GCCA; `rho == 0` falls back to [`fit_gcca`].
pub fn fit_sigcca(trials: &[Dataset], rho: f64, cfg: &FitConfig) -> Result<CcaModel> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
    }
    if rho == 0.0 {
        return fit_gcca(trials, cfg);
    }
    PreparedTraining::new(trials, cfg, true)?.fit(rho)
}

fn check_trial_dims(model: &CcaModel, trial: &EmbeddedTrial) -> Result<()> {
    if trial.views.len() != model.n_views() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} views, trial has {}",
            model.n_views(),
            trial.views.len()
        )));
    }
    for (v, w) in trial.views.iter().zip(&model.filters) {
        if v.dim() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "view {} has dimension {}, model expects {}",
                v.view_id,
                v.dim(),
                w.nrows()
            )));
        }
    }
    Ok(())
}

/// `S` (unnormalized columns when the model is unscaled) stacked over trials.
pub fn shared_subspace(model: &CcaModel, trials: &[EmbeddedTrial]) -> Result<DMatrix<f64>> {
    let total: usize = trials.iter().map(|t| t.n_samples()).sum();
    let mut s = DMatrix::zeros(total, model.q);
    let mut row = 0;
    for trial in trials {
        check_trial_dims(model, trial)?;
        let t = trial.n_samples();
        let mut block = s.rows_mut(row, t);
        for (v, w) in trial.views.iter().zip(&model.filters) {
            block.gemm(1.0, &v.data, w, 1.0);
        }
        if let Some(enc) = &model.stimulus_encoder {
            let y = trial.stimulus.as_ref().ok_or_else(|| {
                Error::DimensionMismatch("SI-GCCA shared subspace needs the stimulus".into())
            })?;
            if y.dim() != enc.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "stimulus has dimension {}, model expects {}",
                    y.dim(),
                    enc.nrows()
                )));
            }
            block.gemm(model.rho, &y.data, enc, 1.0);
        }
        row += t;
    }
    Ok(s)
}

/// Rescales every component so `‖s_q‖ = 1` on `trials`.
pub fn scale_filters(model: &CcaModel, trials: &[EmbeddedTrial]) -> Result<CcaModel> {
    let s = shared_subspace(model, trials)?;
    let mut scaled = model.clone();
    for q in 0..model.q {
        let norm = s.column(q).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateComponent(q));
        }
        for w in scaled.filters.iter_mut() {
            w.column_mut(q).unscale_mut(norm);
        }
        if let Some(v) = scaled.stimulus_encoder.as_mut() {
            v.column_mut(q).unscale_mut(norm);
        }
    }
    Ok(scaled)
}

/// `z_k = X_k W_k` for one embedded trial.
pub fn transform_embedded(model: &CcaModel, trial: &EmbeddedTrial) -> Result<Vec<DMatrix<f64>>> {
    check_trial_dims(model, trial)?;
    Ok(trial
        .views
        .iter()
        .zip(&model.filters)
        .map(|(v, w)| &v.data * w)
        .collect())
}

/// Per-view latent signals of a raw trial; lag embedding (and normalization
/// if the model was fit with it) is applied internally.
pub fn transform(model: &CcaModel, trial: &Dataset) -> Result<Vec<DMatrix<f64>>> {
    let channels: Vec<usize> = trial.views().iter().map(|v| v.ncols()).collect();
    if channels != model.channels {
        return Err(Error::DimensionMismatch(format!(
            "trial channels {channels:?} differ from fit-time {:?}",
            model.channels
        )));
    }
    transform_embedded(model, &model.embed(trial, false)?)
}

/// MAXVAR (or SI-GCCA) objective at `shared`, with every filter replaced by
/// its least-squares optimum `R̂_kk⁻¹ X_kᵀ S`:
/// `Σ_k (‖S‖² - tr(Sᵀ X_k W_k)) + ρ (‖S‖² - tr(Sᵀ Y V))`.
pub fn maxvar_objective(
    structure: &CorrelationStructure,
    trials: &[EmbeddedTrial],
    shared: &DMatrix<f64>,
) -> Result<f64> {
    let total: usize = trials.iter().map(|t| t.n_samples()).sum();
    if shared.nrows() != total {
        return Err(Error::DimensionMismatch(format!(
            "shared subspace has {} rows, trials have {total}",
            shared.nrows()
        )));
    }
    let n_blocks = structure.block_dims.len();
    let mut cross: Vec<DMatrix<f64>> = structure
        .block_dims
        .iter()
        .map(|&d| DMatrix::zeros(d, shared.ncols()))
        .collect();
    let mut row = 0;
    for trial in trials {
        let t = trial.n_samples();
        let s = shared.rows(row, t);
        for (k, c) in cross.iter_mut().enumerate() {
            let x = if k < structure.n_views {
                &trial.views[k].data
            } else {
                &trial
                    .stimulus
                    .as_ref()
                    .ok_or_else(|| Error::DimensionMismatch("trial lacks the stimulus".into()))?
                    .data
            };
            c.gemm_tr(1.0, x, &s, 1.0);
        }
        row += t;
    }
    let s_norm2 = shared.norm_squared();
    let mut total_obj = 0.0;
    for (k, c) in cross.iter().enumerate() {
        let chol = structure
            .autocorrelation(k)
            .cholesky()
            .ok_or_else(|| Error::PencilNotDefinite(format!("block {k} autocorrelation")))?;
        let w = chol.solve(c);
        let weight = if k < structure.n_views { 1.0 } else { structure.rho };
        total_obj += weight * (s_norm2 - c.dot(&w));
    }
    debug_assert_eq!(cross.len(), n_blocks);
    Ok(total_obj)
}

#[derive(Serialize, Deserialize)]
struct StoredMatrix {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for StoredMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

impl TryFrom<StoredMatrix> for DMatrix<f64> {
    type Error = Error;

    fn try_from(m: StoredMatrix) -> Result<Self> {
        if m.data.len() != m.rows * m.cols {
            return Err(Error::DimensionMismatch(format!(
                "stored matrix declares {}x{} but holds {} values",
                m.rows,
                m.cols,
                m.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    method: Method,
    q: usize,
    rho: f64,
    eigenvalues: Vec<f64>,
    labels: Vec<String>,
    channels: Vec<usize>,
    stim_channels: Option<usize>,
    eeg_lags: LagSpec,
    stim_lags: Option<LagSpec>,
    shrinkage: Shrinkage,
    normalize: bool,
    filters: Vec<StoredMatrix>,
    stimulus_encoder: Option<StoredMatrix>,
}

impl From<&CcaModel> for ModelFile {
    fn from(m: &CcaModel) -> Self {
        Self {
            method: m.method,
            q: m.q,
            rho: m.rho,
            eigenvalues: m.eigenvalues.clone(),
            labels: m.labels.clone(),
            channels: m.channels.clone(),
            stim_channels: m.stim_channels,
            eeg_lags: m.eeg_lags.clone(),
            stim_lags: m.stim_lags.clone(),
            shrinkage: m.shrinkage,
            normalize: m.normalize,
            filters: m.filters.iter().map(StoredMatrix::from).collect(),
            stimulus_encoder: m.stimulus_encoder.as_ref().map(StoredMatrix::from),
        }
    }
}

impl TryFrom<ModelFile> for CcaModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let filters = f
            .filters
            .into_iter()
            .map(DMatrix::try_from)
            .collect::<Result<Vec<_>>>()?;
        let stimulus_encoder = f.stimulus_encoder.map(DMatrix::try_from).transpose()?;
        let bad = |msg: String| Err(Error::InvalidArgument(format!("model file: {msg}")));
        if filters.len() != f.channels.len() || filters.len() != f.labels.len() {
            return bad("filter, channel and label counts differ".into());
        }
        for (w, &c) in filters.iter().zip(&f.channels) {
            if w.nrows() != c * f.eeg_lags.len() || w.ncols() != f.q {
                return bad(format!("filter shape {:?} inconsistent", w.shape()));
            }
        }
        if f.eigenvalues.len() != f.q {
            return bad("eigenvalue count differs from Q".into());
        }
        match (&stimulus_encoder, &f.stim_lags, f.stim_channels) {
            (None, None, None) if f.rho == 0.0 => {}
            (Some(v), Some(lags), Some(c)) if f.rho > 0.0 => {
                if v.nrows() != c * lags.len() || v.ncols() != f.q {
                    return bad("encoder shape inconsistent".into());
                }
            }
            _ => return bad("encoder must be present exactly when rho > 0".into()),
        }
        Ok(CcaModel {
            method: f.method,
            q: f.q,
            rho: f.rho,
            eigenvalues: f.eigenvalues,
            filters,
            stimulus_encoder,
            labels: f.labels,
            channels: f.channels,
            stim_channels: f.stim_channels,
            eeg_lags: f.eeg_lags,
            stim_lags: f.stim_lags,
            shrinkage: f.shrinkage,
            normalize: f.normalize,
        })
    }
}
