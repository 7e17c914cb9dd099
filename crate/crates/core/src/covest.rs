//! Trial normalization, Ledoit–Wolf shrinkage and assembly of the
//! correlation pencil.
//!
//! All correlation matrices are unnormalized sums `XᵀX` accumulated over
//! trials; the `1/T` factor cancels in the eigenproblem. With a stimulus `Y`
//! weighted by `ρ`, the stimulus block-row of the stationarity equations is
//! multiplied by `ρ` so both pencil matrices are symmetric:
//!
//! ```text
//! r_full      = [ R_kl      ρ R_ky  ]     r_blockdiag = blkdiag(R̂_11, …, R̂_KK, ρ R̂_yy)
//!               [ ρ R_yk    ρ² R_yy ]
//! ```
//!
//! `R̂` are the shrunk autocorrelations. `r_full` keeps raw sample
//! correlations everywhere, so it equals `X̃ᵀX̃` with `X̃ = [X_1 … X_K ρY]`
//! and the shared signal built from its generalized eigenvectors is exactly
//! orthogonal on the training data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, ViewMatrix};
use crate::error::{Error, Result};

/// How the diagonal autocorrelation blocks are regularized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    None,
    #[default]
    LedoitWolf,
    /// Fixed intensity in `[0, 1]`.
    Fixed(f64),
}

/// Centers every column and scales the whole matrix to unit Frobenius norm.
pub fn normalize_matrix(m: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let t = m.nrows();
    if t == 0 {
        return Err(Error::DegenerateTrial(format!("{label} has no samples")));
    }
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / t as f64;
        col.add_scalar_mut(-mean);
    }
    let norm = out.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateTrial(format!(
            "{label} is constant within the trial"
        )));
    }
    out /= norm;
    Ok(out)
}

/// Applies [`normalize_matrix`] to every view and to the stimulus.
pub fn normalize_trial(trial: &Dataset) -> Result<Dataset> {
    trial.map_signals(normalize_matrix)
}

/// Optimal shrinkage intensity toward `μI` from accumulated moments:
/// `gram_sum = Σ x_t x_tᵀ`, `quartic_sum = Σ ‖x_t‖⁴` over `n` samples.
pub fn ledoit_wolf_intensity(gram_sum: &DMatrix<f64>, quartic_sum: f64, n: usize) -> f64 {
    let p = gram_sum.nrows() as f64;
    let n_f = n as f64;
    let s = gram_sum / n_f;
    let mu = s.trace() / p;
    let s_norm2 = s.norm_squared();
    // ‖S - μI‖²
    let d2 = s_norm2 - p * mu * mu;
    if d2 <= 1e-14 * s_norm2 || d2 <= 0.0 {
        return 0.0;
    }
    // (1/n²) Σ_t ‖x_t x_tᵀ - S‖²
    let b2_bar = (quartic_sum / n_f - s_norm2) / n_f;
    let b2 = b2_bar.max(0.0).min(d2);
    (b2 / d2).clamp(0.0, 1.0)
}

fn shrink_block(gram_sum: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let p = gram_sum.nrows();
    let target = gram_sum.trace() / p as f64;
    let mut out = gram_sum * (1.0 - delta);
    for i in 0..p {
        out[(i, i)] += delta * target;
    }
    out
}

fn row_quartic(x: &DMatrix<f64>, t: usize) -> f64 {
    let sq: f64 = x.row(t).iter().map(|v| v * v).sum();
    sq * sq
}

/// Ledoit–Wolf estimate `(1-δ) S + δ μ I` of the covariance of zero-mean rows.
pub fn ledoit_wolf_shrink(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let t = x.nrows();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "Ledoit-Wolf needs at least 2 samples, got {t}"
        )));
    }
    let gram = x.tr_mul(x);
    let gram = symmetrized(&gram);
    let quartic: f64 = (0..t).map(|r| row_quartic(x, r)).sum();
    let delta = ledoit_wolf_intensity(&gram, quartic, t);
    Ok((shrink_block(&gram, delta) / t as f64, delta))
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in (j + 1)..m.nrows() {
            out[(i, j)] = m[(j, i)];
        }
    }
    out
}

/// The pencil `(r_blockdiag, r_full)` plus the metadata needed to split
/// eigenvectors back into per-view filters.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStructure {
    pub r_full: DMatrix<f64>,
    pub r_blockdiag: DMatrix<f64>,
    /// Start row of every block; the stimulus block, when present, is last.
    pub block_offsets: Vec<usize>,
    pub block_dims: Vec<usize>,
    /// One entry per block, same order as `block_offsets`.
    pub shrinkage_intensities: Vec<f64>,
    pub rho: f64,
    pub n_views: usize,
    pub has_stimulus: bool,
    pub n_samples: usize,
}

impl CorrelationStructure {
    pub fn dim(&self) -> usize {
        self.r_full.nrows()
    }

    pub fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        let start = self.block_offsets[block];
        start..start + self.block_dims[block]
    }

    /// Shrunk autocorrelation of one block, without the `ρ` row factor.
    pub fn autocorrelation(&self, block: usize) -> DMatrix<f64> {
        let r = self.block_range(block);
        let m = self
            .r_blockdiag
            .view((r.start, r.start), (r.len(), r.len()))
            .into_owned();
        if self.has_stimulus && block == self.n_views {
            m / self.rho
        } else {
            m
        }
    }

    /// The unsymmetrized form: left `blkdiag(R̂_11, …, R̂_yy)`, right with
    /// `ρ R_ky` in the stimulus column, `R_yk` in the stimulus row and
    /// `ρ R_yy` in the corner.
    pub fn nonsymmetric_pencil(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut left = self.r_blockdiag.clone();
        let mut right = self.r_full.clone();
        if self.has_stimulus {
            let r = self.block_range(self.n_views);
            for i in r.clone() {
                for j in 0..self.dim() {
                    right[(i, j)] /= self.rho;
                }
                for j in r.clone() {
                    left[(i, j)] /= self.rho;
                }
            }
        }
        (left, right)
    }
}

/// Running sums of `X̃ᵀX̃` and per-block fourth moments over trials.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    view_dims: Vec<usize>,
    stim_dim: Option<usize>,
    gram: DMatrix<f64>,
    quartic: Vec<f64>,
    n_samples: usize,
}

impl CovarianceAccumulator {
    pub fn new(view_dims: Vec<usize>, stim_dim: Option<usize>) -> Self {
        let d = view_dims.iter().sum::<usize>() + stim_dim.unwrap_or(0);
        let blocks = view_dims.len() + usize::from(stim_dim.is_some());
        Self {
            view_dims,
            stim_dim,
            gram: DMatrix::zeros(d, d),
            quartic: vec![0.0; blocks],
            n_samples: 0,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn has_stimulus(&self) -> bool {
        self.stim_dim.is_some()
    }

    pub fn view_dims(&self) -> &[usize] {
        &self.view_dims
    }

    pub fn add(&mut self, views: &[ViewMatrix], stimulus: Option<&ViewMatrix>) -> Result<()> {
        if views.len() != self.view_dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} views, got {}",
                self.view_dims.len(),
                views.len()
            )));
        }
        let t = views.first().map(|v| v.n_samples()).unwrap_or(0);
        let mut blocks: Vec<&DMatrix<f64>> = Vec::with_capacity(self.quartic.len());
        for (v, &dim) in views.iter().zip(&self.view_dims) {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "view {} has {} columns, expected {dim}",
                    v.view_id,
                    v.dim()
                )));
            }
            blocks.push(&v.data);
        }
        match (self.stim_dim, stimulus) {
            (Some(dim), Some(s)) => {
                if s.dim() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "stimulus has {} columns, expected {dim}",
                        s.dim()
                    )));
                }
                blocks.push(&s.data);
            }
            (Some(_), None) => {
                return Err(Error::DimensionMismatch("trial lacks the stimulus".into()))
            }
            (None, _) => {}
        }
        if let Some(b) = blocks.iter().find(|b| b.nrows() != t) {
            return Err(Error::InconsistentSamples {
                what: "trial signal".into(),
                expected: t,
                found: b.nrows(),
            });
        }

        let d = self.gram.nrows();
        let mut stacked = DMatrix::zeros(t, d);
        let mut offset = 0;
        for (b, q) in blocks.iter().zip(self.quartic.iter_mut()) {
            stacked.columns_mut(offset, b.ncols()).copy_from(*b);
            offset += b.ncols();
            *q += (0..t).map(|r| row_quartic(b, r)).sum::<f64>();
        }
        // blocked GEMM on the explicit transpose beats gemm_tr's dot products
        let stacked_t = stacked.transpose();
        self.gram.gemm(1.0, &stacked_t, &stacked, 1.0);
        self.n_samples += t;
        Ok(())
    }

    /// Pencil for weight `rho`; `rho == 0` leaves the stimulus out (plain GCCA).
    pub fn structure(&self, rho: f64, shrinkage: Shrinkage) -> Result<CorrelationStructure> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
        }
        let with_stim = rho > 0.0;
        if with_stim && self.stim_dim.is_none() {
            return Err(Error::InvalidArgument(
                "rho > 0 requires a stimulus".into(),
            ));
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 samples, have {}",
                self.n_samples
            )));
        }
        if let Shrinkage::Fixed(d) = shrinkage {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidArgument(format!(
                    "shrinkage intensity {d} outside [0, 1]"
                )));
            }
        }

        let mut block_dims = self.view_dims.clone();
        if with_stim {
            block_dims.push(self.stim_dim.unwrap());
        }
        let block_offsets: Vec<usize> = block_dims
            .iter()
            .scan(0, |acc, &d| {
                let start = *acc;
                *acc += d;
                Some(start)
            })
            .collect();
        let dim: usize = block_dims.iter().sum();
        let gram = symmetrized(&self.gram.view((0, 0), (dim, dim)).into_owned());

        let n_views = self.view_dims.len();
        let stim_start = if with_stim { block_offsets[n_views] } else { dim };
        let scale = |i: usize| if i >= stim_start { rho } else { 1.0 };
        let r_full = DMatrix::from_fn(dim, dim, |i, j| (scale(i) * scale(j)) * gram[(i, j)]);

        let mut r_blockdiag = DMatrix::zeros(dim, dim);
        let mut intensities = Vec::with_capacity(block_dims.len());
        for (b, (&off, &bd)) in block_offsets.iter().zip(&block_dims).enumerate() {
            let g = gram.view((off, off), (bd, bd)).into_owned();
            let delta = match shrinkage {
                Shrinkage::None => 0.0,
                Shrinkage::Fixed(d) => d,
                Shrinkage::LedoitWolf => {
                    ledoit_wolf_intensity(&g, self.quartic[b], self.n_samples)
                }
            };
            let mut block = shrink_block(&g, delta);
            if b == n_views {
                block *= rho;
            }
            r_blockdiag.view_mut((off, off), (bd, bd)).copy_from(&block);
            intensities.push(delta);
        }

        Ok(CorrelationStructure {
            r_full,
            r_blockdiag,
            block_offsets,
            block_dims,
            shrinkage_intensities: intensities,
            rho: if with_stim { rho } else { 0.0 },
            n_views,
            has_stimulus: with_stim,
            n_samples: self.n_samples,
        })
    }
}

/// Pencil for a single block of signals.
///
/// Unlike [`CovarianceAccumulator::structure`], a present stimulus demands
/// `rho > 0`; callers wanting plain GCCA omit the stimulus.
pub fn assemble(
    views: &[ViewMatrix],
    stimulus: Option<&ViewMatrix>,
    rho: f64,
    shrinkage: Shrinkage,
) -> Result<CorrelationStructure> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to assemble".into()));
    }
    if stimulus.is_some() && !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must be > 0 with a stimulus, got {rho}"
        )));
    }
    if stimulus.is_none() && rho != 0.0 {
        return Err(Error::InvalidArgument("rho > 0 requires a stimulus".into()));
    }
    let mut acc = CovarianceAccumulator::new(
        views.iter().map(|v| v.dim()).collect(),
        stimulus.map(|s| s.dim()),
    );
    acc.add(views, stimulus)?;
    acc.structure(rho, shrinkage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigsolver::solve_gevd_largest;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn view(m: DMatrix<f64>, id: &str) -> ViewMatrix {
        ViewMatrix::new(m, id).unwrap()
    }

    #[test]
    fn normalizes_two_step_rule() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 1.0]);
        let n = normalize_matrix(&x, "v").unwrap();
        let h = 1.0 / 2f64.sqrt();
        let expected = DMatrix::from_row_slice(2, 2, &[-h, 0.0, h, 0.0]);
        assert!((n - expected).abs().max() < 1e-15);
    }

    #[test]
    fn normalization_fixed_point() {
        let x = DMatrix::from_row_slice(2, 1, &[-0.5f64.sqrt(), 0.5f64.sqrt()]);
        let n = normalize_matrix(&x, "v").unwrap();
        assert!((n - x).abs().max() < 1e-15);
    }

    #[test]
    fn constant_view_is_degenerate() {
        let x = DMatrix::from_element(5, 3, 2.5);
        assert!(matches!(normalize_matrix(&x, "v"), Err(Error::DegenerateTrial(_))));
        let ds = Dataset::with_default_labels(vec![randn(5, 2, &mut ChaCha8Rng::seed_from_u64(1)), x], None, 8.0)
            .unwrap();
        assert!(normalize_trial(&ds).is_err());
    }

    #[test]
    fn normalize_trial_covers_stimulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = Dataset::with_default_labels(
            vec![randn(20, 3, &mut rng), randn(20, 2, &mut rng)],
            Some(randn(20, 1, &mut rng).add_scalar(4.0)),
            8.0,
        )
        .unwrap();
        let n = normalize_trial(&ds).unwrap();
        for m in n.views().iter().chain(n.stimulus()) {
            assert!((m.norm() - 1.0).abs() < 1e-14);
            for c in m.column_iter() {
                assert!(c.sum().abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lw_intensity_vanishes_for_large_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // anisotropic columns so the spherical target is biased
        let scaled = |t: usize, rng: &mut ChaCha8Rng| {
            let mut x = randn(t, 5, rng);
            for (j, mut c) in x.column_iter_mut().enumerate() {
                c *= 1.0 + j as f64;
            }
            x
        };
        let mut last = f64::INFINITY;
        for t in [50, 500, 5000, 50000] {
            let x = scaled(t, &mut rng);
            let (_, delta) = ledoit_wolf_shrink(&x).unwrap();
            assert!(delta <= last + 0.05, "t={t} delta={delta} last={last}");
            last = delta;
        }
        assert!(last < 0.05, "delta at large T: {last}");
        let x = scaled(50000, &mut rng);
        let (est, _) = ledoit_wolf_shrink(&x).unwrap();
        let s = x.tr_mul(&x) / 50000.0;
        assert!((&est - &s).abs().max() < 0.02 * s.max());
    }

    #[test]
    fn lw_shrinks_hard_when_samples_are_scarce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(10, 100, &mut rng);
        let (est, delta) = ledoit_wolf_shrink(&x).unwrap();
        assert!(delta > 0.8, "delta {delta}");
        assert!(est.clone().cholesky().is_some());
    }

    #[test]
    fn lw_leaves_spherical_covariance_alone() {
        let m = 4;
        let mut x = DMatrix::zeros(2 * m, m);
        for i in 0..m {
            x[(i, i)] = 1.5;
            x[(m + i, i)] = -1.5;
        }
        let (est, _) = ledoit_wolf_shrink(&x).unwrap();
        let s = x.tr_mul(&x) / (2 * m) as f64;
        assert!((est - s).abs().max() < 1e-15);
    }

    #[test]
    fn lw_needs_two_samples() {
        assert!(ledoit_wolf_shrink(&DMatrix::from_element(1, 3, 1.0)).is_err());
    }

    #[test]
    fn two_views_without_stimulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = randn(30, 3, &mut rng);
        let x2 = randn(30, 2, &mut rng);
        let s = assemble(
            &[view(x1.clone(), "a"), view(x2.clone(), "b")],
            None,
            0.0,
            Shrinkage::None,
        )
        .unwrap();
        let r11 = x1.tr_mul(&x1);
        let r12 = x1.tr_mul(&x2);
        let r22 = x2.tr_mul(&x2);
        assert!((s.r_full.view((0, 0), (3, 3)) - &r11).abs().max() < 1e-12);
        assert!((s.r_full.view((0, 3), (3, 2)) - &r12).abs().max() < 1e-12);
        assert!((s.r_full.view((3, 3), (2, 2)) - &r22).abs().max() < 1e-12);
        assert!((s.r_blockdiag.view((0, 0), (3, 3)) - &r11).abs().max() < 1e-12);
        assert!(s.r_blockdiag.view((0, 3), (3, 2)).iter().all(|v| *v == 0.0));
        assert_eq!(s.block_offsets, vec![0, 3]);
    }

    #[test]
    fn one_view_with_stimulus_unit_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(25, 3, &mut rng);
        let y = randn(25, 2, &mut rng);
        let s = assemble(&[view(x.clone(), "a")], Some(&view(y.clone(), "y")), 1.0, Shrinkage::None)
            .unwrap();
        let mut xt = DMatrix::zeros(25, 5);
        xt.columns_mut(0, 3).copy_from(&x);
        xt.columns_mut(3, 2).copy_from(&y);
        assert!((&s.r_full - xt.tr_mul(&xt)).abs().max() < 1e-12);
    }

    #[test]
    fn rho_scales_stimulus_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x1 = randn(3, 2, &mut rng);
        let x2 = randn(3, 2, &mut rng);
        let y = randn(3, 2, &mut rng);
        let views = [view(x1.clone(), "a"), view(x2.clone(), "b")];
        let s = assemble(&views, Some(&view(y.clone(), "y")), 2.0, Shrinkage::None).unwrap();
        let r1y = x1.tr_mul(&y);
        let r2y = x2.tr_mul(&y);
        let ryy = y.tr_mul(&y);
        assert!((s.r_full.view((0, 4), (2, 2)) - &r1y * 2.0).abs().max() < 1e-12);
        assert!((s.r_full.view((2, 4), (2, 2)) - &r2y * 2.0).abs().max() < 1e-12);
        assert!((s.r_full.view((4, 0), (2, 2)) - r1y.transpose() * 2.0).abs().max() < 1e-12);
        assert!((s.r_full.view((4, 4), (2, 2)) - &ryy * 4.0).abs().max() < 1e-12);
        assert!((s.r_blockdiag.view((4, 4), (2, 2)) - &ryy * 2.0).abs().max() < 1e-12);
        assert!((s.autocorrelation(2) - ryy).abs().max() < 1e-12);
    }

    #[test]
    fn assemble_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = view(randn(10, 2, &mut rng), "a");
        let b = view(randn(9, 2, &mut rng), "b");
        let y = view(randn(10, 1, &mut rng), "y");
        assert!(assemble(&[a.clone(), b], None, 0.0, Shrinkage::None).is_err());
        assert!(assemble(&[a.clone()], Some(&y), 0.0, Shrinkage::None).is_err());
        assert!(assemble(&[a.clone()], Some(&y), -1.0, Shrinkage::None).is_err());
        assert!(assemble(&[a], None, 1.0, Shrinkage::None).is_err());
    }

    #[test]
    fn symmetrized_and_nonsymmetric_pencils_share_eigenpairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let views: Vec<_> = (0..3).map(|i| view(randn(60, 3, &mut rng), &i.to_string())).collect();
        let y = view(randn(60, 4, &mut rng), "y");
        for rho in [0.1, 1.0, 10.0] {
            let s = assemble(&views, Some(&y), rho, Shrinkage::LedoitWolf).unwrap();
            let dim = s.dim();
            let sym = solve_gevd_largest(&s.r_full, &s.r_blockdiag, dim).unwrap();
            let (left, right) = s.nonsymmetric_pencil();
            // eigenvectors of the symmetrized pencil solve the unsymmetrized one
            for (q, &mu) in sym.eigenvalues.iter().enumerate() {
                let v = sym.eigenvectors.column(q);
                let res = &right * v - (&left * v) * mu;
                assert!(
                    res.norm() <= 1e-9 * (right.norm() + mu.abs() * left.norm()) * v.norm(),
                    "rho {rho} q {q}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn structure_invariants(seed in 0u64..1000, t in 3usize..40, k in 1usize..4, m in 1usize..5, rho in prop_oneof![Just(0.0), 0.01f64..50.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let views: Vec<_> = (0..k).map(|i| view(randn(t, m, &mut rng), &i.to_string())).collect();
            let y = view(randn(t, 2, &mut rng), "y");
            let mut acc = CovarianceAccumulator::new(vec![m; k], Some(2));
            acc.add(&views, Some(&y)).unwrap();
            let s = acc.structure(rho, Shrinkage::LedoitWolf).unwrap();
            prop_assert_eq!(&s.r_full, &s.r_full.transpose());
            prop_assert_eq!(&s.r_blockdiag, &s.r_blockdiag.transpose());
            for d in &s.shrinkage_intensities {
                prop_assert!((0.0..=1.0).contains(d));
            }
            let eig = s.r_blockdiag.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
        }
    }
}
