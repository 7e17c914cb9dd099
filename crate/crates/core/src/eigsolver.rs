//! Symmetric-definite generalized eigensolver and an alternating
//! least-squares oracle for the MAXVAR objective.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::covest::{ledoit_wolf_shrink, Shrinkage};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GevdResult {
    pub eigenvalues: Vec<f64>,
    /// One column per eigenvalue.
    pub eigenvectors: DMatrix<f64>,
    /// `max ‖A v - λ B v‖ / ‖v‖` over the returned pairs.
    pub residual_norm: f64,
}

fn check_pencil(a: &DMatrix<f64>, b: &DMatrix<f64>, q: usize) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n || b.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "pencil matrices {:?} and {:?} must be square and equal",
            a.shape(),
            b.shape()
        )));
    }
    if q == 0 || q > n {
        return Err(Error::InvalidArgument(format!(
            "requested {q} eigenpairs of a {n}-dimensional pencil"
        )));
    }
    for (name, m) in [("A", a), ("B", b)] {
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "{name} is not symmetric (max asymmetry {asym:e})"
            )));
        }
    }
    Ok(())
}

/// Flips `v` so its largest-magnitude entry is positive (first index wins ties).
fn fix_sign(mut v: nalgebra::DVectorViewMut<'_, f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Eigenpairs of `A v = λ B v` at the given ranks of the ascending spectrum.
fn solve_ranks(a: &DMatrix<f64>, b: &DMatrix<f64>, ranks: impl Fn(usize) -> Vec<usize>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::PencilNotDefinite("Cholesky factorization of B failed".into()))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let y = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::PencilNotDefinite("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::PencilNotDefinite("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);

    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let picked: Vec<usize> = ranks(n).into_iter().map(|r| order[r]).collect();
    let values: Vec<f64> = picked.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut selected = DMatrix::zeros(n, picked.len());
    for (dst, &src) in picked.iter().enumerate() {
        selected.set_column(dst, &eig.eigenvectors.column(src));
    }
    let mut vectors = l
        .transpose()
        .solve_upper_triangular(&selected)
        .ok_or_else(|| Error::PencilNotDefinite("singular Cholesky factor".into()))?;
    for j in 0..vectors.ncols() {
        fix_sign(vectors.column_mut(j));
    }
    Ok((values, vectors))
}

fn residual(a: &DMatrix<f64>, b: &DMatrix<f64>, values: &[f64], vectors: &DMatrix<f64>) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(j, &lambda)| {
            let v = vectors.column(j);
            (a * v - (b * v) * lambda).norm() / v.norm()
        })
        .fold(0.0, f64::max)
}

/// The `q` smallest eigenpairs of `A w = λ B w`, `B` positive definite.
/// Eigenvalues ascend.
pub fn solve_gevd_smallest(a: &DMatrix<f64>, b: &DMatrix<f64>, q: usize) -> Result<GevdResult> {
    check_pencil(a, b, q)?;
    let (eigenvalues, eigenvectors) = solve_ranks(a, b, |_| (0..q).collect())?;
    let residual_norm = residual(a, b, &eigenvalues, &eigenvectors);
    Ok(GevdResult {
        eigenvalues,
        eigenvectors,
        residual_norm,
    })
}

/// The `q` largest eigenpairs of `A w = λ B w`, `B` positive definite.
/// Eigenvalues descend.
pub fn solve_gevd_largest(a: &DMatrix<f64>, b: &DMatrix<f64>, q: usize) -> Result<GevdResult> {
    check_pencil(a, b, q)?;
    let (eigenvalues, eigenvectors) = solve_ranks(a, b, |n| (0..q).map(|i| n - 1 - i).collect())?;
    let residual_norm = residual(a, b, &eigenvalues, &eigenvectors);
    Ok(GevdResult {
        eigenvalues,
        eigenvectors,
        residual_norm,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AlsOptions {
    pub max_iters: usize,
    /// Stop once one sweep lowers the objective by less than this.
    pub tol: f64,
    /// Regularization of each view's autocorrelation, as in the pencil.
    pub shrinkage: Shrinkage,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-14,
            shrinkage: Shrinkage::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlsResult {
    pub shared: DMatrix<f64>,
    pub filters: Vec<DMatrix<f64>>,
    pub encoder: Option<DMatrix<f64>>,
    pub objective: f64,
    /// Objective after every sweep, starting with the initial W-step.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// `false` when `max_iters` ran out; the last iterate is still returned.
    pub converged: bool,
}

struct AlsBlock<'a> {
    x: &'a DMatrix<f64>,
    weight: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    gram: DMatrix<f64>,
}

impl AlsBlock<'_> {
    fn solve(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(&self.x.tr_mul(s))
    }

    /// `‖S‖² - 2 tr(SᵀXW) + tr(WᵀGW)`, equal to `‖S - XW‖²` without shrinkage.
    fn cost(&self, s: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
        let xw = self.x * w;
        s.norm_squared() - 2.0 * s.dot(&xw) + w.dot(&(&self.gram * w))
    }
}

fn regularized_gram(x: &DMatrix<f64>, shrinkage: Shrinkage) -> Result<DMatrix<f64>> {
    let t = x.nrows() as f64;
    let raw = x.tr_mul(x);
    let raw = (&raw + raw.transpose()) * 0.5;
    Ok(match shrinkage {
        Shrinkage::None => raw,
        Shrinkage::Fixed(d) => {
            let mu = raw.trace() / raw.nrows() as f64;
            raw * (1.0 - d) + DMatrix::identity(x.ncols(), x.ncols()) * (d * mu)
        }
        Shrinkage::LedoitWolf => ledoit_wolf_shrink(x)?.0 * t,
    })
}

/// Polar factor `U Vᵀ` of `m` (maximizes `tr(Sᵀ m)` over `SᵀS = I`).
fn polar_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors");
    let vt = svd.v_t.expect("right singular vectors");
    u * vt
}

/// Minimizes `Σ_k ‖S - X_k W_k‖² + ρ ‖S - Y V‖²` subject to `SᵀS = I` by
/// alternating per-view least squares with an orthogonal Procrustes step.
pub fn als_oracle(
    views: &[DMatrix<f64>],
    stimulus: Option<&DMatrix<f64>>,
    rho: f64,
    q: usize,
    opts: &AlsOptions,
) -> Result<AlsResult> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be > 0".into()));
    }
    let t = views[0].nrows();
    let use_stim = match stimulus {
        Some(_) if rho > 0.0 => true,
        Some(_) if rho < 0.0 => {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")))
        }
        _ => false,
    };
    let mut signals: Vec<(&DMatrix<f64>, f64)> = views.iter().map(|v| (v, 1.0)).collect();
    if use_stim {
        signals.push((stimulus.unwrap(), rho));
    }
    for (x, _) in &signals {
        if x.nrows() != t {
            return Err(Error::InconsistentSamples {
                what: "ALS input".into(),
                expected: t,
                found: x.nrows(),
            });
        }
    }
    let min_dim = signals.iter().map(|(x, _)| x.ncols()).min().unwrap();
    if q == 0 || q > min_dim || q >= t {
        return Err(Error::InvalidArgument(format!(
            "Q = {q} violates the rank bound (1 <= Q <= {min_dim}, Q < T = {t})"
        )));
    }

    let blocks = signals
        .iter()
        .map(|&(x, weight)| {
            let gram = regularized_gram(x, opts.shrinkage)?;
            let chol = gram.clone().cholesky().ok_or_else(|| {
                Error::PencilNotDefinite("view autocorrelation is singular".into())
            })?;
            Ok(AlsBlock {
                x,
                weight,
                chol,
                gram,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // warm start: leading left singular vectors of [X_1 … X_K (Y)]
    let total: usize = signals.iter().map(|(x, _)| x.ncols()).sum();
    let mut concat = DMatrix::zeros(t, total);
    let mut off = 0;
    for (x, _) in &signals {
        concat.columns_mut(off, x.ncols()).copy_from(*x);
        off += x.ncols();
    }
    let svd = concat.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut s = DMatrix::zeros(t, q);
    for (dst, &src) in order.iter().take(q).enumerate() {
        s.set_column(dst, &u.column(src));
    }

    let w_step = |s: &DMatrix<f64>| -> (Vec<DMatrix<f64>>, f64) {
        let ws: Vec<_> = blocks.iter().map(|b| b.solve(s)).collect();
        let obj = blocks
            .iter()
            .zip(&ws)
            .map(|(b, w)| b.weight * b.cost(s, w))
            .sum();
        (ws, obj)
    };

    let (mut ws, mut obj) = w_step(&s);
    let mut history = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut m = DMatrix::zeros(t, q);
        for (b, w) in blocks.iter().zip(&ws) {
            m += (b.x * w) * b.weight;
        }
        let s_next = polar_factor(&m);
        let (ws_next, obj_next) = w_step(&s_next);
        let decrease = obj - obj_next;
        s = s_next;
        ws = ws_next;
        obj = obj_next;
        history.push(obj);
        if decrease < opts.tol {
            converged = true;
            break;
        }
    }

    let encoder = if use_stim { ws.pop() } else { None };
    Ok(AlsResult {
        shared: s,
        filters: ws,
        encoder,
        objective: obj,
        history,
        iterations,
        converged,
    })
}

/// Principal angles (radians, ascending) between the column spaces of `a` and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let sv: DVector<f64> = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = sv.iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    angles
}
