//! Per-sample signal estimators: plug-in MMSE from a fitted γ, the oracle
//! MMSE with the true covariance, and a direct proximal-gradient solver for
//! the ℓ2,1-regularized least-squares objective
//!
//! ```text
//! f(C) = ½ Σ_s ‖x(s) − Ψ(s)A c(s)‖² + ϱ√T Σ_i ‖C_{i,:}‖₂
//! ```
//!
//! With `T = 1` the direct solver is the complex LASSO.

use crate::covsolve::GammaVector;
use crate::error::{Error, Result};
use crate::linalg::{hpd_factor, largest_eigenvalue, CMatrix, CVector, C64};
use crate::model::{CovarianceModel, Dictionary, ProjectionSet, SketchSet};

/// G×T coefficient matrix; column `s` is `c(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix(pub CMatrix);

impl CoefficientMatrix {
    pub fn zeros(atoms: usize, samples: usize) -> Self {
        Self(CMatrix::zeros(atoms, samples))
    }

    /// ℓ2-norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.norm()).collect()
    }

    /// `Σ_i ‖C_{i,:}‖₂`.
    pub fn l21_norm(&self) -> f64 {
        self.row_norms().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    OracleMmse,
    PlugInMmse,
    DirectL21,
}

/// n×T signal estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateBatch {
    pub signals: CMatrix,
    pub method: EstimatorKind,
}

/// Proximal map of `threshold·‖·‖_{2,1}`: each row is scaled by
/// `max(0, 1 − threshold/‖row‖)`.
pub fn group_soft_threshold(coeffs: &CoefficientMatrix, threshold: f64) -> CoefficientMatrix {
    assert!(threshold >= 0.0, "threshold must be nonnegative");
    let mut out = coeffs.0.clone();
    shrink_rows(&mut out, threshold);
    CoefficientMatrix(out)
}

fn shrink_rows(mat: &mut CMatrix, threshold: f64) {
    for i in 0..mat.nrows() {
        let norm = mat.row(i).norm();
        let scale = if norm <= threshold { 0.0 } else { 1.0 - threshold / norm };
        mat.row_mut(i).scale_mut(scale);
    }
}

/// `ĥ(s) = A c(s)`.
pub fn coefficients_to_signals(coeffs: &CoefficientMatrix, dict: &Dictionary) -> Result<EstimateBatch> {
    if coeffs.0.nrows() != dict.size() {
        return Err(Error::Dimension(format!(
            "{} coefficient rows for {} atoms",
            coeffs.0.nrows(),
            dict.size()
        )));
    }
    Ok(EstimateBatch { signals: dict.atoms() * &coeffs.0, method: EstimatorKind::DirectL21 })
}

/// Plug-in MMSE: `ĥ(s) = AΓA†Ψ(s)†(Ψ(s)AΓA†Ψ(s)† + ϱI)⁻¹x(s)`, one sample at a time.
pub fn plug_in_mmse(
    gamma: &GammaVector,
    dict: &Dictionary,
    proj: &ProjectionSet,
    sketches: &SketchSet,
) -> Result<EstimateBatch> {
    let rho = sketches.regularization;
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("regularization must be positive, got {rho}")));
    }
    sketches.check_against(proj)?;
    if gamma.len() != dict.size() || dict.dim() != proj.signal_dim() {
        return Err(Error::Dimension("gamma, dictionary and projections disagree".into()));
    }
    let active: Vec<usize> = (0..gamma.len()).filter(|&i| gamma[i] > 0.0).collect();
    let n = dict.dim();
    let m = proj.sketch_dim();
    let atoms = dict.atoms().select_columns(active.iter());
    let weights: Vec<f64> = active.iter().map(|&i| gamma[i]).collect();
    let mut out = CMatrix::zeros(n, sketches.len());
    if active.is_empty() {
        return Ok(EstimateBatch { signals: out, method: EstimatorKind::PlugInMmse });
    }
    for (s, op) in proj.iter().enumerate() {
        let projected = op.apply_matrix(&atoms);
        let mut scaled = projected.clone();
        for (c, &w) in weights.iter().enumerate() {
            scaled.column_mut(c).scale_mut(w);
        }
        let mut sigma = &scaled * projected.adjoint();
        for i in 0..m {
            sigma[(i, i)] += rho;
        }
        crate::linalg::hermitize(&mut sigma);
        let y = hpd_factor(sigma)?.solve(&sketches.column(s));
        let coeffs = scaled.adjoint() * y;
        out.set_column(s, &(&atoms * coeffs));
    }
    Ok(EstimateBatch { signals: out, method: EstimatorKind::PlugInMmse })
}

/// Genie MMSE with the true covariance: `ĥ(s) = Σ_hΨ(s)†(Ψ(s)Σ_hΨ(s)† + σ²I)⁻¹x(s)`.
pub fn oracle_mmse(
    cov: &CovarianceModel,
    proj: &ProjectionSet,
    sketches: &SketchSet,
    noise_variance: f64,
) -> Result<EstimateBatch> {
    sketches.check_against(proj)?;
    if cov.dim() != proj.signal_dim() {
        return Err(Error::Dimension("covariance and projections disagree on n".into()));
    }
    let n = cov.dim();
    let m = proj.sketch_dim();
    let mut out = CMatrix::zeros(n, sketches.len());
    for (s, op) in proj.iter().enumerate() {
        let mut sigma_x = op.congruence(&cov.sigma_h);
        for i in 0..m {
            sigma_x[(i, i)] += noise_variance;
        }
        let chol = hpd_factor(sigma_x)
            .map_err(|_| Error::Numeric(format!("sketch covariance of sample {s} is singular")))?;
        let y = chol.solve(&sketches.column(s));
        out.set_column(s, &(&cov.sigma_h * op.adjoint_apply(&y, n)));
    }
    Ok(EstimateBatch { signals: out, method: EstimatorKind::OracleMmse })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectOptions {
    pub max_iters: usize,
    /// Relative objective change at which to stop.
    pub tolerance: f64,
    /// Largest proximal step, relative to the iterate norm, accepted at a stop.
    pub step_tolerance: f64,
    /// Nesterov momentum with function-value restart.
    pub accelerate: bool,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self { max_iters: 200_000, tolerance: 1e-10, step_tolerance: 1e-9, accelerate: true }
    }
}

#[derive(Debug, Clone)]
pub struct DirectSolution {
    pub coefficients: CoefficientMatrix,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every iteration, starting from `C = 0`.
    pub trace: Vec<f64>,
}

struct L21Problem {
    blocks: Vec<CMatrix>,
    sketches: Vec<CVector>,
    penalty: f64,
}

impl L21Problem {
    fn objective(&self, coeffs: &CMatrix) -> f64 {
        let fit: f64 = self
            .blocks
            .iter()
            .enumerate()
            .map(|(s, b)| (b * coeffs.column(s) - &self.sketches[s]).norm_squared())
            .sum();
        let rows: f64 = coeffs.row_iter().map(|r| r.norm()).sum();
        0.5 * fit + self.penalty * rows
    }

    fn gradient(&self, coeffs: &CMatrix, out: &mut CMatrix) {
        for (s, b) in self.blocks.iter().enumerate() {
            let resid = b * coeffs.column(s) - &self.sketches[s];
            out.set_column(s, &b.ad_mul(&resid));
        }
    }
}

/// `f(C)` for the given coefficients.
pub fn l21_objective(
    coeffs: &CoefficientMatrix,
    sketches: &SketchSet,
    proj: &ProjectionSet,
    dict: &Dictionary,
    rho: f64,
) -> Result<f64> {
    Ok(build_problem(sketches, proj, dict, rho)?.objective(&coeffs.0))
}

fn build_problem(sketches: &SketchSet, proj: &ProjectionSet, dict: &Dictionary, rho: f64) -> Result<L21Problem> {
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("regularization must be positive, got {rho}")));
    }
    sketches.check_against(proj)?;
    Ok(L21Problem {
        blocks: proj.project_dictionary(dict)?,
        sketches: (0..sketches.len()).map(|s| sketches.column(s)).collect(),
        penalty: rho * (sketches.len() as f64).sqrt(),
    })
}

/// Minimizes `f(C)` by monotone accelerated proximal gradient with step `1/L`,
/// `L = max_s ‖Ψ(s)A‖₂²`.
pub fn l21_ls_direct(
    sketches: &SketchSet,
    proj: &ProjectionSet,
    dict: &Dictionary,
    rho: f64,
    opts: &DirectOptions,
) -> Result<DirectSolution> {
    if !(opts.max_iters > 0 && opts.tolerance > 0.0 && opts.step_tolerance > 0.0) {
        return Err(Error::Domain(format!("direct solver options out of range: {opts:?}")));
    }
    let problem = build_problem(sketches, proj, dict, rho)?;
    let g = dict.size();
    let t = sketches.len();
    let lipschitz = problem
        .blocks
        .iter()
        .map(|b| largest_eigenvalue(&(b * b.adjoint())))
        .fold(0.0, f64::max);
    let mut x = CMatrix::zeros(g, t);
    let mut f_x = problem.objective(&x);
    let mut trace = vec![f_x];
    if lipschitz <= 0.0 || f_x == 0.0 {
        return Ok(DirectSolution { coefficients: CoefficientMatrix(x), objective: f_x, iterations: 0, trace });
    }
    let step = 1.0 / lipschitz;
    let threshold = step * problem.penalty;

    let mut y = x.clone();
    let mut z = x.clone();
    let mut grad = CMatrix::zeros(g, t);
    let mut momentum = 1.0_f64;
    // y == x, so the next step is a plain proximal-gradient step
    let mut plain = true;

    for iter in 1..=opts.max_iters {
        problem.gradient(&y, &mut grad);
        z.copy_from(&y);
        z -= &grad * C64::new(step, 0.0);
        shrink_rows(&mut z, threshold);
        let f_z = problem.objective(&z);
        let prox_move = (&z - &y).norm();

        let accepted = f_z <= f_x;
        let x_prev = x.clone();
        let f_prev = f_x;
        if accepted {
            x.copy_from(&z);
            f_x = f_z;
        }
        trace.push(f_x);

        let scale = f_x.abs().max(f64::MIN_POSITIVE);
        if accepted
            && (f_prev - f_x) <= opts.tolerance * scale
            && prox_move <= opts.step_tolerance * z.norm().max(f64::MIN_POSITIVE)
        {
            return Ok(DirectSolution { coefficients: CoefficientMatrix(x), objective: f_x, iterations: iter, trace });
        }
        // A plain step with step 1/L cannot raise f except through rounding.
        if plain && !accepted {
            return Ok(DirectSolution { coefficients: CoefficientMatrix(x), objective: f_x, iterations: iter, trace });
        }

        plain = !(opts.accelerate && accepted);
        if opts.accelerate && accepted {
            let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next;
            y = &x + (&x - &x_prev) * C64::new(beta, 0.0);
            momentum = next;
        } else {
            // rejected step: restart momentum from the best point
            y.copy_from(&x);
            momentum = 1.0;
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iters, trace })
}

/// Per-sample stationarity residuals of `f` at `C`.
///
/// For each `s`, the first value is the norm over nonzero rows `i` of
/// `a_s(i)†(Ψ(s)Ac(s) − x(s)) + ϱ√T c_i(s)/‖C_{i,:}‖`; the second is the
/// largest excess of `‖[a_s(i)†(Ψ(s)Ac(s) − x(s))]_s‖` over `ϱ√T` among zero rows.
pub fn stationarity_residuals(
    coeffs: &CoefficientMatrix,
    sketches: &SketchSet,
    proj: &ProjectionSet,
    dict: &Dictionary,
    rho: f64,
) -> Result<Vec<(f64, f64)>> {
    let problem = build_problem(sketches, proj, dict, rho)?;
    let mut grad = CMatrix::zeros(coeffs.0.nrows(), coeffs.0.ncols());
    problem.gradient(&coeffs.0, &mut grad);
    let norms = coeffs.row_norms();
    let zero_row_excess = norms
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == 0.0)
        .map(|(i, _)| grad.row(i).norm() - problem.penalty)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((0..coeffs.0.ncols())
        .map(|s| {
            let active: f64 = norms
                .iter()
                .enumerate()
                .filter(|(_, &r)| r > 0.0)
                .map(|(i, &r)| (grad[(i, s)] + coeffs.0[(i, s)] * (problem.penalty / r)).norm_sqr())
                .sum();
            (active.sqrt(), zero_row_excess)
        })
        .collect())
}
