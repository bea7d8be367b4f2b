//! Covariance-fitting phase.
//!
//! Both objectives are functions of a nonnegative strength vector γ through
//! the per-sample matrices
//!
//! ```text
//! Σ_s(γ) = Ψ(s) A diag(γ) A† Ψ(s)† + λ I_m
//! ```
//!
//! with `λ = ϱ` for the convex surrogate
//!
//! ```text
//! g(γ) = (1/T) Σ_s x(s)† Σ_s(γ)⁻¹ x(s) + Σ_i γ_i
//! ```
//!
//! and `λ = σ²` for the Gaussian negative log-likelihood
//!
//! ```text
//! l(γ) = (1/T) Σ_s [ x(s)† Σ_s(γ)⁻¹ x(s) + log det Σ_s(γ) ].
//! ```
//!
//! Both are minimized by cyclic exact coordinate descent. Moving coordinate
//! `k` by `d` is a rank-one change `Σ_s ← Σ_s + d·a_s(k)a_s(k)†`, so the 1-D
//! restriction depends on the data only through `q_s = a_s(k)†Σ_s⁻¹a_s(k)`
//! and `r_s = a_s(k)†Σ_s⁻¹x(s)`, and the cached inverses are refreshed with
//! Sherman–Morrison after every accepted step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{hpd_factor, hpd_inverse, log_det, CMatrix, CVector, C64};
use crate::model::{Dictionary, ProjectionSet, SketchSet};

/// Largest bracket magnitude tried before a coordinate search gives up.
const BRACKET_LIMIT: f64 = (1u64 << 60) as f64;

/// Nonnegative atom strengths γ.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaVector(Vec<f64>);

impl GammaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(format!("gamma[{i}] = {} is not a finite nonnegative value", values[i])));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for GammaVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Which objective a solver state caches inverses for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `g(γ)`, diagonal load ϱ.
    Surrogate,
    /// `l(γ)`, diagonal load σ².
    Likelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateOrder {
    Cyclic,
    /// Fresh permutation each sweep, drawn from the given seed.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub max_sweeps: usize,
    /// Stop once a full sweep moves no coordinate by more than this.
    pub coordinate_tolerance: f64,
    /// Also stop once a sweep lowers the objective by at most this fraction
    /// of `max(|cost|, 1)`. Zero disables the rule.
    pub objective_tolerance: f64,
    /// Accept a root once `|derivative| ≤` this.
    pub bisection_tolerance: f64,
    pub bisection_max_iters: usize,
    /// Accepted steps between full refactorizations of the cached inverses.
    pub inverse_refresh_period: usize,
    pub order: CoordinateOrder,
    /// Likelihood steps keep every `γ_k` at or below this multiple of the
    /// per-antenna sample power `n·(1/mT)Σ_s‖x(s)‖²/ζ²`. Infinite disables the cap.
    pub gamma_cap_factor: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            coordinate_tolerance: 1e-8,
            objective_tolerance: 0.0,
            bisection_tolerance: 1e-12,
            bisection_max_iters: 200,
            inverse_refresh_period: 50,
            order: CoordinateOrder::Cyclic,
            gamma_cap_factor: 1e3,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<()> {
        let ok = self.max_sweeps > 0
            && self.coordinate_tolerance > 0.0
            && self.objective_tolerance >= 0.0
            && self.bisection_tolerance > 0.0
            && self.bisection_max_iters > 0
            && self.inverse_refresh_period > 0
            && self.gamma_cap_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("solver options out of range: {self:?}")))
        }
    }
}

/// The per-sample quantities of one coordinate.
#[derive(Debug, Clone, Default)]
pub struct CoordinateStats {
    /// `a_s(k)†Σ_s⁻¹a_s(k)`.
    pub q: Vec<f64>,
    /// `|a_s(k)†Σ_s⁻¹x(s)|²`.
    pub r2: Vec<f64>,
    /// `r_s`, kept for the rank-one update.
    r: Vec<C64>,
    /// `Σ_s⁻¹a_s(k)`, kept for the rank-one update.
    u: Vec<CVector>,
}

impl CoordinateStats {
    /// Builds stats directly from `(q_s, |r_s|²)` pairs, without the update vectors.
    pub fn from_parts(q: Vec<f64>, r2: Vec<f64>) -> Self {
        Self { q, r2, r: Vec::new(), u: Vec::new() }
    }

    /// `-1 / max_s q_s`; every 1-D function is defined on `(d_min, ∞)`.
    pub fn lower_pole(&self) -> f64 {
        let qmax = self.q.iter().cloned().fold(0.0, f64::max);
        if qmax > 0.0 {
            -1.0 / qmax
        } else {
            f64::NEG_INFINITY
        }
    }

    fn admissible(&self, d: f64) -> bool {
        self.q.iter().all(|&q| 1.0 + d * q > 0.0)
    }

    /// Derivative of `d ↦ g(γ + d e_k)`.
    pub fn surrogate_slope(&self, d: f64) -> f64 {
        let t = self.q.len() as f64;
        let data: f64 = self
            .q
            .iter()
            .zip(&self.r2)
            .map(|(&q, &r2)| {
                let den = 1.0 + d * q;
                r2 / (den * den)
            })
            .sum();
        1.0 - data / t
    }

    /// `g(γ + d e_k) − g(γ)`.
    pub fn surrogate_change(&self, d: f64) -> f64 {
        let t = self.q.len() as f64;
        let data: f64 = self
            .q
            .iter()
            .zip(&self.r2)
            .map(|(&q, &r2)| d * r2 / (1.0 + d * q))
            .sum();
        d - data / t
    }

    /// Derivative of `d ↦ l(γ + d e_k)`.
    pub fn likelihood_slope(&self, d: f64) -> f64 {
        let t = self.q.len() as f64;
        self.q
            .iter()
            .zip(&self.r2)
            .map(|(&q, &r2)| {
                let den = 1.0 + d * q;
                q / den - r2 / (den * den)
            })
            .sum::<f64>()
            / t
    }

    /// `l(γ + d e_k) − l(γ)`.
    pub fn likelihood_change(&self, d: f64) -> f64 {
        let t = self.q.len() as f64;
        self.q
            .iter()
            .zip(&self.r2)
            .map(|(&q, &r2)| (d * q).ln_1p() - d * r2 / (1.0 + d * q))
            .sum::<f64>()
            / t
    }
}

/// Cached state of a coordinate-descent run.
#[derive(Debug, Clone)]
pub struct SolverState {
    objective: Objective,
    loading: f64,
    gamma: Vec<f64>,
    /// `Σ_s(γ)`, tracked through the same rank-one steps as its inverse.
    sigma: Vec<CMatrix>,
    sigma_inv: Vec<CMatrix>,
    /// `Σ_s(γ)⁻¹x(s)`.
    whitened: Vec<CVector>,
    projected_atoms: Vec<CMatrix>,
    sketches: Vec<CVector>,
    cost: f64,
    gamma_cap: f64,
}

impl SolverState {
    /// Factorizes `Σ_s(γ)` for every sample. `loading` is ϱ for the surrogate
    /// and σ² for the likelihood.
    pub fn new(
        objective: Objective,
        gamma: &GammaVector,
        sketches: &SketchSet,
        proj: &ProjectionSet,
        dict: &Dictionary,
        loading: f64,
    ) -> Result<Self> {
        if !(loading > 0.0) || !loading.is_finite() {
            return Err(Error::Domain(format!("diagonal load must be positive, got {loading}")));
        }
        sketches.check_against(proj)?;
        if gamma.len() != dict.size() {
            return Err(Error::Dimension(format!(
                "gamma has {} entries for {} atoms",
                gamma.len(),
                dict.size()
            )));
        }
        let projected_atoms = proj.project_dictionary(dict)?;
        let m = proj.sketch_dim();
        let mut state = Self {
            objective,
            loading,
            gamma: gamma.as_slice().to_vec(),
            sigma: vec![CMatrix::zeros(m, m); proj.len()],
            sigma_inv: vec![CMatrix::zeros(m, m); proj.len()],
            whitened: vec![CVector::zeros(m); proj.len()],
            projected_atoms,
            sketches: (0..sketches.len()).map(|s| sketches.column(s)).collect(),
            cost: 0.0,
            gamma_cap: f64::INFINITY,
        };
        state.refresh()?;
        Ok(state)
    }

    pub fn gamma(&self) -> GammaVector {
        GammaVector(self.gamma.clone())
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// Upper bound on each `γ_k` honoured by likelihood steps.
    pub fn gamma_cap(&self) -> f64 {
        self.gamma_cap
    }

    pub fn set_gamma_cap(&mut self, cap: f64) -> Result<()> {
        if !(cap >= 0.0) {
            return Err(Error::Domain(format!("gamma cap must be nonnegative, got {cap}")));
        }
        self.gamma_cap = cap;
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn samples(&self) -> usize {
        self.sketches.len()
    }

    /// Cached `Σ_s(γ)⁻¹`.
    pub fn sigma_inv(&self, s: usize) -> &CMatrix {
        &self.sigma_inv[s]
    }

    /// Columns of `Ψ(s)A`.
    pub fn projected_atoms(&self, s: usize) -> &CMatrix {
        &self.projected_atoms[s]
    }

    /// Dense `Σ_s(γ)` built from the active atoms.
    pub fn sigma(&self, s: usize) -> CMatrix {
        build_sigma(&self.projected_atoms[s], &self.gamma, self.loading)
    }

    /// Rebuilds every `Σ_s(γ)` from the active atoms, refactorizes it and
    /// recomputes the objective exactly.
    pub fn refresh(&mut self) -> Result<()> {
        for s in 0..self.sigma.len() {
            self.sigma[s] = self.sigma(s);
        }
        self.refactor()
    }

    /// Refactorizes the tracked `Σ_s(γ)` and recomputes the objective.
    fn refactor(&mut self) -> Result<()> {
        let mut data = 0.0;
        let mut logdet = 0.0;
        for s in 0..self.sigma_inv.len() {
            let chol = hpd_factor(self.sigma[s].clone())?;
            if self.objective == Objective::Likelihood {
                logdet += log_det(&chol);
            }
            let mut inv = chol.inverse();
            crate::linalg::hermitize(&mut inv);
            let y = &inv * &self.sketches[s];
            data += self.sketches[s].dotc(&y).re;
            self.sigma_inv[s] = inv;
            self.whitened[s] = y;
        }
        let t = self.sigma_inv.len() as f64;
        self.cost = match self.objective {
            Objective::Surrogate => data / t + self.gamma.iter().sum::<f64>(),
            Objective::Likelihood => (data + logdet) / t,
        };
        Ok(())
    }

    /// `max_s ‖Σ_s(γ)·cache_s − I‖_∞`.
    pub fn max_inverse_drift(&self) -> f64 {
        (0..self.sigma_inv.len())
            .map(|s| {
                let prod = self.sigma(s) * &self.sigma_inv[s];
                let m = prod.nrows();
                crate::linalg::max_abs_diff(&prod, &CMatrix::identity(m, m))
            })
            .fold(0.0, f64::max)
    }

    /// Fills `stats` with the per-sample quantities of coordinate `k`.
    pub fn coordinate_stats(&self, k: usize, stats: &mut CoordinateStats) {
        let t = self.sigma_inv.len();
        let m = self.sigma_inv.first().map(|s| s.nrows()).unwrap_or(0);
        stats.q.resize(t, 0.0);
        stats.r2.resize(t, 0.0);
        stats.r.resize(t, C64::new(0.0, 0.0));
        stats.u.resize_with(t, || CVector::zeros(m));
        for s in 0..t {
            let atom = self.projected_atoms[s].column(k);
            let u = &mut stats.u[s];
            hermitian_matvec(m, self.sigma_inv[s].as_slice(), atom.as_slice(), u.as_mut_slice());
            stats.q[s] = atom.dotc(u).re;
            stats.r[s] = u.dotc(&self.sketches[s]);
            stats.r2[s] = stats.r[s].norm_sqr();
        }
    }

    /// `(1/T) Σ_s |r_s|²` for coordinate `k`, from the cached `Σ_s⁻¹x(s)`.
    pub fn mean_r2(&self, k: usize) -> f64 {
        let total: f64 = self
            .projected_atoms
            .iter()
            .zip(&self.whitened)
            .map(|(atoms, y)| atoms.column(k).dotc(y).norm_sqr())
            .sum();
        total / self.whitened.len() as f64
    }

    /// Moves coordinate `k` by `d`, updating every cached inverse and the cost.
    /// `stats` must come from `coordinate_stats(k, ..)` at the current γ.
    pub fn apply_step(&mut self, k: usize, d: f64, stats: &CoordinateStats) {
        if d == 0.0 {
            return;
        }
        for s in 0..self.sigma_inv.len() {
            let m = self.sigma[s].nrows();
            let atom = self.projected_atoms[s].column(k);
            rank_one_downdate(m, self.sigma[s].as_mut_slice(), atom.as_slice(), -d);
            let scale = d / (1.0 + d * stats.q[s]);
            let u = &stats.u[s];
            rank_one_downdate(m, self.sigma_inv[s].as_mut_slice(), u.as_slice(), scale);
            self.whitened[s].axpy(-stats.r[s] * scale, u, C64::new(1.0, 0.0));
        }
        self.cost += match self.objective {
            Objective::Surrogate => stats.surrogate_change(d),
            Objective::Likelihood => stats.likelihood_change(d),
        };
        self.gamma[k] = (self.gamma[k] + d).max(0.0);
    }
}

/// `out = S a` for a column-major m×m matrix `S`.
fn hermitian_matvec(m: usize, mat: &[C64], a: &[C64], out: &mut [C64]) {
    out.fill(C64::new(0.0, 0.0));
    for (col, &aj) in mat.chunks_exact(m).zip(a) {
        for (o, &v) in out.iter_mut().zip(col) {
            *o += v * aj;
        }
    }
}

/// `S ← S − scale·u u†` for a column-major m×m matrix `S`.
fn rank_one_downdate(m: usize, mat: &mut [C64], u: &[C64], scale: f64) {
    for (col, &uj) in mat.chunks_exact_mut(m).zip(u) {
        let f = uj.conj() * scale;
        for (v, &ui) in col.iter_mut().zip(u) {
            *v -= ui * f;
        }
    }
}

fn build_sigma(atoms: &CMatrix, gamma: &[f64], loading: f64) -> CMatrix {
    let m = atoms.nrows();
    let active: Vec<usize> = (0..gamma.len()).filter(|&i| gamma[i] > 0.0).collect();
    let mut weighted = CMatrix::zeros(m, active.len());
    for (c, &i) in active.iter().enumerate() {
        let w = gamma[i].sqrt();
        weighted.set_column(c, &(atoms.column(i) * C64::new(w, 0.0)));
    }
    let mut sigma = &weighted * weighted.adjoint();
    for i in 0..m {
        sigma[(i, i)] += loading;
    }
    sigma
}

fn check_inputs(gamma: &GammaVector, sketches: &SketchSet, proj: &ProjectionSet, dict: &Dictionary) -> Result<()> {
    sketches.check_against(proj)?;
    if gamma.len() != dict.size() {
        return Err(Error::Dimension(format!("gamma has {} entries for {} atoms", gamma.len(), dict.size())));
    }
    if dict.dim() != proj.signal_dim() {
        return Err(Error::Dimension("dictionary and projections disagree on n".into()));
    }
    Ok(())
}

/// Returns `(Σ_s x†Σ_s⁻¹x, Σ_s log det Σ_s)`, both via Cholesky solves.
fn data_terms(
    gamma: &GammaVector,
    sketches: &SketchSet,
    proj: &ProjectionSet,
    dict: &Dictionary,
    loading: f64,
) -> Result<(f64, f64)> {
    check_inputs(gamma, sketches, proj, dict)?;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for (s, op) in proj.iter().enumerate() {
        let atoms = op.apply_matrix(dict.atoms());
        let chol = hpd_factor(build_sigma(&atoms, gamma.as_slice(), loading))?;
        let x = sketches.column(s);
        quad += x.dotc(&chol.solve(&x)).re;
        logdet += log_det(&chol);
    }
    Ok((quad, logdet))
}

/// `g(γ)` with load ϱ taken from the sketch set.
pub fn eval_g(gamma: &GammaVector, sketches: &SketchSet, proj: &ProjectionSet, dict: &Dictionary) -> Result<f64> {
    let rho = sketches.regularization;
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("regularization must be positive, got {rho}")));
    }
    let (quad, _) = data_terms(gamma, sketches, proj, dict, rho)?;
    Ok(quad / sketches.len() as f64 + gamma.total())
}

/// `l(γ)` with noise variance σ².
pub fn eval_l(
    gamma: &GammaVector,
    sketches: &SketchSet,
    proj: &ProjectionSet,
    dict: &Dictionary,
    noise_variance: f64,
) -> Result<f64> {
    if !(noise_variance > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {noise_variance}")));
    }
    let (quad, logdet) = data_terms(gamma, sketches, proj, dict, noise_variance)?;
    Ok((quad + logdet) / sketches.len() as f64)
}

fn check_admissible(k: usize, d: f64, stats: &CoordinateStats) -> Result<()> {
    if stats.admissible(d) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "step {d} on coordinate {k} is below the pole at {}",
            stats.lower_pole()
        )))
    }
}

/// `g'_k(d)` at the state's current γ.
pub fn gk_derivative(d: f64, k: usize, state: &SolverState) -> Result<f64> {
    let mut stats = CoordinateStats::default();
    state.coordinate_stats(k, &mut stats);
    check_admissible(k, d, &stats)?;
    Ok(stats.surrogate_slope(d))
}

/// `l'_k(d)` at the state's current γ.
pub fn lk_derivative(d: f64, k: usize, state: &SolverState) -> Result<f64> {
    let mut stats = CoordinateStats::default();
    state.coordinate_stats(k, &mut stats);
    check_admissible(k, d, &stats)?;
    Ok(stats.likelihood_slope(d))
}

/// Width below which a bracket around a root cannot shrink further.
fn resolution(gamma_k: f64, lo: f64, hi: f64) -> f64 {
    4.0 * f64::EPSILON * (gamma_k.abs() + lo.abs() + hi.abs()) + f64::MIN_POSITIVE
}

/// Bisection for an increasing sign change of `slope` inside `[lo, hi]`,
/// with `slope(lo) < 0 < slope(hi)`.
fn bisect(
    k: usize,
    gamma_k: f64,
    mut lo: f64,
    mut hi: f64,
    slope: impl Fn(f64) -> f64,
    opts: &SolveOptions,
) -> Result<f64> {
    for _ in 0..opts.bisection_max_iters {
        let mid = 0.5 * (lo + hi);
        let value = slope(mid);
        if value.abs() <= opts.bisection_tolerance {
            return Ok(mid);
        }
        if value < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= resolution(gamma_k, lo, hi) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Coordinate {
        coordinate: k,
        reason: format!("bisection did not converge in {} iterations (bracket [{lo}, {hi}])", opts.bisection_max_iters),
    })
}

/// Exact minimizer of the convex 1-D restriction of `g` given coordinate stats.
pub fn surrogate_step(k: usize, gamma_k: f64, stats: &CoordinateStats, opts: &SolveOptions) -> Result<f64> {
    // -γ_k always lies above the pole, so the feasible interval is [-γ_k, ∞).
    let lo = stats.lower_pole().max(-gamma_k);
    if stats.surrogate_slope(lo) >= 0.0 {
        return Ok(lo);
    }
    let mut hi = (-stats.lower_pole()).max(1.0);
    if !hi.is_finite() {
        hi = 1.0;
    }
    while stats.surrogate_slope(hi) <= 0.0 {
        hi *= 2.0;
        if hi > BRACKET_LIMIT {
            return Err(Error::Coordinate { coordinate: k, reason: "upper bracket diverged".into() });
        }
    }
    let d = bisect(k, gamma_k, lo, hi, |d| stats.surrogate_slope(d), opts)?;
    Ok(d.max(-gamma_k))
}

/// Outcome of one likelihood coordinate search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodStep {
    pub step: f64,
    /// Number of sign changes of `l'_k` seen on the downward scan.
    pub sign_changes: usize,
    /// The largest root would have increased `l`; a better candidate was used.
    pub fallback: bool,
    /// `l'_k` was still negative at the cap, so the step stopped there.
    pub capped: bool,
}

/// Largest stationary point of the 1-D restriction of `l` on
/// `[-γ_k, cap − γ_k]`.
pub fn likelihood_step(
    k: usize,
    gamma_k: f64,
    cap: f64,
    stats: &CoordinateStats,
    opts: &SolveOptions,
) -> Result<LikelihoodStep> {
    let lo = -gamma_k;
    let ceiling = (cap - gamma_k).max(0.0);
    let slope = |d: f64| stats.likelihood_slope(d);
    // Above d_safe every per-sample term q/(1+dq) − r²/(1+dq)² is positive.
    let d_safe = stats
        .q
        .iter()
        .zip(&stats.r2)
        .filter(|(&q, _)| q > 0.0)
        .map(|(&q, &r2)| (r2 / q - 1.0) / q)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(d_safe > lo) {
        // l' > 0 on the whole feasible interval: shrink to zero.
        return Ok(LikelihoodStep { step: lo, sign_changes: 0, fallback: false, capped: false });
    }
    let mut hi = if d_safe < ceiling {
        if d_safe > BRACKET_LIMIT {
            return Err(Error::Coordinate { coordinate: k, reason: format!("upper bracket {d_safe} out of range") });
        }
        (d_safe + (d_safe - lo).max(1e-12)).min(ceiling)
    } else {
        ceiling
    };

    let mut largest: Option<(f64, f64)> = None;
    let mut sign_changes = 0;
    let mut capped = false;
    if slope(hi) <= 0.0 {
        capped = true;
    } else {
        // Geometric scan down towards the clamp, dense near -γ_k.
        const RATIO: f64 = 0.8;
        let span = hi - lo;
        let mut off = span;
        let mut offsets = Vec::new();
        while off > 1e-13 * span {
            off *= RATIO;
            offsets.push(off);
        }
        offsets.push(0.0);
        let mut prev_positive = true;
        for &off in &offsets {
            let d = lo + off;
            let positive = slope(d) > 0.0;
            if positive != prev_positive {
                sign_changes += 1;
                if !positive && largest.is_none() {
                    largest = Some((d, hi));
                }
            }
            prev_positive = positive;
            hi = d;
        }
    }
    let step = if capped {
        ceiling
    } else if let Some((b_lo, b_hi)) = largest {
        let root = if slope(b_lo) == 0.0 { b_lo } else { bisect(k, gamma_k, b_lo, b_hi, slope, opts)? };
        root.max(lo)
    } else {
        return Ok(LikelihoodStep { step: lo, sign_changes, fallback: false, capped });
    };
    if stats.likelihood_change(step) <= 0.0 {
        return Ok(LikelihoodStep { step, sign_changes, fallback: false, capped });
    }
    // Nonconvex case: never accept a step that raises the cost.
    let step = if stats.likelihood_change(lo) < 0.0 { lo } else { 0.0 };
    Ok(LikelihoodStep { step, sign_changes, fallback: true, capped })
}

/// Optimal step on coordinate `k` of `g`.
pub fn coordinate_min_g(k: usize, state: &SolverState, opts: &SolveOptions) -> Result<f64> {
    let mut stats = CoordinateStats::default();
    state.coordinate_stats(k, &mut stats);
    surrogate_step(k, state.gamma[k], &stats, opts)
}

/// Step on coordinate `k` of `l` (largest stationary point rule).
pub fn coordinate_min_l(k: usize, state: &SolverState, opts: &SolveOptions) -> Result<f64> {
    let mut stats = CoordinateStats::default();
    state.coordinate_stats(k, &mut stats);
    Ok(likelihood_step(k, state.gamma[k], state.gamma_cap, &stats, opts)?.step)
}

/// Result of a coordinate-descent run.
#[derive(Debug, Clone)]
pub struct CovarianceFit {
    pub gamma: GammaVector,
    /// Exact objective at `gamma`.
    pub cost: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub cost_trace: Vec<f64>,
    /// Likelihood coordinates where more than one root was seen.
    pub multi_root_steps: usize,
    /// Likelihood steps where the largest root was rejected.
    pub fallback_steps: usize,
    /// Likelihood steps that stopped at the γ cap.
    pub capped_steps: usize,
}

fn run_descent(mut state: SolverState, opts: &SolveOptions) -> Result<CovarianceFit> {
    opts.validate()?;
    let g = state.gamma.len();
    let mut order: Vec<usize> = (0..g).collect();
    let mut shuffler = match opts.order {
        CoordinateOrder::Cyclic => None,
        CoordinateOrder::Shuffled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut stats = CoordinateStats::default();
    let mut cost_trace = vec![state.cost];
    let mut accepted = 0usize;
    let mut multi_root_steps = 0;
    let mut fallback_steps = 0;
    let mut capped_steps = 0;
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        if let Some(rng) = shuffler.as_mut() {
            order.shuffle(rng);
        }
        let mut max_move = 0.0_f64;
        let sweep_start = state.cost;
        for &k in &order {
            let gamma_k = state.gamma[k];
            // An inactive atom of g stays at zero iff g'_k(0) = 1 − mean|r_s|² ≥ 0.
            if gamma_k == 0.0 && state.objective == Objective::Surrogate && state.mean_r2(k) <= 1.0 {
                continue;
            }
            state.coordinate_stats(k, &mut stats);
            let d = match state.objective {
                Objective::Surrogate => surrogate_step(k, gamma_k, &stats, opts)?,
                Objective::Likelihood => {
                    let step = likelihood_step(k, gamma_k, state.gamma_cap, &stats, opts)?;
                    multi_root_steps += usize::from(step.sign_changes > 1);
                    fallback_steps += usize::from(step.fallback);
                    capped_steps += usize::from(step.capped);
                    step.step
                }
            };
            if d == 0.0 {
                continue;
            }
            state.apply_step(k, d, &stats);
            max_move = max_move.max(d.abs());
            accepted += 1;
            if accepted % opts.inverse_refresh_period == 0 {
                state.refactor()?;
            }
            cost_trace.push(state.cost);
        }
        let stalled = opts.objective_tolerance > 0.0
            && sweep_start - state.cost <= opts.objective_tolerance * state.cost.abs().max(1.0);
        if max_move < opts.coordinate_tolerance || stalled {
            converged = true;
            break;
        }
    }
    state.refresh()?;
    Ok(CovarianceFit {
        gamma: state.gamma(),
        cost: state.cost,
        sweeps,
        converged,
        cost_trace,
        multi_root_steps,
        fallback_steps,
        capped_steps,
    })
}

/// Minimizes `g(γ)` from `γ = 0` with ϱ taken from the sketch set.
pub fn solve_g(sketches: &SketchSet, proj: &ProjectionSet, dict: &Dictionary, opts: &SolveOptions) -> Result<CovarianceFit> {
    let state = SolverState::new(
        Objective::Surrogate,
        &GammaVector::zeros(dict.size()),
        sketches,
        proj,
        dict,
        sketches.regularization,
    )?;
    run_descent(state, opts)
}

/// Descends `l(γ)` from `γ = 0` to a stationary point.
pub fn solve_ml(
    sketches: &SketchSet,
    proj: &ProjectionSet,
    dict: &Dictionary,
    noise_variance: f64,
    opts: &SolveOptions,
) -> Result<CovarianceFit> {
    let mut state = SolverState::new(
        Objective::Likelihood,
        &GammaVector::zeros(dict.size()),
        sketches,
        proj,
        dict,
        noise_variance,
    )?;
    let power = crate::model::column_energy(&sketches.sketches) / (sketches.sketch_dim() * sketches.len()) as f64;
    let zeta2 = dict.atom_norm().powi(2);
    state.set_gamma_cap(opts.gamma_cap_factor * power * dict.dim() as f64 / zeta2)?;
    run_descent(state, opts)
}

/// Explicit `Σ_s(γ)⁻¹` via Cholesky, for callers outside the solver.
pub fn sigma_inverse(atoms: &CMatrix, gamma: &GammaVector, loading: f64) -> Result<CMatrix> {
    hpd_inverse(build_sigma(atoms, gamma.as_slice(), loading))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Projection, ProjectionSet};
    use rand::Rng;

    /// n = m = G = T = 1, atom 1, sketch x.
    fn scalar_instance(x: f64, load: f64) -> (SketchSet, ProjectionSet, Dictionary) {
        let dict = Dictionary::new(vec![0.0], CMatrix::from_element(1, 1, C64::new(1.0, 0.0))).unwrap();
        let proj = ProjectionSet::identity(1, 1).unwrap();
        let sk = SketchSet::new(CMatrix::from_element(1, 1, C64::new(x, 0.0)), load, load).unwrap();
        (sk, proj, dict)
    }

    pub(crate) fn random_instance(
        n: usize,
        m: usize,
        g: usize,
        t: usize,
        load: f64,
        seed: u64,
    ) -> (SketchSet, ProjectionSet, Dictionary) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = Dictionary::grid(n, g).unwrap();
        let proj = crate::model::sample_selection_projections(n, m, t, &mut rng).unwrap();
        let x = CMatrix::from_fn(m, t, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        (SketchSet::new(x, load, load).unwrap(), proj, dict)
    }

    fn random_gamma(g: usize, rng: &mut ChaCha8Rng) -> GammaVector {
        GammaVector::new((0..g).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() }).collect()).unwrap()
    }

    /// Independent oracle: dense `Σ_s`, general LU inverse, eigenvalue log-det.
    fn dense_oracle(gamma: &GammaVector, sk: &SketchSet, proj: &ProjectionSet, dict: &Dictionary, load: f64) -> (f64, f64) {
        let gmat = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            gamma.len(),
            gamma.as_slice().iter().map(|&v| C64::new(v, 0.0)),
        ));
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for (s, op) in proj.iter().enumerate() {
            let psi = op.to_matrix(dict.dim());
            let m = psi.nrows();
            let sigma = &psi * dict.atoms() * &gmat * dict.atoms().adjoint() * psi.adjoint()
                + CMatrix::identity(m, m) * C64::new(load, 0.0);
            let inv = sigma.clone().try_inverse().unwrap();
            let x = sk.column(s);
            quad += (x.adjoint() * inv * &x)[(0, 0)].re;
            logdet += nalgebra::SymmetricEigen::new(sigma).eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
        }
        (quad, logdet)
    }

    #[test]
    fn eval_g_at_zero_is_scaled_energy() {
        let (sk, proj, dict) = random_instance(8, 4, 12, 5, 0.7, 1);
        let energy = crate::model::column_energy(&sk.sketches);
        let g = eval_g(&GammaVector::zeros(12), &sk, &proj, &dict).unwrap();
        assert!((g - energy / (5.0 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn eval_g_scalar_formula() {
        let (sk, proj, dict) = scalar_instance(2.0, 1.0);
        let g = eval_g(&GammaVector::new(vec![1.0]).unwrap(), &sk, &proj, &dict).unwrap();
        assert!((g - 3.0).abs() < 1e-14);
    }

    #[test]
    fn eval_g_and_l_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..5 {
            let (sk, proj, dict) = random_instance(6, 3, 9, 4, 0.3, seed);
            let gamma = random_gamma(9, &mut rng);
            let (quad, logdet) = dense_oracle(&gamma, &sk, &proj, &dict, 0.3);
            let g = eval_g(&gamma, &sk, &proj, &dict).unwrap();
            let l = eval_l(&gamma, &sk, &proj, &dict, 0.3).unwrap();
            assert!((g - (quad / 4.0 + gamma.total())).abs() < 1e-10 * g.abs().max(1.0));
            assert!((l - (quad + logdet) / 4.0).abs() < 1e-10 * l.abs().max(1.0));
        }
    }

    #[test]
    fn eval_l_examples() {
        let (sk, proj, dict) = random_instance(8, 4, 12, 5, 0.5, 3);
        let energy = crate::model::column_energy(&sk.sketches);
        let l = eval_l(&GammaVector::zeros(12), &sk, &proj, &dict, 0.5).unwrap();
        assert!((l - (energy / (5.0 * 0.5) + 4.0 * 0.5f64.ln())).abs() < 1e-12);

        let (sk, proj, dict) = scalar_instance(2.0, 1.0);
        let l = eval_l(&GammaVector::new(vec![1.0]).unwrap(), &sk, &proj, &dict, 1.0).unwrap();
        assert!((l - (2.0 + 2f64.ln())).abs() < 1e-14);
        assert!(eval_l(&GammaVector::zeros(1), &sk, &proj, &dict, 0.0).is_err());
    }

    #[test]
    fn g_derivative_examples() {
        // zero data: derivative is identically one
        let (mut sk, proj, dict) = random_instance(8, 4, 8, 3, 1.0, 4);
        sk.sketches.fill(C64::new(0.0, 0.0));
        let state = SolverState::new(Objective::Surrogate, &GammaVector::zeros(8), &sk, &proj, &dict, 1.0).unwrap();
        for d in [0.0, 0.5, 10.0] {
            assert_eq!(gk_derivative(d, 2, &state).unwrap(), 1.0);
        }

        // scalar: g'(d) = 1 − 4/(1 + d + γ)²
        let (sk, proj, dict) = scalar_instance(2.0, 1.0);
        for gamma in [0.0, 0.5, 2.0] {
            let state =
                SolverState::new(Objective::Surrogate, &GammaVector::new(vec![gamma]).unwrap(), &sk, &proj, &dict, 1.0).unwrap();
            for d in [-gamma, 0.0, 0.3, 5.0] {
                let expected = 1.0 - 4.0 / (1.0 + d + gamma).powi(2);
                assert!((gk_derivative(d, 0, &state).unwrap() - expected).abs() < 1e-13);
            }
            assert!((gk_derivative(1e9, 0, &state).unwrap() - 1.0).abs() < 1e-15);
            assert!(matches!(gk_derivative(-2.0 - gamma, 0, &state), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn coordinate_min_g_examples() {
        let (mut sk, proj, dict) = random_instance(8, 4, 8, 3, 1.0, 5);
        sk.sketches.fill(C64::new(0.0, 0.0));
        let gamma = GammaVector::new(vec![0.4; 8]).unwrap();
        let state = SolverState::new(Objective::Surrogate, &gamma, &sk, &proj, &dict, 1.0).unwrap();
        assert_eq!(coordinate_min_g(3, &state, &SolveOptions::default()).unwrap(), -0.4);

        let (sk, proj, dict) = scalar_instance(2.0, 1.0);
        let state = SolverState::new(Objective::Surrogate, &GammaVector::zeros(1), &sk, &proj, &dict, 1.0).unwrap();
        let d = coordinate_min_g(0, &state, &SolveOptions::default()).unwrap();
        assert!((d - 1.0).abs() < 1e-10, "step {d}");
    }

    #[test]
    fn coordinate_min_g_is_sampled_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (sk, proj, dict) = random_instance(8, 4, 16, 6, 0.05, 6);
        let gamma = random_gamma(16, &mut rng);
        let state = SolverState::new(Objective::Surrogate, &gamma, &sk, &proj, &dict, 0.05).unwrap();
        for k in [0, 5, 11] {
            let d = coordinate_min_g(k, &state, &SolveOptions::default()).unwrap();
            let shifted = |step: f64| {
                let mut v = gamma.as_slice().to_vec();
                v[k] += step;
                eval_g(&GammaVector::new(v).unwrap(), &sk, &proj, &dict).unwrap()
            };
            let best = shifted(d);
            for _ in 0..100 {
                let trial = -gamma[k] + rng.random::<f64>() * 3.0;
                assert!(best <= shifted(trial) + 1e-9, "k={k} d*={d} beaten by {trial}");
            }
        }
    }

    #[test]
    fn coordinate_min_l_examples() {
        let (mut sk, proj, dict) = random_instance(8, 4, 8, 3, 1.0, 7);
        sk.sketches.fill(C64::new(0.0, 0.0));
        let gamma = GammaVector::new(vec![0.4; 8]).unwrap();
        let state = SolverState::new(Objective::Likelihood, &gamma, &sk, &proj, &dict, 1.0).unwrap();
        assert_eq!(coordinate_min_l(1, &state, &SolveOptions::default()).unwrap(), -0.4);

        // q = 1, |r|² = 4: −4/(1+d)² + 1/(1+d) = 0 at d = 3
        let (sk, proj, dict) = scalar_instance(2.0, 1.0);
        let state = SolverState::new(Objective::Likelihood, &GammaVector::zeros(1), &sk, &proj, &dict, 1.0).unwrap();
        let d = coordinate_min_l(0, &state, &SolveOptions::default()).unwrap();
        assert!((d - 3.0).abs() < 1e-9, "step {d}");
    }

    #[test]
    fn likelihood_step_picks_largest_root() {
        // Two samples with different curvature give l' three roots.
        let stats = CoordinateStats::from_parts(vec![1.0, 100.0], vec![1.5, 400.0]);
        let opts = SolveOptions::default();
        let step = likelihood_step(0, 0.0, f64::INFINITY, &stats, &opts).unwrap();
        let mut roots = Vec::new();
        let mut prev = stats.likelihood_slope(0.0);
        let mut d = 0.0;
        while d < 10.0 {
            d += 1e-4;
            let cur = stats.likelihood_slope(d);
            if prev <= 0.0 && cur > 0.0 {
                roots.push(d);
            }
            prev = cur;
        }
        let largest = *roots.last().unwrap();
        if !step.fallback {
            assert!((step.step - largest).abs() < 1e-3, "{step:?} vs {roots:?}");
        }
        assert!(stats.likelihood_change(step.step) <= 0.0);
    }

    #[test]
    fn likelihood_steps_never_increase_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..4 {
            let (sk, proj, dict) = random_instance(8, 4, 16, 6, 0.05, 100 + seed);
            let gamma = random_gamma(16, &mut rng);
            let state = SolverState::new(Objective::Likelihood, &gamma, &sk, &proj, &dict, 0.05).unwrap();
            let base = eval_l(&gamma, &sk, &proj, &dict, 0.05).unwrap();
            for k in 0..16 {
                let d = coordinate_min_l(k, &state, &SolveOptions::default()).unwrap();
                let mut v = gamma.as_slice().to_vec();
                v[k] += d;
                let after = eval_l(&GammaVector::new(v).unwrap(), &sk, &proj, &dict, 0.05).unwrap();
                assert!(after <= base + 1e-12, "k={k}: {after} > {base}");
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_gamma() {
        let (mut sk, proj, dict) = random_instance(8, 4, 8, 3, 1.0, 9);
        sk.sketches.fill(C64::new(0.0, 0.0));
        let fit = solve_g(&sk, &proj, &dict, &SolveOptions::default()).unwrap();
        assert!(fit.gamma.as_slice().iter().all(|&v| v == 0.0));
        let fit = solve_ml(&sk, &proj, &dict, 1.0, &SolveOptions::default()).unwrap();
        assert!(fit.gamma.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solvers_descend_monotonically() {
        let (sk, proj, dict) = random_instance(8, 4, 16, 10, 0.05, 10);
        let start_g = eval_g(&GammaVector::zeros(16), &sk, &proj, &dict).unwrap();
        let fit = solve_g(&sk, &proj, &dict, &SolveOptions::default()).unwrap();
        assert!(fit.cost <= start_g);
        assert!(fit.cost_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let exact = eval_g(&fit.gamma, &sk, &proj, &dict).unwrap();
        assert!((exact - fit.cost).abs() < 1e-10 * exact.abs());

        let fit = solve_ml(&sk, &proj, &dict, 0.05, &SolveOptions::default()).unwrap();
        assert!(fit.cost_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let exact = eval_l(&fit.gamma, &sk, &proj, &dict, 0.05).unwrap();
        assert!((exact - fit.cost).abs() < 1e-10 * exact.abs().max(1.0));
    }

    #[test]
    fn cached_inverses_stay_accurate() {
        let (sk, proj, dict) = random_instance(8, 4, 16, 5, 0.01, 11);
        let mut state = SolverState::new(Objective::Surrogate, &GammaVector::zeros(16), &sk, &proj, &dict, 0.01).unwrap();
        let opts = SolveOptions::default();
        let mut stats = CoordinateStats::default();
        for sweep in 0..3 {
            for k in 0..16 {
                state.coordinate_stats(k, &mut stats);
                let d = surrogate_step(k, state.gamma()[k], &stats, &opts).unwrap();
                state.apply_step(k, d, &stats);
            }
            assert!(state.max_inverse_drift() < 1e-8, "sweep {sweep}");
        }
    }

    #[test]
    fn shuffled_order_reaches_same_optimum() {
        let (sk, proj, dict) = random_instance(8, 4, 8, 10, 0.1, 12);
        let tight = SolveOptions { coordinate_tolerance: 1e-12, max_sweeps: 5000, ..SolveOptions::default() };
        let a = solve_g(&sk, &proj, &dict, &tight).unwrap();
        let b = solve_g(&sk, &proj, &dict, &SolveOptions { order: CoordinateOrder::Shuffled { seed: 3 }, ..tight }).unwrap();
        assert!((a.cost - b.cost).abs() < 1e-9);
    }

    #[test]
    fn gamma_vector_validates() {
        assert!(GammaVector::new(vec![0.0, -1e-3]).is_err());
        assert!(GammaVector::new(vec![f64::NAN]).is_err());
        assert_eq!(GammaVector::new(vec![1.0, 2.0]).unwrap().total(), 3.0);
    }

    #[test]
    fn dense_projection_state_matches_eval() {
        // A non-selection Ψ with orthonormal rows.
        let n = 4;
        let dict = Dictionary::grid(n, 6).unwrap();
        let q = Dictionary::grid(n, n).unwrap().atoms() / C64::new(2.0, 0.0);
        let psi = q.rows(0, 2).clone_owned();
        let proj = ProjectionSet::new(n, vec![Projection::Dense(psi.clone()), Projection::Dense(psi)]).unwrap();
        let sk = SketchSet::new(CMatrix::from_fn(2, 2, |i, j| C64::new(i as f64 + 0.5, j as f64 - 0.3)), 0.2, 0.2).unwrap();
        let gamma = GammaVector::new(vec![0.1, 0.0, 0.4, 0.2, 0.0, 0.3]).unwrap();
        let state = SolverState::new(Objective::Surrogate, &gamma, &sk, &proj, &dict, 0.2).unwrap();
        let g = eval_g(&gamma, &sk, &proj, &dict).unwrap();
        assert!((state.cost() - g).abs() < 1e-12);
    }
}
