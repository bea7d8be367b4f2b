//! Cross-checks between the direct ℓ2,1 solver and the covariance-fitting
//! route on shared instances.
//!
//! The two optima are tied by `γ̂_i = ‖Ĉ_{i,:}‖₂/√T`, by `Aĉ(s)` being the
//! plug-in MMSE estimate built from `γ̂`, and by `f(Ĉ) = (ϱT/2)·g(γ̂)`.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covsolve::{eval_g, solve_g, CovarianceFit, GammaVector, SolveOptions};
use crate::error::{Error, Result};
use crate::estimate::{
    coefficients_to_signals, l21_ls_direct, plug_in_mmse, CoefficientMatrix, DirectOptions, DirectSolution,
};
use crate::linalg::{hpd_inverse, CMatrix, CVector, C64};
use crate::model::{
    complex_normal_vector, diffuse_covariance, noise_variance_for_snr, sample_selection_projections, sample_signals,
    sketch, Dictionary, ProjectionSet, SignalBatch, SketchSet,
};

/// Angular support used for mismatched (diffuse) instances.
pub const DIFFUSE_SUPPORT: (f64, f64) = (-0.1, 0.1);

/// Atoms carrying energy in a matched instance.
const MATCHED_ATOMS: usize = 3;

/// Recipe for one verification instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub n: usize,
    pub m: usize,
    pub grid_size: usize,
    pub samples: usize,
    pub snr_db: f64,
    /// Signals drawn from a few grid atoms rather than a diffuse spectrum.
    pub matched: bool,
    pub seed: u64,
}

impl InstanceSpec {
    pub fn new(n: usize, m: usize, grid_size: usize, samples: usize, snr_db: f64, seed: u64) -> Self {
        Self { n, m, grid_size, samples, snr_db, matched: false, seed }
    }

    pub fn matched(self) -> Self {
        Self { matched: true, ..self }
    }

    pub fn build(&self) -> Result<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dict = Dictionary::grid(self.n, self.grid_size)?;
        let signals = if self.matched {
            matched_signals(&dict, self.samples, &mut rng)?
        } else {
            sample_signals(&diffuse_covariance(self.n, DIFFUSE_SUPPORT)?, self.samples, &mut rng)?
        };
        let proj = sample_selection_projections(self.n, self.m, self.samples, &mut rng)?;
        let noise_variance = noise_variance_for_snr(self.snr_db);
        let sketches = sketch(&signals, &proj, noise_variance, &mut rng)?;
        Ok(Instance { spec: *self, sketches, proj, dict })
    }
}

impl fmt::Display for InstanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} m={} G={} T={} snr_db={} dictionary={} seed={}",
            self.n,
            self.m,
            self.grid_size,
            self.samples,
            self.snr_db,
            if self.matched { "matched" } else { "mismatched" },
            self.seed
        )
    }
}

fn matched_signals(dict: &Dictionary, samples: usize, rng: &mut ChaCha8Rng) -> Result<SignalBatch> {
    let support = rand::seq::index::sample(rng, dict.size(), MATCHED_ATOMS.min(dict.size())).into_vec();
    let strengths: Vec<f64> = support.iter().map(|_| rng.random_range(0.5..1.5)).collect();
    let mut out = CMatrix::zeros(dict.dim(), samples);
    for s in 0..samples {
        let w = complex_normal_vector(support.len(), rng);
        for (j, &i) in support.iter().enumerate() {
            let coeff = w[j] * strengths[j].sqrt();
            let mut col = out.column_mut(s);
            col.axpy(coeff, &dict.atoms().column(i), C64::new(1.0, 0.0));
        }
    }
    SignalBatch::new(out)
}

/// A shared instance; ϱ is the sketch set's regularization.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: InstanceSpec,
    pub sketches: SketchSet,
    pub proj: ProjectionSet,
    pub dict: Dictionary,
}

impl Instance {
    pub fn rho(&self) -> f64 {
        self.sketches.regularization
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub solve: SolveOptions,
    pub direct: DirectOptions,
    /// Rows with both sides below `floor · max γ̂` are compared absolutely.
    pub floor: f64,
    /// Pass threshold for both theorem discrepancies.
    pub tolerance: f64,
    /// Negative controls must exceed this.
    pub control_threshold: f64,
    /// Suite instances with a smaller [`uniqueness_margin`] are redrawn.
    pub min_uniqueness: f64,
    pub max_redraws: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions {
                max_sweeps: 20_000,
                coordinate_tolerance: 1e-12,
                objective_tolerance: 1e-15,
                ..SolveOptions::default()
            },
            direct: DirectOptions { tolerance: 1e-15, step_tolerance: 1e-13, max_iters: 2_000_000, ..DirectOptions::default() },
            floor: 1e-6,
            min_uniqueness: 1e-6,
            max_redraws: 16,
            tolerance: 1e-3,
            control_threshold: 0.1,
        }
    }
}

/// Both solutions of one instance.
#[derive(Debug, Clone)]
pub struct SolvedInstance {
    pub fit: CovarianceFit,
    pub direct: DirectSolution,
}

/// Runs both solvers on the instance.
pub fn solve_both(instance: &Instance, opts: &VerifyOptions) -> Result<SolvedInstance> {
    let fit = solve_g(&instance.sketches, &instance.proj, &instance.dict, &opts.solve)
        .map_err(|e| Error::Numeric(format!("covariance-fitting side failed: {e}")))?;
    let direct = l21_ls_direct(&instance.sketches, &instance.proj, &instance.dict, instance.rho(), &opts.direct)
        .map_err(|e| Error::Numeric(format!("direct side failed: {e}")))?;
    Ok(SolvedInstance { fit, direct })
}

/// Largest relative mismatch between `γ_i` and `‖C_{i,:}‖₂/√T`.
///
/// Rows where both sides sit below `floor · max γ` are held to the absolute
/// bound `floor · max γ` instead; a violation is reported relative to it.
pub fn theorem1_discrepancy(gamma: &GammaVector, coeffs: &CoefficientMatrix, floor: f64) -> Result<f64> {
    let t = coeffs.0.ncols();
    if gamma.len() != coeffs.0.nrows() {
        return Err(Error::Dimension(format!("{} strengths for {} rows", gamma.len(), coeffs.0.nrows())));
    }
    let scale = (t as f64).sqrt();
    let rows: Vec<f64> = coeffs.row_norms().iter().map(|r| r / scale).collect();
    let top = gamma.max().max(rows.iter().cloned().fold(0.0, f64::max));
    let abs_floor = floor * top;
    let mut worst = 0.0_f64;
    for (&g, &r) in gamma.as_slice().iter().zip(&rows) {
        let diff = (g - r).abs();
        let big = g.max(r);
        let err = if big > abs_floor {
            diff / big
        } else if diff > abs_floor {
            diff / abs_floor
        } else {
            0.0
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Largest `‖Aĉ(s) − ĥ_plugin(s)‖ / ‖ĥ_plugin(s)‖` over samples.
pub fn theorem2_discrepancy(gamma: &GammaVector, coeffs: &CoefficientMatrix, instance: &Instance) -> Result<f64> {
    let direct = coefficients_to_signals(coeffs, &instance.dict)?.signals;
    let plugin = plug_in_mmse(gamma, &instance.dict, &instance.proj, &instance.sketches)?.signals;
    let mut worst = 0.0_f64;
    for s in 0..direct.ncols() {
        let diff = (direct.column(s) - plugin.column(s)).norm();
        let base = plugin.column(s).norm();
        let err = if base > 0.0 {
            diff / base
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Rows of `C` below `rel` of the largest row norm must have `γ_i` below `rel · max γ`.
pub fn sparsity_consistent(gamma: &GammaVector, coeffs: &CoefficientMatrix, rel: f64) -> bool {
    let rows = coeffs.row_norms();
    let row_max = rows.iter().cloned().fold(0.0, f64::max);
    let gamma_max = gamma.max();
    rows.iter()
        .zip(gamma.as_slice())
        .all(|(&r, &g)| r > rel * row_max || g <= rel * gamma_max)
}

/// Certificate that `γ̂` is the unique minimizer of `g`.
///
/// With `y_s = Σ_s⁻¹x_s` and `b_{s,i} = Ψ_s a_i`, the curvature of `g` along a
/// direction `v` on the active set vanishes iff `Σ_i v_i (b_{s,i}†y_s) b_{s,i} = 0`
/// for every `s`; leaving the active set costs `1 − (1/T)Σ_s |b_{s,i}†y_s|²` at first
/// order. The margin is the smaller of the relative least singular value of that
/// real-linear map and the least such slack; zero means another optimum exists
/// nearby, and then the row norms of an optimal `C` need not equal `γ̂`.
pub fn uniqueness_margin(instance: &Instance, gamma: &GammaVector, floor: f64) -> Result<f64> {
    let atoms = instance.proj.project_dictionary(&instance.dict)?;
    let samples = instance.sketches.len();
    let top = gamma.max();
    let active: Vec<usize> = (0..gamma.len()).filter(|&i| gamma[i] > floor * top).collect();
    let mut whitened: Vec<CVector> = Vec::with_capacity(samples);
    for (s, b) in atoms.iter().enumerate() {
        let m = b.nrows();
        let mut sigma = CMatrix::identity(m, m).scale(instance.rho());
        for &i in &active {
            let col = b.column(i);
            sigma += (&col * col.adjoint()).scale(gamma[i]);
        }
        whitened.push(hpd_inverse(sigma)? * instance.sketches.column(s));
    }
    let m = instance.sketches.sketch_dim();
    let mut map = DMatrix::<f64>::zeros(2 * m * samples, active.len());
    for (j, &i) in active.iter().enumerate() {
        for (s, (b, y)) in atoms.iter().zip(&whitened).enumerate() {
            let col = b.column(i);
            let w = col.dotc(y);
            for r in 0..m {
                let v = col[r] * w;
                map[(2 * (s * m + r), j)] = v.re;
                map[(2 * (s * m + r) + 1, j)] = v.im;
            }
        }
    }
    let curvature = if active.is_empty() {
        1.0
    } else {
        let sv = map.singular_values();
        let big = sv.max();
        if big > 0.0 {
            sv.min() / big
        } else {
            0.0
        }
    };
    let mut slack = f64::INFINITY;
    for i in (0..gamma.len()).filter(|i| !active.contains(i)) {
        let energy: f64 = atoms.iter().zip(&whitened).map(|(b, y)| b.column(i).dotc(y).norm_sqr()).sum();
        slack = slack.min(1.0 - energy / samples as f64);
    }
    Ok(curvature.min(slack))
}

/// `|f(Ĉ) − (ϱT/2)·g(γ̂)| / max(|f(Ĉ)|, tiny)`.
pub fn objective_gap(solved: &SolvedInstance, instance: &Instance) -> Result<f64> {
    let t = instance.sketches.len() as f64;
    let g = eval_g(&solved.fit.gamma, &instance.sketches, &instance.proj, &instance.dict)?;
    let f = solved.direct.objective;
    Ok((f - 0.5 * instance.rho() * t * g).abs() / f.abs().max(f64::MIN_POSITIVE))
}

/// Outcome of the decoupling checks on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingReport {
    pub instance: InstanceSpec,
    pub theorem1_max_rel_err: Option<f64>,
    pub theorem2_max_rel_err: Option<f64>,
    /// Relative mismatch of `f(Ĉ)` and `(ϱT/2)·g(γ̂)`.
    pub objective_gap: f64,
    pub sparsity_consistent: bool,
    /// See [`uniqueness_margin`].
    pub uniqueness_margin: f64,
    pub g_sweeps: usize,
    pub g_converged: bool,
    pub direct_iterations: usize,
    pub coordinate_tolerance: f64,
    pub direct_tolerance: f64,
}

impl DecouplingReport {
    /// Both present identities hold within `tolerance` and sparsity agrees.
    pub fn passed(&self, tolerance: f64) -> bool {
        let ok = |e: Option<f64>| e.is_none_or(|v| v < tolerance);
        ok(self.theorem1_max_rel_err) && ok(self.theorem2_max_rel_err) && self.sparsity_consistent
    }

    pub fn worst(&self) -> f64 {
        self.theorem1_max_rel_err.unwrap_or(0.0).max(self.theorem2_max_rel_err.unwrap_or(0.0))
    }
}

impl fmt::Display for DecouplingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |e: Option<f64>| e.map_or("-".to_string(), |v| format!("{v:.3e}"));
        write!(
            f,
            "{} theorem1={} theorem2={} objective_gap={:.3e} sparsity={} uniqueness={:.3e} g_sweeps={} direct_iters={} cd_tol={:e} direct_tol={:e}",
            self.instance,
            show(self.theorem1_max_rel_err),
            show(self.theorem2_max_rel_err),
            self.objective_gap,
            self.sparsity_consistent,
            self.uniqueness_margin,
            self.g_sweeps,
            self.direct_iterations,
            self.coordinate_tolerance,
            self.direct_tolerance
        )
    }
}

fn report(
    instance: &Instance,
    solved: &SolvedInstance,
    opts: &VerifyOptions,
    theorem1: bool,
    theorem2: bool,
) -> Result<DecouplingReport> {
    let gamma = &solved.fit.gamma;
    let coeffs = &solved.direct.coefficients;
    Ok(DecouplingReport {
        instance: instance.spec,
        theorem1_max_rel_err: if theorem1 { Some(theorem1_discrepancy(gamma, coeffs, opts.floor)?) } else { None },
        theorem2_max_rel_err: if theorem2 { Some(theorem2_discrepancy(gamma, coeffs, instance)?) } else { None },
        objective_gap: objective_gap(solved, instance)?,
        sparsity_consistent: sparsity_consistent(gamma, coeffs, opts.floor),
        uniqueness_margin: uniqueness_margin(instance, gamma, opts.floor)?,
        g_sweeps: solved.fit.sweeps,
        g_converged: solved.fit.converged,
        direct_iterations: solved.direct.iterations,
        coordinate_tolerance: opts.solve.coordinate_tolerance,
        direct_tolerance: opts.direct.tolerance,
    })
}

/// Compares `γ̂` from the covariance fit with the row norms of `Ĉ`.
pub fn check_theorem1(instance: &Instance, opts: &VerifyOptions) -> Result<DecouplingReport> {
    report(instance, &solve_both(instance, opts)?, opts, true, false)
}

/// Compares `Aĉ(s)` with the plug-in MMSE estimate built from `γ̂`.
pub fn check_theorem2(instance: &Instance, opts: &VerifyOptions) -> Result<DecouplingReport> {
    report(instance, &solve_both(instance, opts)?, opts, false, true)
}

/// Both theorem checks from a single pair of solves.
pub fn check_decoupling(instance: &Instance, opts: &VerifyOptions) -> Result<DecouplingReport> {
    report(instance, &solve_both(instance, opts)?, opts, true, true)
}

/// Discrepancies of both checks when `γ̂` is swapped for an unrelated random γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeControl {
    pub theorem1: f64,
    pub theorem2: f64,
}

impl NegativeControl {
    pub fn detected(&self, threshold: f64) -> bool {
        self.theorem1 > threshold && self.theorem2 > threshold
    }
}

/// Random γ with every entry in `[0.1, 1.1]·max γ̂`, so no row can match by accident.
pub fn negative_control(instance: &Instance, solved: &SolvedInstance, seed: u64) -> Result<NegativeControl> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = solved.fit.gamma.max().max(f64::MIN_POSITIVE);
    let random = GammaVector::new((0..instance.dict.size()).map(|_| scale * rng.random_range(0.1..1.1)).collect())?;
    Ok(NegativeControl {
        theorem1: theorem1_discrepancy(&random, &solved.direct.coefficients, 0.0)?,
        theorem2: theorem2_discrepancy(&random, &solved.direct.coefficients, instance)?,
    })
}

/// The randomized suite: 20 instances over T ∈ {1, 5, 100}, SNR ∈ {0, 20, 40} dB,
/// G ∈ {n, 2n}, matched and mismatched, n ∈ {8, 12, 16}.
pub fn standard_suite(base_seed: u64) -> Vec<InstanceSpec> {
    const SAMPLES: [usize; 3] = [1, 5, 100];
    const SNRS: [f64; 3] = [0.0, 20.0, 40.0];
    const DIMS: [usize; 3] = [8, 12, 16];
    (0..20)
        .map(|i| {
            let n = DIMS[(i / 3) % 3];
            let spec = InstanceSpec::new(n, n / 2, n * (1 + i % 2), SAMPLES[i % 3], SNRS[(i / 2) % 3], base_seed ^ i as u64);
            if (i / 4) % 2 == 0 {
                spec.matched()
            } else {
                spec
            }
        })
        .collect()
}

/// One suite entry with its negative control.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub report: DecouplingReport,
    pub control: NegativeControl,
    /// Draws rejected for a non-unique optimum before this one.
    pub redraws: usize,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub tolerance: f64,
    pub control_threshold: f64,
}

impl SuiteReport {
    pub fn max_theorem1(&self) -> f64 {
        self.entries.iter().filter_map(|e| e.report.theorem1_max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_theorem2(&self) -> f64 {
        self.entries.iter().filter_map(|e| e.report.theorem2_max_rel_err).fold(0.0, f64::max)
    }

    pub fn min_control(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.control.theorem1.min(e.control.theorem2))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.report.passed(self.tolerance) && e.control.detected(self.control_threshold))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{} control1={:.3e} control2={:.3e} redraws={} status={}",
                e.report,
                e.control.theorem1,
                e.control.theorem2,
                e.redraws,
                if e.report.passed(self.tolerance) && e.control.detected(self.control_threshold) { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "max theorem1 {:.3e}, max theorem2 {:.3e}, min control {:.3e}: {}",
            self.max_theorem1(),
            self.max_theorem2(),
            self.min_control(),
            if self.passed() { "all identities hold" } else { "FAILED" }
        )
    }
}

/// Seed of the `k`-th redraw of a suite instance.
pub fn redraw_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn suite_entry(spec: &InstanceSpec, opts: &VerifyOptions) -> Result<SuiteEntry> {
    let mut redraws = 0;
    let (instance, fit) = loop {
        let instance = InstanceSpec { seed: redraw_seed(spec.seed, redraws), ..*spec }.build()?;
        let fit = solve_g(&instance.sketches, &instance.proj, &instance.dict, &opts.solve)
            .map_err(|e| Error::Numeric(format!("covariance-fitting side failed: {e}")))?;
        if redraws >= opts.max_redraws || uniqueness_margin(&instance, &fit.gamma, opts.floor)? >= opts.min_uniqueness {
            break (instance, fit);
        }
        redraws += 1;
    };
    let direct = l21_ls_direct(&instance.sketches, &instance.proj, &instance.dict, instance.rho(), &opts.direct)
        .map_err(|e| Error::Numeric(format!("direct side failed: {e}")))?;
    let solved = SolvedInstance { fit, direct };
    let report = report(&instance, &solved, opts, true, true)?;
    let control = negative_control(&instance, &solved, instance.spec.seed.wrapping_add(1))?;
    Ok(SuiteEntry { report, control, redraws })
}

/// Runs both checks and a negative control on every instance, in parallel.
///
/// Draws whose covariance fit has no uniqueness certificate are replaced by
/// the next [`redraw_seed`], up to `max_redraws` times; the theorem ties the
/// two routes only through their optima, which must then be unique.
pub fn run_suite(specs: &[InstanceSpec], opts: &VerifyOptions) -> Result<SuiteReport> {
    let entries = specs.par_iter().map(|spec| suite_entry(spec, opts)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { entries, tolerance: opts.tolerance, control_threshold: opts.control_threshold })
}
