//! Property checks shared by the proptest suite and the acceptance run.
//! Each returns the measured error so callers choose how to report it.

#![allow(dead_code)]

use mmv_core::covsolve::{
    eval_g, eval_l, gk_derivative, lk_derivative, solve_g, solve_ml, GammaVector, Objective, SolveOptions, SolverState,
};
use mmv_core::estimate::{group_soft_threshold, l21_ls_direct, CoefficientMatrix, DirectOptions};
use mmv_core::linalg::{hpd_inverse, max_abs_diff, rank_one_inverse_update, CMatrix, C64};
use mmv_core::model::{
    complex_normal_vector, diffuse_covariance, sample_selection_projections, sketch, Dictionary, ProjectionSet,
    SignalBatch, SketchSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Small {
    pub sketches: SketchSet,
    pub proj: ProjectionSet,
    pub dict: Dictionary,
}

/// Random signals through random selections, with noise variance and ϱ equal to `noise`.
pub fn small_instance(n: usize, m: usize, grid: usize, samples: usize, noise: f64, seed: u64) -> Small {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dict = Dictionary::grid(n, grid).unwrap();
    let h = CMatrix::from_fn(n, samples, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let signals = SignalBatch::new(h).unwrap();
    let proj = sample_selection_projections(n, m, samples, &mut rng).unwrap();
    let sketches = sketch(&signals, &proj, noise, &mut rng).unwrap();
    Small { sketches, proj, dict }
}

fn random_gamma(len: usize, rng: &mut ChaCha8Rng) -> GammaVector {
    GammaVector::new((0..len).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap()
}

/// Max entry error of the rank-one inverse update against a fresh inverse,
/// relative to the largest entry of the exact inverse.
pub fn sherman_morrison_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..8);
    let b = CMatrix::from_fn(m, m, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let sigma = &b * b.adjoint() + CMatrix::identity(m, m).scale(rng.random_range(0.1..2.0));
    let a = complex_normal_vector(m, &mut rng);
    let mut inv = hpd_inverse(sigma.clone()).unwrap();
    let u = &inv * &a;
    let q = a.dotc(&u).re;
    // any d > −1/q keeps Σ + d·aa† positive definite
    let d = rng.random_range(-0.9 / q..5.0);
    rank_one_inverse_update(&mut inv, &u, q, d);
    let exact = hpd_inverse(sigma + (&a * a.adjoint()).scale(d)).unwrap();
    max_abs_diff(&inv, &exact) / exact.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `g(λγ₁ + (1−λ)γ₂) − [λg(γ₁) + (1−λ)g(γ₂)]`, relative to the chord value.
/// Nonpositive (up to rounding) for a convex g.
pub fn convexity_excess(seed: u64) -> f64 {
    let inst = small_instance(6, 3, 8, 4, 0.1, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let g1 = random_gamma(8, &mut rng);
    let g2 = GammaVector::new((0..8).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
    let lam = rng.random_range(0.0..1.0);
    let mid = GammaVector::new(
        g1.as_slice().iter().zip(g2.as_slice()).map(|(a, b)| lam * a + (1.0 - lam) * b).collect(),
    )
    .unwrap();
    let eval = |g: &GammaVector| eval_g(g, &inst.sketches, &inst.proj, &inst.dict).unwrap();
    let chord = lam * eval(&g1) + (1.0 - lam) * eval(&g2);
    (eval(&mid) - chord) / chord.abs()
}

/// Richardson-extrapolated central difference of `f` at 0.
fn derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

/// Relative errors of `g'_k` and `l'_k` at a random interior point against
/// finite differences of `eval_g` and `eval_l`.
pub fn derivative_errors(seed: u64) -> (f64, f64) {
    let noise = 0.2;
    let inst = small_instance(6, 3, 8, 5, noise, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF);
    let gamma = random_gamma(8, &mut rng);
    let k = rng.random_range(0..8);
    let d = rng.random_range(-0.5 * gamma[k]..1.0);
    let shifted = |t: f64| {
        let mut v = gamma.as_slice().to_vec();
        v[k] += d + t;
        GammaVector::new(v).unwrap()
    };
    let h = 1e-3 * (1.0 + gamma[k]);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);

    let state = SolverState::new(Objective::Surrogate, &gamma, &inst.sketches, &inst.proj, &inst.dict, noise).unwrap();
    let fd_g = derivative(|t| eval_g(&shifted(t), &inst.sketches, &inst.proj, &inst.dict).unwrap(), h);
    let g_err = rel(gk_derivative(d, k, &state).unwrap(), fd_g);

    let state = SolverState::new(Objective::Likelihood, &gamma, &inst.sketches, &inst.proj, &inst.dict, noise).unwrap();
    let fd_l = derivative(|t| eval_l(&shifted(t), &inst.sketches, &inst.proj, &inst.dict, noise).unwrap(), h);
    let l_err = rel(lk_derivative(d, k, &state).unwrap(), fd_l);
    (g_err, l_err)
}

/// Worst violation of the optimality conditions of
/// `X = argmin ½‖X − C‖² + τ‖X‖₂,₁` for the group shrinkage output:
/// nonzero rows satisfy `X_i − C_i + τX_i/‖X_i‖ = 0`, zero rows `‖C_i‖ ≤ τ`.
pub fn prox_residual(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..10);
    let cols = rng.random_range(1..6);
    let c = CMatrix::from_fn(rows, cols, |_, _| C64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
    let tau = rng.random_range(0.0..3.0);
    let x = group_soft_threshold(&CoefficientMatrix(c.clone()), tau).0;
    let mut worst = 0.0_f64;
    for i in 0..rows {
        let xi = x.row(i);
        let ci = c.row(i);
        let norm = xi.norm();
        let scale = ci.norm().max(1.0);
        if norm > 0.0 {
            let resid = &xi - &ci + xi.scale(tau / norm);
            worst = worst.max(resid.norm() / scale);
        } else {
            worst = worst.max((ci.norm() - tau).max(0.0) / scale);
        }
    }
    worst
}

/// `solve_g` against an exhaustive grid over `[0, g(0)]^G` for `G ≤ 3`.
///
/// Returns `(g(γ̂) − min_grid g, ‖γ̂ − argmin_grid‖∞ / step)`; the first is at
/// most rounding and the second at most about one grid step.
pub fn grid_search_gap(grid_size: usize, seed: u64) -> (f64, f64) {
    let inst = small_instance(4, 2, grid_size, 6, 0.1, seed);
    let eval = |g: &[f64]| eval_g(&GammaVector::new(g.to_vec()).unwrap(), &inst.sketches, &inst.proj, &inst.dict).unwrap();
    // Σγ ≤ g(γ) ≤ g(0) at the optimum
    let upper = eval(&vec![0.0; grid_size]);
    let points = 60usize;
    let step = upper / points as f64;
    let mut best = (f64::INFINITY, vec![0.0; grid_size]);
    let total = (points + 1).pow(grid_size as u32);
    let mut gamma = vec![0.0; grid_size];
    for idx in 0..total {
        let mut rest = idx;
        for g in gamma.iter_mut() {
            *g = (rest % (points + 1)) as f64 * step;
            rest /= points + 1;
        }
        if gamma.iter().sum::<f64>() > upper {
            continue;
        }
        let v = eval(&gamma);
        if v < best.0 {
            best = (v, gamma.clone());
        }
    }
    let opts = SolveOptions { coordinate_tolerance: 1e-13, max_sweeps: 10_000, ..SolveOptions::default() };
    let fit = solve_g(&inst.sketches, &inst.proj, &inst.dict, &opts).unwrap();
    let dist = fit.gamma.as_slice().iter().zip(&best.1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ((fit.cost - best.0) / best.0.abs(), dist / step)
}

/// Largest entry error of the closed-form diffuse covariance against
/// composite Simpson quadrature of `(1/(b−a))∫ exp(jπ(p−q)ξ)dξ`.
pub fn diffuse_quadrature_error(n: usize, a: f64, b: f64) -> f64 {
    let cov = diffuse_covariance(n, (a, b)).unwrap().sigma_h;
    let intervals = 40_000usize;
    let h = (b - a) / intervals as f64;
    let mut worst = 0.0_f64;
    for p in 0..n {
        for q in 0..n {
            let lag = p as f64 - q as f64;
            let f = |xi: f64| C64::from_polar(1.0, std::f64::consts::PI * lag * xi);
            let mut acc = f(a) + f(b);
            for i in 1..intervals {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += f(a + h * i as f64) * w;
            }
            let quad = acc * (h / 3.0) / (b - a);
            worst = worst.max((quad - cov[(p, q)]).norm());
        }
    }
    worst
}

/// Largest increase between consecutive objective values of the three
/// iterative solvers, relative to the starting value.
pub fn worst_ascent(seed: u64) -> [f64; 3] {
    let inst = small_instance(8, 4, 16, 8, 0.05, seed);
    let rise = |trace: &[f64]| {
        let scale = trace[0].abs().max(1.0);
        trace.windows(2).map(|w| (w[1] - w[0]) / scale).fold(f64::NEG_INFINITY, f64::max).max(0.0)
    };
    let opts = SolveOptions::default();
    let g = solve_g(&inst.sketches, &inst.proj, &inst.dict, &opts).unwrap();
    let l = solve_ml(&inst.sketches, &inst.proj, &inst.dict, 0.05, &opts).unwrap();
    let direct = l21_ls_direct(&inst.sketches, &inst.proj, &inst.dict, 0.05, &DirectOptions::default()).unwrap();
    [rise(&g.cost_trace), rise(&l.cost_trace), rise(&direct.trace)]
}
