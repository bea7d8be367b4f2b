//! Signal model: ULA array responses, grid dictionaries, diffuse Toeplitz
//! covariances, Gaussian signal batches, antenna-selection projections and
//! noisy sketches `x(s) = Ψ(s)h(s) + z(s)`.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, CMatrix, CVector, C64};

/// Tolerance used when checking `Ψ Ψ† = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-12;

/// Steering vector of a uniform linear array: entry `p` (1-based) is
/// `exp(jπpξ)`.
pub fn array_response(xi: f64, n: usize) -> Result<CVector> {
    if !(-1.0..=1.0).contains(&xi) {
        return Err(Error::Domain(format!("angle parameter {xi} outside [-1, 1]")));
    }
    if n == 0 {
        return Err(Error::Domain("array size must be positive".into()));
    }
    Ok(CVector::from_fn(n, |p, _| {
        C64::from_polar(1.0, PI * (p + 1) as f64 * xi)
    }))
}

/// A finite dictionary of array responses over a labelled grid.
#[derive(Debug, Clone)]
pub struct Dictionary {
    labels: Vec<f64>,
    atoms: CMatrix,
    atom_norm: f64,
}

impl Dictionary {
    /// Wraps explicit atoms. All columns must share one ℓ2-norm and labels
    /// must be strictly increasing.
    pub fn new(labels: Vec<f64>, atoms: CMatrix) -> Result<Self> {
        if labels.len() != atoms.ncols() {
            return Err(Error::Dimension(format!(
                "{} labels for {} atoms",
                labels.len(),
                atoms.ncols()
            )));
        }
        if atoms.ncols() == 0 {
            return Err(Error::Domain("dictionary needs at least one atom".into()));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("atom labels must be strictly increasing".into()));
        }
        let atom_norm = atoms.column(0).norm();
        for (i, col) in atoms.column_iter().enumerate() {
            if (col.norm() - atom_norm).abs() > 1e-12 * atom_norm.max(1.0) {
                return Err(Error::Domain(format!(
                    "atom {i} has norm {} but atom 0 has {atom_norm}",
                    col.norm()
                )));
            }
        }
        Ok(Self { labels, atoms, atom_norm })
    }

    /// Uniform grid `ξ_i = 2i/G − 1`, `i = 1..G`. `G = n` gives the n-point
    /// Fourier dictionary, `G = 2n` the 2× oversampled one.
    pub fn grid(n: usize, grid_size: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Domain("grid size must be positive".into()));
        }
        if n == 0 {
            return Err(Error::Domain("array size must be positive".into()));
        }
        let labels: Vec<f64> = (1..=grid_size)
            .map(|i| 2.0 * i as f64 / grid_size as f64 - 1.0)
            .collect();
        let mut atoms = CMatrix::zeros(n, grid_size);
        for (i, &xi) in labels.iter().enumerate() {
            atoms.set_column(i, &array_response(xi, n)?);
        }
        Ok(Self {
            labels,
            atoms,
            atom_norm: (n as f64).sqrt(),
        })
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn atoms(&self) -> &CMatrix {
        &self.atoms
    }

    /// Common ℓ2-norm ζ of the atoms.
    pub fn atom_norm(&self) -> f64 {
        self.atom_norm
    }

    /// Signal dimension n.
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of atoms G.
    pub fn size(&self) -> usize {
        self.atoms.ncols()
    }
}

/// A signal covariance `Σ_h` together with the angular support it came from.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub sigma_h: CMatrix,
    pub support: (f64, f64),
}

impl CovarianceModel {
    pub fn dim(&self) -> usize {
        self.sigma_h.nrows()
    }
}

/// Normalized `sin(x)/x`, exactly zero when `x` is a nonzero integer multiple of π.
fn sinc_lag(lag: f64, half_width: f64) -> f64 {
    let cycles = lag * half_width;
    if cycles != 0.0 && cycles.fract() == 0.0 {
        return 0.0;
    }
    let arg = PI * cycles;
    arg.sin() / arg
}

/// Covariance of a diffuse source with uniform angular density on `[a, b]`:
/// `Σ_h[p,q] = (1/(b−a))∫_a^b exp(jπ(p−q)ξ)dξ`, in closed form.
pub fn diffuse_covariance(n: usize, support: (f64, f64)) -> Result<CovarianceModel> {
    let (a, b) = support;
    if !(a < b) || a < -1.0 || b > 1.0 {
        return Err(Error::Domain(format!(
            "angular support [{a}, {b}] must be a nondegenerate subinterval of [-1, 1]"
        )));
    }
    if n == 0 {
        return Err(Error::Domain("array size must be positive".into()));
    }
    let center = 0.5 * (a + b);
    let half_width = 0.5 * (b - a);
    // One value per nonnegative lag; negative lags are conjugates.
    let by_lag: Vec<C64> = (0..n)
        .map(|k| {
            if k == 0 {
                C64::new(1.0, 0.0)
            } else {
                let lag = k as f64;
                C64::from_polar(sinc_lag(lag, half_width), PI * lag * center)
            }
        })
        .collect();
    let sigma_h = CMatrix::from_fn(n, n, |p, q| {
        if p >= q {
            by_lag[p - q]
        } else {
            by_lag[q - p].conj()
        }
    });
    Ok(CovarianceModel { sigma_h, support })
}

/// Draws a circularly symmetric complex Gaussian vector with `E[zz†] = I`.
pub fn complex_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CVector {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CVector::from_fn(dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * scale, im * scale)
    })
}

/// `T` signal samples stored column-wise (n×T).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBatch {
    pub samples: CMatrix,
}

impl SignalBatch {
    pub fn new(samples: CMatrix) -> Result<Self> {
        if samples.ncols() == 0 {
            return Err(Error::Domain("signal batch needs at least one sample".into()));
        }
        if samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numeric("signal batch has non-finite entries".into()));
        }
        Ok(Self { samples })
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }
}

/// Draws `T` i.i.d. samples `h ~ CN(0, Σ_h)` through the Hermitian square
/// root of `Σ_h`.
pub fn sample_signals<R: Rng + ?Sized>(
    cov: &CovarianceModel,
    samples: usize,
    rng: &mut R,
) -> Result<SignalBatch> {
    if samples == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    let root = psd_sqrt(&cov.sigma_h, 1e-10)?;
    let n = cov.dim();
    let mut out = CMatrix::zeros(n, samples);
    for s in 0..samples {
        let z = complex_normal_vector(n, rng);
        out.set_column(s, &(&root * z));
    }
    SignalBatch::new(out)
}

/// One projection operator Ψ(s).
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// Explicit m×n matrix with orthonormal rows.
    Dense(CMatrix),
    /// Antenna selection: row `r` picks component `indices[r]`.
    Selection(Vec<usize>),
}

impl Projection {
    fn rows(&self) -> usize {
        match self {
            Projection::Dense(mat) => mat.nrows(),
            Projection::Selection(idx) => idx.len(),
        }
    }

    /// `Ψ v`.
    pub fn apply(&self, v: &CVector) -> CVector {
        match self {
            Projection::Dense(mat) => mat * v,
            Projection::Selection(idx) => CVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i])),
        }
    }

    /// `Ψ† y` for an n-dimensional output.
    pub fn adjoint_apply(&self, y: &CVector, n: usize) -> CVector {
        match self {
            Projection::Dense(mat) => mat.adjoint() * y,
            Projection::Selection(idx) => {
                let mut out = CVector::zeros(n);
                for (r, &i) in idx.iter().enumerate() {
                    out[i] += y[r];
                }
                out
            }
        }
    }

    /// `Ψ M` for an n×k matrix `M`.
    pub fn apply_matrix(&self, mat: &CMatrix) -> CMatrix {
        match self {
            Projection::Dense(psi) => psi * mat,
            Projection::Selection(idx) => mat.select_rows(idx.iter()),
        }
    }

    /// `Ψ M Ψ†` for an n×n matrix `M`.
    pub fn congruence(&self, mat: &CMatrix) -> CMatrix {
        match self {
            Projection::Dense(psi) => psi * mat * psi.adjoint(),
            Projection::Selection(idx) => mat.select_rows(idx.iter()).select_columns(idx.iter()),
        }
    }

    /// Explicit m×n matrix.
    pub fn to_matrix(&self, n: usize) -> CMatrix {
        match self {
            Projection::Dense(mat) => mat.clone(),
            Projection::Selection(idx) => {
                let mut out = CMatrix::zeros(idx.len(), n);
                for (r, &i) in idx.iter().enumerate() {
                    out[(r, i)] = C64::new(1.0, 0.0);
                }
                out
            }
        }
    }
}

/// The per-sample projections Ψ(1..T), all m×n; rows are orthonormal unless
/// built with [`ProjectionSet::with_repeats`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    n: usize,
    m: usize,
    ops: Vec<Projection>,
}

impl ProjectionSet {
    /// Validates shapes, index ranges and row orthonormality.
    pub fn new(n: usize, ops: Vec<Projection>) -> Result<Self> {
        Self::build(n, ops, false)
    }

    /// Selections that may pick the same component more than once.
    pub fn with_repeats(n: usize, ops: Vec<Projection>) -> Result<Self> {
        Self::build(n, ops, true)
    }

    fn build(n: usize, ops: Vec<Projection>, repeats: bool) -> Result<Self> {
        let m = ops.first().map(Projection::rows).unwrap_or(0);
        if ops.is_empty() || m == 0 {
            return Err(Error::Domain("projection set needs T ≥ 1 operators with m ≥ 1".into()));
        }
        if m > n && !repeats {
            return Err(Error::Domain(format!("m = {m} exceeds n = {n}")));
        }
        for (s, op) in ops.iter().enumerate() {
            if op.rows() != m {
                return Err(Error::Dimension(format!("operator {s} has {} rows, expected {m}", op.rows())));
            }
            match op {
                Projection::Selection(idx) => {
                    let mut seen = vec![false; n];
                    for &i in idx {
                        if i >= n || (seen[i] && !repeats) {
                            return Err(Error::Domain(format!(
                                "operator {s}: selection indices must be distinct and below {n}"
                            )));
                        }
                        seen[i] = true;
                    }
                }
                Projection::Dense(_) if repeats => {
                    return Err(Error::Domain(format!("operator {s}: repeats apply to selections only")));
                }
                Projection::Dense(mat) => {
                    if mat.ncols() != n {
                        return Err(Error::Dimension(format!(
                            "operator {s} has {} columns, expected {n}",
                            mat.ncols()
                        )));
                    }
                    let gram = mat * mat.adjoint();
                    let err = crate::linalg::max_abs_diff(&gram, &CMatrix::identity(m, m));
                    if err >= ORTHONORMAL_TOL {
                        return Err(Error::Domain(format!(
                            "operator {s} rows are not orthonormal (error {err:e})"
                        )));
                    }
                }
            }
        }
        Ok(Self { n, m, ops })
    }

    /// Every sample observed through the full identity.
    pub fn identity(n: usize, samples: usize) -> Result<Self> {
        Self::new(n, vec![Projection::Selection((0..n).collect()); samples])
    }

    pub fn signal_dim(&self) -> usize {
        self.n
    }

    pub fn sketch_dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn get(&self, s: usize) -> &Projection {
        &self.ops[s]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Projection> {
        self.ops.iter()
    }

    /// `Ψ(s)A` for every sample.
    pub fn project_dictionary(&self, dict: &Dictionary) -> Result<Vec<CMatrix>> {
        if dict.dim() != self.n {
            return Err(Error::Dimension(format!(
                "dictionary has dimension {}, projections expect {}",
                dict.dim(),
                self.n
            )));
        }
        Ok(self.ops.iter().map(|op| op.apply_matrix(dict.atoms())).collect())
    }
}

/// `T` independent uniformly random m-subsets of `{0..n}`, each drawn
/// without replacement.
pub fn sample_selection_projections<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    samples: usize,
    rng: &mut R,
) -> Result<ProjectionSet> {
    if m > n {
        return Err(Error::Domain(format!("cannot select m = {m} of n = {n} components")));
    }
    if m == 0 || samples == 0 {
        return Err(Error::Domain("m and T must be positive".into()));
    }
    let ops = (0..samples)
        .map(|_| Projection::Selection(sample(rng, n, m).into_vec()))
        .collect();
    ProjectionSet::new(n, ops)
}

/// `T` selections whose `m` rows each pick a component uniformly and
/// independently, so a component can be picked twice.
pub fn sample_independent_selections<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    samples: usize,
    rng: &mut R,
) -> Result<ProjectionSet> {
    if n == 0 || m == 0 || samples == 0 {
        return Err(Error::Domain("n, m and T must be positive".into()));
    }
    let ops = (0..samples)
        .map(|_| Projection::Selection((0..m).map(|_| rng.random_range(0..n)).collect()))
        .collect();
    ProjectionSet::with_repeats(n, ops)
}

/// Sketch matrix `X` (m×T) with its noise variance and regularization ϱ.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchSet {
    pub sketches: CMatrix,
    pub noise_variance: f64,
    pub regularization: f64,
}

impl SketchSet {
    pub fn new(sketches: CMatrix, noise_variance: f64, regularization: f64) -> Result<Self> {
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::Domain(format!("noise variance {noise_variance} must be ≥ 0")));
        }
        if !(regularization >= 0.0) || !regularization.is_finite() {
            return Err(Error::Domain(format!("regularization {regularization} must be ≥ 0")));
        }
        Ok(Self { sketches, noise_variance, regularization })
    }

    pub fn len(&self) -> usize {
        self.sketches.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.ncols() == 0
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketches.nrows()
    }

    pub fn column(&self, s: usize) -> CVector {
        self.sketches.column(s).into_owned()
    }

    /// Same sketches with a different ϱ.
    pub fn with_regularization(&self, regularization: f64) -> Result<Self> {
        Self::new(self.sketches.clone(), self.noise_variance, regularization)
    }

    pub(crate) fn check_against(&self, proj: &ProjectionSet) -> Result<()> {
        if self.len() != proj.len() || self.sketch_dim() != proj.sketch_dim() {
            return Err(Error::Dimension(format!(
                "sketches are {}x{}, projections give {}x{}",
                self.sketch_dim(),
                self.len(),
                proj.sketch_dim(),
                proj.len()
            )));
        }
        Ok(())
    }
}

/// Noise drawn at unit variance so it can be rescaled for several SNRs.
#[derive(Debug, Clone)]
pub struct UnitNoise {
    pub samples: CMatrix,
}

impl UnitNoise {
    pub fn draw<R: Rng + ?Sized>(m: usize, samples: usize, rng: &mut R) -> Self {
        let mut out = CMatrix::zeros(m, samples);
        for s in 0..samples {
            out.set_column(s, &complex_normal_vector(m, rng));
        }
        Self { samples: out }
    }
}

/// `x(s) = Ψ(s)h(s) + σ·z(s)` with a given unit-variance noise draw; ϱ = σ².
pub fn sketch_with_noise(
    signals: &SignalBatch,
    proj: &ProjectionSet,
    noise: &UnitNoise,
    noise_variance: f64,
) -> Result<SketchSet> {
    if signals.dim() != proj.signal_dim() || signals.len() != proj.len() {
        return Err(Error::Dimension(format!(
            "signals are {}x{}, projections expect {}x{}",
            signals.dim(),
            signals.len(),
            proj.signal_dim(),
            proj.len()
        )));
    }
    if noise.samples.nrows() != proj.sketch_dim() || noise.samples.ncols() != proj.len() {
        return Err(Error::Dimension("noise draw does not match the sketch shape".into()));
    }
    if !(noise_variance >= 0.0) {
        return Err(Error::Domain(format!("noise variance {noise_variance} must be ≥ 0")));
    }
    let sigma = noise_variance.sqrt();
    let mut out = CMatrix::zeros(proj.sketch_dim(), proj.len());
    for (s, op) in proj.iter().enumerate() {
        let h: CVector = signals.samples.column(s).into_owned();
        let mut x = op.apply(&h);
        if sigma > 0.0 {
            x.axpy(C64::new(sigma, 0.0), &noise.samples.column(s), C64::new(1.0, 0.0));
        }
        out.set_column(s, &x);
    }
    SketchSet::new(out, noise_variance, noise_variance)
}

/// Noisy sketches with fresh noise from `rng`; sets ϱ = σ².
pub fn sketch<R: Rng + ?Sized>(
    signals: &SignalBatch,
    proj: &ProjectionSet,
    noise_variance: f64,
    rng: &mut R,
) -> Result<SketchSet> {
    let noise = UnitNoise::draw(proj.sketch_dim(), proj.len(), rng);
    sketch_with_noise(signals, proj, &noise, noise_variance)
}

/// Noise variance for a per-antenna SNR in dB on a unit-diagonal `Σ_h`.
pub fn noise_variance_for_snr(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Real vector helper used by tests and the harness.
pub fn column_energy(mat: &CMatrix) -> f64 {
    mat.iter().map(|z| z.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn array_response_examples() {
        let a = array_response(0.0, 4).unwrap();
        assert!(a.iter().all(|z| close(*z, C64::new(1.0, 0.0), 1e-15)));

        let a = array_response(1.0, 2).unwrap();
        assert!(close(a[0], C64::new(-1.0, 0.0), 1e-15));
        assert!(close(a[1], C64::new(1.0, 0.0), 1e-15));

        // exp(jπp/2) for p = 1, 2, 3
        let a = array_response(0.5, 3).unwrap();
        assert!(close(a[0], C64::new(0.0, 1.0), 1e-15));
        assert!(close(a[1], C64::new(-1.0, 0.0), 1e-15));
        assert!(close(a[2], C64::new(0.0, -1.0), 1e-15));

        assert!((array_response(0.3, 9).unwrap().norm() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn array_response_rejects_out_of_range() {
        assert!(matches!(array_response(1.5, 4), Err(Error::Domain(_))));
        assert!(matches!(array_response(-1.0001, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn grid_dictionary_shapes_and_norms() {
        let dict = Dictionary::grid(2, 1).unwrap();
        assert_eq!(dict.labels(), &[1.0]);
        assert!(close(dict.atoms()[(0, 0)], C64::new(-1.0, 0.0), 1e-15));
        assert!(close(dict.atoms()[(1, 0)], C64::new(1.0, 0.0), 1e-15));

        for g in [64, 128] {
            let dict = Dictionary::grid(64, g).unwrap();
            assert_eq!(dict.size(), g);
            assert_eq!(dict.atom_norm(), 8.0);
            for col in dict.atoms().column_iter() {
                assert!((col.norm() - 8.0).abs() < 1e-12 * 8.0);
            }
            assert!(dict.labels().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn square_grid_is_unitary_fourier() {
        let n = 64;
        let dict = Dictionary::grid(n, n).unwrap();
        let gram = dict.atoms().adjoint() * dict.atoms();
        let target = CMatrix::identity(n, n) * C64::new(n as f64, 0.0);
        assert!(crate::linalg::max_abs_diff(&gram, &target) < 1e-9);
    }

    #[test]
    fn diffuse_full_band_is_identity() {
        let cov = diffuse_covariance(7, (-1.0, 1.0)).unwrap();
        assert_eq!(cov.sigma_h, CMatrix::identity(7, 7));
    }

    #[test]
    fn diffuse_narrow_band_value() {
        let cov = diffuse_covariance(3, (-0.1, 0.1)).unwrap();
        let x = 0.1 * PI;
        let expected = x.sin() / x;
        assert!((cov.sigma_h[(0, 1)].re - expected).abs() < 1e-14);
        assert!((cov.sigma_h[(0, 1)].re - 0.98363).abs() < 1e-5);
        assert!(cov.sigma_h[(0, 1)].im.abs() < 1e-15);
        for p in 0..3 {
            assert_eq!(cov.sigma_h[(p, p)], C64::new(1.0, 0.0));
        }
    }

    #[test]
    fn diffuse_rejects_degenerate_interval() {
        assert!(diffuse_covariance(4, (0.2, 0.2)).is_err());
        assert!(diffuse_covariance(4, (0.3, 0.1)).is_err());
        assert!(diffuse_covariance(4, (-1.2, 0.1)).is_err());
    }

    #[test]
    fn zero_covariance_gives_zero_signals() {
        let cov = CovarianceModel { sigma_h: CMatrix::zeros(4, 4), support: (0.0, 0.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_signals(&cov, 5, &mut rng).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(batch.samples.iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn identity_covariance_concentrates() {
        let n = 4;
        let t = 10_000;
        let cov = diffuse_covariance(n, (-1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_signals(&cov, t, &mut rng).unwrap();
        let sample_cov = &batch.samples * batch.samples.adjoint() / C64::new(t as f64, 0.0);
        let dist = (sample_cov - CMatrix::identity(n, n)).norm();
        // O(n/√T) with a generous constant
        assert!(dist < 3.0 * n as f64 / (t as f64).sqrt(), "distance {dist}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let cov = diffuse_covariance(6, (-0.3, 0.2)).unwrap();
        let a = sample_signals(&cov, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_signals(&cov, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let p = sample_selection_projections(10, 4, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let q = sample_selection_projections(10, 4, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn selections_are_distinct_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = sample_selection_projections(64, 32, 100, &mut rng).unwrap();
        assert_eq!(proj.len(), 100);
        for op in proj.iter() {
            let Projection::Selection(idx) = op else { panic!("expected selection") };
            assert_eq!(idx.len(), 32);
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 32);
            let psi = op.to_matrix(64);
            let gram = &psi * psi.adjoint();
            assert!(crate::linalg::max_abs_diff(&gram, &CMatrix::identity(32, 32)) < ORTHONORMAL_TOL);
        }
        let full = sample_selection_projections(4, 4, 1, &mut rng).unwrap();
        let Projection::Selection(idx) = full.get(0) else { panic!() };
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn independent_selections_may_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = sample_independent_selections(64, 32, 200, &mut rng).unwrap();
        let mut repeated = 0;
        for op in proj.iter() {
            let Projection::Selection(idx) = op else { panic!("expected selection") };
            assert!(idx.iter().all(|&i| i < 64));
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            repeated += usize::from(sorted.len() < 32);
        }
        // P(no repeat among 32 draws from 64) ≈ 2e-4
        assert!(repeated > 190);
        let dup = vec![Projection::Selection(vec![1, 1])];
        assert!(ProjectionSet::new(3, dup.clone()).is_err());
        assert!(ProjectionSet::with_repeats(3, dup).is_ok());
        assert!(ProjectionSet::with_repeats(3, vec![Projection::Selection(vec![3])]).is_err());
    }

    #[test]
    fn selection_rejects_m_above_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(sample_selection_projections(3, 4, 2, &mut rng), Err(Error::Domain(_))));
        assert!(ProjectionSet::new(4, vec![Projection::Selection(vec![1, 1])]).is_err());
        let bad = CMatrix::from_element(1, 2, C64::new(1.0, 0.0));
        assert!(ProjectionSet::new(2, vec![Projection::Dense(bad)]).is_err());
    }

    #[test]
    fn noiseless_sketch_selects_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cov = diffuse_covariance(8, (-0.5, 0.5)).unwrap();
        let signals = sample_signals(&cov, 3, &mut rng).unwrap();
        let proj = sample_selection_projections(8, 3, 3, &mut rng).unwrap();
        let sk = sketch(&signals, &proj, 0.0, &mut rng).unwrap();
        assert_eq!(sk.regularization, 0.0);
        for (s, op) in proj.iter().enumerate() {
            let Projection::Selection(idx) = op else { panic!() };
            for (r, &i) in idx.iter().enumerate() {
                assert_eq!(sk.sketches[(r, s)], signals.samples[(i, s)]);
            }
        }
    }

    #[test]
    fn pure_noise_sketch_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4;
        let t = 10_000;
        let signals = SignalBatch::new(CMatrix::zeros(n, t)).unwrap();
        let proj = ProjectionSet::identity(n, t).unwrap();
        let sk = sketch(&signals, &proj, 1.0, &mut rng).unwrap();
        let var = column_energy(&sk.sketches) / (n * t) as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert_eq!(sk.regularization, 1.0);
    }

    #[test]
    fn sketch_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let signals = SignalBatch::new(CMatrix::zeros(4, 3)).unwrap();
        let proj = ProjectionSet::identity(4, 2).unwrap();
        assert!(matches!(sketch(&signals, &proj, 1.0, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn snr_convention() {
        assert_eq!(noise_variance_for_snr(0.0), 1.0);
        assert!((noise_variance_for_snr(40.0) - 1e-4).abs() < 1e-18);
    }
}
