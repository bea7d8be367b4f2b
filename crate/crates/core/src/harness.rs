//! Monte-Carlo NMSE experiments over SNR, dictionary size and method, with
//! CSV output.
//!
//! Each trial draws its signals, projections and noise from a stream seeded
//! by `base_seed ^ trial`, so a table depends only on the configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covsolve::{solve_g, solve_ml, SolveOptions};
use crate::error::{Error, Result};
use crate::estimate::{coefficients_to_signals, l21_ls_direct, oracle_mmse, plug_in_mmse, DirectOptions, EstimateBatch};
use crate::model::{
    column_energy, diffuse_covariance, noise_variance_for_snr, sample_independent_selections,
    sample_selection_projections, sample_signals, sketch_with_noise, CovarianceModel, Dictionary, ProjectionSet,
    SignalBatch, SketchSet, UnitNoise,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// MMSE with the true covariance.
    OracleMmse,
    /// Coordinate descent on `g(γ)`, then plug-in MMSE.
    L21Cd,
    /// Proximal gradient on `f(C)`.
    L21Direct,
    /// Coordinate descent on `l(γ)`, then plug-in MMSE.
    Ml,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::OracleMmse, Method::L21Cd, Method::L21Direct, Method::Ml];

    pub fn name(self) -> &'static str {
        match self {
            Method::OracleMmse => "oracle-mmse",
            Method::L21Cd => "l21-cd",
            Method::L21Direct => "l21-direct",
            Method::Ml => "ml",
        }
    }

    /// Whether the method runs once per dictionary.
    pub fn uses_dictionary(self) -> bool {
        self != Method::OracleMmse
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method '{s}' (expected oracle-mmse, l21-cd, l21-direct or ml)")))
    }
}

/// How the rows of each selection are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// `m` distinct components.
    Distinct,
    /// Each row picks a component independently; repeats allowed.
    Independent,
}

impl FromStr for SelectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distinct" => Ok(Self::Distinct),
            "independent" => Ok(Self::Independent),
            _ => Err(Error::Parse(format!("unknown selection rule '{s}' (expected distinct or independent)"))),
        }
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Distinct => "distinct",
            Self::Independent => "independent",
        })
    }
}

/// What `10^(−SNR/10)` measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScale {
    /// The variance of each complex noise sample.
    Complex,
    /// The variance of each real and imaginary part, so σ² is twice as large.
    RealPart,
}

impl NoiseScale {
    /// Complex noise variance σ² at the given SNR.
    pub fn variance(self, snr_db: f64) -> f64 {
        match self {
            Self::Complex => noise_variance_for_snr(snr_db),
            Self::RealPart => 2.0 * noise_variance_for_snr(snr_db),
        }
    }
}

impl FromStr for NoiseScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complex" => Ok(Self::Complex),
            "real" => Ok(Self::RealPart),
            _ => Err(Error::Parse(format!("unknown noise scale '{s}' (expected complex or real)"))),
        }
    }
}

impl fmt::Display for NoiseScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Complex => "complex",
            Self::RealPart => "real",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m_fraction: f64,
    /// Samples per trial.
    pub samples: usize,
    pub trials: usize,
    pub snr_db: Vec<f64>,
    /// Angular support Ξ° of the diffuse signal spectrum.
    pub support: (f64, f64),
    pub grid_sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub base_seed: u64,
    pub selection: SelectionRule,
    pub noise: NoiseScale,
    pub g_options: SolveOptions,
    pub ml_options: SolveOptions,
    pub direct_options: DirectOptions,
    /// Record wall-clock times; otherwise `wall_ms` is 0 and output is reproducible.
    pub timings: bool,
}

/// Coordinate-descent settings used by experiments.
pub fn experiment_solve_options() -> SolveOptions {
    SolveOptions { objective_tolerance: 1e-6, ..SolveOptions::default() }
}

impl Default for ExperimentConfig {
    /// Small smoke configuration: n = 16, T = 20, five trials.
    fn default() -> Self {
        Self {
            n: 16,
            m_fraction: 0.5,
            samples: 20,
            trials: 5,
            snr_db: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            support: (-0.1, 0.1),
            grid_sizes: vec![16, 32],
            methods: vec![Method::OracleMmse, Method::L21Cd, Method::Ml],
            base_seed: 1,
            selection: SelectionRule::Distinct,
            noise: NoiseScale::Complex,
            g_options: experiment_solve_options(),
            ml_options: experiment_solve_options(),
            direct_options: DirectOptions::default(),
            timings: false,
        }
    }
}

impl ExperimentConfig {
    /// Full-scale NMSE-versus-SNR sweep: n = 64, m = 32, T = 100,
    /// 100 trials, 0 to 40 dB in 5 dB steps, G ∈ {64, 128, 512}, with rows
    /// selected independently and SNR counted per real dimension.
    pub fn full() -> Self {
        Self {
            n: 64,
            samples: 100,
            trials: 100,
            snr_db: (0..=8).map(|k| 5.0 * k as f64).collect(),
            grid_sizes: vec![64, 128, 512],
            selection: SelectionRule::Independent,
            noise: NoiseScale::RealPart,
            ..Self::default()
        }
    }

    /// `round(m_fraction · n)`.
    pub fn m(&self) -> usize {
        (self.m_fraction * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.m_fraction > 0.0 && self.m_fraction <= 1.0) {
            return bad(format!("m fraction {} must lie in (0, 1]", self.m_fraction));
        }
        if self.m() == 0 {
            return bad(format!("m fraction {} selects no component of n = {}", self.m_fraction, self.n));
        }
        if self.samples == 0 || self.trials == 0 {
            return bad("T and trials must be positive".into());
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("SNR list must be nonempty and finite".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {m} listed twice"));
            }
        }
        if self.methods.iter().any(|m| m.uses_dictionary()) && self.grid_sizes.is_empty() {
            return bad("dictionary methods need at least one grid size".into());
        }
        if self.grid_sizes.iter().any(|&g| g == 0) {
            return bad("grid sizes must be positive".into());
        }
        if !(self.support.0 < self.support.1 && self.support.0 >= -1.0 && self.support.1 <= 1.0) {
            return bad(format!(
                "angular support [{}, {}] must be a nonempty subinterval of [-1, 1]",
                self.support.0, self.support.1
            ));
        }
        Ok(())
    }

    /// Applies one `key=value` setting; keys are the long CLI flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "n" => self.n = num(key, value)?,
            "m-fraction" => self.m_fraction = num(key, value)?,
            "t" => self.samples = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "snr" => self.snr_db = parse_snr_list(value)?,
            "xi-min" => self.support.0 = num(key, value)?,
            "xi-max" => self.support.1 = num(key, value)?,
            "grid-sizes" => self.grid_sizes = parse_list(value, |v| num(key, v))?,
            "methods" => self.methods = parse_list(value, str::parse)?,
            "seed" => self.base_seed = num(key, value)?,
            "selection" => self.selection = value.parse()?,
            "noise" => self.noise = value.parse()?,
            "timings" => self.timings = num(key, value)?,
            _ => return Err(Error::Parse(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    /// Applies a plain-text file of `key=value` lines; `#` starts a comment.
    pub fn apply_settings(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }
}

fn parse_list<T>(value: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(|v| item(v.trim())).collect()
}

/// `start:step:stop` (inclusive) or a comma-separated list.
pub fn parse_snr_list(value: &str) -> Result<Vec<f64>> {
    let num = |v: &str| -> Result<f64> {
        v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("snr: cannot parse '{v}'")))
    };
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        [start, step, stop] => {
            let (start, step, stop) = (num(start)?, num(step)?, num(stop)?);
            if !(step > 0.0) || stop < start {
                return Err(Error::Parse(format!("snr range '{value}' needs step > 0 and stop ≥ start")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=count).map(|k| start + step * k as f64).collect())
        }
        [_] => parse_list(value, num),
        _ => Err(Error::Parse(format!("snr '{value}' is neither start:step:stop nor a list"))),
    }
}

/// `Σ_s‖ĥ(s) − h(s)‖² / Σ_s‖h(s)‖²`.
pub fn nmse(truth: &SignalBatch, est: &EstimateBatch) -> Result<f64> {
    if truth.samples.shape() != est.signals.shape() {
        return Err(Error::Dimension(format!(
            "truth is {:?}, estimate is {:?}",
            truth.samples.shape(),
            est.signals.shape()
        )));
    }
    let energy = column_energy(&truth.samples);
    if energy == 0.0 {
        return Err(Error::Domain("NMSE is undefined for an all-zero signal batch".into()));
    }
    Ok(column_energy(&(&est.signals - &truth.samples)) / energy)
}

/// One (method, G, SNR, trial) cell. `grid_size` is 0 for the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub method: Method,
    pub grid_size: usize,
    pub snr_db: f64,
    pub trial: usize,
    pub nmse: f64,
    pub wall_ms: f64,
    /// Sweeps or iterations of the underlying solver; 0 for the oracle.
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub grid_size: usize,
    pub snr_db: f64,
    pub mean_nmse: f64,
    /// Standard error of the mean; 0 for a single trial.
    pub stderr: f64,
    pub trials: usize,
}

/// A cell whose solver failed.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedCell {
    pub method: Method,
    pub grid_size: usize,
    pub snr_db: f64,
    pub trial: usize,
    pub error: String,
}

impl fmt::Display for FailedCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} G={} snr_db={} trial={}: {}",
            self.method, self.grid_size, self.snr_db, self.trial, self.error
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Not serialized.
    pub failures: Vec<FailedCell>,
}

const RECORD_HEADER: &str = "method,grid_size,snr_db,trial,nmse,wall_ms,sweeps";
const AGGREGATE_HEADER: &str = "method,grid_size,snr_db,mean_nmse,stderr,trials";

/// Mean and standard error per (method, G, SNR), in order of first appearance.
pub fn aggregate(records: &[TrialRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(Method, usize, f64)> = Vec::new();
    for r in records {
        let key = (r.method, r.grid_size, r.snr_db);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, grid_size, snr_db)| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.grid_size == grid_size && r.snr_db == snr_db)
                .map(|r| r.nmse)
                .collect();
            let k = values.len() as f64;
            let mean = values.iter().sum::<f64>() / k;
            let stderr = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            Aggregate { method, grid_size, snr_db, mean_nmse: mean, stderr, trials: values.len() }
        })
        .collect()
}

impl ResultTable {
    pub fn from_records(records: Vec<TrialRecord>, failures: Vec<FailedCell>) -> Self {
        let aggregates = aggregate(&records);
        Self { records, aggregates, failures }
    }

    /// Aggregate for one cell, if any trial succeeded.
    pub fn mean(&self, method: Method, grid_size: usize, snr_db: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.grid_size == grid_size && a.snr_db == snr_db)
    }

    /// Trial rows and aggregate rows as CSV text.
    pub fn to_csv(&self) -> (String, String) {
        let mut records = format!("{RECORD_HEADER}\n");
        for r in &self.records {
            records.push_str(&format!(
                "{},{},{:.16e},{},{:.16e},{:.16e},{}\n",
                r.method, r.grid_size, r.snr_db, r.trial, r.nmse, r.wall_ms, r.sweeps
            ));
        }
        let mut aggregates = format!("{AGGREGATE_HEADER}\n");
        for a in &self.aggregates {
            aggregates.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{}\n",
                a.method, a.grid_size, a.snr_db, a.mean_nmse, a.stderr, a.trials
            ));
        }
        (records, aggregates)
    }

    pub fn from_csv(records: &str, aggregates: &str) -> Result<Self> {
        let rows = |text: &str, header: &str, width: usize| -> Result<Vec<Vec<String>>> {
            let mut lines = text.lines();
            if lines.next() != Some(header) {
                return Err(Error::Parse(format!("expected header '{header}'")));
            }
            lines
                .filter(|l| !l.is_empty())
                .map(|l| {
                    let fields: Vec<String> = l.split(',').map(str::to_string).collect();
                    if fields.len() == width {
                        Ok(fields)
                    } else {
                        Err(Error::Parse(format!("expected {width} fields in '{l}'")))
                    }
                })
                .collect()
        };
        fn field<T: FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Parse(format!("bad field '{s}'")))
        }
        let records = rows(records, RECORD_HEADER, 7)?
            .iter()
            .map(|f| {
                Ok(TrialRecord {
                    method: f[0].parse()?,
                    grid_size: field(&f[1])?,
                    snr_db: field(&f[2])?,
                    trial: field(&f[3])?,
                    nmse: field(&f[4])?,
                    wall_ms: field(&f[5])?,
                    sweeps: field(&f[6])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregates = rows(aggregates, AGGREGATE_HEADER, 6)?
            .iter()
            .map(|f| {
                Ok(Aggregate {
                    method: f[0].parse()?,
                    grid_size: field(&f[1])?,
                    snr_db: field(&f[2])?,
                    mean_nmse: field(&f[3])?,
                    stderr: field(&f[4])?,
                    trials: field(&f[5])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, aggregates, failures: Vec::new() })
    }

    /// Writes `path` and its `.agg.csv` sibling.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (records, aggregates) = self.to_csv();
        fs::write(path, records)?;
        fs::write(aggregate_path(path), aggregates)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?, &fs::read_to_string(aggregate_path(path))?)
    }
}

/// `out.csv` → `out.agg.csv`; other names get `.agg.csv` appended.
pub fn aggregate_path(path: &Path) -> PathBuf {
    let name = path.to_string_lossy();
    let stem = name.strip_suffix(".csv").unwrap_or(&name);
    PathBuf::from(format!("{stem}.agg.csv"))
}

struct Context {
    cov: CovarianceModel,
    dicts: Vec<Dictionary>,
}

struct Cell {
    key: (usize, usize, usize),
    outcome: std::result::Result<TrialRecord, FailedCell>,
}

fn estimate(
    method: Method,
    cfg: &ExperimentConfig,
    cov: &CovarianceModel,
    dict: Option<&Dictionary>,
    proj: &ProjectionSet,
    sketches: &SketchSet,
) -> Result<(EstimateBatch, usize)> {
    let dict = || dict.ok_or_else(|| Error::Domain(format!("{method} needs a dictionary")));
    match method {
        Method::OracleMmse => Ok((oracle_mmse(cov, proj, sketches, sketches.noise_variance)?, 0)),
        Method::L21Cd => {
            let fit = solve_g(sketches, proj, dict()?, &cfg.g_options)?;
            Ok((plug_in_mmse(&fit.gamma, dict()?, proj, sketches)?, fit.sweeps))
        }
        Method::Ml => {
            let fit = solve_ml(sketches, proj, dict()?, sketches.noise_variance, &cfg.ml_options)?;
            Ok((plug_in_mmse(&fit.gamma, dict()?, proj, sketches)?, fit.sweeps))
        }
        Method::L21Direct => {
            let sol = l21_ls_direct(sketches, proj, dict()?, sketches.regularization, &cfg.direct_options)?;
            Ok((coefficients_to_signals(&sol.coefficients, dict()?)?, sol.iterations))
        }
    }
}

fn run_trial(cfg: &ExperimentConfig, ctx: &Context, trial: usize) -> Result<Vec<Cell>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed ^ trial as u64);
    let signals = sample_signals(&ctx.cov, cfg.samples, &mut rng)?;
    let proj = match cfg.selection {
        SelectionRule::Distinct => sample_selection_projections(cfg.n, cfg.m(), cfg.samples, &mut rng)?,
        SelectionRule::Independent => sample_independent_selections(cfg.n, cfg.m(), cfg.samples, &mut rng)?,
    };
    let mut cells = Vec::new();
    for (si, &snr_db) in cfg.snr_db.iter().enumerate() {
        let noise = UnitNoise::draw(cfg.m(), cfg.samples, &mut rng);
        let sketches = sketch_with_noise(&signals, &proj, &noise, cfg.noise.variance(snr_db))?;
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let dicts: Vec<(usize, Option<&Dictionary>)> = if method.uses_dictionary() {
                ctx.dicts.iter().enumerate().map(|(gi, d)| (gi, Some(d))).collect()
            } else {
                vec![(0, None)]
            };
            for (gi, dict) in dicts {
                let grid_size = dict.map_or(0, Dictionary::size);
                let start = Instant::now();
                let result = estimate(method, cfg, &ctx.cov, dict, &proj, &sketches)
                    .and_then(|(est, sweeps)| Ok((nmse(&signals, &est)?, sweeps)));
                let wall_ms = if cfg.timings { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
                let outcome = match result {
                    Ok((nmse, sweeps)) => {
                        Ok(TrialRecord { method, grid_size, snr_db, trial, nmse, wall_ms, sweeps })
                    }
                    Err(e) => Err(FailedCell { method, grid_size, snr_db, trial, error: e.to_string() }),
                };
                cells.push(Cell { key: (mi, gi, si), outcome });
            }
        }
    }
    Ok(cells)
}

/// Runs every (method, G, SNR) cell on every trial, trials in parallel.
///
/// Solver failures become [`FailedCell`]s; errors in drawing a trial abort
/// the run. Rows are ordered by method, G, SNR and trial, so the table does
/// not depend on the thread count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let ctx = Context {
        cov: diffuse_covariance(cfg.n, cfg.support)?,
        dicts: if cfg.methods.iter().any(|m| m.uses_dictionary()) {
            cfg.grid_sizes.iter().map(|&g| Dictionary::grid(cfg.n, g)).collect::<Result<_>>()?
        } else {
            Vec::new()
        },
    };
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &ctx, t))
        .collect::<Result<Vec<_>>>()?;
    let mut cells: Vec<(usize, Cell)> = per_trial
        .into_iter()
        .enumerate()
        .flat_map(|(t, cells)| cells.into_iter().map(move |c| (t, c)))
        .collect();
    cells.sort_by_key(|(t, c)| (c.key, *t));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (_, cell) in cells {
        match cell.outcome {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(ResultTable::from_records(records, failures))
}
