//! Reference solutions, error measurement, rate fitting and convergence
//! studies.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{first_order_approx, homogenized_tensor, solve_corrector, CorrectorSet};
use crate::coeff::{check_ellipticity_random, CoefficientField, FieldDescriptor, Tensor};
use crate::error::{MsfemError, Result};
use crate::fem::{solve_p1, FeFunction, Material, Source};
use crate::mesh::{build_structured_triangulation, Rect, RefinedGrid};
use crate::config::SolveConfig;
use crate::msfem::{
    assemble_msfem, build_basis, build_basis_cached, error_suite, solve_msfem, BasisOptions, DiscreteSolution,
    ErrorRecord, Mode, MsBasis, MsSystem, Normalization,
};
use crate::plot::{loglog_svg, Series};
use crate::solver::{SolveReport, SolverOptions};

pub const DEFAULT_REFERENCE_RATIO: f64 = 16.0;
pub const MAX_REFERENCE_DOFS: usize = 8_000_000;

/// `h / eps` window treated as the resonance neighborhood.
pub const RESONANCE_WINDOW: (f64, f64) = (0.5, 2.0);

pub fn resonance_risk(h: f64, eps: f64) -> bool {
    let r = h / eps;
    r >= RESONANCE_WINDOW.0 && r <= RESONANCE_WINDOW.1
}

/// Fine P1 approximation of `u^eps` on a structured grid.
#[derive(Debug, Clone)]
pub struct Reference {
    pub eps: f64,
    pub grid: RefinedGrid,
    pub u: FeFunction,
    pub report: SolveReport,
}

impl Reference {
    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn spacing(&self) -> f64 {
        self.grid.domain.width().max(self.grid.domain.height()) / self.grid.n as f64
    }
}

fn odd_part(mut n: usize) -> usize {
    while n > 0 && n % 2 == 0 {
        n /= 2;
    }
    n
}

/// Smallest `N = n0 2^k` with spacing at most `eps / ratio` that every
/// coarse size in `coarse_n` divides (they must share the odd part `n0`).
pub fn reference_grid_size(domain: Rect, eps: f64, ratio: f64, coarse_n: &[usize]) -> Result<usize> {
    if !(eps > 0.0 && ratio > 0.0) {
        return Err(MsfemError::invalid("eps and the reference ratio must be positive"));
    }
    let n0 = coarse_n.first().map_or(1, |&n| odd_part(n));
    if coarse_n.iter().any(|&n| n == 0 || odd_part(n) != n0) {
        return Err(MsfemError::invalid(format!(
            "coarse grid sizes {coarse_n:?} are not nested (they must differ by powers of two)"
        )));
    }
    let side = domain.width().max(domain.height());
    let target = eps / ratio;
    let max_n = coarse_n.iter().copied().max().unwrap_or(1);
    let mut n = n0;
    while n < max_n || side / n as f64 > target * (1.0 + 1e-12) {
        n *= 2;
        if n > 1 << 24 {
            return Err(MsfemError::TooLarge(format!("reference grid for eps = {eps}")));
        }
    }
    Ok(n)
}

/// Fine reference on an `n_ref x n_ref` grid; refuses more than `max_dofs` unknowns.
pub fn reference_solution(
    domain: Rect,
    field: &CoefficientField,
    eps: f64,
    n_ref: usize,
    source: &Source,
    tol: f64,
    max_dofs: usize,
) -> Result<Reference> {
    let dofs = (n_ref + 1) * (n_ref + 1) * field.m();
    if dofs > max_dofs {
        return Err(MsfemError::TooLarge(format!(
            "reference solve with {dofs} unknowns exceeds the limit of {max_dofs}"
        )));
    }
    let grid = RefinedGrid::new(domain, n_ref)?;
    let material = Material::oscillating(field, eps)?;
    let opts = SolverOptions::with_tol(tol);
    let (u, report) = solve_p1(grid.mesh.clone(), Some(&grid.hierarchy), material, source, &opts)?;
    log::info!(
        "reference eps={eps} n={n_ref}: {} iterations, residual {:.2e}",
        report.iterations,
        report.residual
    );
    Ok(Reference { eps, grid, u, report })
}

/// P1 solution of the homogenized problem on an `n x n` grid.
pub fn homogenized_solution(
    domain: Rect,
    a_hat: &Tensor,
    n: usize,
    source: &Source,
    tol: f64,
) -> Result<(RefinedGrid, FeFunction, SolveReport)> {
    let grid = RefinedGrid::new(domain, n)?;
    let (u, report) = solve_p1(
        grid.mesh.clone(),
        Some(&grid.hierarchy),
        Material::Constant(*a_hat),
        source,
        &SolverOptions::with_tol(tol),
    )?;
    Ok((grid, u, report))
}

pub fn h1_norm(f: &FeFunction) -> f64 {
    f.l2_norm().hypot(f.h1_seminorm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderError {
    /// `||u_ref - u_1||_{H1}` with `u_1 = u0 + eps chi(x/eps) grad u0`.
    pub with_corrector: f64,
    /// `||u_ref - u0||_{H1}`.
    pub without_corrector: f64,
}

/// `u0` must live on the mesh of `u_ref`.
pub fn first_order_error(
    u_ref: &FeFunction,
    u0: &FeFunction,
    correctors: &CorrectorSet,
    eps: f64,
) -> Result<FirstOrderError> {
    let u1 = first_order_approx(u0, correctors, eps, u_ref.mesh.clone(), None)?;
    Ok(FirstOrderError {
        with_corrector: h1_norm(&u_ref.sub(&u1)?),
        without_corrector: h1_norm(&u_ref.sub(u0)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest relative deviation of the data from the fitted power law.
    pub residual: f64,
}

/// Least-squares slope of `log error` against `log scale`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<Fit> {
    if points.len() < 3 {
        return Err(MsfemError::invalid(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(MsfemError::invalid(format!("rate fit needs positive data, got {p:?}")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MsfemError::invalid("rate fit needs at least two distinct scales"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| ((y - intercept - slope * x).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Fit {
        slope,
        intercept,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    Plain,
    Oversampled,
    HomogenizedP1,
    FineP1,
}

impl StudyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StudyMode::Plain => "plain",
            StudyMode::Oversampled => "oversampled",
            StudyMode::HomogenizedP1 => "homogenized_p1",
            StudyMode::FineP1 => "fine_p1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "energy_broken")]
    EnergyBroken,
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "L3/2")]
    L3Over2,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::EnergyBroken, Norm::L2, Norm::L3Over2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Norm::EnergyBroken => "energy_broken",
            Norm::L2 => "L2",
            Norm::L3Over2 => "L3/2",
        }
    }

    pub fn pick(&self, e: &ErrorRecord) -> f64 {
        match self {
            Norm::EnergyBroken => e.energy_broken,
            Norm::L2 => e.l2,
            Norm::L3Over2 => e.l3_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitVariable {
    H,
    Eps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    FixEpsSweepH {
        eps: f64,
        h: Vec<f64>,
    },
    FixHSweepEps {
        h: f64,
        eps: Vec<f64>,
    },
    /// `h = scale * eps^exponent`.
    LockRatio {
        eps: Vec<f64>,
        #[serde(default = "half")]
        exponent: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Pairs {
        pairs: Vec<[f64; 2]>,
    },
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

impl Sweep {
    /// `(h, eps)` cells in declaration order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        match self {
            Sweep::FixEpsSweepH { eps, h } => h.iter().map(|&h| (h, *eps)).collect(),
            Sweep::FixHSweepEps { h, eps } => eps.iter().map(|&e| (*h, e)).collect(),
            Sweep::LockRatio { eps, exponent, scale } => eps.iter().map(|&e| (scale * e.powf(*exponent), e)).collect(),
            Sweep::Pairs { pairs } => pairs.iter().map(|p| (p[0], p[1])).collect(),
        }
    }

    pub fn variable(&self) -> Option<FitVariable> {
        match self {
            Sweep::FixEpsSweepH { .. } => Some(FitVariable::H),
            Sweep::FixHSweepEps { .. } | Sweep::LockRatio { .. } => Some(FitVariable::Eps),
            Sweep::Pairs { pairs } => {
                if pairs.windows(2).all(|w| w[0][1] == w[1][1]) {
                    Some(FitVariable::H)
                } else if pairs.windows(2).all(|w| w[0][0] == w[1][0]) {
                    Some(FitVariable::Eps)
                } else {
                    None
                }
            }
        }
    }

    /// Whether fits drop points in the resonance neighborhood.
    fn excludes_resonance(&self) -> bool {
        !matches!(self, Sweep::LockRatio { .. })
    }
}

fn default_name() -> String {
    "study".into()
}
fn default_modes() -> Vec<StudyMode> {
    vec![StudyMode::Oversampled]
}
fn default_dilation() -> f64 {
    2.0
}
fn default_ratio() -> f64 {
    DEFAULT_REFERENCE_RATIO
}
fn default_max_dofs() -> usize {
    MAX_REFERENCE_DOFS
}
fn default_norms() -> Vec<Norm> {
    Norm::ALL.to_vec()
}
fn default_n_cell() -> usize {
    crate::cell::DEFAULT_N_CELL
}
fn default_tol() -> f64 {
    1e-10
}
fn default_reference_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub field: FieldDescriptor,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub domain: Rect,
    pub sweep: Sweep,
    #[serde(default = "default_modes")]
    pub modes: Vec<StudyMode>,
    #[serde(default = "default_dilation")]
    pub dilation: f64,
    #[serde(default)]
    pub normalization: Normalization,
    /// Reference spacing is at most `eps / reference_ratio`.
    #[serde(default = "default_ratio")]
    pub reference_ratio: f64,
    #[serde(default = "default_max_dofs")]
    pub max_reference_dofs: usize,
    #[serde(default = "default_norms")]
    pub norms: Vec<Norm>,
    /// Cell resolution for the homogenized tensor.
    #[serde(default = "default_n_cell")]
    pub n_cell: usize,
    /// Tolerance of local and coarse solves.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    /// Also compare against a reference with half the spacing.
    #[serde(default)]
    pub self_check: bool,
    /// Seed for random-direction ellipticity sampling.
    #[serde(default)]
    pub seed: u64,
}

impl StudyConfig {
    pub fn new(field: FieldDescriptor, sweep: Sweep, modes: Vec<StudyMode>) -> Self {
        StudyConfig {
            name: default_name(),
            field,
            source: Source::default(),
            domain: Rect::UNIT,
            sweep,
            modes,
            dilation: default_dilation(),
            normalization: Normalization::default(),
            reference_ratio: default_ratio(),
            max_reference_dofs: default_max_dofs(),
            norms: default_norms(),
            n_cell: default_n_cell(),
            tol: default_tol(),
            reference_tol: default_reference_tol(),
            self_check: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let cells = self.sweep.cells();
        if cells.is_empty() {
            return Err(MsfemError::invalid("the sweep is empty"));
        }
        if self.modes.is_empty() {
            return Err(MsfemError::invalid("no modes selected"));
        }
        if self.norms.is_empty() {
            return Err(MsfemError::invalid("no norms selected"));
        }
        if !(self.dilation >= 1.0) {
            return Err(MsfemError::invalid("dilation must be at least 1"));
        }
        if !(self.reference_ratio >= 1.0) {
            return Err(MsfemError::invalid("reference_ratio must be at least 1"));
        }
        if !(self.tol > 0.0 && self.reference_tol > 0.0) {
            return Err(MsfemError::invalid("tolerances must be positive"));
        }
        for &(h, eps) in &cells {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(MsfemError::invalid(format!("eps must be positive, got {eps}")));
            }
            coarse_size(self.domain, h)?;
        }
        Ok(())
    }
}

/// Number of cells per side for mesh size `h`.
pub fn coarse_size(domain: Rect, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(MsfemError::invalid(format!("h must be positive, got {h}")));
    }
    let n = (domain.width() / h).round();
    if n < 1.0 || (domain.width() / n - h).abs() > 1e-9 * h {
        return Err(MsfemError::invalid(format!(
            "h = {h} does not divide the domain width {}",
            domain.width()
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub h: f64,
    pub eps: f64,
    pub mode: StudyMode,
    pub norm: Norm,
    pub error: f64,
    pub iters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub h: f64,
    pub eps: f64,
    pub mode: StudyMode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub mode: StudyMode,
    pub norm: Norm,
    pub variable: FitVariable,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub points: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: StudyMode,
    /// Energy error at `h = eps` exceeds the errors at `h = 4 eps` and
    /// `h = eps/4` (those of the two present in the sweep).
    pub resonance: bool,
    /// Energy error is not monotone in `h` and its minimum is interior.
    pub interior_minimum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub eps: f64,
    pub n: usize,
    pub spacing: f64,
    pub dofs: usize,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub name: String,
    pub rows: Vec<StudyRow>,
    pub fits: Vec<RateFit>,
    pub resonance: bool,
    pub modes: Vec<ModeSummary>,
    pub references: Vec<ReferenceInfo>,
    pub failures: Vec<CellFailure>,
    pub complete: bool,
    pub homogenized: Option<Tensor>,
    /// Largest relative change of any error when the reference spacing is halved.
    pub reference_change: Option<f64>,
}

impl RateReport {
    pub const CSV_HEADER: &'static str = "h,eps,mode,norm,error,iters,seconds";

    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// CSV without the wall-time column, for reproducibility checks.
    pub fn to_csv_untimed(&self) -> String {
        self.csv(false)
    }

    fn csv(&self, timed: bool) -> String {
        let mut s = String::from(if timed { Self::CSV_HEADER } else { "h,eps,mode,norm,error,iters" });
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}", r.h, r.eps, r.mode.as_str(), r.norm.as_str(), r.error, r.iters));
            if timed {
                s.push_str(&format!(",{:.3}", r.seconds));
            }
            s.push('\n');
        }
        s
    }

    /// Machine-readable summary: fits, flags and failures (no rows, no timings).
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "complete": self.complete,
            "resonance": self.resonance,
            "modes": self.modes,
            "fits": self.fits,
            "references": self.references,
            "failures": self.failures,
            "homogenized": self.homogenized,
            "reference_change": self.reference_change,
        })
    }

    pub fn fit(&self, mode: StudyMode, norm: Norm) -> Option<&RateFit> {
        self.fits.iter().find(|f| f.mode == mode && f.norm == norm)
    }

    pub fn error(&self, mode: StudyMode, norm: Norm, h: f64, eps: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.norm == norm && close(r.h, h) && close(r.eps, eps))
            .map(|r| r.error)
    }

    pub fn mode_summary(&self, mode: StudyMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// One log-log plot per norm: error against the swept variable, one curve
    /// per mode (and per fixed value of the other variable).
    pub fn plots(&self) -> Vec<(String, String)> {
        let by_h = !self.fits.iter().any(|f| f.variable == FitVariable::Eps)
            && (self.rows.iter().map(|r| r.h.to_bits()).collect::<std::collections::BTreeSet<_>>().len() > 1
                || self.rows.is_empty());
        let mut out = Vec::new();
        let norms: Vec<Norm> = {
            let mut v: Vec<Norm> = self.rows.iter().map(|r| r.norm).collect();
            v.sort();
            v.dedup();
            v
        };
        for norm in norms {
            let mut groups: BTreeMap<(StudyMode, u64), Vec<(f64, f64)>> = BTreeMap::new();
            for r in self.rows.iter().filter(|r| r.norm == norm) {
                let (x, other) = if by_h { (r.h, r.eps) } else { (r.eps, r.h) };
                groups.entry((r.mode, other.to_bits())).or_default().push((x, r.error));
            }
            let multi = groups.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().len() > 1;
            let series: Vec<Series> = groups
                .into_iter()
                .map(|((mode, other), points)| Series {
                    label: if multi {
                        format!("{} {}={}", mode.as_str(), if by_h { "eps" } else { "h" }, f64::from_bits(other))
                    } else {
                        mode.as_str().to_string()
                    },
                    points,
                })
                .collect();
            let xlabel = if by_h { "h" } else { "eps" };
            let svg = loglog_svg(
                &format!("{}: {} error", self.name, norm.as_str()),
                xlabel,
                &format!("{} error", norm.as_str()),
                &series,
            );
            let file = format!("error_{}_vs_{xlabel}.svg", norm.as_str().replace('/', "_"));
            out.push((file, svg));
        }
        out
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

struct CellOutcome {
    errors: ErrorRecord,
    check: Option<ErrorRecord>,
    iters: usize,
    seconds: f64,
}

struct StudyContext<'a> {
    config: &'a StudyConfig,
    field: &'a CoefficientField,
    a_hat: Option<Tensor>,
    cache: Option<&'a Path>,
}

/// Basis family and coefficient a study mode solves with.
pub fn mode_material<'a>(
    mode: StudyMode,
    field: &'a CoefficientField,
    eps: f64,
    a_hat: Option<Tensor>,
) -> Result<(Mode, Material<'a>)> {
    let oscillating = Material::oscillating(field, eps)?;
    Ok(match mode {
        StudyMode::Plain => (Mode::Plain, oscillating),
        StudyMode::Oversampled => (Mode::Oversampled, oscillating),
        StudyMode::FineP1 => (Mode::Linear, oscillating),
        StudyMode::HomogenizedP1 => (
            Mode::Linear,
            Material::Constant(a_hat.ok_or_else(|| MsfemError::invalid("homogenized tensor missing"))?),
        ),
    })
}

/// Everything produced by a single solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub n: usize,
    pub basis: MsBasis,
    pub system: MsSystem,
    pub solution: DiscreteSolution,
}

/// One coarse solve as described by `cfg`.
pub fn run_solve(cfg: &SolveConfig, cache: Option<&Path>) -> Result<SolveOutcome> {
    cfg.domain.validate()?;
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(MsfemError::invalid(format!("eps must be positive, got {}", cfg.eps)));
    }
    let n = coarse_size(cfg.domain, cfg.h)?;
    let field = cfg.field.build()?;
    check_ellipticity_random(&field, 32, 16, cfg.seed)?;
    let a_hat = if cfg.mode == StudyMode::HomogenizedP1 {
        let chi = solve_corrector(&field, cfg.n_cell)?;
        Some(homogenized_tensor(&field, &chi)?.tensor)
    } else {
        None
    };
    let (mode, material) = mode_material(cfg.mode, &field, cfg.eps, a_hat)?;
    let coarse = Arc::new(build_structured_triangulation(cfg.domain, n)?);
    let opts = BasisOptions {
        mode,
        dilation: cfg.dilation,
        fine_target_h: cfg.fine_target_h,
        levels: cfg.levels,
        normalization: cfg.normalization,
        tol: cfg.tol,
    };
    let basis = build_basis_cached(coarse, cfg.domain, &material, &opts, cache)?;
    let system = assemble_msfem(&basis, &material, &cfg.source)?;
    let solution = solve_msfem(&system, mode, &SolverOptions::with_tol(cfg.tol))?;
    Ok(SolveOutcome {
        n,
        basis,
        system,
        solution,
    })
}

fn run_cell(
    ctx: &StudyContext<'_>,
    reference: &Reference,
    check: Option<&Reference>,
    h: f64,
    mode: StudyMode,
) -> Result<CellOutcome> {
    let start = Instant::now();
    let cfg = ctx.config;
    let n = coarse_size(cfg.domain, h)?;
    let coarse = Arc::new(build_structured_triangulation(cfg.domain, n)?);
    let ratio = reference.n() / n;
    if ratio * n != reference.n() || !ratio.is_power_of_two() {
        return Err(MsfemError::invalid(format!(
            "coarse grid {n} does not nest in the reference grid {}",
            reference.n()
        )));
    }
    let levels = ratio.trailing_zeros() as usize;
    let (basis_mode, material) = mode_material(mode, ctx.field, reference.eps, ctx.a_hat)?;
    let opts = BasisOptions {
        mode: basis_mode,
        dilation: cfg.dilation,
        fine_target_h: None,
        levels: Some(levels),
        normalization: cfg.normalization,
        tol: cfg.tol,
    };
    let basis = if basis_mode == Mode::Linear {
        build_basis(coarse, cfg.domain, &material, &opts)?
    } else {
        build_basis_cached(coarse, cfg.domain, &material, &opts, ctx.cache)?
    };
    let system = assemble_msfem(&basis, &material, &cfg.source)?;
    let sol = solve_msfem(&system, basis_mode, &SolverOptions::with_tol(cfg.tol))?;
    let errors = error_suite(&sol, &basis, &reference.grid, &reference.u)?;
    let check = match check {
        Some(r) => Some(error_suite(&sol, &basis, &r.grid, &r.u)?),
        None => None,
    };
    Ok(CellOutcome {
        errors,
        check,
        iters: sol.report.iterations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every `(h, eps, mode)` cell of the study on `workers` threads.
/// Cell failures are recorded in the report; configuration problems and
/// non-elliptic fields are errors.
pub fn run_study(config: &StudyConfig, workers: usize, cache: Option<&Path>) -> Result<RateReport> {
    config.validate()?;
    let field = config.field.build()?;
    check_ellipticity_random(&field, 32, 16, config.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| MsfemError::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_study_inner(config, &field, cache))
}

fn run_study_inner(config: &StudyConfig, field: &CoefficientField, cache: Option<&Path>) -> Result<RateReport> {
    let oscillating = !field.is_constant();
    let a_hat = if config.modes.contains(&StudyMode::HomogenizedP1) {
        let chi = solve_corrector(field, config.n_cell)?;
        Some(homogenized_tensor(field, &chi)?.tensor)
    } else {
        None
    };
    let ctx = StudyContext {
        config,
        field,
        a_hat,
        cache,
    };

    let cells = config.sweep.cells();
    let mut eps_values: Vec<f64> = cells.iter().map(|c| c.1).collect();
    eps_values.sort_by(|a, b| b.total_cmp(a));
    eps_values.dedup_by(|a, b| close(*a, *b));

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut references = Vec::new();
    let mut reference_change: Option<f64> = None;
    for &eps in &eps_values {
        let hs: Vec<f64> = {
            let mut v: Vec<f64> = cells.iter().filter(|c| close(c.1, eps)).map(|c| c.0).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v.dedup_by(|a, b| close(*a, *b));
            v
        };
        let fail_all = |failures: &mut Vec<CellFailure>, msg: String| {
            for &h in &hs {
                for &mode in &config.modes {
                    failures.push(CellFailure {
                        h,
                        eps,
                        mode,
                        message: msg.clone(),
                    });
                }
            }
        };
        let ns: Vec<usize> = hs.iter().map(|&h| coarse_size(config.domain, h)).collect::<Result<_>>()?;
        let reference = reference_grid_size(config.domain, eps, config.reference_ratio, &ns).and_then(|n_ref| {
            reference_solution(
                config.domain,
                field,
                eps,
                n_ref,
                &config.source,
                config.reference_tol,
                config.max_reference_dofs,
            )
        });
        let reference = match reference {
            Ok(r) => r,
            Err(e) => {
                log::error!("reference for eps = {eps} failed: {e}");
                fail_all(&mut failures, format!("reference solve failed: {e}"));
                continue;
            }
        };
        let check = if config.self_check {
            match reference_solution(
                config.domain,
                field,
                eps,
                reference.n() * 2,
                &config.source,
                config.reference_tol,
                config.max_reference_dofs,
            ) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("reference self-check for eps = {eps} skipped: {e}");
                    None
                }
            }
        } else {
            None
        };
        references.push(ReferenceInfo {
            eps,
            n: reference.n(),
            spacing: reference.spacing(),
            dofs: reference.u.values.len(),
            iterations: reference.report.iterations,
            residual: reference.report.residual,
        });
        let jobs: Vec<(f64, StudyMode)> = hs
            .iter()
            .flat_map(|&h| config.modes.iter().map(move |&m| (h, m)))
            .collect();
        let outcomes: Vec<Result<CellOutcome>> = jobs
            .par_iter()
            .map(|&(h, mode)| run_cell(&ctx, &reference, check.as_ref(), h, mode))
            .collect();
        for (&(h, mode), outcome) in jobs.iter().zip(outcomes) {
            match outcome {
                Ok(o) => {
                    log::info!(
                        "h={h} eps={eps} {}: energy {:.4e} L2 {:.4e} ({:.1}s)",
                        mode.as_str(),
                        o.errors.energy_broken,
                        o.errors.l2,
                        o.seconds
                    );
                    if oscillating && resonance_risk(h, eps) {
                        log::warn!("h={h} is within the resonance window of eps={eps}");
                    }
                    for &norm in &config.norms {
                        rows.push(StudyRow {
                            h,
                            eps,
                            mode,
                            norm,
                            error: norm.pick(&o.errors),
                            iters: o.iters,
                            seconds: o.seconds,
                        });
                        if let Some(c) = &o.check {
                            let (a, b) = (norm.pick(&o.errors), norm.pick(c));
                            let change = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
                            reference_change = Some(reference_change.map_or(change, |r: f64| r.max(change)));
                        }
                    }
                }
                Err(e) => {
                    log::error!("cell h={h} eps={eps} {} failed: {e}", mode.as_str());
                    failures.push(CellFailure {
                        h,
                        eps,
                        mode,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    if let Some(c) = reference_change {
        if c > 0.05 {
            log::warn!("halving the reference spacing changes errors by {:.1}%", 100.0 * c);
        }
    }

    rows.sort_by(|a, b| {
        (a.mode, a.norm)
            .cmp(&(b.mode, b.norm))
            .then(b.eps.total_cmp(&a.eps))
            .then(b.h.total_cmp(&a.h))
    });
    let fits = compute_fits(config, &rows, oscillating);
    let modes = summarize_modes(config, &rows, oscillating);
    let resonance = modes.iter().any(|m| m.resonance);
    Ok(RateReport {
        name: config.name.clone(),
        complete: failures.is_empty(),
        rows,
        fits,
        resonance,
        modes,
        references,
        failures,
        homogenized: a_hat,
        reference_change,
    })
}

fn compute_fits(config: &StudyConfig, rows: &[StudyRow], oscillating: bool) -> Vec<RateFit> {
    let Some(variable) = config.sweep.variable() else {
        return Vec::new();
    };
    let exclude = oscillating && config.sweep.excludes_resonance();
    let mut fits = Vec::new();
    for &mode in &config.modes {
        for &norm in &config.norms {
            let sel: Vec<&StudyRow> = rows.iter().filter(|r| r.mode == mode && r.norm == norm).collect();
            let kept: Vec<(f64, f64)> = sel
                .iter()
                .filter(|r| !(exclude && resonance_risk(r.h, r.eps)))
                .map(|r| match variable {
                    FitVariable::H => (r.h, r.error),
                    FitVariable::Eps => (r.eps, r.error),
                })
                .collect();
            if kept.len() < 3 {
                continue;
            }
            if let Ok(fit) = fit_rate(&kept) {
                fits.push(RateFit {
                    mode,
                    norm,
                    variable,
                    slope: fit.slope,
                    intercept: fit.intercept,
                    residual: fit.residual,
                    points: kept.len(),
                    excluded: sel.len() - kept.len(),
                });
            }
        }
    }
    fits
}

fn summarize_modes(config: &StudyConfig, rows: &[StudyRow], oscillating: bool) -> Vec<ModeSummary> {
    let norm = if config.norms.contains(&Norm::EnergyBroken) {
        Norm::EnergyBroken
    } else {
        config.norms[0]
    };
    config
        .modes
        .iter()
        .map(|&mode| {
            let sel: Vec<&StudyRow> = rows.iter().filter(|r| r.mode == mode && r.norm == norm).collect();
            let find = |h: f64, eps: f64| sel.iter().find(|r| close(r.h, h) && close(r.eps, eps)).map(|r| r.error);
            let mut resonance = false;
            let mut interior_minimum = false;
            let mut eps_values: Vec<f64> = sel.iter().map(|r| r.eps).collect();
            eps_values.dedup_by(|a, b| close(*a, *b));
            for eps in eps_values {
                if let Some(at) = find(eps, eps) {
                    let neighbors: Vec<f64> = [find(4.0 * eps, eps), find(eps / 4.0, eps)].into_iter().flatten().collect();
                    if oscillating && neighbors.len() == 2 && neighbors.iter().all(|&n| at > n) {
                        resonance = true;
                    }
                }
                // refining the mesh into the window makes things worse
                let group: Vec<&&StudyRow> = sel.iter().filter(|r| close(r.eps, eps)).collect();
                if oscillating
                    && group
                        .windows(2)
                        .any(|w| resonance_risk(w[1].h, eps) && w[1].error > w[0].error)
                {
                    resonance = true;
                }
                // rows are sorted by decreasing h within an eps
                let errs: Vec<f64> = sel.iter().filter(|r| close(r.eps, eps)).map(|r| r.error).collect();
                if errs.len() >= 3 {
                    let imin = errs
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    if imin > 0 && imin + 1 < errs.len() {
                        interior_minimum = true;
                    }
                }
            }
            ModeSummary {
                mode,
                resonance,
                interior_minimum,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_rate_exact_power_laws() {
        let hs = [0.25, 0.125, 0.0625, 0.03125];
        let lin: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 3.0 * h)).collect();
        let quad: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 0.7 * h * h)).collect();
        let f1 = fit_rate(&lin).unwrap();
        let f2 = fit_rate(&quad).unwrap();
        assert!((f1.slope - 1.0).abs() < 1e-12 && f1.residual < 1e-12);
        assert!((f2.slope - 2.0).abs() < 1e-12 && f2.residual < 1e-12);
    }

    #[test]
    fn fit_rate_hand_computed() {
        // hand least squares in log2 coordinates: x = -2,-3,-4
        let pts: [(f64, f64); 3] = [(0.25, 1e-1), (0.125, 2.6e-2), (0.0625, 6.2e-3)];
        let y: Vec<f64> = pts.iter().map(|p| p.1.log2()).collect();
        let expect = (y[0] - y[2]) / 2.0;
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope - expect).abs() < 1e-12);
        assert!((f.slope - 2.0).abs() < 0.05);
        assert!(f.residual > 0.0 && f.residual < 0.05);
    }

    #[test]
    fn fit_rate_rejects_bad_input() {
        assert!(fit_rate(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
        assert!(fit_rate(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
        assert!(fit_rate(&[(0.1, 1.0), (0.1, 2.0), (0.1, 1.0)]).is_err());
    }

    #[test]
    fn reference_sizes_nest() {
        let n = reference_grid_size(Rect::UNIT, 1.0 / 64.0, 16.0, &[4, 8, 16, 32, 64]).unwrap();
        assert_eq!(n, 1024);
        let n = reference_grid_size(Rect::UNIT, 0.1, 16.0, &[3, 6]).unwrap();
        assert_eq!(n, 192);
        assert!(reference_grid_size(Rect::UNIT, 0.1, 16.0, &[3, 4]).is_err());
    }

    #[test]
    fn reference_guard() {
        let f = CoefficientField::isotropic(1.0);
        let err = reference_solution(Rect::UNIT, &f, 0.1, 4096, &Source::default(), 1e-8, MAX_REFERENCE_DOFS).unwrap_err();
        assert!(matches!(err, MsfemError::TooLarge(_)), "{err}");
    }

    #[test]
    fn sweep_rules() {
        let s = Sweep::LockRatio {
            eps: vec![1.0 / 16.0, 1.0 / 64.0],
            exponent: 0.5,
            scale: 1.0,
        };
        assert_eq!(s.cells(), vec![(0.25, 1.0 / 16.0), (0.125, 1.0 / 64.0)]);
        assert_eq!(s.variable(), Some(FitVariable::Eps));
        assert!(resonance_risk(0.5, 0.25) && resonance_risk(0.125, 0.25) && !resonance_risk(0.1, 0.25));
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let text = r#"
            name = "demo"
            modes = ["plain", "homogenized_p1"]
            norms = ["energy_broken", "L3/2"]
            [field]
            kind = "laminate"
            a1 = 1.0
            a2 = 4.0
            [sweep]
            rule = "fix_eps_sweep_h"
            eps = 0.125
            h = [0.5, 0.25]
        "#;
        let cfg: StudyConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.modes, vec![StudyMode::Plain, StudyMode::HomogenizedP1]);
        assert_eq!(cfg.norms, vec![Norm::EnergyBroken, Norm::L3Over2]);
        cfg.validate().unwrap();
        let bad = text.replace("name = \"demo\"", "nmae = \"demo\"");
        let err = toml::from_str::<StudyConfig>(&bad).unwrap_err().to_string();
        assert!(err.contains("nmae"), "{err}");
        let mut empty = cfg.clone();
        empty.sweep = Sweep::FixEpsSweepH { eps: 0.1, h: vec![] };
        assert!(empty.validate().is_err());
        let mut off = cfg;
        off.sweep = Sweep::FixEpsSweepH { eps: 0.1, h: vec![0.3] };
        assert!(off.validate().is_err());
    }

    #[test]
    fn small_study_end_to_end() {
        let mut cfg = StudyConfig::new(
            FieldDescriptor::Laminate {
                a1: 1.0,
                a2: 4.0,
                direction: 1,
                fraction: 0.5,
            },
            Sweep::FixEpsSweepH {
                eps: 0.25,
                h: vec![0.5, 0.25, 0.125],
            },
            vec![StudyMode::Plain, StudyMode::FineP1, StudyMode::HomogenizedP1],
        );
        cfg.reference_ratio = 8.0;
        cfg.n_cell = 16;
        let report = run_study(&cfg, 1, None).unwrap();
        assert!(report.complete);
        assert_eq!(report.rows.len(), 3 * 3 * 3);
        assert_eq!(report.references[0].n, 32);
        let csv = report.to_csv();
        assert!(csv.starts_with("h,eps,mode,norm,error,iters,seconds\n"));
        assert_eq!(csv.lines().count(), 28);
        let json = report.summary_json();
        assert!(json["resonance"].is_boolean());
        assert_eq!(report.plots().len(), 3);
        // the fine P1 error is a plain P1 error: it must shrink with h
        let e = |h| report.error(StudyMode::FineP1, Norm::L2, h, 0.25).unwrap();
        assert!(e(0.125) < e(0.5));
    }
}
