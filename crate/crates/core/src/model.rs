//! Endemic-epidemic conditional intensity with constant interaction kernels:
//!
//! λ(s, t) = ρ_k / area_k · exp(βᵀx_kl) + γ₀ · |I(s, t)|
//!
//! where `(k, l)` is the grid cell and period containing `(s, t)` and
//! `I(s, t)` holds the past events within `δ` km and `τ` days. `β` is on the
//! log scale (rate per person-day), `γ₀` on the identity scale (events per km²
//! per day).

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{CovariateGrid, PointPattern};
use crate::geometry::{Disc, GeometryError, Point, Rect, Window};
use crate::pairs::close_pairs;
use crate::sum::Kahan;

pub const INTERCEPT: &str = "(Intercept)";

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    InvalidSpec(&'static str),
    #[error("unknown covariate column {0:?}")]
    UnknownColumn(String),
    #[error("design is rank deficient: {} linearly dependent on earlier columns", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("event {id:?} lies outside the grid")]
    Unlocatable { id: String },
    #[error("({x}, {y}, {t}) lies outside the grid")]
    PointOutsideGrid { x: f64, y: f64, t: f64 },
    #[error("event {id:?} lies in a cell with zero population; the endemic-only likelihood is -inf")]
    UnpopulatedEvent { id: String },
    #[error("no events")]
    NoEvents,
    #[error("expected {expected} endemic coefficients, got {got}")]
    ParameterLength { expected: usize, got: usize },
    #[error("intensity is not positive at every event for the starting values")]
    InadmissibleStart,
    #[error("line search failed at iteration {iteration} (loglik {loglik}, parameters {params:?})")]
    LineSearch { iteration: usize, loglik: f64, params: Vec<f64> },
    #[error("no convergence after {} iterations", .trace.len())]
    NotConverged { trace: Vec<TraceStep> },
    #[error("residual pixel size must be positive, got {0}")]
    PixelSize(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Model structure: interaction range and the endemic covariates.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    /// Interaction radius δ (km).
    pub delta: f64,
    /// Infectious period τ (days).
    pub tau: f64,
    /// Grid covariate columns entering the endemic predictor; an intercept is
    /// always added.
    pub endemic_columns: Vec<String>,
    /// Whether γ₀ is estimated (otherwise it is fixed at 0).
    pub epidemic: bool,
}

impl ModelSpec {
    pub fn new(delta: f64, tau: f64, endemic_columns: Vec<String>, epidemic: bool) -> Result<Self, ModelError> {
        let s = Self {
            delta,
            tau,
            endemic_columns,
            epidemic,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epidemic && !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(ModelError::InvalidSpec("delta must be positive"));
        }
        if self.epidemic && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ModelError::InvalidSpec("tau must be positive"));
        }
        Ok(())
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        core::iter::once(INTERCEPT.to_string()).chain(self.endemic_columns.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Params {
    /// Intercept first, then the spec's columns in order.
    pub beta: Vec<f64>,
    pub gamma0: f64,
}

/// Endemic design over grid rows: intercept plus the selected columns, with
/// log-population offsets.
#[derive(Clone, Debug)]
pub(crate) struct Design {
    pub(crate) names: Vec<String>,
    pub(crate) p: usize,
    x: Vec<f64>,
    /// log(ρ_k d_l); `-inf` for unpopulated cells.
    offset: Vec<f64>,
    /// log(ρ_k / area_k); `-inf` for unpopulated cells.
    log_density: Vec<f64>,
    n_periods: usize,
}

impl Design {
    pub(crate) fn new(grid: &CovariateGrid, columns: &[String]) -> Result<Self, ModelError> {
        let idx = columns
            .iter()
            .map(|c| grid.column_index(c).ok_or_else(|| ModelError::UnknownColumn(c.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let p = idx.len() + 1;
        let (nk, nl) = (grid.n_cells(), grid.n_periods());
        let mut x = Vec::with_capacity(nk * nl * p);
        let mut offset = Vec::with_capacity(nk * nl);
        let mut log_density = Vec::with_capacity(nk);
        for (k, cell) in grid.cells().iter().enumerate() {
            log_density.push(if cell.population > 0.0 {
                libm::log(cell.population / cell.area)
            } else {
                f64::NEG_INFINITY
            });
            for (l, period) in grid.periods().iter().enumerate() {
                let r = grid.row(k, l);
                x.push(1.0);
                x.extend(idx.iter().map(|&c| grid.z(r, c)));
                offset.push(if cell.population > 0.0 {
                    libm::log(cell.population * period.duration())
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
        let names = core::iter::once(INTERCEPT.to_string()).chain(columns.iter().cloned()).collect();
        let d = Self {
            names,
            p,
            x,
            offset,
            log_density,
            n_periods: nl,
        };
        d.check_rank()?;
        Ok(d)
    }

    pub(crate) fn row_x(&self, r: usize) -> &[f64] {
        &self.x[r * self.p..(r + 1) * self.p]
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.offset.len()
    }

    pub(crate) fn populated_row(&self, r: usize) -> bool {
        self.offset[r] > f64::NEG_INFINITY
    }

    pub(crate) fn offset(&self, r: usize) -> f64 {
        self.offset[r]
    }

    pub(crate) fn log_density(&self, cell: usize) -> f64 {
        self.log_density[cell]
    }

    pub(crate) fn cell_of_row(&self, r: usize) -> usize {
        r / self.n_periods
    }

    pub(crate) fn eta(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| self.row_x(r).iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect()
    }

    /// Cholesky on the scaled Gram matrix of populated rows, skipping columns
    /// whose residual variance vanishes.
    fn check_rank(&self) -> Result<(), ModelError> {
        let p = self.p;
        let mut g = vec![0.0; p * p];
        for r in (0..self.n_rows()).filter(|&r| self.populated_row(r)) {
            let x = self.row_x(r);
            for a in 0..p {
                for b in 0..=a {
                    g[a * p + b] += x[a] * x[b];
                }
            }
        }
        let scale: Vec<f64> = (0..p).map(|a| libm::sqrt(g[a * p + a])).collect();
        let mut l = vec![0.0; p * p];
        let mut kept: Vec<usize> = Vec::new();
        let mut dependent = Vec::new();
        for a in 0..p {
            if !(scale[a] > 0.0) {
                dependent.push(self.names[a].clone());
                continue;
            }
            let gaa = |i: usize, j: usize| g[i.max(j) * p + i.min(j)] / (scale[i] * scale[j]);
            let mut row = vec![0.0; p];
            for &b in &kept {
                let mut s = gaa(a, b);
                for &c in kept.iter().take_while(|&&c| c < b) {
                    s -= row[c] * l[b * p + c];
                }
                row[b] = s / l[b * p + b];
            }
            let d = gaa(a, a) - kept.iter().map(|&c| row[c] * row[c]).sum::<f64>();
            if d < 1e-10 {
                dependent.push(self.names[a].clone());
            } else {
                row[a] = libm::sqrt(d);
                l[a * p..(a + 1) * p].copy_from_slice(&row);
                kept.push(a);
            }
        }
        if dependent.is_empty() {
            Ok(())
        } else {
            Err(ModelError::RankDeficient(dependent))
        }
    }
}

/// Epidemic bookkeeping for one assignment of times to locations.
///
/// `active` lists pairs `(j, i)` with `t_j < t_i <= t_j + τ` and
/// `‖s_i - s_j‖ <= δ`, sorted.
#[derive(Clone, Debug)]
pub struct EpidemicPrecompute {
    locations: Vec<Point>,
    times: Vec<f64>,
    delta: f64,
    tau: f64,
    disc_area: Vec<f64>,
    active: Vec<(u32, u32)>,
    counts: Vec<u32>,
    exposure: f64,
}

impl EpidemicPrecompute {
    pub fn new(window: &Window, pattern: &PointPattern, delta: f64, tau: f64) -> Self {
        let locations = pattern.locations();
        let disc_area = disc_areas(window, &locations, delta);
        let close = close_pairs(&locations, delta);
        Self::from_parts(locations, pattern.times(), disc_area, &close, delta, tau, window.t_max())
    }

    fn from_parts(
        locations: Vec<Point>,
        times: Vec<f64>,
        disc_area: Vec<f64>,
        close: &[(u32, u32)],
        delta: f64,
        tau: f64,
        t_max: f64,
    ) -> Self {
        let n = locations.len();
        let mut active = Vec::new();
        let mut counts = vec![0u32; n];
        for &(a, b) in close {
            let (ta, tb) = (times[a as usize], times[b as usize]);
            if ta < tb && tb - ta <= tau {
                active.push((a, b));
                counts[b as usize] += 1;
            } else if tb < ta && ta - tb <= tau {
                active.push((b, a));
                counts[a as usize] += 1;
            }
        }
        active.sort_unstable();
        let mut acc = Kahan::new();
        for (a, t) in disc_area.iter().zip(&times) {
            acc.add(a * tau.min(t_max - t));
        }
        Self {
            locations,
            times,
            delta,
            tau,
            disc_area,
            active,
            counts,
            exposure: acc.value(),
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// |b(s_j, δ) ∩ W|.
    pub fn disc_area(&self, j: usize) -> f64 {
        self.disc_area[j]
    }

    /// Whether event `j` is in `I(s_i, t_i)`.
    pub fn is_active(&self, j: usize, i: usize) -> bool {
        self.active.binary_search(&(j as u32, i as u32)).is_ok()
    }

    /// |I(s_i, t_i)|.
    pub fn active_count(&self, i: usize) -> u32 {
        self.counts[i]
    }

    pub fn active_pairs(&self) -> &[(u32, u32)] {
        &self.active
    }

    /// Σ_j |b(s_j, δ) ∩ W| · min(τ, T - t_j).
    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    /// |I(s, t)| for an arbitrary point by a scan over all events.
    pub fn count_at(&self, s: Point, t: f64) -> u32 {
        self.locations
            .iter()
            .zip(&self.times)
            .filter(|(p, tj)| **tj < t && t - **tj <= self.tau && p.dist(s) <= self.delta)
            .count() as u32
    }
}

fn disc_areas(window: &Window, locations: &[Point], delta: f64) -> Vec<f64> {
    locations
        .iter()
        .map(|&c| Disc::new(c, delta).map(|d| window.disc_area(&d)).unwrap_or(0.0))
        .collect()
}

/// λ(s, t) given the events in `history`.
pub fn conditional_intensity(
    spec: &ModelSpec,
    grid: &CovariateGrid,
    params: &Params,
    history: &EpidemicPrecompute,
    s: Point,
    t: f64,
) -> Result<f64, ModelError> {
    let (k, l) = grid.locate(s, t).ok_or(ModelError::PointOutsideGrid { x: s.x, y: s.y, t })?;
    let idx = spec
        .endemic_columns
        .iter()
        .map(|c| grid.column_index(c).ok_or_else(|| ModelError::UnknownColumn(c.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    if params.beta.len() != idx.len() + 1 {
        return Err(ModelError::ParameterLength {
            expected: idx.len() + 1,
            got: params.beta.len(),
        });
    }
    let r = grid.row(k, l);
    let eta = params.beta[0] + idx.iter().zip(&params.beta[1..]).map(|(&c, b)| grid.z(r, c) * b).sum::<f64>();
    let cell = &grid.cells()[k];
    let endemic = if cell.population > 0.0 {
        cell.population / cell.area * libm::exp(eta)
    } else {
        0.0
    };
    let epidemic = if spec.epidemic {
        params.gamma0 * history.count_at(s, t) as f64
    } else {
        0.0
    };
    Ok(endemic + epidemic)
}

/// One Newton iteration in a fit's convergence trace.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceStep {
    pub iteration: usize,
    pub loglik: f64,
    /// max_j |∂ℓ/∂θ_j| · SE_j.
    pub criterion: f64,
    pub step: f64,
}

/// A row of the coefficient table. Rate ratios are given for the endemic
/// (log-scale) coefficients only.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub rate_ratio: Option<f64>,
    pub rr_ci_lower: Option<f64>,
    pub rr_ci_upper: Option<f64>,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitResult {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub gamma0: f64,
    pub loglik: f64,
    /// Standard errors of `beta`, then of `gamma0` when it was estimated.
    pub se: Vec<f64>,
    /// Inverse observed information, row-major, same order as `se`.
    pub covariance: Vec<f64>,
    pub epidemic: bool,
    /// γ₀ held at 0 because no event has an active predecessor.
    pub gamma0_fixed: bool,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceStep>,
    pub loglik_endemic: Option<f64>,
    pub lr_d: Option<f64>,
    pub n_events: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn params(&self) -> Params {
        Params {
            beta: self.beta.clone(),
            gamma0: self.gamma0,
        }
    }

    pub fn se_gamma0(&self) -> Option<f64> {
        (self.se.len() > self.beta.len()).then(|| self.se[self.beta.len()])
    }

    pub fn coefficients(&self) -> Vec<Coefficient> {
        let mut out: Vec<Coefficient> = self
            .names
            .iter()
            .zip(&self.beta)
            .zip(&self.se)
            .map(|((name, &b), &se)| {
                let mut c = wald(name.clone(), b, se);
                c.rate_ratio = Some(libm::exp(b));
                c.rr_ci_lower = Some(libm::exp(c.ci_lower));
                c.rr_ci_upper = Some(libm::exp(c.ci_upper));
                c
            })
            .collect();
        if let Some(se) = self.se_gamma0() {
            out.push(wald(String::from("gamma0"), self.gamma0, se));
        }
        out
    }
}

fn wald(name: String, estimate: f64, se: f64) -> Coefficient {
    let z = estimate / se;
    Coefficient {
        name,
        estimate,
        se,
        ci_lower: estimate - Z95 * se,
        ci_upper: estimate + Z95 * se,
        rate_ratio: None,
        rr_ci_lower: None,
        rr_ci_upper: None,
        z,
        p_value: libm::erfc(libm::fabs(z) / core::f64::consts::SQRT_2),
    }
}

/// Expected offspring of one event with the unclipped disc: γ₀ πδ² τ.
pub fn reproduction_number(fit: &FitResult, spec: &ModelSpec) -> f64 {
    reproduction_number_from(fit.gamma0, spec.delta, spec.tau)
}

pub fn reproduction_number_from(gamma0: f64, delta: f64, tau: f64) -> f64 {
    gamma0 * PI * delta * delta * tau
}

/// Fit settings shared by the endemic and full fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on max_j |∂ℓ/∂θ_j| · SE_j.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-6,
        }
    }
}

/// A model bound to a grid and a fixed set of event locations. Times are
/// supplied separately through [`Model::data`] so permutation replicates share
/// the location-only precomputation.
#[derive(Clone, Debug)]
pub struct Model<'a> {
    spec: ModelSpec,
    grid: &'a CovariateGrid,
    design: Design,
    ids: Vec<String>,
    cells: Vec<usize>,
    locations: Vec<Point>,
    disc_area: Vec<f64>,
    close: Vec<(u32, u32)>,
    options: FitOptions,
}

/// Time-dependent part of the model inputs.
#[derive(Clone, Debug)]
pub struct ModelData {
    rows: Vec<u32>,
    counts: Vec<f64>,
    epi: EpidemicPrecompute,
}

impl ModelData {
    pub fn epidemic(&self) -> &EpidemicPrecompute {
        &self.epi
    }

    /// Events per grid row.
    pub fn row_counts(&self) -> &[f64] {
        &self.counts
    }
}

struct Evaluation {
    ll: f64,
    grad: Vec<f64>,
    neg_hess: DMatrix<f64>,
}

struct Optimum {
    theta: Vec<f64>,
    eval: Evaluation,
    iterations: usize,
    trace: Vec<TraceStep>,
}

impl<'a> Model<'a> {
    pub fn new(spec: &ModelSpec, grid: &'a CovariateGrid, pattern: &PointPattern) -> Result<Self, ModelError> {
        spec.validate()?;
        if pattern.is_empty() {
            return Err(ModelError::NoEvents);
        }
        let design = Design::new(grid, &spec.endemic_columns)?;
        let cells = pattern
            .events()
            .iter()
            .map(|e| grid.locate_cell(e.location).ok_or_else(|| ModelError::Unlocatable { id: e.id.clone() }))
            .collect::<Result<Vec<_>, _>>()?;
        let locations = pattern.locations();
        let (disc_area, close) = if spec.epidemic {
            (disc_areas(grid.window(), &locations, spec.delta), close_pairs(&locations, spec.delta))
        } else {
            (vec![0.0; locations.len()], Vec::new())
        };
        Ok(Self {
            spec: spec.clone(),
            grid,
            design,
            ids: pattern.events().iter().map(|e| e.id.clone()).collect(),
            cells,
            locations,
            disc_area,
            close,
            options: FitOptions::default(),
        })
    }

    pub fn with_options(mut self, options: FitOptions) -> Self {
        self.options = options;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_events(&self) -> usize {
        self.locations.len()
    }

    /// Inputs for `times[i]` attached to the `i`-th event location.
    pub fn data(&self, times: &[f64]) -> Result<ModelData, ModelError> {
        let mut rows = Vec::with_capacity(times.len());
        let mut counts = vec![0.0; self.design.n_rows()];
        for (i, &t) in times.iter().enumerate() {
            let l = self.grid.locate_period(t).ok_or_else(|| ModelError::Unlocatable { id: self.ids[i].clone() })?;
            let r = self.grid.row(self.cells[i], l);
            rows.push(r as u32);
            counts[r] += 1.0;
        }
        let epi = EpidemicPrecompute::from_parts(
            self.locations.clone(),
            times.to_vec(),
            self.disc_area.clone(),
            &self.close,
            self.spec.delta,
            self.spec.tau,
            self.grid.window().t_max(),
        );
        Ok(ModelData { rows, counts, epi })
    }

    /// ℓ on the point-process scale; `-inf` when λ is not positive at some
    /// event.
    pub fn log_likelihood(&self, data: &ModelData, params: &Params) -> Result<f64, ModelError> {
        self.check_len(&params.beta)?;
        let gamma = if self.spec.epidemic { params.gamma0 } else { 0.0 };
        Ok(self.evaluate(data, &params.beta, Some(gamma), false).map_or(f64::NEG_INFINITY, |e| e.ll))
    }

    fn check_len(&self, beta: &[f64]) -> Result<(), ModelError> {
        if beta.len() == self.design.p {
            Ok(())
        } else {
            Err(ModelError::ParameterLength {
                expected: self.design.p,
                got: beta.len(),
            })
        }
    }

    /// Score of ℓ in (β, γ₀) (γ₀ last when epidemic).
    pub fn score(&self, data: &ModelData, params: &Params) -> Result<Option<Vec<f64>>, ModelError> {
        self.check_len(&params.beta)?;
        let gamma = self.spec.epidemic.then_some(params.gamma0);
        Ok(self.evaluate(data, &params.beta, gamma, true).map(|e| e.grad))
    }

    /// ℓ, score and negative Hessian. `gamma = None` drops the epidemic
    /// parameter from the gradient; events then contribute log ν only.
    fn evaluate(&self, data: &ModelData, beta: &[f64], gamma: Option<f64>, derivs: bool) -> Option<Evaluation> {
        let p = self.design.p;
        let k = p + usize::from(gamma.is_some());
        let eta = self.design.eta(beta);
        let mut ll = Kahan::new();
        let mut grad = vec![0.0; k];
        let mut h = vec![0.0; k * k];

        // Integrated endemic intensity.
        for r in 0..self.design.n_rows() {
            if !self.design.populated_row(r) {
                continue;
            }
            let mu = libm::exp(self.design.offset(r) + eta[r]);
            ll.add(-mu);
            if derivs {
                let x = self.design.row_x(r);
                for a in 0..p {
                    grad[a] -= mu * x[a];
                    for b in 0..=a {
                        h[a * k + b] += mu * x[a] * x[b];
                    }
                }
            }
        }

        let g0 = gamma.unwrap_or(0.0);
        if gamma.is_some() {
            ll.add(-g0 * data.epi.exposure);
            grad[p] -= data.epi.exposure;
        }
        for (i, &r) in data.rows.iter().enumerate() {
            let r = r as usize;
            let cell = self.design.cell_of_row(r);
            let nu = libm::exp(self.design.log_density(cell) + eta[r]);
            let c = if gamma.is_some() { data.epi.counts[i] as f64 } else { 0.0 };
            let lam = nu + g0 * c;
            if !(lam > 0.0) || !lam.is_finite() {
                return None;
            }
            ll.add(libm::log(lam));
            if derivs {
                let x = self.design.row_x(r);
                let (a1, a2) = (nu / lam, nu * g0 * c / (lam * lam));
                for a in 0..p {
                    grad[a] += a1 * x[a];
                    for b in 0..=a {
                        h[a * k + b] -= a2 * x[a] * x[b];
                    }
                }
                if gamma.is_some() && c > 0.0 {
                    grad[p] += c / lam;
                    let cross = nu * c / (lam * lam);
                    for a in 0..p {
                        h[p * k + a] += cross * x[a];
                    }
                    h[p * k + p] += c * c / (lam * lam);
                }
            }
        }
        let ll = ll.value();
        if !ll.is_finite() {
            return None;
        }
        let neg_hess = DMatrix::from_fn(k, k, |a, b| h[a.max(b) * k + a.min(b)]);
        Some(Evaluation { ll, grad, neg_hess })
    }

    /// Endemic-only evaluation on aggregated row counts.
    fn evaluate_endemic(&self, data: &ModelData, beta: &[f64]) -> Option<Evaluation> {
        let p = self.design.p;
        let eta = self.design.eta(beta);
        let mut ll = Kahan::new();
        let mut grad = vec![0.0; p];
        let mut h = vec![0.0; p * p];
        for r in 0..self.design.n_rows() {
            let y = data.counts[r];
            if !self.design.populated_row(r) {
                if y > 0.0 {
                    return None;
                }
                continue;
            }
            let mu = libm::exp(self.design.offset(r) + eta[r]);
            if y > 0.0 {
                ll.add(y * (self.design.log_density(self.design.cell_of_row(r)) + eta[r]));
            }
            ll.add(-mu);
            let x = self.design.row_x(r);
            for a in 0..p {
                grad[a] += (y - mu) * x[a];
                for b in 0..=a {
                    h[a * p + b] += mu * x[a] * x[b];
                }
            }
        }
        let ll = ll.value();
        if !ll.is_finite() {
            return None;
        }
        let neg_hess = DMatrix::from_fn(p, p, |a, b| h[a.max(b) * p + a.min(b)]);
        Some(Evaluation { ll, grad, neg_hess })
    }

    /// Endemic-only MLE. `start` defaults to the intercept-only closed form.
    pub fn fit_endemic(&self, data: &ModelData, start: Option<&[f64]>) -> Result<FitResult, ModelError> {
        let n = data.rows.len();
        for (i, &r) in data.rows.iter().enumerate() {
            if !self.design.populated_row(r as usize) {
                return Err(ModelError::UnpopulatedEvent { id: self.ids[i].clone() });
            }
        }
        let theta0 = match start {
            Some(b) => {
                self.check_len(b)?;
                b.to_vec()
            }
            None => {
                let mut t = vec![0.0; self.design.p];
                let mut pd = 0.0;
                for r in 0..self.design.n_rows() {
                    if self.design.populated_row(r) {
                        pd += libm::exp(self.design.offset(r));
                    }
                }
                t[0] = libm::log(n as f64 / pd);
                t
            }
        };
        let opt = newton(theta0, |th| self.evaluate_endemic(data, th), &self.options)?;
        let (se, covariance, warnings) = covariance(&opt.eval.neg_hess);
        Ok(FitResult {
            names: self.design.names.clone(),
            beta: opt.theta,
            gamma0: 0.0,
            loglik: opt.eval.ll,
            se,
            covariance,
            epidemic: false,
            gamma0_fixed: false,
            converged: true,
            iterations: opt.iterations,
            trace: opt.trace,
            loglik_endemic: None,
            lr_d: None,
            n_events: n,
            warnings,
        })
    }

    /// Joint MLE of (β, γ₀) started from the endemic fit with γ₀ = 0.
    pub fn fit_full(&self, data: &ModelData, endemic: &FitResult) -> Result<FitResult, ModelError> {
        self.check_len(&endemic.beta)?;
        if !self.spec.epidemic {
            return Err(ModelError::InvalidSpec("fit_full needs an epidemic component"));
        }
        if data.epi.counts.iter().all(|&c| c == 0) {
            let mut fit = endemic.clone();
            fit.epidemic = true;
            fit.gamma0_fixed = true;
            fit.loglik_endemic = Some(endemic.loglik);
            fit.lr_d = Some(0.0);
            fit.warnings.push(String::from(
                "no event has an active predecessor within (delta, tau); gamma0 fixed at 0",
            ));
            return Ok(fit);
        }
        let p = self.design.p;
        let mut theta0 = endemic.beta.clone();
        theta0.push(0.0);
        let opt = newton(
            theta0,
            |th| self.evaluate(data, &th[..p], Some(th[p]), true),
            &self.options,
        )?;
        let (se, covariance, warnings) = covariance(&opt.eval.neg_hess);
        let mut theta = opt.theta;
        let gamma0 = theta.pop().expect("gamma0");
        Ok(FitResult {
            names: self.design.names.clone(),
            beta: theta,
            gamma0,
            loglik: opt.eval.ll,
            se,
            covariance,
            epidemic: true,
            gamma0_fixed: false,
            converged: true,
            iterations: opt.iterations,
            trace: opt.trace,
            loglik_endemic: Some(endemic.loglik),
            lr_d: Some(2.0 * (opt.eval.ll - endemic.loglik)),
            n_events: data.rows.len(),
            warnings,
        })
    }

    /// Endemic fit, followed by the full fit when the spec is epidemic.
    pub fn fit(&self, data: &ModelData, start: Option<&[f64]>) -> Result<FitResult, ModelError> {
        let endemic = self.fit_endemic(data, start)?;
        if self.spec.epidemic {
            self.fit_full(data, &endemic)
        } else {
            Ok(endemic)
        }
    }
}

fn covariance(neg_hess: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let k = neg_hess.nrows();
    match neg_hess.clone().cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            let se = (0..k).map(|j| libm::sqrt(inv[(j, j)])).collect();
            let cov = (0..k * k).map(|i| inv[(i / k, i % k)]).collect();
            (se, cov, Vec::new())
        }
        None => (
            vec![f64::NAN; k],
            vec![f64::NAN; k * k],
            vec![String::from("observed information is not positive definite; standard errors unavailable")],
        ),
    }
}

/// Damped Newton ascent with backtracking on the `-inf` sentinel and an
/// Armijo condition.
fn newton<F>(theta0: Vec<f64>, mut eval: F, opts: &FitOptions) -> Result<Optimum, ModelError>
where
    F: FnMut(&[f64]) -> Option<Evaluation>,
{
    let k = theta0.len();
    let mut theta = theta0;
    let mut cur = eval(&theta).ok_or(ModelError::InadmissibleStart)?;
    let mut trace = Vec::new();
    for iteration in 0..opts.max_iter {
        let g = DVector::from_column_slice(&cur.grad);
        let (dir, criterion) = match cur.neg_hess.clone().cholesky() {
            Some(ch) => {
                let inv = ch.inverse();
                let crit = (0..k)
                    .map(|j| libm::fabs(g[j]) * libm::sqrt(inv[(j, j)]))
                    .fold(0.0, f64::max);
                (ch.solve(&g), crit)
            }
            None => {
                let scale = (0..k).map(|j| libm::fabs(cur.neg_hess[(j, j)])).fold(1.0, f64::max);
                let mut mu = 1e-8 * scale;
                loop {
                    let m = &cur.neg_hess + DMatrix::identity(k, k) * mu;
                    if let Some(ch) = m.cholesky() {
                        break (ch.solve(&g), f64::INFINITY);
                    }
                    mu *= 10.0;
                }
            }
        };
        if criterion < opts.tolerance {
            trace.push(TraceStep {
                iteration,
                loglik: cur.ll,
                criterion,
                step: 0.0,
            });
            return Ok(Optimum {
                theta,
                eval: cur,
                iterations: iteration,
                trace,
            });
        }
        let slope = g.dot(&dir);
        let slack = 1e-12 * (1.0 + libm::fabs(cur.ll));
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if let Some(e) = eval(&cand) {
                if e.ll >= cur.ll + 1e-4 * t * slope - slack {
                    theta = cand;
                    cur = e;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                if criterion < 1e3 * opts.tolerance {
                    // Stalled at the floating-point floor next to the optimum.
                    trace.push(TraceStep {
                        iteration,
                        loglik: cur.ll,
                        criterion,
                        step: 0.0,
                    });
                    return Ok(Optimum {
                        theta,
                        eval: cur,
                        iterations: iteration,
                        trace,
                    });
                }
                return Err(ModelError::LineSearch {
                    iteration,
                    loglik: cur.ll,
                    params: theta,
                });
            }
        }
        trace.push(TraceStep {
            iteration,
            loglik: cur.ll,
            criterion,
            step: t,
        });
    }
    Err(ModelError::NotConverged { trace })
}

/// ℓ at `params` for the observed pattern.
pub fn log_likelihood(spec: &ModelSpec, grid: &CovariateGrid, pattern: &PointPattern, params: &Params) -> Result<f64, ModelError> {
    let m = Model::new(spec, grid, pattern)?;
    let d = m.data(&pattern.times())?;
    m.log_likelihood(&d, params)
}

pub fn fit_endemic(spec: &ModelSpec, grid: &CovariateGrid, pattern: &PointPattern) -> Result<FitResult, ModelError> {
    let m = Model::new(spec, grid, pattern)?;
    let d = m.data(&pattern.times())?;
    m.fit_endemic(&d, None)
}

pub fn fit_full(spec: &ModelSpec, grid: &CovariateGrid, pattern: &PointPattern) -> Result<FitResult, ModelError> {
    let m = Model::new(spec, grid, pattern)?;
    let d = m.data(&pattern.times())?;
    let e = m.fit_endemic(&d, None)?;
    m.fit_full(&d, &e)
}

/// Pearson residuals on square pixels covering the window's bounding box.
/// Pixel `(col, row)` is stored at `row * ncols + col`, row 0 at the bottom.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PixelResiduals {
    pub origin: Point,
    pub pixel_size: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub observed: Vec<u32>,
    pub expected: Vec<f64>,
    pub residual: Vec<f64>,
    /// Pixels with events but zero expected count (residual `+inf`).
    pub flagged: Vec<usize>,
}

impl PixelResiduals {
    pub fn pixel_rect(&self, col: usize, row: usize) -> Rect {
        let min = Point::new(
            self.origin.x + col as f64 * self.pixel_size,
            self.origin.y + row as f64 * self.pixel_size,
        );
        Rect::new(min, Point::new(min.x + self.pixel_size, min.y + self.pixel_size))
    }
}

pub fn spatial_residuals(
    fit: &FitResult,
    spec: &ModelSpec,
    grid: &CovariateGrid,
    pattern: &PointPattern,
    pixel_size: f64,
) -> Result<PixelResiduals, ModelError> {
    if !(pixel_size > 0.0 && pixel_size.is_finite()) {
        return Err(ModelError::PixelSize(pixel_size));
    }
    let design = Design::new(grid, &spec.endemic_columns)?;
    if fit.beta.len() != design.p {
        return Err(ModelError::ParameterLength {
            expected: design.p,
            got: fit.beta.len(),
        });
    }
    let window = grid.window();
    let bb = window.bbox();
    let origin = bb.min;
    let ncols = (libm::ceil(bb.width() / pixel_size) as usize).max(1);
    let nrows = (libm::ceil(bb.height() / pixel_size) as usize).max(1);
    let out = PixelResiduals {
        origin,
        pixel_size,
        ncols,
        nrows,
        observed: Vec::new(),
        expected: Vec::new(),
        residual: Vec::new(),
        flagged: Vec::new(),
    };
    let pix = |x: f64, n: usize, o: f64| -> usize { (libm::floor((x - o) / pixel_size).max(0.0) as usize).min(n - 1) };
    let span = |r: &Rect| -> (usize, usize, usize, usize) {
        (
            pix(r.min.x, ncols, origin.x),
            pix(r.max.x, ncols, origin.x),
            pix(r.min.y, nrows, origin.y),
            pix(r.max.y, nrows, origin.y),
        )
    };

    let mut observed = vec![0u32; ncols * nrows];
    for e in pattern.events() {
        observed[pix(e.location.y, nrows, origin.y) * ncols + pix(e.location.x, ncols, origin.x)] += 1;
    }

    let mut expected = vec![0.0; ncols * nrows];
    let eta = design.eta(&fit.beta);
    for (k, cell) in grid.cells().iter().enumerate() {
        if !(cell.population > 0.0) {
            continue;
        }
        // Expected events per km² of the cell over (0, T].
        let per_area: f64 = (0..grid.n_periods())
            .map(|l| {
                let r = grid.row(k, l);
                cell.population / cell.area * libm::exp(eta[r]) * grid.periods()[l].duration()
            })
            .sum();
        let (c0, c1, r0, r1) = span(&grid.cell_bbox(k));
        for row in r0..=r1 {
            for col in c0..=c1 {
                let a = grid.cell_area_in_rect(k, &out.pixel_rect(col, row));
                expected[row * ncols + col] += per_area * a;
            }
        }
    }
    if spec.epidemic && fit.gamma0 != 0.0 {
        let t_max = window.t_max();
        for e in pattern.events() {
            let dur = spec.tau.min(t_max - e.time);
            if dur <= 0.0 {
                continue;
            }
            let disc = Disc::new(e.location, spec.delta)?;
            let r = spec.delta;
            let dbox = Rect::new(
                Point::new(e.location.x - r, e.location.y - r),
                Point::new(e.location.x + r, e.location.y + r),
            );
            let (c0, c1, r0, r1) = span(&dbox);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let a = window.disc_area_in_rect(&disc, &out.pixel_rect(col, row));
                    expected[row * ncols + col] += fit.gamma0 * a * dur;
                }
            }
        }
    }

    let mut residual = Vec::with_capacity(ncols * nrows);
    let mut flagged = Vec::new();
    for (i, (&o, &ex)) in observed.iter().zip(&expected).enumerate() {
        residual.push(if ex > 0.0 {
            (o as f64 - ex) / libm::sqrt(ex)
        } else if o == 0 {
            0.0
        } else {
            flagged.push(i);
            f64::INFINITY
        });
    }
    Ok(PixelResiduals {
        observed,
        expected,
        residual,
        flagged,
        ..out
    })
}

/// Time-rescaled residuals: the compensator Λ*(t_i) at each event, its
/// normalisation by Λ*(T), and the Kolmogorov-Smirnov distance of the
/// normalised values to the uniform distribution.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemporalResiduals {
    pub times: Vec<f64>,
    pub compensator: Vec<f64>,
    pub total: f64,
    pub u: Vec<f64>,
    pub ks: f64,
    /// 1.358/√n.
    pub bound: f64,
}

impl TemporalResiduals {
    pub fn exceeds_bound(&self) -> bool {
        self.ks > self.bound
    }
}

pub fn temporal_residuals(
    fit: &FitResult,
    spec: &ModelSpec,
    grid: &CovariateGrid,
    pattern: &PointPattern,
) -> Result<TemporalResiduals, ModelError> {
    let design = Design::new(grid, &spec.endemic_columns)?;
    if fit.beta.len() != design.p {
        return Err(ModelError::ParameterLength {
            expected: design.p,
            got: fit.beta.len(),
        });
    }
    let n = pattern.len();
    if n == 0 {
        return Err(ModelError::NoEvents);
    }
    let t_max = grid.window().t_max();
    let eta = design.eta(&fit.beta);
    // Endemic events per day in each period, and the cumulative count at each
    // period start.
    let periods = grid.periods();
    let rate: Vec<f64> = (0..grid.n_periods())
        .map(|l| {
            (0..grid.n_cells())
                .filter(|&k| grid.cells()[k].population > 0.0)
                .map(|k| grid.cells()[k].population * libm::exp(eta[grid.row(k, l)]))
                .sum()
        })
        .collect();
    let mut start_cum = Vec::with_capacity(rate.len());
    let mut acc = 0.0;
    for (l, p) in periods.iter().enumerate() {
        start_cum.push(acc);
        acc += rate[l] * p.duration();
    }
    let endemic_at = |t: f64| -> f64 {
        match grid.locate_period(t) {
            Some(l) => start_cum[l] + rate[l] * (t - periods[l].start),
            None => 0.0,
        }
    };

    let times = pattern.times();
    let epi_on = spec.epidemic && fit.gamma0 != 0.0;
    let areas = if epi_on {
        disc_areas(grid.window(), &pattern.locations(), spec.delta)
    } else {
        vec![0.0; n]
    };
    // Σ_{j: t_j < t} A_j min(τ, t - t_j), with events sorted by time.
    let mut expired = 0.0;
    let mut old = 0;
    let mut compensator = Vec::with_capacity(n);
    for i in 0..n {
        let t = times[i];
        let mut epi = 0.0;
        if epi_on {
            while old < n && times[old] <= t - spec.tau {
                expired += areas[old] * spec.tau;
                old += 1;
            }
            epi = expired;
            for j in old..n {
                if times[j] >= t {
                    break;
                }
                epi += areas[j] * (t - times[j]);
            }
        }
        compensator.push(endemic_at(t) + fit.gamma0 * epi);
    }
    let mut epi_total = Kahan::new();
    if epi_on {
        for (a, t) in areas.iter().zip(&times) {
            epi_total.add(a * spec.tau.min(t_max - t));
        }
    }
    let total = acc + fit.gamma0 * epi_total.value();
    let u: Vec<f64> = compensator.iter().map(|c| c / total).collect();
    let mut sorted = u.clone();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / nf - v).max(v - i as f64 / nf))
        .fold(0.0, f64::max);
    Ok(TemporalResiduals {
        times,
        compensator,
        total,
        u,
        ks,
        bound: 1.358 / libm::sqrt(nf),
    })
}

/// Names of the coefficient table rows for a spec, for report headers.
pub fn coefficient_labels(spec: &ModelSpec) -> Vec<String> {
    let mut v = spec.coefficient_names();
    if spec.epidemic {
        v.push(String::from("gamma0"));
    }
    v
}
