//! Branching-process simulation of the endemic-epidemic model.
//!
//! Immigrants are drawn per grid row from the endemic intensity; each then
//! seeds a cascade in which every event has Poisson(γ₀ |b(s, δ) ∩ W|
//! min(τ, T - t)) children placed uniformly on the clipped disc and the
//! following truncated infectious period. Rows and cascades draw from their
//! own counter-based streams, so output depends on the seed only.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::data::{CellGeometry, CovariateGrid, DataError, Event, PointPattern};
use crate::exec::{Executor, Sequential};
use crate::geometry::{Disc, Point, Window};
use crate::model::{Design, ModelError};
use crate::rng::{self, Domain};

/// Rejection attempts before a location draw is abandoned.
const MAX_ATTEMPTS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("invalid simulation settings: {0}")]
    InvalidConfig(&'static str),
    #[error("expected offspring per event {mean:.4} is not below {threshold}; the cascade would not die out")]
    Supercritical { mean: f64, threshold: f64 },
    #[error("could not place a point in cell {0:?} by rejection")]
    Sampling(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug)]
pub struct SimulationConfig<'a> {
    pub grid: &'a CovariateGrid,
    /// Endemic covariate columns; `beta` has the intercept first.
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    pub gamma0: f64,
    pub delta: f64,
    pub tau: f64,
    pub seed: u64,
    pub max_generations: u32,
    /// Expected offspring γ₀πδ²τ must stay below this.
    pub offspring_threshold: f64,
    /// Simulate supercritical settings anyway, relying on the generation cap.
    pub allow_supercritical: bool,
}

impl<'a> SimulationConfig<'a> {
    pub fn new(grid: &'a CovariateGrid, columns: Vec<String>, beta: Vec<f64>, gamma0: f64, delta: f64, tau: f64, seed: u64) -> Self {
        Self {
            grid,
            columns,
            beta,
            gamma0,
            delta,
            tau,
            seed,
            max_generations: 100,
            offspring_threshold: 1.0,
            allow_supercritical: false,
        }
    }

    /// γ₀πδ²τ.
    pub fn offspring_mean(&self) -> f64 {
        self.gamma0 * PI * self.delta * self.delta * self.tau
    }

    /// Checks the parameters; returns warnings for settings that are allowed
    /// but suspect.
    pub fn validate(&self) -> Result<Vec<String>, SimulationError> {
        if !(self.gamma0 >= 0.0 && self.gamma0.is_finite()) {
            return Err(SimulationError::InvalidConfig("gamma0 must be finite and non-negative"));
        }
        if self.gamma0 > 0.0 && !(self.delta > 0.0 && self.delta.is_finite() && self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SimulationError::InvalidConfig("delta and tau must be positive"));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(SimulationError::InvalidConfig("beta must be finite"));
        }
        let mean = self.offspring_mean();
        if mean >= self.offspring_threshold {
            if !self.allow_supercritical {
                return Err(SimulationError::Supercritical {
                    mean,
                    threshold: self.offspring_threshold,
                });
            }
            return Ok(alloc::vec![format!(
                "expected offspring {mean:.4} >= {}; cascades are capped at {} generations",
                self.offspring_threshold, self.max_generations
            )]);
        }
        Ok(Vec::new())
    }
}

/// A simulated pattern with its family tree.
#[derive(Clone, Debug)]
pub struct SimulatedPattern {
    pub pattern: PointPattern,
    /// Index of each event's parent in `pattern`; `None` for immigrants.
    pub parent: Vec<Option<usize>>,
    /// 0 for immigrants.
    pub generation: Vec<u32>,
    /// Offspring not simulated because their parent sat at the generation cap.
    pub truncated: u64,
    pub warnings: Vec<String>,
}

impl SimulatedPattern {
    /// `(id, parent id, generation)` per event.
    pub fn provenance(&self) -> Vec<(String, Option<String>, u32)> {
        let ev = self.pattern.events();
        (0..ev.len())
            .map(|i| (ev[i].id.clone(), self.parent[i].map(|p| ev[p].id.clone()), self.generation[i]))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    location: Point,
    time: f64,
    parent: Option<u32>,
    generation: u32,
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u64
}

fn uniform_in<R: Rng + ?Sized>(grid: &CovariateGrid, k: usize, rng: &mut R) -> Result<Point, SimulationError> {
    let window = grid.window();
    if let (CellGeometry::Window, Some(r), true) = (&grid.cells()[k].geometry, window.raster(), window.polygons().is_empty()) {
        let inside = r.inside_cells();
        let (nc, _) = r.dims();
        let idx = inside[rng.random_range(0..inside.len())] as usize;
        let rect = r.cell_rect(idx % nc, idx / nc);
        return Ok(Point::new(
            rect.min.x + rng.random::<f64>() * rect.width(),
            rect.min.y + rng.random::<f64>() * rect.height(),
        ));
    }
    let b = grid.cell_bbox(k);
    for _ in 0..MAX_ATTEMPTS {
        let p = Point::new(b.min.x + rng.random::<f64>() * b.width(), b.min.y + rng.random::<f64>() * b.height());
        if grid.cell_contains(k, p) {
            return Ok(p);
        }
    }
    Err(SimulationError::Sampling(grid.cells()[k].id.clone()))
}

/// Children of an event at `(s, t)`: the count and, when `place` is set, their
/// locations and times.
fn offspring<R: Rng + ?Sized>(s: Point, t: f64, gamma0: f64, delta: f64, tau: f64, window: &Window, place: bool, rng: &mut R) -> (u64, Vec<(Point, f64)>) {
    let dur = tau.min(window.t_max() - t);
    if !(gamma0 > 0.0) || !(dur > 0.0) {
        return (0, Vec::new());
    }
    let area = match Disc::new(s, delta) {
        Ok(d) => window.disc_area(&d),
        Err(_) => return (0, Vec::new()),
    };
    let n = poisson(gamma0 * area * dur, rng);
    if !place {
        return (n, Vec::new());
    }
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let r = delta * libm::sqrt(rng.random::<f64>());
            let a = 2.0 * PI * rng.random::<f64>();
            let p = Point::new(s.x + r * libm::cos(a), s.y + r * libm::sin(a));
            if window.contains(p) {
                placed = Some(p);
                break;
            }
        }
        if let Some(p) = placed {
            out.push((p, t + (1.0 - rng.random::<f64>()) * dur));
        }
    }
    (n, out)
}

/// Direct children of `parent` (no further generations). Child ids are
/// `<parent id>.<k>`.
pub fn simulate_offspring<R: Rng + ?Sized>(parent: &Event, config: &SimulationConfig<'_>, rng: &mut R) -> Vec<Event> {
    let (_, kids) = offspring(
        parent.location,
        parent.time,
        config.gamma0,
        config.delta,
        config.tau,
        config.grid.window(),
        true,
        rng,
    );
    kids.into_iter()
        .enumerate()
        .map(|(k, (p, t))| Event::new(format!("{}.{}", parent.id, k + 1), p.x, p.y, t))
        .collect()
}

fn immigrants<E: Executor>(config: &SimulationConfig<'_>, exec: &E) -> Result<Vec<(Point, f64)>, SimulationError> {
    let grid = config.grid;
    let design = Design::new(grid, &config.columns)?;
    if config.beta.len() != design.p {
        return Err(ModelError::ParameterLength {
            expected: design.p,
            got: config.beta.len(),
        }
        .into());
    }
    let eta = design.eta(&config.beta);
    let per_row = exec.map(design.n_rows(), |r| -> Result<Vec<(Point, f64)>, SimulationError> {
        if !design.populated_row(r) {
            return Ok(Vec::new());
        }
        let mut rng = rng::stream(config.seed, Domain::Endemic, r as u64);
        let n = poisson(libm::exp(design.offset(r) + eta[r]), &mut rng);
        let k = design.cell_of_row(r);
        let period = &grid.periods()[r % grid.n_periods()];
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let p = uniform_in(grid, k, &mut rng)?;
            out.push((p, period.end - rng.random::<f64>() * period.duration()));
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for v in per_row {
        all.extend(v?);
    }
    Ok(all)
}

fn assemble(config: &SimulationConfig<'_>, cascades: Vec<(Vec<Node>, u64)>, mut warnings: Vec<String>) -> Result<SimulatedPattern, SimulationError> {
    // (time, cascade, position) orders events; ids follow that order.
    let mut keys: Vec<(f64, u32, u32)> = Vec::new();
    for (m, (nodes, _)) in cascades.iter().enumerate() {
        for (j, node) in nodes.iter().enumerate() {
            keys.push((node.time, m as u32, j as u32));
        }
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut position: Vec<Vec<usize>> = cascades.iter().map(|(n, _)| alloc::vec![0; n.len()]).collect();
    for (i, &(_, m, j)) in keys.iter().enumerate() {
        position[m as usize][j as usize] = i;
    }
    let mut events = Vec::with_capacity(keys.len());
    let mut parent = Vec::with_capacity(keys.len());
    let mut generation = Vec::with_capacity(keys.len());
    for (i, &(_, m, j)) in keys.iter().enumerate() {
        let node = cascades[m as usize].0[j as usize];
        events.push(Event::new((i + 1).to_string(), node.location.x, node.location.y, node.time));
        parent.push(node.parent.map(|q| position[m as usize][q as usize]));
        generation.push(node.generation);
    }
    let truncated: u64 = cascades.iter().map(|c| c.1).sum();
    if truncated > 0 {
        warnings.push(format!(
            "generation cap {} reached; {truncated} offspring not simulated",
            config.max_generations
        ));
    }
    let pattern = PointPattern::new(events, config.grid.window_arc().clone())?;
    Ok(SimulatedPattern {
        pattern,
        parent,
        generation,
        truncated,
        warnings,
    })
}

/// Immigrants only.
pub fn simulate_endemic(config: &SimulationConfig<'_>) -> Result<SimulatedPattern, SimulationError> {
    simulate_endemic_with(config, &Sequential)
}

pub fn simulate_endemic_with<E: Executor>(config: &SimulationConfig<'_>, exec: &E) -> Result<SimulatedPattern, SimulationError> {
    let warnings = config.validate()?;
    let imm = immigrants(config, exec)?;
    let cascades = imm
        .into_iter()
        .map(|(location, time)| {
            (
                alloc::vec![Node {
                    location,
                    time,
                    parent: None,
                    generation: 0,
                }],
                0,
            )
        })
        .collect();
    assemble(config, cascades, warnings)
}

/// Immigrants and all their descendants up to the generation cap.
pub fn simulate(config: &SimulationConfig<'_>) -> Result<SimulatedPattern, SimulationError> {
    simulate_with(config, &Sequential)
}

pub fn simulate_with<E: Executor>(config: &SimulationConfig<'_>, exec: &E) -> Result<SimulatedPattern, SimulationError> {
    let warnings = config.validate()?;
    let imm = immigrants(config, exec)?;
    let window = config.grid.window();
    let cascades = exec.map(imm.len(), |m| {
        let (location, time) = imm[m];
        let mut nodes = alloc::vec![Node {
            location,
            time,
            parent: None,
            generation: 0,
        }];
        if config.gamma0 <= 0.0 {
            return (nodes, 0);
        }
        let mut rng = rng::stream(config.seed, Domain::Cascade, m as u64);
        let mut truncated = 0;
        let mut i = 0;
        while i < nodes.len() {
            let node = nodes[i];
            let capped = node.generation >= config.max_generations;
            let (n, kids) = offspring(node.location, node.time, config.gamma0, config.delta, config.tau, window, !capped, &mut rng);
            if capped {
                truncated += n;
            }
            for (p, t) in kids {
                nodes.push(Node {
                    location: p,
                    time: t,
                    parent: Some(i as u32),
                    generation: node.generation + 1,
                });
            }
            i += 1;
        }
        (nodes, truncated)
    });
    assemble(config, cascades, warnings)
}
