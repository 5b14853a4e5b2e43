//! Classical space-time interaction statistics: Knox, Mantel and the
//! space-time K-function with its D̂ surface.
//!
//! Each statistic has a reusable evaluator (`KnoxCounter`,
//! `MantelCorrelation`, `KSurfaceEngine`) that caches everything which does
//! not change when times are permuted over fixed locations, so permutation
//! replicates only redo the time-dependent part.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::PointPattern;
use crate::geometry::{ripley_weight, temporal_weight, GeometryError, Point, Window};
use crate::pairs::{close_pairs, time_close_count};
use crate::sum::{kahan_sum, Kahan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassicalError {
    #[error("need at least {need} events, got {got}")]
    TooFewEvents { need: usize, got: usize },
    #[error("threshold {name} must be positive and finite, got {value}")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("{0} distances have zero variance")]
    ZeroVariance(&'static str),
    #[error("{0} grid is empty")]
    EmptyGrid(&'static str),
    #[error("{0} grid must be strictly increasing and non-negative")]
    UnorderedGrid(&'static str),
    #[error("largest time lag {tau} must be below the study period length {t_max}")]
    LagTooLong { tau: f64, t_max: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn check_threshold(name: &'static str, value: f64) -> Result<(), ClassicalError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ClassicalError::InvalidThreshold { name, value })
    }
}

/// 2×2 table of unordered event pairs by spatial (`<= δ`) and temporal
/// (`<= τ`) closeness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KnoxTable {
    pub close_both: u64,
    pub space_only: u64,
    pub time_only: u64,
    pub neither: u64,
}

impl KnoxTable {
    pub fn from_margins(close_both: u64, space_close: u64, time_close: u64, total: u64) -> Self {
        Self {
            close_both,
            space_only: space_close - close_both,
            time_only: time_close - close_both,
            neither: total + close_both - space_close - time_close,
        }
    }

    /// The Knox statistic: pairs close in both space and time.
    pub fn statistic(&self) -> u64 {
        self.close_both
    }

    pub fn space_close(&self) -> u64 {
        self.close_both + self.space_only
    }

    pub fn time_close(&self) -> u64 {
        self.close_both + self.time_only
    }

    pub fn total(&self) -> u64 {
        self.close_both + self.space_only + self.time_only + self.neither
    }

    /// Close-pair count expected without space-time interaction.
    pub fn expected(&self) -> f64 {
        self.space_close() as f64 * self.time_close() as f64 / self.total() as f64
    }
}

/// Spatially close pairs for a fixed set of locations.
#[derive(Clone, Debug)]
pub struct KnoxCounter {
    pairs: Vec<(u32, u32)>,
    tau: f64,
}

impl KnoxCounter {
    pub fn new(locations: &[Point], delta: f64, tau: f64) -> Self {
        Self {
            pairs: close_pairs(locations, delta),
            tau,
        }
    }

    pub fn space_close(&self) -> u64 {
        self.pairs.len() as u64
    }

    /// Close-close count with `times[i]` attached to location `i`.
    pub fn count(&self, times: &[f64]) -> u64 {
        self.pairs
            .iter()
            .filter(|&&(i, j)| (times[i as usize] - times[j as usize]).abs() <= self.tau)
            .count() as u64
    }
}

pub fn knox_statistic(p: &PointPattern, delta: f64, tau: f64) -> Result<KnoxTable, ClassicalError> {
    let n = p.len();
    if n < 2 {
        return Err(ClassicalError::TooFewEvents { need: 2, got: n });
    }
    check_threshold("delta", delta)?;
    check_threshold("tau", tau)?;
    let times = p.times();
    let counter = KnoxCounter::new(&p.locations(), delta, tau);
    let total = (n as u64) * (n as u64 - 1) / 2;
    Ok(KnoxTable::from_margins(
        counter.count(&times),
        counter.space_close(),
        time_close_count(&times, tau),
        total,
    ))
}

/// Double-loop version of [`knox_statistic`].
pub fn knox_brute(p: &PointPattern, delta: f64, tau: f64) -> Result<KnoxTable, ClassicalError> {
    let n = p.len();
    if n < 2 {
        return Err(ClassicalError::TooFewEvents { need: 2, got: n });
    }
    let ev = p.events();
    let mut t = KnoxTable {
        close_both: 0,
        space_only: 0,
        time_only: 0,
        neither: 0,
    };
    for i in 0..n {
        for j in i + 1..n {
            let s = ev[i].location.dist(ev[j].location) <= delta;
            let c = (ev[i].time - ev[j].time).abs() <= tau;
            match (s, c) {
                (true, true) => t.close_both += 1,
                (true, false) => t.space_only += 1,
                (false, true) => t.time_only += 1,
                (false, false) => t.neither += 1,
            }
        }
    }
    Ok(t)
}

/// Pearson correlation of spatial and temporal pair distances, with the
/// spatial side cached.
#[derive(Clone, Debug)]
pub struct MantelCorrelation {
    locations: Vec<Point>,
    /// Centred spatial distances in pair order when small enough to cache.
    centred: Option<Vec<f64>>,
    mean_s: f64,
    ss_s: f64,
    mean_t: f64,
    ss_t: f64,
}

const MANTEL_CACHE_LIMIT: usize = 8_000_000;

impl MantelCorrelation {
    pub fn new(locations: Vec<Point>, times: &[f64]) -> Result<Self, ClassicalError> {
        let n = locations.len();
        if n < 3 {
            return Err(ClassicalError::TooFewEvents { need: 3, got: n });
        }
        let m = n * (n - 1) / 2;
        let pair_iter = |f: &mut dyn FnMut(f64)| {
            for i in 0..n {
                for j in i + 1..n {
                    f(locations[i].dist(locations[j]));
                }
            }
        };
        let mut acc = Kahan::new();
        pair_iter(&mut |d| acc.add(d));
        let mean_s = acc.value() / m as f64;
        let mut ss = Kahan::new();
        pair_iter(&mut |d| ss.add((d - mean_s) * (d - mean_s)));
        let ss_s = ss.value();
        let centred = (m <= MANTEL_CACHE_LIMIT).then(|| {
            let mut v = Vec::with_capacity(m);
            pair_iter(&mut |d| v.push(d - mean_s));
            v
        });

        let mut acc = Kahan::new();
        for i in 0..n {
            for j in i + 1..n {
                acc.add((times[i] - times[j]).abs());
            }
        }
        let mean_t = acc.value() / m as f64;
        let mut ss = Kahan::new();
        for i in 0..n {
            for j in i + 1..n {
                let d = (times[i] - times[j]).abs() - mean_t;
                ss.add(d * d);
            }
        }
        let ss_t = ss.value();
        if !(ss_s > 0.0) {
            return Err(ClassicalError::ZeroVariance("spatial"));
        }
        if !(ss_t > 0.0) {
            return Err(ClassicalError::ZeroVariance("temporal"));
        }
        Ok(Self {
            locations,
            centred,
            mean_s,
            ss_s,
            mean_t,
            ss_t,
        })
    }

    /// Correlation with `times[i]` attached to location `i`. `times` must be a
    /// permutation of the times used at construction.
    pub fn correlation(&self, times: &[f64]) -> f64 {
        let n = self.locations.len();
        let mut acc = Kahan::new();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let ds = match &self.centred {
                    Some(c) => c[k],
                    None => self.locations[i].dist(self.locations[j]) - self.mean_s,
                };
                k += 1;
                acc.add(ds * ((times[i] - times[j]).abs() - self.mean_t));
            }
        }
        (acc.value() / libm::sqrt(self.ss_s * self.ss_t)).clamp(-1.0, 1.0)
    }
}

pub fn mantel_statistic(p: &PointPattern) -> Result<f64, ClassicalError> {
    let times = p.times();
    Ok(MantelCorrelation::new(p.locations(), &times)?.correlation(&times))
}

/// Space-time K-function estimates on a `deltas × taus` grid.
///
/// Matrices are row-major with one row per δ.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DSurface {
    pub deltas: Vec<f64>,
    pub taus: Vec<f64>,
    pub k: Vec<f64>,
    pub ks: Vec<f64>,
    pub kt: Vec<f64>,
    pub d: Vec<f64>,
}

impl DSurface {
    pub fn k_at(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.taus.len() + j]
    }

    pub fn d_at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.taus.len() + j]
    }
}

/// Edge-correction mode for the K-function estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EdgeWeights {
    #[default]
    Corrected,
    /// All weights 1 (the uncorrected estimator).
    Unit,
}

struct SpacePair {
    i: u32,
    j: u32,
    delta_bin: u32,
    w_ij: f64,
    w_ji: f64,
}

/// Spatial part of the K-function estimators for fixed locations.
pub struct KSurfaceEngine {
    deltas: Vec<f64>,
    taus: Vec<f64>,
    pairs: Vec<SpacePair>,
    ks: Vec<f64>,
    kt: Vec<f64>,
    t_max: f64,
    scale_st: f64,
    weights: EdgeWeights,
}

fn check_grid(name: &'static str, g: &[f64]) -> Result<(), ClassicalError> {
    if g.is_empty() {
        return Err(ClassicalError::EmptyGrid(name));
    }
    if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || g.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ClassicalError::UnorderedGrid(name));
    }
    Ok(())
}

/// Index of the first grid value `>= x` (grid length if none).
fn bin(grid: &[f64], x: f64) -> usize {
    grid.partition_point(|g| *g < x)
}

impl KSurfaceEngine {
    pub fn new(
        window: &Window,
        locations: &[Point],
        times: &[f64],
        deltas: &[f64],
        taus: &[f64],
        weights: EdgeWeights,
    ) -> Result<Self, ClassicalError> {
        check_grid("delta", deltas)?;
        check_grid("tau", taus)?;
        let n = locations.len();
        if n < 2 {
            return Err(ClassicalError::TooFewEvents { need: 2, got: n });
        }
        let t_max = window.t_max();
        let tau_max = *taus.last().expect("non-empty");
        if tau_max >= t_max {
            return Err(ClassicalError::LagTooLong { tau: tau_max, t_max });
        }
        let nd = deltas.len();
        let nn1 = n as f64 * (n as f64 - 1.0);
        let delta_max = *deltas.last().expect("non-empty");

        let mut pairs = Vec::new();
        let mut ks_bins = vec![Kahan::new(); nd];
        for (i, j) in close_pairs(locations, delta_max) {
            let (pi, pj) = (locations[i as usize], locations[j as usize]);
            let d = pi.dist(pj);
            let (w_ij, w_ji) = match weights {
                EdgeWeights::Corrected => (ripley_weight(pi, d, window)?, ripley_weight(pj, d, window)?),
                EdgeWeights::Unit => (1.0, 1.0),
            };
            let b = bin(deltas, d);
            ks_bins[b].add(w_ij + w_ji);
            pairs.push(SpacePair {
                i,
                j,
                delta_bin: b as u32,
                w_ij,
                w_ji,
            });
        }
        let ks = cumulate(&ks_bins, window.area() / nn1);

        // Temporal marginal: depends on the time multiset only.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let sorted: Vec<f64> = order.iter().map(|&k| times[k]).collect();
        let mut kt_bins = vec![Kahan::new(); taus.len()];
        for a in 0..n {
            for b in a + 1..n {
                let lag = sorted[b] - sorted[a];
                if lag > tau_max {
                    break;
                }
                let (v_ab, v_ba) = match weights {
                    EdgeWeights::Corrected => (temporal_weight(sorted[a], lag, t_max)?, temporal_weight(sorted[b], lag, t_max)?),
                    EdgeWeights::Unit => (1.0, 1.0),
                };
                kt_bins[bin(taus, lag)].add(v_ab + v_ba);
            }
        }
        let kt = cumulate(&kt_bins, t_max / nn1);

        Ok(Self {
            deltas: deltas.to_vec(),
            taus: taus.to_vec(),
            pairs,
            ks,
            kt,
            t_max,
            scale_st: window.area() * t_max / nn1,
            weights,
        })
    }

    /// Unscaled Σ w_ij v_ij over ordered pairs within each (δ, τ), row-major.
    pub fn pair_sums(&self, times: &[f64]) -> Result<Vec<f64>, ClassicalError> {
        let (nd, nt) = (self.deltas.len(), self.taus.len());
        let tau_max = self.taus[nt - 1];
        let mut bins = vec![Kahan::new(); nd * nt];
        for p in &self.pairs {
            let (ti, tj) = (times[p.i as usize], times[p.j as usize]);
            let lag = (ti - tj).abs();
            if lag > tau_max {
                continue;
            }
            let (v_ij, v_ji) = match self.weights {
                EdgeWeights::Corrected => (temporal_weight(ti, lag, self.t_max)?, temporal_weight(tj, lag, self.t_max)?),
                EdgeWeights::Unit => (1.0, 1.0),
            };
            bins[p.delta_bin as usize * nt + bin(&self.taus, lag)].add(p.w_ij * v_ij + p.w_ji * v_ji);
        }
        let mut k = vec![0.0; nd * nt];
        for a in 0..nd {
            let mut row = 0.0;
            for b in 0..nt {
                row += bins[a * nt + b].value();
                k[a * nt + b] = row + if a > 0 { k[(a - 1) * nt + b] } else { 0.0 };
            }
        }
        Ok(k)
    }

    /// Full surface with `times[i]` attached to location `i`.
    pub fn surface(&self, times: &[f64]) -> Result<DSurface, ClassicalError> {
        let (nd, nt) = (self.deltas.len(), self.taus.len());
        let mut k = self.pair_sums(times)?;
        for v in &mut k {
            *v *= self.scale_st;
        }
        let mut d = vec![0.0; nd * nt];
        for a in 0..nd {
            for b in 0..nt {
                d[a * nt + b] = k[a * nt + b] - self.ks[a] * self.kt[b];
            }
        }
        Ok(DSurface {
            deltas: self.deltas.clone(),
            taus: self.taus.clone(),
            k,
            ks: self.ks.clone(),
            kt: self.kt.clone(),
            d,
        })
    }
}

fn cumulate(bins: &[Kahan], scale: f64) -> Vec<f64> {
    let mut run = 0.0;
    bins.iter()
        .map(|b| {
            run += b.value();
            run * scale
        })
        .collect()
}

/// Edge-corrected K̂, K̂_s, K̂_t and D̂ over the given grids. Both grids must be
/// strictly increasing and the largest lag shorter than the study period.
pub fn k_surface(p: &PointPattern, deltas: &[f64], taus: &[f64]) -> Result<DSurface, ClassicalError> {
    k_surface_weighted(p, deltas, taus, EdgeWeights::Corrected)
}

pub fn k_surface_weighted(p: &PointPattern, deltas: &[f64], taus: &[f64], weights: EdgeWeights) -> Result<DSurface, ClassicalError> {
    let times = p.times();
    KSurfaceEngine::new(p.window(), &p.locations(), &times, deltas, taus, weights)?.surface(&times)
}

/// Sum of D̂ over the grid.
pub fn omnibus_statistic(d: &DSurface) -> f64 {
    kahan_sum(d.d.iter().copied())
}
