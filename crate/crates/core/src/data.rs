//! Events, point patterns and the cell × period covariate grid.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use thiserror::Error;

use crate::geometry::{GeometryError, Point, Polygon, Rect, Window};
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Event {
    pub id: String,
    pub location: Point,
    /// Days since the start of the study period, in `(0, t_max]`.
    pub time: f64,
    pub mark: Option<String>,
}

impl Event {
    pub fn new(id: impl Into<String>, x: f64, y: f64, time: f64) -> Self {
        Self {
            id: id.into(),
            location: Point::new(x, y),
            time,
            mark: None,
        }
    }

    pub fn with_mark(mut self, mark: impl Into<String>) -> Self {
        self.mark = Some(mark.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowProblem {
    TimeOutOfRange { time: f64, t_max: f64 },
    OutsideWindow { x: f64, y: f64 },
    DuplicateId,
    NonFinite,
}

impl fmt::Display for RowProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowProblem::TimeOutOfRange { time, t_max } => write!(f, "time {time} outside (0, {t_max}]"),
            RowProblem::OutsideWindow { x, y } => write!(f, "location ({x}, {y}) outside the window"),
            RowProblem::DuplicateId => f.write_str("duplicate id"),
            RowProblem::NonFinite => f.write_str("non-finite coordinate or time"),
        }
    }
}

/// A rejected input row. `row` counts data rows from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RowIssue {
    pub row: usize,
    pub id: String,
    pub problem: RowProblem,
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {} (id {}): {}", self.row, self.id, self.problem)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{} row(s) rejected; first: {}", .0.len(), .0[0])]
    Rows(Vec<RowIssue>),
    #[error("duplicate cell id {0:?}")]
    DuplicateCell(String),
    #[error("duplicate period id {0:?}")]
    DuplicatePeriod(String),
    #[error("cell areas sum to {cells} km², window area is {window} km² (tolerance 0.1%)")]
    AreaMismatch { cells: f64, window: f64 },
    #[error("cell {0:?} has negative or non-finite population or area")]
    InvalidCell(String),
    #[error("no cell has positive population")]
    NoPopulation,
    #[error("periods must start at day 0, first starts at {0}")]
    PeriodStart(f64),
    #[error("periods must end at t_max = {t_max}, last ends at {end}")]
    PeriodEnd { end: f64, t_max: f64 },
    #[error("gap between period {before:?} (ends {end}) and {after:?} (starts {start})")]
    PeriodGap { before: String, after: String, end: f64, start: f64 },
    #[error("period {after:?} (starts {start}) overlaps {before:?} (ends {end})")]
    PeriodOverlap { before: String, after: String, end: f64, start: f64 },
    #[error("period {0:?} is empty or reversed")]
    EmptyPeriod(String),
    #[error("covariate column {0:?} defined twice")]
    ColumnClash(String),
    #[error("{what} has {got} values, {expected} expected")]
    Shape { what: String, expected: usize, got: usize },
    #[error("grid needs at least one cell and one period")]
    EmptyGrid,
    #[error("several cells need cell geometry")]
    MissingGeometry,
}

/// Events in `W × (0, t_max]`, sorted by time (ties keep input order).
#[derive(Clone, Debug)]
pub struct PointPattern {
    events: Vec<Event>,
    window: Arc<Window>,
}

impl PointPattern {
    /// Validates every event and fails with an itemized report if any is
    /// rejected.
    pub fn new(events: Vec<Event>, window: Arc<Window>) -> Result<Self, DataError> {
        let (pattern, issues) = Self::screen(events, window);
        if issues.is_empty() {
            Ok(pattern)
        } else {
            Err(DataError::Rows(issues))
        }
    }

    /// Keeps the valid events and reports the rejected ones.
    pub fn screen(events: Vec<Event>, window: Arc<Window>) -> (Self, Vec<RowIssue>) {
        let t_max = window.t_max();
        let mut issues = Vec::new();
        let mut kept: Vec<Event> = Vec::with_capacity(events.len());
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (i, e) in events.into_iter().enumerate() {
            let row = i + 1;
            let problem = if !(e.location.x.is_finite() && e.location.y.is_finite() && e.time.is_finite()) {
                Some(RowProblem::NonFinite)
            } else if !(e.time > 0.0 && e.time <= t_max) {
                Some(RowProblem::TimeOutOfRange { time: e.time, t_max })
            } else if !window.contains(e.location) {
                Some(RowProblem::OutsideWindow {
                    x: e.location.x,
                    y: e.location.y,
                })
            } else if seen.contains(&e.id) {
                Some(RowProblem::DuplicateId)
            } else {
                None
            };
            match problem {
                Some(problem) => issues.push(RowIssue { row, id: e.id, problem }),
                None => {
                    seen.insert(e.id.clone());
                    kept.push(e);
                }
            }
        }
        kept.sort_by(|a, b| a.time.total_cmp(&b.time));
        (Self { events: kept, window }, issues)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn window_arc(&self) -> &Arc<Window> {
        &self.window
    }

    pub fn locations(&self) -> Vec<Point> {
        self.events.iter().map(|e| e.location).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    /// Reassigns times: event `i` (in current order) receives `times[i]`,
    /// keeping its id, location and mark. The result is re-sorted by time.
    pub fn with_times(&self, times: &[f64]) -> Self {
        assert_eq!(times.len(), self.events.len());
        let mut events: Vec<Event> = self
            .events
            .iter()
            .zip(times)
            .map(|(e, &t)| Event { time: t, ..e.clone() })
            .collect();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Self {
            events,
            window: self.window.clone(),
        }
    }

    /// Subset with the given mark, in the same order. An empty result is
    /// returned with a warning rather than an error.
    pub fn filter_by_mark(&self, mark: &str) -> (Self, Option<String>) {
        let events: Vec<Event> = self.events.iter().filter(|e| e.mark.as_deref() == Some(mark)).cloned().collect();
        let warning = events.is_empty().then(|| format!("no events carry mark {mark:?}"));
        (
            Self {
                events,
                window: self.window.clone(),
            },
            warning,
        )
    }
}

/// How recorded times map onto the continuous time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeConvention {
    /// Times are already continuous days.
    #[default]
    Exact,
    /// Day stamps `0, 1, …` are placed at the middle of the day (`+0.5`).
    DayMidpoint,
    /// Day stamps are spread uniformly within the day; the draw for each row
    /// depends only on the seed and the row index.
    DayJitter { seed: u64 },
}

impl TimeConvention {
    pub fn apply(&self, row: usize, raw: f64) -> f64 {
        match *self {
            TimeConvention::Exact => raw,
            TimeConvention::DayMidpoint => raw + 0.5,
            TimeConvention::DayJitter { seed } => {
                let u: f64 = rng::stream(seed, Domain::Jitter, row as u64).random();
                // (raw, raw + 1]
                raw + 1.0 - u
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellGeometry {
    /// The cell is the whole window (single-cell grids).
    Window,
    Polygons(Vec<Polygon>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    /// Populated area in km².
    pub area: f64,
    /// Population count.
    pub population: f64,
    pub covariates: Vec<f64>,
    pub geometry: CellGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Period {
    pub id: String,
    pub start: f64,
    pub end: f64,
    pub covariates: Vec<f64>,
}

impl Period {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Cell records with named covariate columns.
#[derive(Clone, Debug, Default)]
pub struct CellTable {
    pub columns: Vec<String>,
    pub cells: Vec<Cell>,
}

/// Period records with named covariate columns.
#[derive(Clone, Debug, Default)]
pub struct PeriodTable {
    pub columns: Vec<String>,
    pub periods: Vec<Period>,
}

impl PeriodTable {
    /// Consecutive periods of `step` days covering `(0, t_max]`, no covariates.
    pub fn regular(t_max: f64, step: f64) -> Self {
        let mut periods = Vec::new();
        let mut start = 0.0;
        let mut k = 0;
        while start < t_max {
            let end = (start + step).min(t_max);
            periods.push(Period {
                id: format!("{}", k + 1),
                start,
                end,
                covariates: Vec::new(),
            });
            k += 1;
            start = k as f64 * step;
        }
        Self {
            columns: Vec::new(),
            periods,
        }
    }
}

/// The endemic cell × period grid.
///
/// Rows are indexed `cell * n_periods + period`; `z` holds one value per row
/// and covariate column (cell columns, then period columns, then any
/// cell-period columns added later).
#[derive(Clone, Debug)]
pub struct CovariateGrid {
    cells: Vec<Cell>,
    periods: Vec<Period>,
    columns: Vec<String>,
    z: Vec<f64>,
    centroids: Vec<Point>,
    boxes: Vec<Option<Rect>>,
    window: Arc<Window>,
}

fn polygon_centroid(polys: &[Polygon]) -> Point {
    let (mut cx, mut cy, mut a) = (0.0, 0.0, 0.0);
    for p in polys {
        let rings = core::iter::once(p.exterior()).chain(p.holes().iter().map(Vec::as_slice));
        for ring in rings {
            let n = ring.len();
            for i in 0..n {
                let (u, v) = (ring[i], ring[(i + 1) % n]);
                let c = u.x * v.y - v.x * u.y;
                cx += (u.x + v.x) * c;
                cy += (u.y + v.y) * c;
                a += 0.5 * c;
            }
        }
    }
    Point::new(cx / (6.0 * a), cy / (6.0 * a))
}

fn window_centroid(w: &Window) -> Point {
    if !w.polygons().is_empty() {
        return polygon_centroid(w.polygons());
    }
    let r = w.raster().expect("window has polygons or a raster");
    let (nc, _) = r.dims();
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in r.inside_cells() {
        let rect = r.cell_rect(i as usize % nc, i as usize / nc);
        sx += 0.5 * (rect.min.x + rect.max.x);
        sy += 0.5 * (rect.min.y + rect.max.y);
    }
    let k = r.inside_cells().len() as f64;
    Point::new(sx / k, sy / k)
}

/// Validates the cell and period tables against the window and joins their
/// covariates into the grid design.
pub fn build_grid(cells: CellTable, periods: PeriodTable, window: Arc<Window>) -> Result<CovariateGrid, DataError> {
    let CellTable { columns: cell_cols, cells } = cells;
    let PeriodTable {
        columns: period_cols,
        periods: mut plist,
    } = periods;
    if cells.is_empty() || plist.is_empty() {
        return Err(DataError::EmptyGrid);
    }
    let mut columns = cell_cols.clone();
    for c in &period_cols {
        if columns.contains(c) {
            return Err(DataError::ColumnClash(c.clone()));
        }
        columns.push(c.clone());
    }
    let mut ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(DataError::DuplicateCell(String::from(w[0])));
    }
    for c in &cells {
        if !(c.population >= 0.0 && c.population.is_finite() && c.area > 0.0 && c.area.is_finite()) {
            return Err(DataError::InvalidCell(c.id.clone()));
        }
        if c.covariates.len() != cell_cols.len() {
            return Err(DataError::Shape {
                what: format!("cell {:?}", c.id),
                expected: cell_cols.len(),
                got: c.covariates.len(),
            });
        }
        if cells.len() > 1 && c.geometry == CellGeometry::Window {
            return Err(DataError::MissingGeometry);
        }
    }
    if !cells.iter().any(|c| c.population > 0.0) {
        return Err(DataError::NoPopulation);
    }
    let total: f64 = cells.iter().map(|c| c.area).sum();
    if libm::fabs(total - window.area()) > 1e-3 * window.area() {
        return Err(DataError::AreaMismatch {
            cells: total,
            window: window.area(),
        });
    }

    plist.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut pids: Vec<&str> = plist.iter().map(|p| p.id.as_str()).collect();
    pids.sort_unstable();
    if let Some(w) = pids.windows(2).find(|w| w[0] == w[1]) {
        return Err(DataError::DuplicatePeriod(String::from(w[0])));
    }
    let t_max = window.t_max();
    let tol = 1e-9 * t_max.max(1.0);
    for p in &plist {
        if !(p.end > p.start) {
            return Err(DataError::EmptyPeriod(p.id.clone()));
        }
        if p.covariates.len() != period_cols.len() {
            return Err(DataError::Shape {
                what: format!("period {:?}", p.id),
                expected: period_cols.len(),
                got: p.covariates.len(),
            });
        }
    }
    if libm::fabs(plist[0].start) > tol {
        return Err(DataError::PeriodStart(plist[0].start));
    }
    let last = plist.last().expect("non-empty");
    if libm::fabs(last.end - t_max) > tol {
        return Err(DataError::PeriodEnd { end: last.end, t_max });
    }
    for w in plist.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.start - a.end > tol {
            return Err(DataError::PeriodGap {
                before: a.id.clone(),
                after: b.id.clone(),
                end: a.end,
                start: b.start,
            });
        }
        if a.end - b.start > tol {
            return Err(DataError::PeriodOverlap {
                before: a.id.clone(),
                after: b.id.clone(),
                end: a.end,
                start: b.start,
            });
        }
    }
    // Snap shared boundaries so the partition is exact.
    plist[0].start = 0.0;
    let np = plist.len();
    plist[np - 1].end = t_max;
    for i in 1..np {
        plist[i].start = plist[i - 1].end;
    }

    let nc = columns.len();
    let mut z = Vec::with_capacity(cells.len() * np * nc);
    for c in &cells {
        for p in &plist {
            z.extend_from_slice(&c.covariates);
            z.extend_from_slice(&p.covariates);
        }
    }
    let centroids = cells
        .iter()
        .map(|c| match &c.geometry {
            CellGeometry::Window => window_centroid(&window),
            CellGeometry::Polygons(p) => polygon_centroid(p),
        })
        .collect();
    let boxes = cells
        .iter()
        .map(|c| match &c.geometry {
            CellGeometry::Window => None,
            CellGeometry::Polygons(p) => p.iter().map(Polygon::bbox).reduce(|a, b| {
                Rect::new(
                    Point::new(a.min.x.min(b.min.x), a.min.y.min(b.min.y)),
                    Point::new(a.max.x.max(b.max.x), a.max.y.max(b.max.y)),
                )
            }),
        })
        .collect();
    Ok(CovariateGrid {
        cells,
        periods: plist,
        columns,
        z,
        centroids,
        boxes,
        window,
    })
}

impl CovariateGrid {
    /// One cell covering the whole window with the given population and
    /// periods; no cell covariates.
    pub fn single_cell(window: Arc<Window>, population: f64, periods: PeriodTable) -> Result<Self, DataError> {
        let cell = Cell {
            id: String::from("1"),
            area: window.area(),
            population,
            covariates: Vec::new(),
            geometry: CellGeometry::Window,
        };
        build_grid(
            CellTable {
                columns: Vec::new(),
                cells: alloc::vec![cell],
            },
            periods,
            window,
        )
    }

    /// Adds a covariate that varies over cells and periods;
    /// `values[cell * n_periods + period]`.
    pub fn with_cell_period_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        let name = name.into();
        if self.columns.contains(&name) {
            return Err(DataError::ColumnClash(name));
        }
        let rows = self.n_rows();
        if values.len() != rows {
            return Err(DataError::Shape {
                what: name,
                expected: rows,
                got: values.len(),
            });
        }
        let nc = self.columns.len();
        let mut z = Vec::with_capacity(rows * (nc + 1));
        for (r, v) in values.into_iter().enumerate() {
            z.extend_from_slice(&self.z[r * nc..(r + 1) * nc]);
            z.push(v);
        }
        self.z = z;
        self.columns.push(name);
        Ok(self)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn window_arc(&self) -> &Arc<Window> {
        &self.window
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len() * self.periods.len()
    }

    pub fn row(&self, cell: usize, period: usize) -> usize {
        cell * self.periods.len() + period
    }

    /// Covariate value of `column` in grid row `row`.
    pub fn z(&self, row: usize, column: usize) -> f64 {
        self.z[row * self.columns.len() + column]
    }

    pub fn centroid(&self, cell: usize) -> Point {
        self.centroids[cell]
    }

    /// Cell containing `p`. Points inside the window that fall in a sliver
    /// between cell polygons go to the cell with the nearest boundary.
    pub fn locate_cell(&self, p: Point) -> Option<usize> {
        if self.cells.len() == 1 && self.cells[0].geometry == CellGeometry::Window {
            return self.window.contains(p).then_some(0);
        }
        for (k, c) in self.cells.iter().enumerate() {
            if let (CellGeometry::Polygons(polys), Some(b)) = (&c.geometry, self.boxes[k]) {
                if b.contains(p) && polys.iter().any(|poly| poly.contains(p)) {
                    return Some(k);
                }
            }
        }
        if !self.window.contains(p) {
            return None;
        }
        let mut best = (f64::INFINITY, None);
        for (k, c) in self.cells.iter().enumerate() {
            if let CellGeometry::Polygons(polys) = &c.geometry {
                let d = polys.iter().map(|q| q.boundary_distance(p)).fold(f64::INFINITY, f64::min);
                if d < best.0 {
                    best = (d, Some(k));
                }
            }
        }
        best.1
    }

    /// Period `(start, end]` containing `t`.
    pub fn locate_period(&self, t: f64) -> Option<usize> {
        if !(t > 0.0 && t <= self.window.t_max()) {
            return None;
        }
        let idx = self.periods.partition_point(|p| p.end < t);
        (idx < self.periods.len()).then_some(idx)
    }

    pub fn locate(&self, p: Point, t: f64) -> Option<(usize, usize)> {
        Some((self.locate_cell(p)?, self.locate_period(t)?))
    }

    /// Area of cell `k` (within the window) inside `rect`.
    pub fn cell_area_in_rect(&self, k: usize, rect: &Rect) -> f64 {
        match &self.cells[k].geometry {
            CellGeometry::Window => self.window.area_in_rect(rect),
            CellGeometry::Polygons(p) => p.iter().map(|q| q.area_in_rect(rect)).sum(),
        }
    }

    /// Bounding box of the cell's geometry.
    pub fn cell_bbox(&self, k: usize) -> Rect {
        self.boxes[k].unwrap_or_else(|| self.window.bbox())
    }

    pub fn cell_contains(&self, k: usize, p: Point) -> bool {
        match &self.cells[k].geometry {
            CellGeometry::Window => self.window.contains(p),
            CellGeometry::Polygons(polys) => polys.iter().any(|q| q.contains(p)) && self.window.contains(p),
        }
    }
}
