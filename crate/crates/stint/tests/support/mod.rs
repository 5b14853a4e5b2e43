//! Grids and data generators shared by the integration targets.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stint_core::data::{build_grid, Cell, CellGeometry, CellTable, Period, PeriodTable};
use stint_core::geometry::{Point, Polygon, Rect};
use stint_core::{CovariateGrid, Window};

pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
    Rect::new(Point::new(x0, y0), Point::new(x1, y1))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct CellSpec {
    pub rect: Rect,
    pub population: f64,
    pub covariates: Vec<f64>,
}

/// Rectangular cells tiling `bbox`, and periods given by their end days.
pub fn grid(
    bbox: Rect,
    cells: Vec<CellSpec>,
    cell_columns: &[&str],
    ends: &[f64],
    period_columns: &[&str],
    period_values: Vec<Vec<f64>>,
) -> CovariateGrid {
    let t_max = *ends.last().unwrap();
    let window = Arc::new(Window::from_polygons(vec![Polygon::rectangle(bbox)], t_max).unwrap());
    let cells = CellTable {
        columns: cell_columns.iter().map(|s| s.to_string()).collect(),
        cells: cells
            .into_iter()
            .enumerate()
            .map(|(i, c)| Cell {
                id: format!("c{}", i + 1),
                area: c.rect.area(),
                population: c.population,
                covariates: c.covariates,
                geometry: CellGeometry::Polygons(vec![Polygon::rectangle(c.rect)]),
            })
            .collect(),
    };
    let mut start = 0.0;
    let periods = PeriodTable {
        columns: period_columns.iter().map(|s| s.to_string()).collect(),
        periods: ends
            .iter()
            .zip(period_values)
            .enumerate()
            .map(|(i, (&end, covariates))| {
                let p = Period {
                    id: format!("p{}", i + 1),
                    start,
                    end,
                    covariates,
                };
                start = end;
                p
            })
            .collect(),
    };
    build_grid(cells, periods, window).unwrap()
}

/// 2 x 2 km square in four quadrant cells with covariate `x`, and four
/// 25-day periods with indicator `late`.
pub fn quadrant_grid() -> CovariateGrid {
    let pops = [1000.0, 2000.0, 3000.0, 4000.0];
    let xs = [0.5, -0.3, 0.8, -1.0];
    let cells = (0..4)
        .map(|k| {
            let (cx, cy) = ((k % 2) as f64, (k / 2) as f64);
            CellSpec {
                rect: rect(cx, cy, cx + 1.0, cy + 1.0),
                population: pops[k],
                covariates: vec![xs[k]],
            }
        })
        .collect();
    grid(
        rect(0.0, 0.0, 2.0, 2.0),
        cells,
        &["x"],
        &[25.0, 50.0, 75.0, 100.0],
        &["late"],
        vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]],
    )
}

/// Intercept giving `target` expected endemic events for the other
/// coefficients `rest` (one per grid column in `columns`).
pub fn intercept_for(grid: &CovariateGrid, columns: &[&str], rest: &[f64], target: f64) -> f64 {
    let idx: Vec<usize> = columns.iter().map(|c| grid.column_index(c).unwrap()).collect();
    let mut total = 0.0;
    for k in 0..grid.n_cells() {
        for l in 0..grid.n_periods() {
            let row = grid.row(k, l);
            let eta: f64 = idx.iter().zip(rest).map(|(&j, b)| b * grid.z(row, j)).sum();
            total += grid.cells()[k].population * grid.periods()[l].duration() * eta.exp();
        }
    }
    (target / total).ln()
}

/// Uniform draw in `(0, 1]`.
pub fn open_unit<R: Rng>(r: &mut R) -> f64 {
    1.0 - r.random::<f64>()
}
