//! File formats: events and grid tables as CSV, windows as GeoJSON or ESRI
//! ASCII rasters, and the CSV outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use geojson::{GeoJson, Geometry, Value};
use stint_core::data::{Cell, CellGeometry, CellTable, DataError, Period, PeriodTable, TimeConvention};
use stint_core::geometry::{GeometryError, Point, Polygon, Raster, Window};
use stint_core::model::{PixelResiduals, TemporalResiduals};
use stint_core::{DSurface, Event, PointPattern};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", .path.display())]
    Open { path: PathBuf, source: std::io::Error },
    #[error("{}: missing column {column:?}", .path.display())]
    MissingColumn { path: PathBuf, column: String },
    #[error("{} row {row}: {msg}", .path.display())]
    Parse { path: PathBuf, row: usize, msg: String },
    #[error("{}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Coordinate unit of input and output files. Everything internal is km.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    M,
    Km,
}

impl Units {
    /// Kilometres per file unit.
    pub fn to_km(self) -> f64 {
        match self {
            Units::M => 1e-3,
            Units::Km => 1.0,
        }
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::Open {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::Open {
        path: path.to_path_buf(),
        source,
    })
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Open {
        path: path.to_path_buf(),
        source,
    }
}

struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, IoError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
        let headers = rdr
            .headers()
            .map_err(|e| IoError::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            rows.push(rec.map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, IoError> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| IoError::MissingColumn {
            path: self.path.clone(),
            column: name.to_string(),
        })
    }

    fn number(&self, row: usize, col: usize) -> Result<f64, IoError> {
        let s = self.rows[row].get(col).unwrap_or("");
        s.parse::<f64>().map_err(|_| IoError::Parse {
            path: self.path.clone(),
            row: row + 1,
            msg: format!("column {:?}: {s:?} is not a number", self.headers[col]),
        })
    }

    fn text(&self, row: usize, col: usize) -> String {
        self.rows[row].get(col).unwrap_or("").to_string()
    }
}

/// Reads `id,x,y,t[,mark]`. Coordinates are converted to km and times mapped
/// through `times`.
pub fn read_events(path: &Path, units: Units, times: TimeConvention) -> Result<Vec<Event>, IoError> {
    let t = Table::read(path)?;
    let (id, x, y, tc) = (t.column("id")?, t.column("x")?, t.column("y")?, t.column("t")?);
    let mark = t.column("mark").ok();
    let k = units.to_km();
    let mut out = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let mut e = Event::new(t.text(r, id), t.number(r, x)? * k, t.number(r, y)? * k, times.apply(r + 1, t.number(r, tc)?));
        if let Some(m) = mark {
            let v = t.text(r, m);
            if !v.is_empty() {
                e = e.with_mark(v);
            }
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_events(path: &Path, pattern: &PointPattern, units: Units) -> Result<(), IoError> {
    let mut w = create(path)?;
    let k = units.to_km();
    let err = write_err(path);
    let marks = pattern.events().iter().any(|e| e.mark.is_some());
    writeln!(w, "id,x,y,t{}", if marks { ",mark" } else { "" }).map_err(&err)?;
    for e in pattern.events() {
        write!(w, "{},{},{},{}", e.id, e.location.x / k, e.location.y / k, e.time).map_err(&err)?;
        if marks {
            write!(w, ",{}", e.mark.as_deref().unwrap_or("")).map_err(&err)?;
        }
        writeln!(w).map_err(&err)?;
    }
    w.flush().map_err(&err)
}

fn ring(path: &Path, coords: &[Vec<f64>], k: f64) -> Result<Vec<Point>, IoError> {
    coords
        .iter()
        .map(|c| {
            if c.len() < 2 {
                Err(IoError::Format {
                    path: path.to_path_buf(),
                    msg: "position with fewer than two coordinates".into(),
                })
            } else {
                Ok(Point::new(c[0] * k, c[1] * k))
            }
        })
        .collect()
}

fn polygon(path: &Path, rings: &[Vec<Vec<f64>>], k: f64) -> Result<Polygon, IoError> {
    let (ext, holes) = rings.split_first().ok_or_else(|| IoError::Format {
        path: path.to_path_buf(),
        msg: "polygon without rings".into(),
    })?;
    let holes = holes.iter().map(|h| ring(path, h, k)).collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon::new(ring(path, ext, k)?, holes)?)
}

fn geometry_polygons(path: &Path, g: &Geometry, k: f64, out: &mut Vec<Polygon>) -> Result<(), IoError> {
    match &g.value {
        Value::Polygon(rings) => out.push(polygon(path, rings, k)?),
        Value::MultiPolygon(polys) => {
            for rings in polys {
                out.push(polygon(path, rings, k)?);
            }
        }
        Value::GeometryCollection(gs) => {
            for g in gs {
                geometry_polygons(path, g, k, out)?;
            }
        }
        _ => {
            return Err(IoError::Format {
                path: path.to_path_buf(),
                msg: "only Polygon and MultiPolygon geometries are supported".into(),
            })
        }
    }
    Ok(())
}

fn read_geojson(path: &Path) -> Result<GeoJson, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    text.parse::<GeoJson>().map_err(|e| IoError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// All polygons of a GeoJSON document.
pub fn read_polygons(path: &Path, units: Units) -> Result<Vec<Polygon>, IoError> {
    let k = units.to_km();
    let mut out = Vec::new();
    match read_geojson(path)? {
        GeoJson::Geometry(g) => geometry_polygons(path, &g, k, &mut out)?,
        GeoJson::Feature(f) => {
            if let Some(g) = &f.geometry {
                geometry_polygons(path, g, k, &mut out)?;
            }
        }
        GeoJson::FeatureCollection(fc) => {
            for f in &fc.features {
                if let Some(g) = &f.geometry {
                    geometry_polygons(path, g, k, &mut out)?;
                }
            }
        }
    }
    if out.is_empty() {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            msg: "no polygon found".into(),
        });
    }
    Ok(out)
}

/// Polygons per feature, keyed by the `cell_id` property.
pub fn read_cell_geometry(path: &Path, units: Units) -> Result<BTreeMap<String, Vec<Polygon>>, IoError> {
    let k = units.to_km();
    let GeoJson::FeatureCollection(fc) = read_geojson(path)? else {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            msg: "cell geometry must be a FeatureCollection".into(),
        });
    };
    let mut out: BTreeMap<String, Vec<Polygon>> = BTreeMap::new();
    for (i, f) in fc.features.iter().enumerate() {
        let id = match f.property("cell_id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(v @ serde_json::Value::Number(_)) => v.to_string(),
            _ => {
                return Err(IoError::Parse {
                    path: path.to_path_buf(),
                    row: i + 1,
                    msg: "feature has no cell_id property".into(),
                })
            }
        };
        let g = f.geometry.as_ref().ok_or_else(|| IoError::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            msg: "feature has no geometry".into(),
        })?;
        geometry_polygons(path, g, k, out.entry(id).or_default())?;
    }
    Ok(out)
}

/// ESRI ASCII grid. Cells holding NODATA or 0 are outside the window.
pub fn read_ascii_raster(path: &Path, units: Units) -> Result<Raster, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: String| IoError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut header: BTreeMap<String, f64> = BTreeMap::new();
    let mut tokens = text.split_whitespace().peekable();
    while let Some(&tok) = tokens.peek() {
        if tok.parse::<f64>().is_ok() {
            break;
        }
        let key = tok.to_ascii_lowercase();
        tokens.next();
        let v = tokens
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad(format!("header {key} has no numeric value")))?;
        header.insert(key, v);
    }
    let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(format!("missing header {k}")));
    let ncols = get("ncols")? as usize;
    let nrows = get("nrows")? as usize;
    let cell = get("cellsize")?;
    let (x0, y0) = match (header.get("xllcorner"), header.get("yllcorner")) {
        (Some(&x), Some(&y)) => (x, y),
        _ => (get("xllcenter")? - 0.5 * cell, get("yllcenter")? - 0.5 * cell),
    };
    let nodata = header.get("nodata_value").copied();
    let values: Vec<f64> = tokens
        .map(|s| s.parse::<f64>().map_err(|_| bad(format!("{s:?} is not a number"))))
        .collect::<Result<_, _>>()?;
    if values.len() != ncols * nrows {
        return Err(bad(format!("{} values for a {ncols}x{nrows} grid", values.len())));
    }
    // File rows run top to bottom; raster rows bottom to top.
    let mut mask = vec![false; ncols * nrows];
    for (i, v) in values.iter().enumerate() {
        let (frow, col) = (i / ncols, i % ncols);
        mask[(nrows - 1 - frow) * ncols + col] = *v != 0.0 && Some(*v) != nodata;
    }
    let k = units.to_km();
    Ok(Raster::new(Point::new(x0 * k, y0 * k), cell * k, ncols, nrows, mask)?)
}

/// A `.asc` path is read as a raster window, anything else as GeoJSON.
pub fn read_window(path: &Path, units: Units, t_max: f64) -> Result<Window, IoError> {
    let is_asc = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("asc"));
    Ok(if is_asc {
        Window::from_raster(read_ascii_raster(path, units)?, t_max)?
    } else {
        Window::from_polygons(read_polygons(path, units)?, t_max)?
    })
}

/// `cell_id,area_km2,population,...`; extra columns are numeric covariates.
pub fn read_cells(path: &Path, geometry: Option<&BTreeMap<String, Vec<Polygon>>>) -> Result<CellTable, IoError> {
    let t = Table::read(path)?;
    let (id, area, pop) = (t.column("cell_id")?, t.column("area_km2")?, t.column("population")?);
    let cov: Vec<usize> = (0..t.headers.len()).filter(|c| ![id, area, pop].contains(c)).collect();
    let mut cells = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let cid = t.text(r, id);
        let geometry = match geometry {
            Some(g) => CellGeometry::Polygons(g.get(&cid).cloned().ok_or_else(|| IoError::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                msg: format!("cell {cid:?} has no geometry feature"),
            })?),
            None => CellGeometry::Window,
        };
        cells.push(Cell {
            id: cid,
            area: t.number(r, area)?,
            population: t.number(r, pop)?,
            covariates: cov.iter().map(|&c| t.number(r, c)).collect::<Result<_, _>>()?,
            geometry,
        });
    }
    Ok(CellTable {
        columns: cov.iter().map(|&c| t.headers[c].clone()).collect(),
        cells,
    })
}

/// `period_id,start_day,end_day,...`; extra columns are numeric covariates.
pub fn read_periods(path: &Path) -> Result<PeriodTable, IoError> {
    let t = Table::read(path)?;
    let (id, start, end) = (t.column("period_id")?, t.column("start_day")?, t.column("end_day")?);
    let cov: Vec<usize> = (0..t.headers.len()).filter(|c| ![id, start, end].contains(c)).collect();
    let mut periods = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        periods.push(Period {
            id: t.text(r, id),
            start: t.number(r, start)?,
            end: t.number(r, end)?,
            covariates: cov.iter().map(|&c| t.number(r, c)).collect::<Result<_, _>>()?,
        });
    }
    if periods.is_empty() {
        return Err(DataError::EmptyGrid.into());
    }
    Ok(PeriodTable {
        columns: cov.iter().map(|&c| t.headers[c].clone()).collect(),
        periods,
    })
}

/// End of the last period.
pub fn periods_t_max(p: &PeriodTable) -> f64 {
    p.periods.iter().map(|p| p.end).fold(f64::NEG_INFINITY, f64::max)
}

pub fn write_surface(path: &Path, s: &DSurface) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    writeln!(w, "delta,tau,K,Ks,Kt,D").map_err(&err)?;
    for (a, d) in s.deltas.iter().enumerate() {
        for (b, t) in s.taus.iter().enumerate() {
            writeln!(w, "{d},{t},{},{},{},{}", s.k_at(a, b), s.ks[a], s.kt[b], s.d_at(a, b)).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)
}

/// `replicate,statistic[,t_r]` for the successful replicates.
pub fn write_replicates(path: &Path, replicates: &[f64], failed: &[usize], tr: Option<&[f64]>) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    writeln!(w, "replicate,statistic{}", if tr.is_some() { ",t_r" } else { "" }).map_err(&err)?;
    let ok = (0..replicates.len() + failed.len()).filter(|r| failed.binary_search(r).is_err());
    for (i, r) in ok.enumerate() {
        write!(w, "{},{}", r + 1, replicates[i]).map_err(&err)?;
        if let Some(tr) = tr {
            write!(w, ",{}", tr[i]).map_err(&err)?;
        }
        writeln!(w).map_err(&err)?;
    }
    w.flush().map_err(&err)
}

pub fn write_provenance(path: &Path, rows: &[(String, Option<String>, u32)]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    writeln!(w, "id,parent_id,generation").map_err(&err)?;
    for (id, parent, g) in rows {
        writeln!(w, "{id},{},{g}", parent.as_deref().unwrap_or("")).map_err(&err)?;
    }
    w.flush().map_err(&err)
}

pub fn write_pixel_residuals(path: &Path, r: &PixelResiduals, units: Units) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    let k = units.to_km();
    writeln!(w, "col,row,x_min,y_min,observed,expected,residual").map_err(&err)?;
    for row in 0..r.nrows {
        for col in 0..r.ncols {
            let rect = r.pixel_rect(col, row);
            let i = row * r.ncols + col;
            writeln!(
                w,
                "{col},{row},{},{},{},{},{}",
                rect.min.x / k,
                rect.min.y / k,
                r.observed[i],
                r.expected[i],
                r.residual[i]
            )
            .map_err(&err)?;
        }
    }
    w.flush().map_err(&err)
}

pub fn write_temporal_residuals(path: &Path, r: &TemporalResiduals) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    writeln!(w, "index,t,compensator,u").map_err(&err)?;
    for i in 0..r.times.len() {
        writeln!(w, "{},{},{},{}", i + 1, r.times[i], r.compensator[i], r.u[i]).map_err(&err)?;
    }
    w.flush().map_err(&err)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    let err = write_err(path);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    writeln!(w).map_err(&err)?;
    w.flush().map_err(&err)
}
