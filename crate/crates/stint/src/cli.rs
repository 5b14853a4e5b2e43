//! Argument parsing and the subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stint_core::classical::{k_surface, knox_statistic, mantel_statistic, omnibus_statistic, ClassicalError, DSurface, KnoxTable};
use stint_core::data::{build_grid, DataError, PeriodTable, TimeConvention};
use stint_core::model::{
    reproduction_number, spatial_residuals, temporal_residuals, Coefficient, FitResult, Model, ModelError, ModelSpec,
};
use stint_core::permute::{epitest, knox_test, k_test, mantel_test, PermutationPlan, PermuteError, StatisticKind, TestReport};
use stint_core::simulate::{simulate_with, SimulationConfig, SimulationError};
use stint_core::{CovariateGrid, PointPattern, Window};
use thiserror::Error;

use crate::io::{self, IoError, Units};
use crate::pool::RayonPool;
use crate::report::{write_timing, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ClassicalError> for CliError {
    fn from(e: ClassicalError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::LineSearch { .. } | ModelError::NotConverged { .. } | ModelError::InadmissibleStart => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PermuteError> for CliError {
    fn from(e: PermuteError) -> Self {
        match e {
            PermuteError::TooManyFailures { .. } => CliError::Runtime(e.to_string()),
            PermuteError::Model(m) => m.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Sampling(_) => CliError::Runtime(e.to_string()),
            SimulationError::Model(m) => m.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "stint", version, about = "Space-time interaction tests for point patterns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Knox test at one space and time threshold.
    Knox(KnoxArgs),
    /// Mantel test on spatial distances and time lags.
    Mantel(MantelArgs),
    /// Space-time K-function surface and its omnibus permutation test.
    Kfun(KfunArgs),
    /// Fit the endemic or endemic-epidemic model.
    Fit(FitArgs),
    /// Model-based permutation test.
    Epitest(EpitestArgs),
    /// Simulate events from the branching model.
    Simulate(SimulateArgs),
    /// Rerun the command recorded in a report's manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Study region: GeoJSON polygons, or an ESRI ASCII raster (.asc).
    #[arg(long)]
    pub window: PathBuf,
    /// Unit of the coordinates in all input and output files.
    #[arg(long, value_enum)]
    pub units: Units,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Times {
    /// Times are continuous days.
    Exact,
    /// Integer day stamps, placed mid-day.
    Day,
    /// Integer day stamps, spread uniformly within the day using the seed.
    DayJitter,
}

impl Times {
    fn convention(self, seed: u64) -> TimeConvention {
        match self {
            Times::Exact => TimeConvention::Exact,
            Times::Day => TimeConvention::DayMidpoint,
            Times::DayJitter => TimeConvention::DayJitter { seed },
        }
    }
}

#[derive(Args, Debug)]
pub struct EventArgs {
    /// CSV with columns id,x,y,t and optionally mark.
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, value_enum, default_value_t = Times::Exact)]
    pub times: Times,
    /// Only analyse events with this mark.
    #[arg(long)]
    pub mark: Option<String>,
    /// Fail on any rejected event row instead of dropping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    /// CSV with columns cell_id,area_km2,population and covariates.
    #[arg(long)]
    pub grid_cells: Option<PathBuf>,
    /// CSV with columns period_id,start_day,end_day and covariates.
    #[arg(long)]
    pub grid_periods: Option<PathBuf>,
    /// GeoJSON FeatureCollection of cell polygons keyed by `cell_id`.
    #[arg(long)]
    pub grid_geometry: Option<PathBuf>,
    /// Endemic covariate columns, comma separated; defaults to every grid column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Study length in days; taken from the periods file when given.
    /// Without a periods file the grid uses daily periods.
    #[arg(long)]
    pub t_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct KnoxArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub events: EventArgs,
    /// Study length in days.
    #[arg(long)]
    pub t_max: f64,
    #[arg(long)]
    pub delta_km: f64,
    #[arg(long)]
    pub tau_days: f64,
    /// Permutations; 0 reports the statistic only.
    #[arg(long = "B", default_value_t = 999)]
    pub b: usize,
}

#[derive(Args, Debug)]
pub struct MantelArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub events: EventArgs,
    #[arg(long)]
    pub t_max: f64,
    #[arg(long = "B", default_value_t = 999)]
    pub b: usize,
}

#[derive(Args, Debug)]
pub struct KfunArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub events: EventArgs,
    #[arg(long)]
    pub t_max: f64,
    /// Distances in km: `start:stop:step` or a comma list.
    #[arg(long, value_parser = parse_grid)]
    pub deltas: GridValues,
    /// Time lags in days: `start:stop:step` or a comma list.
    #[arg(long, value_parser = parse_grid)]
    pub taus: GridValues,
    #[arg(long = "B", default_value_t = 999)]
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub events: EventArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub delta_km: f64,
    #[arg(long)]
    pub tau_days: f64,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub epidemic: OnOff,
    /// Write Pearson residuals on square pixels of this side (km).
    #[arg(long, value_name = "SIZE")]
    pub pixel_residuals: Option<f64>,
    /// Write time-rescaled residuals.
    #[arg(long)]
    pub temporal_residuals: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelStatistic {
    /// Reproduction number.
    Tr,
    /// Likelihood ratio of the epidemic component.
    Lrd,
}

#[derive(Args, Debug)]
pub struct EpitestArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub events: EventArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub delta_km: f64,
    #[arg(long)]
    pub tau_days: f64,
    #[arg(long = "B", default_value_t = 199)]
    pub b: usize,
    #[arg(long, value_enum, default_value_t = ModelStatistic::Tr)]
    pub statistic: ModelStatistic,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Endemic coefficients, intercept first, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub beta: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub gamma0: f64,
    #[arg(long, default_value_t = 0.0)]
    pub delta_km: f64,
    #[arg(long, default_value_t = 0.0)]
    pub tau_days: f64,
    #[arg(long, default_value_t = 100)]
    pub max_generations: u32,
    /// Run even when each event expects one or more offspring.
    #[arg(long)]
    pub allow_supercritical: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// A report written by any subcommand.
    pub report: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridValues(pub Vec<f64>);

/// `start:stop:step` (stop included) or `a,b,c`.
pub fn parse_grid(s: &str) -> Result<GridValues, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("{t:?} is not a number"));
    let parts: Vec<&str> = s.split(':').collect();
    let values = match parts.as_slice() {
        [a, b, c] => {
            let (start, stop, step) = (num(a)?, num(b)?, num(c)?);
            if !(step > 0.0) || stop < start {
                return Err("range needs step > 0 and stop >= start".into());
            }
            let steps = (stop - start) / step;
            let n = steps.round();
            if (steps - n).abs() > 1e-9 * steps.max(1.0) {
                return Err(format!("{stop} is not reached from {start} in steps of {step}"));
            }
            (0..=n as usize).map(|i| start + i as f64 * step).collect()
        }
        [_] => s.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err("expected start:stop:step or a comma list".into()),
    };
    Ok(GridValues(values))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Knox(a) => ("knox", &a.common),
        Command::Mantel(a) => ("mantel", &a.common),
        Command::Kfun(a) => ("kfun", &a.common),
        Command::Fit(a) => ("fit", &a.common),
        Command::Epitest(a) => ("epitest", &a.common),
        Command::Simulate(a) => ("simulate", &a.common),
        Command::Replay(a) => return replay(a),
    };
    let started = SystemTime::now();
    let clock = Instant::now();
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Input(format!("{}: {e}", common.out.display())))?;
    let pool = RayonPool::new(common.threads).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut manifest = RunManifest::new(name, argv);
    manifest.set("window", &common.window);
    manifest.set("units", common.units);
    manifest.set("seed", common.seed);
    match &cli.command {
        Command::Knox(a) => knox(a, &mut manifest, &pool)?,
        Command::Mantel(a) => mantel(a, &mut manifest, &pool)?,
        Command::Kfun(a) => kfun(a, &mut manifest, &pool)?,
        Command::Fit(a) => fit(a, &mut manifest)?,
        Command::Epitest(a) => model_test(a, &mut manifest, &pool)?,
        Command::Simulate(a) => simulate(a, &mut manifest, &pool)?,
        Command::Replay(_) => unreachable!(),
    }
    write_timing(&common.out, name, started, clock.elapsed(), pool.threads())?;
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    #[derive(serde::Deserialize)]
    struct WithManifest {
        manifest: RunManifest,
    }
    let text = std::fs::read_to_string(&a.report).map_err(|e| CliError::Input(format!("{}: {e}", a.report.display())))?;
    let m: WithManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: no run manifest: {e}", a.report.display())))?;
    let mut argv = vec![m.manifest.tool.clone()];
    argv.extend(m.manifest.argv.iter().cloned());
    argv.extend(["--out".to_string(), a.out.display().to_string()]);
    argv.extend(["--threads".to_string(), a.threads.to_string()]);
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Input(format!("recorded arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Input("a replay cannot replay itself".into()));
    }
    execute(cli, &argv)
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    eprintln!("warning: {msg}");
    warnings.push(msg);
}

fn load_pattern(
    ev: &EventArgs,
    common: &Common,
    window: Arc<Window>,
    manifest: &mut RunManifest,
    warnings: &mut Vec<String>,
) -> Result<PointPattern, CliError> {
    manifest.set("events", &ev.events);
    manifest.set("times", ev.times);
    manifest.set("mark", &ev.mark);
    manifest.set("strict", ev.strict);
    let events = io::read_events(&ev.events, common.units, ev.times.convention(common.seed))?;
    let (mut pattern, issues) = PointPattern::screen(events, window);
    if !issues.is_empty() {
        if ev.strict {
            return Err(DataError::Rows(issues).into());
        }
        for i in &issues {
            warn(warnings, format!("{}: dropped {i}", ev.events.display()));
        }
    }
    if let Some(mark) = &ev.mark {
        let (p, w) = pattern.filter_by_mark(mark);
        pattern = p;
        if let Some(w) = w {
            warn(warnings, w);
        }
    }
    Ok(pattern)
}

fn classical_pattern(
    ev: &EventArgs,
    common: &Common,
    t_max: f64,
    manifest: &mut RunManifest,
    warnings: &mut Vec<String>,
) -> Result<PointPattern, CliError> {
    manifest.set("t_max", t_max);
    let window = Arc::new(io::read_window(&common.window, common.units, t_max)?);
    manifest.set("window_source", window.source());
    load_pattern(ev, common, window, manifest, warnings)
}

fn load_grid(g: &GridArgs, common: &Common, manifest: &mut RunManifest) -> Result<CovariateGrid, CliError> {
    manifest.set("grid_cells", &g.grid_cells);
    manifest.set("grid_periods", &g.grid_periods);
    manifest.set("grid_geometry", &g.grid_geometry);
    let periods = match &g.grid_periods {
        Some(p) => io::read_periods(p)?,
        None => {
            let t = g
                .t_max
                .ok_or_else(|| CliError::Input("--t-max is required without --grid-periods".into()))?;
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Input(format!("--t-max must be positive, got {t}")));
            }
            PeriodTable::regular(t, 1.0)
        }
    };
    let t_max = io::periods_t_max(&periods);
    if let Some(t) = g.t_max {
        if (t - t_max).abs() > 1e-9 * t_max.abs().max(1.0) {
            return Err(CliError::Input(format!("--t-max {t} differs from the end of the last period, {t_max}")));
        }
    }
    manifest.set("t_max", t_max);
    let window = Arc::new(io::read_window(&common.window, common.units, t_max)?);
    manifest.set("window_source", window.source());
    let grid = match &g.grid_cells {
        Some(cells) => {
            let geometry = g
                .grid_geometry
                .as_deref()
                .map(|p| io::read_cell_geometry(p, common.units))
                .transpose()?;
            build_grid(io::read_cells(cells, geometry.as_ref())?, periods, window)?
        }
        None => {
            if g.grid_geometry.is_some() {
                return Err(CliError::Input("--grid-geometry needs --grid-cells".into()));
            }
            CovariateGrid::single_cell(window, 1.0, periods)?
        }
    };
    Ok(grid)
}

fn endemic_columns(g: &GridArgs, grid: &CovariateGrid, manifest: &mut RunManifest) -> Vec<String> {
    let cols: Vec<String> = match &g.covariates {
        Some(c) => c.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => grid.columns().to_vec(),
    };
    manifest.set("covariates", &cols);
    cols
}

fn plan(b: usize, seed: u64, kind: StatisticKind) -> Result<Option<PermutationPlan>, CliError> {
    if b == 0 {
        return Ok(None);
    }
    Ok(Some(PermutationPlan::new(b, seed, kind)?))
}

fn write_test_outputs(dir: &Path, test: &TestReport) -> Result<(), CliError> {
    let tr = test.model.as_ref().map(|m| m.replicate_tr.as_slice());
    io::write_replicates(&dir.join("replicates.csv"), &test.replicates, &test.failed, tr)?;
    Ok(())
}

#[derive(Serialize)]
struct KnoxReport<'a> {
    manifest: &'a RunManifest,
    n_events: usize,
    delta_km: f64,
    tau_days: f64,
    t_knox: u64,
    expected: f64,
    table: KnoxTable,
    p_value: Option<f64>,
    test: Option<TestReport>,
    warnings: Vec<String>,
}

fn knox(a: &KnoxArgs, manifest: &mut RunManifest, pool: &RayonPool) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let pattern = classical_pattern(&a.events, &a.common, a.t_max, manifest, &mut warnings)?;
    manifest.set("delta_km", a.delta_km);
    manifest.set("tau_days", a.tau_days);
    manifest.set("B", a.b);
    let (table, test) = match plan(a.b, a.common.seed, StatisticKind::Knox)? {
        Some(p) => {
            let (t, table) = knox_test(&p, &pattern, a.delta_km, a.tau_days, pool)?;
            (table, Some(t))
        }
        None => (knox_statistic(&pattern, a.delta_km, a.tau_days)?, None),
    };
    if let Some(t) = &test {
        write_test_outputs(&a.common.out, t)?;
    }
    let report = KnoxReport {
        manifest,
        n_events: pattern.len(),
        delta_km: a.delta_km,
        tau_days: a.tau_days,
        t_knox: table.statistic(),
        expected: table.expected(),
        table,
        p_value: test.as_ref().map(|t| t.p_value),
        test,
        warnings,
    };
    io::write_json(&a.common.out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct MantelReport<'a> {
    manifest: &'a RunManifest,
    n_events: usize,
    correlation: f64,
    p_value: Option<f64>,
    test: Option<TestReport>,
    warnings: Vec<String>,
}

fn mantel(a: &MantelArgs, manifest: &mut RunManifest, pool: &RayonPool) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let pattern = classical_pattern(&a.events, &a.common, a.t_max, manifest, &mut warnings)?;
    manifest.set("B", a.b);
    let (r, test) = match plan(a.b, a.common.seed, StatisticKind::Mantel)? {
        Some(p) => {
            let (t, r) = mantel_test(&p, &pattern, pool)?;
            (r, Some(t))
        }
        None => (mantel_statistic(&pattern)?, None),
    };
    if let Some(t) = &test {
        write_test_outputs(&a.common.out, t)?;
    }
    let report = MantelReport {
        manifest,
        n_events: pattern.len(),
        correlation: r,
        p_value: test.as_ref().map(|t| t.p_value),
        test,
        warnings,
    };
    io::write_json(&a.common.out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct KfunReport<'a> {
    manifest: &'a RunManifest,
    n_events: usize,
    omnibus: f64,
    p_value: Option<f64>,
    surface: &'a DSurface,
    test: Option<TestReport>,
    warnings: Vec<String>,
}

fn kfun(a: &KfunArgs, manifest: &mut RunManifest, pool: &RayonPool) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let pattern = classical_pattern(&a.events, &a.common, a.t_max, manifest, &mut warnings)?;
    manifest.set("deltas_km", &a.deltas.0);
    manifest.set("taus_days", &a.taus.0);
    manifest.set("B", a.b);
    let (surface, test) = match plan(a.b, a.common.seed, StatisticKind::OmnibusK)? {
        Some(p) => {
            let (t, s) = k_test(&p, &pattern, &a.deltas.0, &a.taus.0, pool)?;
            (s, Some(t))
        }
        None => (k_surface(&pattern, &a.deltas.0, &a.taus.0)?, None),
    };
    io::write_surface(&a.common.out.join("surface.csv"), &surface)?;
    if let Some(t) = &test {
        write_test_outputs(&a.common.out, t)?;
    }
    let report = KfunReport {
        manifest,
        n_events: pattern.len(),
        omnibus: omnibus_statistic(&surface),
        p_value: test.as_ref().map(|t| t.p_value),
        surface: &surface,
        test,
        warnings,
    };
    io::write_json(&a.common.out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct TemporalSummary {
    total: f64,
    ks: f64,
    bound: f64,
    exceeds_bound: bool,
}

#[derive(Serialize)]
struct PixelSummary {
    pixel_size_km: f64,
    ncols: usize,
    nrows: usize,
    flagged: Vec<usize>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    manifest: &'a RunManifest,
    n_events: usize,
    coefficients: Vec<Coefficient>,
    reproduction_number: Option<f64>,
    lr_d: Option<f64>,
    fit: FitResult,
    temporal_residuals: Option<TemporalSummary>,
    pixel_residuals: Option<PixelSummary>,
    warnings: Vec<String>,
}

fn fit(a: &FitArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let grid = load_grid(&a.grid, &a.common, manifest)?;
    let columns = endemic_columns(&a.grid, &grid, manifest);
    let pattern = load_pattern(&a.events, &a.common, grid.window_arc().clone(), manifest, &mut warnings)?;
    let epidemic = a.epidemic == OnOff::On;
    manifest.set("delta_km", a.delta_km);
    manifest.set("tau_days", a.tau_days);
    manifest.set("epidemic", epidemic);
    manifest.set("pixel_residuals_km", a.pixel_residuals);
    manifest.set("temporal_residuals", a.temporal_residuals);
    let spec = ModelSpec::new(a.delta_km, a.tau_days, columns, epidemic)?;
    let model = Model::new(&spec, &grid, &pattern)?;
    let data = model.data(&pattern.times())?;
    let fit = model.fit(&data, None)?;
    for w in &fit.warnings {
        warn(&mut warnings, w.clone());
    }

    let temporal = if a.temporal_residuals {
        let r = temporal_residuals(&fit, &spec, &grid, &pattern)?;
        io::write_temporal_residuals(&a.common.out.join("temporal_residuals.csv"), &r)?;
        Some(TemporalSummary {
            total: r.total,
            ks: r.ks,
            bound: r.bound,
            exceeds_bound: r.exceeds_bound(),
        })
    } else {
        None
    };
    let pixel = match a.pixel_residuals {
        Some(size) => {
            let r = spatial_residuals(&fit, &spec, &grid, &pattern, size)?;
            io::write_pixel_residuals(&a.common.out.join("pixel_residuals.csv"), &r, a.common.units)?;
            if !r.flagged.is_empty() {
                warn(&mut warnings, format!("{} pixel(s) hold events but have zero expected count", r.flagged.len()));
            }
            Some(PixelSummary {
                pixel_size_km: size,
                ncols: r.ncols,
                nrows: r.nrows,
                flagged: r.flagged,
            })
        }
        None => None,
    };
    let report = FitReport {
        manifest,
        n_events: pattern.len(),
        coefficients: fit.coefficients(),
        reproduction_number: epidemic.then(|| reproduction_number(&fit, &spec)),
        lr_d: fit.lr_d,
        fit,
        temporal_residuals: temporal,
        pixel_residuals: pixel,
        warnings,
    };
    io::write_json(&a.common.out.join("fit.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct EpitestReport<'a> {
    manifest: &'a RunManifest,
    n_events: usize,
    statistic: StatisticKind,
    observed: f64,
    p_value: f64,
    observed_tr: f64,
    replicate_mean_tr: f64,
    tr_excess: f64,
    observed_lr_d: f64,
    coefficients: Vec<Coefficient>,
    test: TestReport,
    fit: FitResult,
    warnings: Vec<String>,
}

fn model_test(a: &EpitestArgs, manifest: &mut RunManifest, pool: &RayonPool) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let grid = load_grid(&a.grid, &a.common, manifest)?;
    let columns = endemic_columns(&a.grid, &grid, manifest);
    let pattern = load_pattern(&a.events, &a.common, grid.window_arc().clone(), manifest, &mut warnings)?;
    let kind = match a.statistic {
        ModelStatistic::Tr => StatisticKind::ModelTr,
        ModelStatistic::Lrd => StatisticKind::ModelD,
    };
    manifest.set("delta_km", a.delta_km);
    manifest.set("tau_days", a.tau_days);
    manifest.set("B", a.b);
    manifest.set("statistic", kind);
    let spec = ModelSpec::new(a.delta_km, a.tau_days, columns, true)?;
    let p = PermutationPlan::new(a.b, a.common.seed, kind)?;
    let (test, fit) = epitest(&p, &spec, &grid, &pattern, pool)?;
    for w in &fit.warnings {
        warn(&mut warnings, w.clone());
    }
    if !test.failed.is_empty() {
        warn(&mut warnings, format!("{} of {} replicate fits failed and were left out", test.failed.len(), test.b));
    }
    write_test_outputs(&a.common.out, &test)?;
    let summary = test.model.clone().ok_or_else(|| CliError::Runtime("model summary missing".into()))?;
    let report = EpitestReport {
        manifest,
        n_events: pattern.len(),
        statistic: kind,
        observed: test.observed,
        p_value: test.p_value,
        observed_tr: summary.observed_tr,
        replicate_mean_tr: summary.replicate_mean_tr,
        tr_excess: summary.tr_excess,
        observed_lr_d: summary.observed_lr_d,
        coefficients: fit.coefficients(),
        test,
        fit,
        warnings,
    };
    io::write_json(&a.common.out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    manifest: &'a RunManifest,
    n_events: usize,
    n_immigrants: usize,
    offspring_mean: f64,
    truncated: u64,
    warnings: Vec<String>,
}

fn simulate(a: &SimulateArgs, manifest: &mut RunManifest, pool: &RayonPool) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let grid = load_grid(&a.grid, &a.common, manifest)?;
    let columns = endemic_columns(&a.grid, &grid, manifest);
    manifest.set("beta", &a.beta);
    manifest.set("gamma0", a.gamma0);
    manifest.set("delta_km", a.delta_km);
    manifest.set("tau_days", a.tau_days);
    manifest.set("max_generations", a.max_generations);
    manifest.set("allow_supercritical", a.allow_supercritical);
    if a.beta.len() != columns.len() + 1 {
        return Err(CliError::Input(format!(
            "--beta has {} values; the intercept and {} covariate(s) need {}",
            a.beta.len(),
            columns.len(),
            columns.len() + 1
        )));
    }
    let mut config = SimulationConfig::new(&grid, columns, a.beta.clone(), a.gamma0, a.delta_km, a.tau_days, a.common.seed);
    config.max_generations = a.max_generations;
    config.allow_supercritical = a.allow_supercritical;
    let sim = simulate_with(&config, pool)?;
    for w in &sim.warnings {
        warn(&mut warnings, w.clone());
    }
    io::write_events(&a.common.out.join("events.csv"), &sim.pattern, a.common.units)?;
    io::write_provenance(&a.common.out.join("provenance.csv"), &sim.provenance())?;
    let report = SimulateReport {
        manifest,
        n_events: sim.pattern.len(),
        n_immigrants: sim.generation.iter().filter(|&&g| g == 0).count(),
        offspring_mean: config.offspring_mean(),
        truncated: sim.truncated,
        warnings,
    };
    io::write_json(&a.common.out.join("report.json"), &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_syntax() {
        let g = parse_grid("0.05:0.25:0.05").unwrap().0;
        assert_eq!(g.len(), 5);
        assert!((g[4] - 0.25).abs() < 1e-15);
        assert_eq!(parse_grid("2:14:2").unwrap().0, vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]);
        assert_eq!(parse_grid("1,3,7").unwrap().0, vec![1.0, 3.0, 7.0]);
        assert!(parse_grid("0:1:0.3").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a:b").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "stint", "knox", "--events", "e.csv", "--window", "w.geojson", "--units", "km", "--t-max", "30",
            "--delta-km", "0.25", "--tau-days", "14", "--B", "999", "--seed", "1", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Knox(a) => {
                assert_eq!(a.b, 999);
                assert_eq!(a.common.units, Units::Km);
            }
            _ => panic!(),
        }
        let cli = Cli::try_parse_from([
            "stint", "simulate", "--window", "w", "--units", "m", "--t-max", "10", "--beta", "-3.5,0.2", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate(a) => assert_eq!(a.beta, vec![-3.5, 0.2]),
            _ => panic!(),
        }
    }
}
