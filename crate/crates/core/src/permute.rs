//! Monte Carlo permutation tests: times are shuffled over fixed locations and
//! the statistic recomputed on each shuffle.
//!
//! Replicate `r` draws its permutation from the counter-based stream
//! `(seed, Permutation, r)`, so replicate statistics do not depend on how the
//! executor schedules them.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::classical::{ClassicalError, DSurface, EdgeWeights, KSurfaceEngine, KnoxCounter, KnoxTable, MantelCorrelation};
use crate::classical::{knox_statistic, omnibus_statistic};
use crate::data::{CovariateGrid, PointPattern};
use crate::exec::Executor;
use crate::model::{reproduction_number, FitResult, Model, ModelError, ModelSpec};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StatisticKind {
    Knox,
    Mantel,
    OmnibusK,
    /// Reproduction number of the full model fit.
    ModelTr,
    /// Likelihood-ratio statistic of the full against the endemic-only fit.
    ModelD,
}

impl StatisticKind {
    pub fn default_b(self) -> usize {
        match self {
            StatisticKind::ModelTr | StatisticKind::ModelD => 199,
            _ => 999,
        }
    }

    pub fn is_model(self) -> bool {
        matches!(self, StatisticKind::ModelTr | StatisticKind::ModelD)
    }
}

/// Only large values count as evidence against the null.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Alternative {
    #[default]
    Greater,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PermutationPlan {
    pub b: usize,
    pub seed: u64,
    pub kind: StatisticKind,
    pub alternative: Alternative,
}

impl PermutationPlan {
    pub fn new(b: usize, seed: u64, kind: StatisticKind) -> Result<Self, PermuteError> {
        if b == 0 {
            return Err(PermuteError::NoReplicates);
        }
        Ok(Self {
            b,
            seed,
            kind,
            alternative: Alternative::Greater,
        })
    }

    /// Smallest attainable p-value.
    pub fn resolution(&self) -> f64 {
        1.0 / (self.b as f64 + 1.0)
    }
}

/// Model-based test summary.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSummary {
    pub observed_tr: f64,
    pub replicate_mean_tr: f64,
    /// Observed minus replicate-mean T_R.
    pub tr_excess: f64,
    pub observed_lr_d: f64,
    pub replicate_tr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TestReport {
    pub kind: StatisticKind,
    pub b: usize,
    pub seed: u64,
    pub observed: f64,
    /// Statistics of the successful replicates, in replicate order.
    pub replicates: Vec<f64>,
    /// Indices of replicates whose statistic could not be computed.
    pub failed: Vec<usize>,
    /// Successful replicates `>=` observed.
    pub exceedances: usize,
    pub p_value: f64,
    pub model: Option<ModelSummary>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PermuteError {
    #[error("at least one permutation is required")]
    NoReplicates,
    #[error("plan is for {0:?}, not this test")]
    WrongKind(StatisticKind),
    #[error("{failed} of {b} replicates failed (more than 5%); first failure: {first}")]
    TooManyFailures { failed: usize, b: usize, first: String },
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `(1 + #{replicates >= observed}) / (B + 1)` and the exceedance count.
pub fn p_value(observed: f64, replicates: &[f64]) -> (usize, f64) {
    let x = replicates.iter().filter(|&&r| r >= observed).count();
    (x, (1 + x) as f64 / (replicates.len() + 1) as f64)
}

/// `times` shuffled by replicate `r`'s stream.
pub fn permuted_times(times: &[f64], seed: u64, r: usize) -> Vec<f64> {
    let mut t = times.to_vec();
    t.shuffle(&mut rng::stream(seed, Domain::Permutation, r as u64));
    t
}

/// Reassigns the pattern's times to its locations by a uniform random
/// permutation; marks stay with their locations.
pub fn permute_times<R: Rng + ?Sized>(pattern: &PointPattern, rng: &mut R) -> PointPattern {
    let mut t = pattern.times();
    t.shuffle(rng);
    pattern.with_times(&t)
}

/// Runs `statistic` on `plan.b` permutations of `times` and assembles the
/// report. `statistic` receives the permuted times (indexed like `times`)
/// and returns the statistic and an optional secondary value.
pub fn run_test<E, F>(plan: &PermutationPlan, observed: f64, times: &[f64], statistic: F, exec: &E) -> Result<(TestReport, Vec<Option<f64>>), PermuteError>
where
    E: Executor,
    F: Fn(&[f64]) -> Result<(f64, Option<f64>), String> + Sync + Send,
{
    let results = exec.map(plan.b, |r| statistic(&permuted_times(times, plan.seed, r)));
    let mut replicates = Vec::with_capacity(plan.b);
    let mut secondary = Vec::with_capacity(plan.b);
    let mut failed = Vec::new();
    let mut first = None;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((s, extra)) if s.is_finite() => {
                replicates.push(s);
                secondary.push(extra);
            }
            Ok((s, _)) => {
                failed.push(r);
                first.get_or_insert_with(|| format!("replicate {r}: non-finite statistic {s}"));
            }
            Err(e) => {
                failed.push(r);
                first.get_or_insert_with(|| format!("replicate {r}: {e}"));
            }
        }
    }
    if failed.len() * 20 > plan.b {
        return Err(PermuteError::TooManyFailures {
            failed: failed.len(),
            b: plan.b,
            first: first.unwrap_or_default(),
        });
    }
    let (exceedances, p) = p_value(observed, &replicates);
    Ok((
        TestReport {
            kind: plan.kind,
            b: plan.b,
            seed: plan.seed,
            observed,
            replicates,
            failed,
            exceedances,
            p_value: p,
            model: None,
        },
        secondary,
    ))
}

fn expect_kind(plan: &PermutationPlan, kind: StatisticKind) -> Result<(), PermuteError> {
    if plan.kind == kind {
        Ok(())
    } else {
        Err(PermuteError::WrongKind(plan.kind))
    }
}

pub fn knox_test<E: Executor>(plan: &PermutationPlan, pattern: &PointPattern, delta: f64, tau: f64, exec: &E) -> Result<(TestReport, KnoxTable), PermuteError> {
    expect_kind(plan, StatisticKind::Knox)?;
    let table = knox_statistic(pattern, delta, tau)?;
    let counter = KnoxCounter::new(&pattern.locations(), delta, tau);
    let (report, _) = run_test(plan, table.statistic() as f64, &pattern.times(), |t| Ok((counter.count(t) as f64, None)), exec)?;
    Ok((report, table))
}

pub fn mantel_test<E: Executor>(plan: &PermutationPlan, pattern: &PointPattern, exec: &E) -> Result<(TestReport, f64), PermuteError> {
    expect_kind(plan, StatisticKind::Mantel)?;
    let times = pattern.times();
    let m = MantelCorrelation::new(pattern.locations(), &times)?;
    let r = m.correlation(&times);
    let (report, _) = run_test(plan, r, &times, |t| Ok((m.correlation(t), None)), exec)?;
    Ok((report, r))
}

pub fn k_test<E: Executor>(plan: &PermutationPlan, pattern: &PointPattern, deltas: &[f64], taus: &[f64], exec: &E) -> Result<(TestReport, DSurface), PermuteError> {
    expect_kind(plan, StatisticKind::OmnibusK)?;
    let times = pattern.times();
    let engine = KSurfaceEngine::new(pattern.window(), &pattern.locations(), &times, deltas, taus, EdgeWeights::Corrected)?;
    let surface = engine.surface(&times)?;
    let observed = omnibus_statistic(&surface);
    let (report, _) = run_test(
        plan,
        observed,
        &times,
        |t| engine.surface(t).map(|s| (omnibus_statistic(&s), None)).map_err(|e| e.to_string()),
        exec,
    )?;
    Ok((report, surface))
}

/// Model-based test given the observed full fit. Each replicate refits the
/// endemic-only and full models on the permuted times, warm-started at the
/// observed endemic coefficients.
pub fn model_test<E: Executor>(plan: &PermutationPlan, model: &Model<'_>, times: &[f64], observed: &FitResult, exec: &E) -> Result<TestReport, PermuteError> {
    if !plan.kind.is_model() {
        return Err(PermuteError::WrongKind(plan.kind));
    }
    let spec = model.spec();
    let observed_tr = reproduction_number(observed, spec);
    let observed_lr_d = observed.lr_d.unwrap_or(0.0);
    let stat = |fit: &FitResult| match plan.kind {
        StatisticKind::ModelD => fit.lr_d.unwrap_or(0.0),
        _ => reproduction_number(fit, spec),
    };
    let start = observed.beta.clone();
    let (mut report, extra) = run_test(
        plan,
        stat(observed),
        times,
        |t| {
            let data = model.data(t).map_err(|e| e.to_string())?;
            let fit = model.fit(&data, Some(&start)).map_err(|e| e.to_string())?;
            Ok((stat(&fit), Some(reproduction_number(&fit, spec))))
        },
        exec,
    )?;
    let replicate_tr: Vec<f64> = extra.into_iter().flatten().collect();
    let replicate_mean_tr = replicate_tr.iter().sum::<f64>() / replicate_tr.len().max(1) as f64;
    report.model = Some(ModelSummary {
        observed_tr,
        replicate_mean_tr,
        tr_excess: observed_tr - replicate_mean_tr,
        observed_lr_d,
        replicate_tr,
    });
    Ok(report)
}

/// Fits the full model to the observed pattern and runs [`model_test`].
pub fn epitest<E: Executor>(plan: &PermutationPlan, spec: &ModelSpec, grid: &CovariateGrid, pattern: &PointPattern, exec: &E) -> Result<(TestReport, FitResult), PermuteError> {
    if !spec.epidemic {
        return Err(ModelError::InvalidSpec("the model-based test needs an epidemic component").into());
    }
    let model = Model::new(spec, grid, pattern)?;
    let times = pattern.times();
    let data = model.data(&times)?;
    let fit = model.fit(&data, None)?;
    let report = model_test(plan, &model, &times, &fit, exec)?;
    Ok((report, fit))
}
