//! Monte Carlo ε-sweeps comparing the perforated and homogenized models.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{compute_tensor, CellError, HomogenizedTensor};
use crate::drift::EffectiveForm;
use crate::effective::{simulate_macro_paths, MacroError, MacroInitial, MacroSimulation};
use crate::geometry::{build_perforated_grid, CellSpec, GeometryError};
use crate::micro::{simulate_micro_paths, MicroError, MicroSimulation};
use crate::path::{PathRecord, PathSettings};

pub use crate::path::functional;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Micro(#[from] MicroError),
    #[error(transparent)]
    Macro(#[from] MacroError),
    #[error("empty sample")]
    EmptySample,
    #[error("trend fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error(
        "non-finite or non-positive value in trend fit: distance {distance}, epsilon {epsilon}"
    )]
    NonFinite { epsilon: f64, distance: f64 },
}

/// How the macro paths draw their noise relative to the micro paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// Same increments for the same `(path, noise, step)`.
    #[default]
    Shared,
    /// A separate stream.
    Independent,
}

impl Coupling {
    pub fn macro_stream(&self) -> u64 {
        match self {
            Coupling::Shared => 0,
            Coupling::Independent => 1,
        }
    }
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Coupling::Shared => "shared",
            Coupling::Independent => "independent",
        })
    }
}

impl FromStr for Coupling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "shared" => Ok(Coupling::Shared),
            "independent" => Ok(Coupling::Independent),
            other => Err(format!(
                "unknown coupling `{other}`: expected shared or independent"
            )),
        }
    }
}

/// Which model produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Model {
    Micro,
    Macro,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Micro => "micro",
            Model::Macro => "macro",
        }
    }
}

impl FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" => Ok(Model::Micro),
            "macro" => Ok(Model::Macro),
            other => Err(format!("unknown model `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub rho: f64,
    pub m: usize,
    /// Cells per side `N = 1/ε`, strictly increasing.
    pub ladder: Vec<usize>,
    pub paths: usize,
    pub settings: PathSettings,
    pub macro_n: usize,
    pub form: EffectiveForm,
    pub macro_initial: MacroInitial,
    pub coupling: Coupling,
    /// Run the macro sample once and reuse it for every ladder point.
    pub reuse_macro: bool,
    pub cell_tol: f64,
    /// Use this tensor instead of solving the cell problem.
    pub tensor: Option<HomogenizedTensor>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            rho: 0.5,
            m: 8,
            ladder: vec![4, 8, 16],
            paths: 500,
            settings: PathSettings::default(),
            macro_n: 64,
            form: EffectiveForm::default(),
            macro_initial: MacroInitial::default(),
            coupling: Coupling::default(),
            reuse_macro: false,
            cell_tol: crate::cell::DEFAULT_CELL_TOL,
            tensor: None,
        }
    }
}

impl ExperimentPlan {
    pub fn epsilons(&self) -> Vec<f64> {
        self.ladder.iter().map(|&n| 1.0 / n as f64).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Plan(m));
        if self.ladder.is_empty() {
            return bad("ladder is empty".into());
        }
        if self.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "ladder {:?} must be strictly increasing in cells per side",
                self.ladder
            ));
        }
        if self.paths < 2 {
            return bad(format!("at least 2 paths are needed, got {}", self.paths));
        }
        if self.settings.functionals.is_empty() {
            return bad("no functionals requested".into());
        }
        let c = self.settings.common_n;
        for &n in &self.ladder {
            if c == 0 || !(n * self.m).is_multiple_of(c) {
                return bad(format!(
                    "common grid {c} does not divide the micro grid {}",
                    n * self.m
                ));
            }
        }
        if !self.macro_n.is_multiple_of(c) {
            return bad(format!(
                "common grid {c} does not divide the macro grid {}",
                self.macro_n
            ));
        }
        Ok(())
    }

    pub fn cell_spec(&self) -> Result<CellSpec, GeometryError> {
        CellSpec::new(self.rho, self.m)
    }

    /// The plan's tensor, solving the cell problem unless one was supplied.
    pub fn resolve_tensor(&self) -> Result<HomogenizedTensor, ExperimentError> {
        match self.tensor {
            Some(t) => Ok(t),
            None => Ok(compute_tensor(self.cell_spec()?, self.cell_tol)?.0),
        }
    }

    pub fn micro_simulation(&self, cells: usize) -> Result<MicroSimulation, ExperimentError> {
        let grid = Arc::new(build_perforated_grid(self.cell_spec()?, cells)?);
        Ok(MicroSimulation::new(grid, self.settings.clone())?)
    }

    pub fn macro_simulation(
        &self,
        tensor: &HomogenizedTensor,
    ) -> Result<MacroSimulation, ExperimentError> {
        Ok(MacroSimulation::new(
            self.macro_n,
            tensor,
            self.form,
            self.macro_initial,
            self.coupling.macro_stream(),
            self.settings.clone(),
        )?)
    }
}

/// Records of both models at one ladder point, ordered by path id.
#[derive(Debug, Clone)]
pub struct LevelRecords {
    pub cells: usize,
    pub epsilon: f64,
    pub micro: Vec<PathRecord>,
    pub macro_: Arc<Vec<PathRecord>>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub tensor: HomogenizedTensor,
    pub levels: Vec<LevelRecords>,
    pub report: ComparisonReport,
}

/// Runs paths `0..paths` in parallel batches; records come back in path order.
pub fn run_paths<F>(paths: usize, f: F) -> Vec<PathRecord>
where
    F: Fn(&[u64]) -> Vec<PathRecord> + Sync + Send,
{
    let ids: Vec<u64> = (0..paths as u64).collect();
    ids.par_chunks(crate::path::BATCH)
        .flat_map_iter(f)
        .collect()
}

/// Runs every micro and macro path of the plan and builds the report.
///
/// Paths run in parallel; records are gathered in path order, so the output
/// does not depend on the number of workers.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<SweepOutcome, ExperimentError> {
    plan.validate()?;
    let tensor = plan.resolve_tensor()?;
    let macro_sim = plan.macro_simulation(&tensor)?;
    let run_macro = || {
        Arc::new(run_paths(plan.paths, |ids| {
            simulate_macro_paths(&macro_sim, ids)
        }))
    };
    let shared = plan.reuse_macro.then(run_macro);
    let mut levels = Vec::with_capacity(plan.ladder.len());
    for &cells in &plan.ladder {
        let sim = plan.micro_simulation(cells)?;
        let micro = run_paths(plan.paths, |ids| simulate_micro_paths(&sim, ids));
        let macro_ = shared.clone().unwrap_or_else(run_macro);
        levels.push(LevelRecords {
            cells,
            epsilon: 1.0 / cells as f64,
            micro,
            macro_,
        });
    }
    let context = ReportContext::new(plan, &tensor);
    let report = build_report(context, &levels);
    Ok(SweepOutcome {
        tensor,
        levels,
        report,
    })
}

/// Wasserstein-1 distance between two empirical measures on the line.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, ExperimentError> {
    if a.is_empty() || b.is_empty() {
        return Err(ExperimentError::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // ∫|F_a − F_b| over the merged support
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    Ok(total)
}

/// Least-squares fit of `log d` against `log ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    /// Sum of squared residuals.
    pub residual: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    /// `slope − stderr > 0`: the distance shrinks with ε beyond the fit's uncertainty.
    pub pass: bool,
}

pub fn trend_check(epsilons: &[f64], distances: &[f64]) -> Result<TrendFit, ExperimentError> {
    let n = epsilons.len().min(distances.len());
    if n < 3 {
        return Err(ExperimentError::TooFewPoints(n));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for (&e, &d) in epsilons.iter().zip(distances) {
        if !(e > 0.0 && d > 0.0 && e.is_finite() && d.is_finite()) {
            return Err(ExperimentError::NonFinite {
                epsilon: e,
                distance: d,
            });
        }
        xs.push(e.ln());
        ys.push(d.ln());
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (residual / (nf - 2.0) / sxx).sqrt();
    Ok(TrendFit {
        slope,
        intercept,
        residual,
        stderr,
        pass: slope - stderr > 0.0,
    })
}

/// Plan metadata carried into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub rho: f64,
    pub m: usize,
    pub theta: f64,
    pub lambda: f64,
    pub tensor: [[f64; 2]; 2],
    pub form: String,
    pub macro_initial: String,
    pub coupling: Coupling,
    pub paths: usize,
    pub seed: u64,
    pub final_time: f64,
    pub dt: f64,
    pub macro_n: usize,
    pub common_n: usize,
    pub functionals: Vec<String>,
    pub sample_times: Vec<f64>,
}

impl ReportContext {
    pub fn new(plan: &ExperimentPlan, tensor: &HomogenizedTensor) -> Self {
        Self {
            rho: plan.rho,
            m: plan.m,
            theta: tensor.theta,
            lambda: tensor.lambda,
            tensor: tensor.a,
            form: plan.form.name().to_string(),
            macro_initial: plan.macro_initial.to_string(),
            coupling: plan.coupling,
            paths: plan.paths,
            seed: plan.settings.seed,
            final_time: plan.settings.time.final_time(),
            dt: plan.settings.time.dt,
            macro_n: plan.macro_n,
            common_n: plan.settings.common_n,
            functionals: plan
                .settings
                .functionals
                .iter()
                .map(|f| f.to_string())
                .collect(),
            sample_times: plan.settings.time.sample_times(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalStats {
    pub functional: String,
    pub sample_time: f64,
    pub micro_mean: f64,
    pub micro_std: f64,
    pub macro_mean: f64,
    pub macro_std: f64,
    pub wasserstein: f64,
    /// Root mean square of the pathwise differences (meaningful under shared noise).
    pub pathwise_rms: f64,
    /// Sample variance of the pathwise differences.
    pub difference_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergySummary {
    pub micro_x0: f64,
    pub micro_x1: f64,
    pub micro_total: f64,
    pub macro_x0: f64,
    pub macro_x1: f64,
    pub macro_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub epsilon: f64,
    pub cells: usize,
    pub micro_failures: usize,
    pub macro_failures: usize,
    pub stats: Vec<FunctionalStats>,
    pub energy: EnergySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub functional: String,
    pub sample_time: f64,
    pub fit: Option<TrendFit>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub context: ReportContext,
    pub levels: Vec<LevelReport>,
    /// Wasserstein trend per functional at the final sample time.
    pub trends: Vec<TrendReport>,
    /// Max over min of the mean micro energy across the ladder.
    pub energy_ratio: Option<f64>,
    pub verdicts: Vec<Verdict>,
}

impl ComparisonReport {
    pub fn level(&self, cells: usize) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.cells == cells)
    }

    /// Statistics of functional `f` at the final sample time of each level.
    pub fn final_stats(&self, functional: &str) -> Vec<&FunctionalStats> {
        let t = self.context.sample_times.last().copied();
        self.levels
            .iter()
            .filter_map(|l| {
                l.stats
                    .iter()
                    .find(|s| s.functional == functional && Some(s.sample_time) == t)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Values of functional `f` at sample `s` over the successful paths.
fn column(records: &[PathRecord], s: usize, f: usize) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| !r.failed())
        .filter_map(|r| r.values.get(s).map(|row| (r.path_id, row[f])))
        .collect()
}

fn level_report(context: &ReportContext, level: &LevelRecords) -> LevelReport {
    let mut stats = Vec::new();
    for (s, &t) in context.sample_times.iter().enumerate() {
        for (f, name) in context.functionals.iter().enumerate() {
            let micro = column(&level.micro, s, f);
            let macro_ = column(&level.macro_, s, f);
            let a: Vec<f64> = micro.iter().map(|p| p.1).collect();
            let b: Vec<f64> = macro_.iter().map(|p| p.1).collect();
            let (micro_mean, micro_std) = mean_std(&a);
            let (macro_mean, macro_std) = mean_std(&b);
            let diffs: Vec<f64> = micro
                .iter()
                .filter_map(|&(id, x)| macro_.iter().find(|p| p.0 == id).map(|p| x - p.1))
                .collect();
            let (_, diff_std) = mean_std(&diffs);
            let pathwise_rms = if diffs.is_empty() {
                f64::NAN
            } else {
                (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt()
            };
            stats.push(FunctionalStats {
                functional: name.clone(),
                sample_time: t,
                micro_mean,
                micro_std,
                macro_mean,
                macro_std,
                wasserstein: wasserstein1(&a, &b).unwrap_or(f64::NAN),
                pathwise_rms,
                difference_variance: diff_std * diff_std,
            });
        }
    }
    let energy_mean = |records: &[PathRecord]| {
        let ok: Vec<_> = records.iter().filter(|r| !r.failed()).collect();
        let n = ok.len().max(1) as f64;
        let x0 = ok.iter().map(|r| r.energy.x0_final).sum::<f64>() / n;
        let x1 = ok.iter().map(|r| r.energy.x1_integral).sum::<f64>() / n;
        (x0, x1)
    };
    let (micro_x0, micro_x1) = energy_mean(&level.micro);
    let (macro_x0, macro_x1) = energy_mean(&level.macro_);
    LevelReport {
        epsilon: level.epsilon,
        cells: level.cells,
        micro_failures: level.micro.iter().filter(|r| r.failed()).count(),
        macro_failures: level.macro_.iter().filter(|r| r.failed()).count(),
        stats,
        energy: EnergySummary {
            micro_x0,
            micro_x1,
            micro_total: micro_x0 + micro_x1,
            macro_x0,
            macro_x1,
            macro_total: macro_x0 + macro_x1,
        },
    }
}

/// Aggregates per-level statistics, trend fits and verdicts.
pub fn build_report(context: ReportContext, levels: &[LevelRecords]) -> ComparisonReport {
    let level_reports: Vec<LevelReport> =
        levels.iter().map(|l| level_report(&context, l)).collect();
    let epsilons: Vec<f64> = level_reports.iter().map(|l| l.epsilon).collect();
    let final_time = context.sample_times.last().copied().unwrap_or(f64::NAN);
    let trends: Vec<TrendReport> = context
        .functionals
        .iter()
        .map(|name| {
            let distances: Vec<f64> = level_reports
                .iter()
                .filter_map(|l| {
                    l.stats
                        .iter()
                        .find(|s| &s.functional == name && s.sample_time == final_time)
                        .map(|s| s.wasserstein)
                })
                .collect();
            let (fit, error) = match trend_check(&epsilons, &distances) {
                Ok(fit) => (Some(fit), None),
                Err(e) => (None, Some(e.to_string())),
            };
            TrendReport {
                functional: name.clone(),
                sample_time: final_time,
                fit,
                error,
            }
        })
        .collect();
    let totals: Vec<f64> = level_reports.iter().map(|l| l.energy.micro_total).collect();
    let energy_ratio = (totals.len() >= 2 && totals.iter().all(|&e| e > 0.0)).then(|| {
        let max = totals.iter().copied().fold(f64::MIN, f64::max);
        let min = totals.iter().copied().fold(f64::MAX, f64::min);
        max / min
    });
    let mut verdicts = Vec::new();
    for t in &trends {
        if let Some(fit) = t.fit {
            verdicts.push(Verdict {
                name: format!("wasserstein trend {}", t.functional),
                pass: fit.pass,
                detail: format!("slope {:.4} ± {:.4}", fit.slope, fit.stderr),
            });
        }
    }
    if let Some(r) = energy_ratio {
        verdicts.push(Verdict {
            name: "energy uniformity".into(),
            pass: r <= 2.0,
            detail: format!("max/min {r:.4}"),
        });
    }
    let failures: usize = level_reports
        .iter()
        .map(|l| l.micro_failures + l.macro_failures)
        .sum();
    verdicts.push(Verdict {
        name: "no path failures".into(),
        pass: failures == 0,
        detail: format!("{failures} failed paths"),
    });
    ComparisonReport {
        context,
        levels: level_reports,
        trends,
        energy_ratio,
        verdicts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[0.0, 1.0], &[0.0, 2.0]).unwrap(), 0.5);
        assert!(wasserstein1(&[], &[1.0]).is_err());
    }

    #[test]
    fn wasserstein_unequal_lengths() {
        // {0, 1} vs {0, 1, 1, 0} are the same measure
        assert!(
            wasserstein1(&[0.0, 1.0], &[1.0, 0.0, 1.0, 0.0])
                .unwrap()
                .abs()
                < 1e-15
        );
        // a point mass against {0, 3, 6}: mean distance to 3 is 2
        assert!((wasserstein1(&[3.0], &[0.0, 3.0, 6.0]).unwrap() - 2.0).abs() < 1e-15);
        // shift of a 3-point sample against its 6-point duplicate
        let a = [0.0, 1.0, 2.0];
        let b = [0.5, 0.5, 1.5, 1.5, 2.5, 2.5];
        assert!((wasserstein1(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trend_examples() {
        let eps = [0.25, 0.125, 0.0625];
        let fit = trend_check(&eps, &eps.map(|e| 4.0 * e)).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && fit.pass);
        let fit = trend_check(&eps, &[0.3, 0.3, 0.3]).unwrap();
        assert!(fit.slope.abs() < 1e-12 && !fit.pass);
        assert!(trend_check(&eps[..2], &[1.0, 1.0]).is_err());
        assert!(trend_check(&eps, &[1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn plan_validation() {
        let plan = ExperimentPlan::default();
        assert!(plan.validate().is_ok());
        let bad = ExperimentPlan {
            ladder: vec![8, 4, 16],
            ..ExperimentPlan::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentPlan {
            paths: 1,
            ..ExperimentPlan::default()
        };
        assert!(bad.validate().is_err());
    }
}
