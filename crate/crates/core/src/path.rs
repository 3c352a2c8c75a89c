//! Time grids, functionals and per-path records shared by both solvers.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::drift::DriftSpec;
use crate::expr::FieldExpr;
use crate::geometry::CellField;
use crate::linalg::SolverMethod;
use crate::noise::SpectralNoiseSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeGridError {
    #[error("final time must be positive, got {0}")]
    FinalTime(f64),
    #[error("time step must be positive, got {0}")]
    Step(f64),
    #[error("final time {t} is not a whole number of steps of {dt}")]
    NotMultiple { t: f64, dt: f64 },
    #[error("sample time {0} lies outside [0, T]")]
    SampleTime(f64),
}

/// Uniform time grid `t_n = n·Δt`, `n = 0..=steps`, with recorded sample steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    /// Ascending, deduplicated step indices at which functionals are recorded.
    pub sample_steps: Vec<usize>,
}

impl TimeGrid {
    /// Sample times are rounded to the nearest step; an empty list means `{T}`.
    pub fn new(final_time: f64, dt: f64, sample_times: &[f64]) -> Result<Self, TimeGridError> {
        if !(final_time > 0.0 && final_time.is_finite()) {
            return Err(TimeGridError::FinalTime(final_time));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TimeGridError::Step(dt));
        }
        let ratio = final_time / dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-8 * ratio.max(1.0) {
            return Err(TimeGridError::NotMultiple { t: final_time, dt });
        }
        let steps = steps as usize;
        let mut sample_steps = Vec::new();
        for &t in sample_times {
            if !(t >= 0.0 && t <= final_time * (1.0 + 1e-12)) {
                return Err(TimeGridError::SampleTime(t));
            }
            sample_steps.push(((t / dt).round() as usize).min(steps));
        }
        if sample_steps.is_empty() {
            sample_steps.push(steps);
        }
        sample_steps.sort_unstable();
        sample_steps.dedup();
        Ok(Self {
            dt,
            steps,
            sample_steps,
        })
    }

    pub fn final_time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.sample_steps
            .iter()
            .map(|&n| n as f64 * self.dt)
            .collect()
    }
}

/// A scalar probe of a solution path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Functional {
    /// `⟨ũ(t), e_{k,l}⟩`
    Mode { k: u32, l: u32 },
    /// `(∫₀ᵗ ‖ũ(s)‖² ds)^{1/2}`
    PathL2,
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Functional::Mode { k, l } => write!(f, "{k}:{l}"),
            Functional::PathL2 => write!(f, "l2"),
        }
    }
}

impl FromStr for Functional {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "l2" {
            return Ok(Functional::PathL2);
        }
        let err =
            || format!("invalid functional `{s}`: expected k:l with positive integers, or l2");
        let (k, l) = s.split_once(':').ok_or_else(err)?;
        let k: u32 = k.trim().parse().map_err(|_| err())?;
        let l: u32 = l.trim().parse().map_err(|_| err())?;
        if k == 0 || l == 0 {
            return Err(err());
        }
        Ok(Functional::Mode { k, l })
    }
}

/// Midpoint quadrature of `field · e_{k,l}` over the unit square.
///
/// The rule is exact for products of sine modes below the grid Nyquist limit.
pub fn functional(field: &CellField, k: u32, l: u32) -> f64 {
    let n = field.intervals();
    let h = 1.0 / n as f64;
    // separable: e_{k,l}(x, y) = 2·sin(kπx)·sin(lπy)
    let sx: Vec<f64> = (0..n)
        .map(|i| (k as f64 * PI * (i as f64 + 0.5) * h).sin())
        .collect();
    let sy: Vec<f64> = (0..n)
        .map(|j| (l as f64 * PI * (j as f64 + 0.5) * h).sin())
        .collect();
    let values = field.values();
    let mut total = 0.0;
    for (j, wy) in sy.iter().enumerate() {
        let row = &values[j * n..(j + 1) * n];
        let s: f64 = row.iter().zip(&sx).map(|(v, wx)| v * wx).sum();
        total += wy * s;
    }
    2.0 * total * h * h
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathFailure {
    pub step: usize,
    pub reason: String,
}

/// `|z(T)|²` in the state norm and `Σ Δt·a(z, z)` over the path.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyDiagnostics {
    pub x0_final: f64,
    pub x1_integral: f64,
}

impl EnergyDiagnostics {
    pub fn total(&self) -> f64 {
        self.x0_final + self.x1_integral
    }
}

/// What a path keeps besides its functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordOptions {
    /// Keep the final field on the solver grid.
    pub keep_final: bool,
    /// Keep the common-grid field after every step (index 0 is the initial state).
    pub keep_trajectory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub path_id: u64,
    pub sample_times: Vec<f64>,
    /// `values[s][f]`: functional `f` at sample `s`.
    pub values: Vec<Vec<f64>>,
    pub energy: EnergyDiagnostics,
    /// Final solution on the solver's own nodal grid (zero-extended for the micro model).
    pub final_nodal: Option<crate::geometry::NodalField>,
    pub trajectory: Vec<CellField>,
    pub failure: Option<PathFailure>,
}

impl PathRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Last recorded value of functional `f`, if any.
    pub fn final_value(&self, f: usize) -> Option<f64> {
        self.values.last().map(|row| row[f])
    }
}

/// Initial value of the trace unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BoundaryInit {
    /// Trace of the bulk initial datum.
    #[default]
    Trace,
    Constant(f64),
}

impl BoundaryInit {
    pub fn constant(&self) -> Option<f64> {
        match *self {
            BoundaryInit::Trace => None,
            BoundaryInit::Constant(c) => Some(c),
        }
    }
}

impl fmt::Display for BoundaryInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryInit::Trace => write!(f, "trace"),
            BoundaryInit::Constant(c) => write!(f, "{c:?}"),
        }
    }
}

impl FromStr for BoundaryInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "trace" {
            return Ok(BoundaryInit::Trace);
        }
        match s.parse::<f64>() {
            Ok(c) if c.is_finite() => Ok(BoundaryInit::Constant(c)),
            _ => Err(format!(
                "invalid boundary initial value `{s}`: expected trace or a number"
            )),
        }
    }
}

/// Settings common to micro and macro paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSettings {
    pub time: TimeGrid,
    pub b: f64,
    pub drift: DriftSpec,
    pub noise: SpectralNoiseSpec,
    /// Bulk initial datum `u⁰`.
    pub initial: FieldExpr,
    pub boundary_initial: BoundaryInit,
    pub seed: u64,
    pub functionals: Vec<Functional>,
    /// Intervals per side of the grid on which paths are compared.
    pub common_n: usize,
    pub blowup_cap: f64,
    pub solver: SolverMethod,
    pub solver_tol: f64,
    pub record: RecordOptions,
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            time: TimeGrid::new(0.25, 1e-3, &[]).expect("valid default time grid"),
            b: 1.0,
            drift: DriftSpec::default(),
            noise: SpectralNoiseSpec::default(),
            initial: FieldExpr::ZERO,
            boundary_initial: BoundaryInit::Trace,
            seed: 0,
            functionals: vec![Functional::Mode { k: 1, l: 1 }, Functional::PathL2],
            common_n: 32,
            blowup_cap: 1e8,
            solver: SolverMethod::Cholesky,
            solver_tol: 1e-12,
            record: RecordOptions::default(),
        }
    }
}

/// Accumulates functionals of the common-grid field while a path is stepped.
#[derive(Debug)]
pub(crate) struct Recorder<'a> {
    time: &'a TimeGrid,
    functionals: &'a [Functional],
    options: RecordOptions,
    next_sample: usize,
    l2_integral: f64,
    record: PathRecord,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(
        path_id: u64,
        time: &'a TimeGrid,
        functionals: &'a [Functional],
        options: RecordOptions,
    ) -> Self {
        Self {
            time,
            functionals,
            options,
            next_sample: 0,
            l2_integral: 0.0,
            record: PathRecord {
                path_id,
                sample_times: Vec::new(),
                values: Vec::new(),
                energy: EnergyDiagnostics::default(),
                final_nodal: None,
                trajectory: Vec::new(),
                failure: None,
            },
        }
    }

    pub(crate) fn options(&self) -> RecordOptions {
        self.options
    }

    /// Whether step `n` needs the common-grid field.
    pub(crate) fn wants(&self, n: usize) -> bool {
        self.options.keep_trajectory
            || self.functionals.contains(&Functional::PathL2)
            || self.time.sample_steps.get(self.next_sample) == Some(&n)
    }

    /// Observes the state after step `n` (`n = 0` is the initial state).
    pub(crate) fn observe(&mut self, n: usize, field: &CellField) {
        if n > 0 {
            self.l2_integral += self.time.dt * field.l2_norm_sq();
        }
        if self.time.sample_steps.get(self.next_sample) == Some(&n) {
            let row = self
                .functionals
                .iter()
                .map(|f| match *f {
                    Functional::Mode { k, l } => functional(field, k, l),
                    Functional::PathL2 => self.l2_integral.sqrt(),
                })
                .collect();
            self.record.values.push(row);
            self.record.sample_times.push(n as f64 * self.time.dt);
            self.next_sample += 1;
        }
        if self.options.keep_trajectory {
            self.record.trajectory.push(field.clone());
        }
    }

    pub(crate) fn add_dissipation(&mut self, value: f64) {
        self.record.energy.x1_integral += self.time.dt * value;
    }

    pub(crate) fn fail(mut self, step: usize, reason: String) -> PathRecord {
        self.record.failure = Some(PathFailure { step, reason });
        self.record
    }

    pub(crate) fn finish(
        mut self,
        x0_final: f64,
        final_nodal: Option<crate::geometry::NodalField>,
    ) -> PathRecord {
        self.record.energy.x0_final = x0_final;
        self.record.final_nodal = final_nodal;
        self.record
    }
}

/// A discretized model whose paths can be advanced in lockstep.
pub(crate) trait PathModel: Sync {
    fn settings(&self) -> &PathSettings;
    fn solver(&self) -> &crate::linalg::ImplicitSolver;
    fn initial_values(&self) -> Vec<f64>;
    /// Right-hand side of step `step` (0-based) for path `path_id` from state `z` at `time`.
    fn step_rhs(&self, path_id: u64, step: usize, time: f64, z: &[f64])
        -> Result<Vec<f64>, String>;
    fn common_field(&self, z: &[f64]) -> CellField;
    /// Dissipation rate `zᵀKz` entering the energy integral.
    fn dissipation(&self, z: &[f64]) -> f64;
    fn norm_sq(&self, z: &[f64]) -> f64;
    fn nodal(&self, z: &[f64]) -> crate::geometry::NodalField;
}

/// Runs the paths `ids` together, sharing each factor pass between them.
///
/// Each record is identical to what a batch holding only that path produces.
pub(crate) fn simulate_batch<M: PathModel>(model: &M, ids: &[u64]) -> Vec<PathRecord> {
    let s = model.settings();
    let mut recorders: Vec<Option<Recorder>> = ids
        .iter()
        .map(|&id| Some(Recorder::new(id, &s.time, &s.functionals, s.record)))
        .collect();
    let mut done: Vec<Option<PathRecord>> = vec![None; ids.len()];
    let initial = model.initial_values();
    let field0 = model.common_field(&initial);
    let mut states: Vec<Vec<f64>> = vec![initial; ids.len()];
    for rec in recorders.iter_mut().flatten() {
        rec.observe(0, &field0);
    }
    let mut time = 0.0;
    for n in 1..=s.time.steps {
        let active: Vec<usize> = (0..ids.len()).filter(|&p| recorders[p].is_some()).collect();
        if active.is_empty() {
            break;
        }
        let mut rhs = Vec::with_capacity(active.len());
        let mut live = Vec::with_capacity(active.len());
        for &p in &active {
            match model.step_rhs(ids[p], n - 1, time, &states[p]) {
                Ok(r) => {
                    rhs.push(r);
                    live.push(p);
                }
                Err(e) => done[p] = recorders[p].take().map(|r| r.fail(n, e)),
            }
        }
        let guesses: Vec<&[f64]> = live.iter().map(|&p| states[p].as_slice()).collect();
        if let Err(e) = model.solver().solve_batch(&mut rhs, &guesses) {
            // fall back to one solve per path so only the offending paths fail
            drop(guesses);
            rhs = live
                .iter()
                .map(|&p| {
                    model
                        .step_rhs(ids[p], n - 1, time, &states[p])
                        .expect("assembled before")
                })
                .collect();
            let mut failed = Vec::new();
            for (i, &p) in live.iter().enumerate() {
                if let Err(e1) = model.solver().solve(&mut rhs[i], &states[p]) {
                    failed.push((p, format!("{e1} (batch: {e})")));
                }
            }
            for (p, msg) in failed {
                done[p] = recorders[p].take().map(|r| r.fail(n, msg));
            }
        }
        time += s.time.dt;
        for (next, &p) in rhs.into_iter().zip(&live) {
            let Some(rec) = recorders[p].as_mut() else {
                continue;
            };
            if let Some((i, v)) = find_blowup(&next, s.blowup_cap) {
                done[p] = recorders[p].take().map(|r| {
                    r.fail(
                        n,
                        format!("value {v} at unknown {i} exceeds the blowup cap"),
                    )
                });
                continue;
            }
            rec.add_dissipation(model.dissipation(&next));
            if rec.wants(n) {
                rec.observe(n, &model.common_field(&next));
            }
            states[p] = next;
        }
    }
    for (p, rec) in recorders.into_iter().enumerate() {
        if let Some(rec) = rec {
            let z = &states[p];
            let nodal = rec.options().keep_final.then(|| model.nodal(z));
            done[p] = Some(rec.finish(model.norm_sq(z), nodal));
        }
    }
    done.into_iter()
        .map(|r| r.expect("every path finishes"))
        .collect()
}

/// Paths per lockstep batch.
pub(crate) const BATCH: usize = 16;

/// Index of the first entry that is non-finite or exceeds `cap` in magnitude.
pub(crate) fn find_blowup(values: &[f64], cap: f64) -> Option<(usize, f64)> {
    values
        .iter()
        .position(|v| !(v.abs() <= cap))
        .map(|i| (i, values[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::dirichlet_mode;

    #[test]
    fn functional_examples() {
        let n = 64;
        let e11 = CellField::from_fn(n, |x, y| dirichlet_mode(1, 1, x, y));
        let e21 = CellField::from_fn(n, |x, y| dirichlet_mode(2, 1, x, y));
        assert!((functional(&e11, 1, 1) - 1.0).abs() < 1e-4);
        assert!(functional(&e21, 1, 1).abs() < 1e-10);
        assert_eq!(functional(&CellField::from_fn(n, |_, _| 0.0), 1, 1), 0.0);
    }

    #[test]
    fn time_grid() {
        let t = TimeGrid::new(0.25, 1e-3, &[]).unwrap();
        assert_eq!(t.steps, 250);
        assert_eq!(t.sample_steps, vec![250]);
        let t = TimeGrid::new(0.1, 0.01, &[0.05, 0.1, 0.05]).unwrap();
        assert_eq!(t.sample_steps, vec![5, 10]);
        assert!(TimeGrid::new(0.1, 0.03, &[]).is_err());
        assert!(TimeGrid::new(0.1, 0.01, &[0.2]).is_err());
        assert!(TimeGrid::new(-1.0, 0.01, &[]).is_err());
    }

    #[test]
    fn functional_ids() {
        assert_eq!(
            "2:3".parse::<Functional>().unwrap(),
            Functional::Mode { k: 2, l: 3 }
        );
        assert_eq!("l2".parse::<Functional>().unwrap(), Functional::PathL2);
        assert!("0:1".parse::<Functional>().is_err());
        assert_eq!(Functional::Mode { k: 1, l: 1 }.to_string(), "1:1");
    }
}
