//! Semi-implicit Euler–Maruyama for the perforated-domain problem.
//!
//! Bulk unknowns `u` live on fluid nodes and trace unknowns `v` on hole
//! boundary nodes; both are stored in one vector in grid order. The linear
//! part is taken implicitly, drift and noise explicitly:
//!
//! `(M + Δt·L) z¹ = M z⁰ + Δt·B·f(z⁰) + B·g₁ΔW₁ + ε·S·g₂ΔW₂`
//!
//! with `B` the bulk quadrature weights, `S` the boundary surface measures,
//! `M = B + ε²S` and `L` the stiffness of `∫∇u·∇ū + εb∫_{∂S_ε} v·v̄`.

use std::sync::Arc;

use thiserror::Error;

use crate::drift::{eval_drift, DriftError, DriftSpec};
use crate::geometry::{
    restrict_to_common_grid, zero_extend, CellField, GeometryError, NodalField, PerforatedGrid,
};
use crate::linalg::{CsrMatrix, ImplicitSolver, LinalgError, SolverMethod};
use crate::noise::{sample_increment_in_stream, NoiseId, NoiseProjector};
use crate::path::{simulate_batch, PathModel, PathRecord, PathSettings, BATCH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicroError {
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("implicit operator is not positive definite (b = {b}): {source}")]
    Indefinite {
        b: f64,
        #[source]
        source: LinalgError,
    },
    #[error("linear solve failed: {0}")]
    Solve(#[from] LinalgError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("input has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("operator was assembled for dt = {assembled}, step requested dt = {requested}")]
    StepMismatch { assembled: f64, requested: f64 },
}

/// Stiffness, mass and factored implicit matrix for one `(grid, b, Δt)`.
#[derive(Debug, Clone)]
pub struct MicroOperator {
    grid: Arc<PerforatedGrid>,
    b: f64,
    dt: f64,
    stiffness: CsrMatrix,
    mass: Vec<f64>,
    bulk: Vec<f64>,
    surface: Vec<f64>,
    positions: Vec<(f64, f64)>,
    gradient: [CsrMatrix; 2],
    solver: ImplicitSolver,
}

fn stiffness(grid: &PerforatedGrid, b: f64) -> CsrMatrix {
    let n = grid.intervals();
    let eps = grid.epsilon();
    let mut triplets = Vec::with_capacity(5 * grid.unknown_count());
    let mut edge = |p: Option<usize>, q: Option<usize>, w: f64| {
        if w == 0.0 {
            return;
        }
        if let Some(p) = p {
            triplets.push((p, p, w));
        }
        if let Some(q) = q {
            triplets.push((q, q, w));
        }
        if let (Some(p), Some(q)) = (p, q) {
            triplets.push((p, q, -w));
            triplets.push((q, p, -w));
        }
    };
    for j in 0..=n {
        for i in 0..=n {
            if i < n {
                edge(
                    grid.unknown(i, j),
                    grid.unknown(i + 1, j),
                    grid.x_edge_weight(i, j),
                );
            }
            if j < n {
                edge(
                    grid.unknown(i, j),
                    grid.unknown(i, j + 1),
                    grid.y_edge_weight(i, j),
                );
            }
        }
    }
    for (u, s) in grid.surface_measures().into_iter().enumerate() {
        if s > 0.0 && b != 0.0 {
            triplets.push((u, u, eps * b * s));
        }
    }
    CsrMatrix::from_triplets(grid.unknown_count(), triplets)
}

/// Difference operators for `∂₁`, `∂₂`: centered where both edges exist, one-sided otherwise.
fn gradient_operators(grid: &PerforatedGrid) -> [CsrMatrix; 2] {
    let h = grid.spacing();
    let count = grid.unknown_count();
    let mut ops = [Vec::new(), Vec::new()];
    for u in 0..count {
        let (i, j) = grid.node_coords(grid.unknown_node(u));
        for (axis, triplets) in ops.iter_mut().enumerate() {
            let (plus_w, minus_w, plus, minus) = if axis == 0 {
                (
                    grid.x_edge_weight(i, j),
                    grid.x_edge_weight(i - 1, j),
                    (i + 1, j),
                    (i - 1, j),
                )
            } else {
                (
                    grid.y_edge_weight(i, j),
                    grid.y_edge_weight(i, j - 1),
                    (i, j + 1),
                    (i, j - 1),
                )
            };
            let mut add = |node: (usize, usize), c: f64| {
                if let Some(v) = grid.unknown(node.0, node.1) {
                    triplets.push((u, v, c));
                }
            };
            match (plus_w > 0.0, minus_w > 0.0) {
                (true, true) => {
                    add(plus, 0.5 / h);
                    add(minus, -0.5 / h);
                }
                (true, false) => {
                    add(plus, 1.0 / h);
                    add((i, j), -1.0 / h);
                }
                (false, true) => {
                    add((i, j), 1.0 / h);
                    add(minus, -1.0 / h);
                }
                (false, false) => {}
            }
        }
    }
    let [gx, gy] = ops;
    [
        CsrMatrix::from_triplets(count, gx),
        CsrMatrix::from_triplets(count, gy),
    ]
}

/// Assembles the operator with the default banded Cholesky solver.
pub fn assemble_micro(
    grid: Arc<PerforatedGrid>,
    b: f64,
    dt: f64,
) -> Result<MicroOperator, MicroError> {
    assemble_micro_with(grid, b, dt, SolverMethod::Cholesky, 1e-12)
}

pub fn assemble_micro_with(
    grid: Arc<PerforatedGrid>,
    b: f64,
    dt: f64,
    method: SolverMethod,
    tol: f64,
) -> Result<MicroOperator, MicroError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MicroError::TimeStep(dt));
    }
    let eps = grid.epsilon();
    let stiffness = stiffness(&grid, b);
    let bulk = grid.bulk_weights();
    let surface = grid.surface_measures();
    let mass: Vec<f64> = bulk
        .iter()
        .zip(&surface)
        .map(|(w, s)| w + eps * eps * s)
        .collect();
    let system = stiffness.scaled_plus_diagonal(dt, &mass);
    let solver = ImplicitSolver::new(system, method, tol)
        .map_err(|source| MicroError::Indefinite { b, source })?;
    Ok(MicroOperator {
        positions: grid.unknown_positions(),
        gradient: gradient_operators(&grid),
        grid,
        b,
        dt,
        stiffness,
        mass,
        bulk,
        surface,
        solver,
    })
}

impl MicroOperator {
    pub fn grid(&self) -> &Arc<PerforatedGrid> {
        &self.grid
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `L`
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Diagonal of `M`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn bulk_weights(&self) -> &[f64] {
        &self.bulk
    }

    pub fn surface_measures(&self) -> &[f64] {
        &self.surface
    }

    pub fn system(&self) -> &CsrMatrix {
        self.solver.matrix()
    }

    /// `|z|²_{X⁰} = Σ M z²`
    pub fn state_norm_sq(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.mass).map(|(v, m)| m * v * v).sum()
    }

    /// `a_ε(z, z) = zᵀLz`
    pub fn energy(&self, z: &[f64]) -> f64 {
        self.stiffness.energy(z)
    }

    /// Discrete gradient at every unknown.
    pub fn gradient(&self, z: &[f64]) -> Vec<[f64; 2]> {
        let gx = self.gradient[0].mul(z);
        let gy = self.gradient[1].mul(z);
        gx.into_iter().zip(gy).map(|(a, b)| [a, b]).collect()
    }
}

/// State on the unknowns of a perforated grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    pub time: f64,
    pub values: Vec<f64>,
}

impl MicroState {
    pub fn zeros(op: &MicroOperator) -> Self {
        Self {
            time: 0.0,
            values: vec![0.0; op.grid.unknown_count()],
        }
    }

    /// Bulk values on the fluid unknowns.
    pub fn bulk(&self, grid: &PerforatedGrid) -> Vec<f64> {
        grid.fluid_unknowns()
            .iter()
            .map(|&u| self.values[u])
            .collect()
    }

    /// Trace values on the hole-boundary unknowns.
    pub fn trace(&self, grid: &PerforatedGrid) -> Vec<f64> {
        grid.boundary_unknowns()
            .iter()
            .map(|&u| self.values[u])
            .collect()
    }
}

/// One implicit step.
///
/// `bulk_noise` holds `g₁ΔW₁` at every unknown and `boundary_noise` holds
/// `g₂ΔW₂` at the hole-boundary unknowns (in [`PerforatedGrid::boundary_unknowns`] order).
pub fn step_micro(
    state: &MicroState,
    op: &MicroOperator,
    drift: &DriftSpec,
    bulk_noise: Option<&[f64]>,
    boundary_noise: Option<&[f64]>,
    dt: f64,
) -> Result<MicroState, MicroError> {
    let mut rhs = step_rhs(state, op, drift, bulk_noise, boundary_noise, dt)?;
    op.solver.solve(&mut rhs, &state.values)?;
    Ok(MicroState {
        time: state.time + dt,
        values: rhs,
    })
}

fn step_rhs(
    state: &MicroState,
    op: &MicroOperator,
    drift: &DriftSpec,
    bulk_noise: Option<&[f64]>,
    boundary_noise: Option<&[f64]>,
    dt: f64,
) -> Result<Vec<f64>, MicroError> {
    if dt != op.dt {
        return Err(MicroError::StepMismatch {
            assembled: op.dt,
            requested: dt,
        });
    }
    let n = op.mass.len();
    if state.values.len() != n {
        return Err(MicroError::Shape {
            expected: n,
            got: state.values.len(),
        });
    }
    let z = &state.values;
    let mut rhs: Vec<f64> = z.iter().zip(&op.mass).map(|(v, m)| m * v).collect();
    if !drift.is_zero() {
        let grad = drift.needs_gradient().then(|| op.gradient(z));
        let f = eval_drift(drift, state.time, &op.positions, z, grad.as_deref())?;
        for ((r, w), fv) in rhs.iter_mut().zip(&op.bulk).zip(f) {
            *r += dt * w * fv;
        }
    }
    if let Some(noise) = bulk_noise {
        if noise.len() != n {
            return Err(MicroError::Shape {
                expected: n,
                got: noise.len(),
            });
        }
        for ((r, w), dw) in rhs.iter_mut().zip(&op.bulk).zip(noise) {
            *r += w * dw;
        }
    }
    if let Some(noise) = boundary_noise {
        let boundary = op.grid.boundary_unknowns();
        if noise.len() != boundary.len() {
            return Err(MicroError::Shape {
                expected: boundary.len(),
                got: noise.len(),
            });
        }
        let eps = op.grid.epsilon();
        for (&u, dw) in boundary.iter().zip(noise) {
            rhs[u] += eps * op.surface[u] * dw;
        }
    }
    Ok(rhs)
}

/// Everything needed to run micro paths on one grid, shared read-only by workers.
#[derive(Debug, Clone)]
pub struct MicroSimulation {
    op: MicroOperator,
    settings: PathSettings,
    bulk_noise: Option<NoiseProjector>,
    boundary_noise: Option<NoiseProjector>,
}

impl MicroSimulation {
    pub fn new(grid: Arc<PerforatedGrid>, settings: PathSettings) -> Result<Self, MicroError> {
        settings.drift.validate()?;
        let n = grid.intervals();
        if settings.common_n == 0 || !n.is_multiple_of(settings.common_n) {
            return Err(GeometryError::NotDivisible {
                fine: n,
                coarse: settings.common_n,
            }
            .into());
        }
        let op = assemble_micro_with(
            grid,
            settings.b,
            settings.time.dt,
            settings.solver,
            settings.solver_tol,
        )?;
        let positions = op.positions.clone();
        let boundary_positions: Vec<(f64, f64)> = op
            .grid
            .boundary_unknowns()
            .iter()
            .map(|&u| op.grid.unknown_position(u))
            .collect();
        let nontrivial = |p: NoiseProjector| (!p.is_trivial()).then_some(p);
        let bulk_noise = nontrivial(NoiseProjector::new(
            &settings.noise,
            NoiseId::Bulk,
            &positions,
            true,
        ));
        let boundary_noise = nontrivial(NoiseProjector::new(
            &settings.noise,
            NoiseId::Boundary,
            &boundary_positions,
            true,
        ));
        Ok(Self {
            op,
            settings,
            bulk_noise,
            boundary_noise,
        })
    }

    pub fn operator(&self) -> &MicroOperator {
        &self.op
    }

    pub fn settings(&self) -> &PathSettings {
        &self.settings
    }

    /// Initial state: `u⁰` on every unknown, then the trace override if any.
    pub fn initial_state(&self) -> MicroState {
        let grid = &self.op.grid;
        let mut values: Vec<f64> = self
            .op
            .positions
            .iter()
            .map(|&(x, y)| self.settings.initial.eval(x, y))
            .collect();
        if let Some(c) = self.settings.boundary_initial.constant() {
            for &u in grid.boundary_unknowns() {
                values[u] = c;
            }
        }
        MicroState { time: 0.0, values }
    }

    /// Zero extension, square averages, then block averages onto the common grid.
    pub fn common_field(&self, state: &MicroState) -> CellField {
        PathModel::common_field(self, &state.values)
    }
}

impl PathModel for MicroSimulation {
    fn settings(&self) -> &PathSettings {
        &self.settings
    }

    fn solver(&self) -> &ImplicitSolver {
        &self.op.solver
    }

    fn initial_values(&self) -> Vec<f64> {
        self.initial_state().values
    }

    fn step_rhs(
        &self,
        path_id: u64,
        step: usize,
        time: f64,
        z: &[f64],
    ) -> Result<Vec<f64>, String> {
        let s = &self.settings;
        let field = |p: &NoiseProjector, noise| {
            let inc = sample_increment_in_stream(
                &s.noise,
                0,
                path_id,
                noise,
                step as u64,
                s.time.dt,
                s.seed,
            );
            p.field(&inc)
        };
        let bulk = self.bulk_noise.as_ref().map(|p| field(p, NoiseId::Bulk));
        let boundary = self
            .boundary_noise
            .as_ref()
            .map(|p| field(p, NoiseId::Boundary));
        let state = MicroState {
            time,
            values: z.to_vec(),
        };
        step_rhs(
            &state,
            &self.op,
            &s.drift,
            bulk.as_deref(),
            boundary.as_deref(),
            s.time.dt,
        )
        .map_err(|e| e.to_string())
    }

    fn common_field(&self, z: &[f64]) -> CellField {
        let grid = &self.op.grid;
        let nodal = zero_extend(z, grid).expect("state length matches grid");
        restrict_to_common_grid(&grid.cell_average(&nodal), self.settings.common_n)
            .expect("common grid divides the micro grid")
    }

    fn dissipation(&self, z: &[f64]) -> f64 {
        self.op.energy(z)
    }

    fn norm_sq(&self, z: &[f64]) -> f64 {
        self.op.state_norm_sq(z)
    }

    fn nodal(&self, z: &[f64]) -> NodalField {
        zero_extend(z, &self.op.grid).expect("state length matches grid")
    }
}

/// Runs one micro path; failures end the path early and are recorded, not returned.
pub fn simulate_micro_path(sim: &MicroSimulation, path_id: u64) -> PathRecord {
    simulate_batch(sim, &[path_id]).pop().expect("one record")
}

/// Runs several micro paths in lockstep. Records come back in the order of
/// `ids` and equal those of [`simulate_micro_path`].
pub fn simulate_micro_paths(sim: &MicroSimulation, ids: &[u64]) -> Vec<PathRecord> {
    ids.chunks(BATCH)
        .flat_map(|c| simulate_batch(sim, c))
        .collect()
}
