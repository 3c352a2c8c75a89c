//! The homogenized equation on the full unit square.
//!
//! `dU = [ϑ⁻¹div(A*∇U) − rU + F(U)]dt + ϑg₁dW₁ + λg₂dW₂`, `U = 0` on `∂D`,
//! where the reaction `r` and the drift `F` depend on [`EffectiveForm`].
//! The divergence term is discretized by its energy: 5-point differences for
//! `A*₁₁`, `A*₂₂` and a per-square four-corner stencil for `A*₁₂`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cell::{effective_gradient_matrix, HomogenizedTensor};
use crate::drift::{eval_effective_drift, DriftError, DriftSpec, EffectiveForm};
use crate::geometry::{restrict_to_common_grid, CellField, GeometryError, NodalField};
use crate::linalg::{CsrMatrix, ImplicitSolver, LinalgError, SolverMethod};
use crate::noise::{sample_increment_in_stream, NoiseId, NoiseProjector};
use crate::path::{simulate_batch, PathModel, PathRecord, PathSettings, BATCH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MacroError {
    #[error("macro grid needs at least 2 intervals, got {0}")]
    Resolution(usize),
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("effective tensor is not positive definite: eigenvalues {0:?}")]
    Tensor([f64; 2]),
    #[error("volume fraction must lie in (0, 1], got {0}")]
    Theta(f64),
    #[error("implicit operator is not positive definite: {0}")]
    Indefinite(#[source] LinalgError),
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

/// Macroscopic initial datum in terms of the microscopic `u⁰`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MacroInitial {
    /// `U(0) = ϑ·u⁰`, the weak limit of the zero extensions.
    #[default]
    ThetaScaled,
    /// `U(0) = u⁰/ϑ`
    InverseTheta,
}

impl MacroInitial {
    pub fn factor(&self, theta: f64) -> f64 {
        match self {
            MacroInitial::ThetaScaled => theta,
            MacroInitial::InverseTheta => 1.0 / theta,
        }
    }
}

impl fmt::Display for MacroInitial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MacroInitial::ThetaScaled => "theta",
            MacroInitial::InverseTheta => "inverse-theta",
        })
    }
}

impl FromStr for MacroInitial {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "theta" => Ok(MacroInitial::ThetaScaled),
            "inverse-theta" => Ok(MacroInitial::InverseTheta),
            other => Err(format!(
                "unknown macro initial rule `{other}`: expected theta or inverse-theta"
            )),
        }
    }
}

/// Stiffness, mass and factored implicit matrix on an `n × n` grid.
#[derive(Debug, Clone)]
pub struct MacroOperator {
    n: usize,
    tensor: HomogenizedTensor,
    form: EffectiveForm,
    b: f64,
    dt: f64,
    stiffness: CsrMatrix,
    positions: Vec<(f64, f64)>,
    gradient: [CsrMatrix; 2],
    solver: ImplicitSolver,
}

/// Interior node `(i, j)`, `1 ≤ i, j ≤ n−1`, to unknown index.
fn interior(n: usize, i: usize, j: usize) -> Option<usize> {
    (i >= 1 && j >= 1 && i < n && j < n).then(|| (j - 1) * (n - 1) + (i - 1))
}

fn macro_stiffness(n: usize, a: [[f64; 2]; 2], theta: f64, reaction: f64) -> CsrMatrix {
    let size = (n - 1) * (n - 1);
    let h2 = 1.0 / (n * n) as f64;
    let s = 1.0 / theta;
    let mut t = Vec::with_capacity(13 * size);
    let mut edge = |p: Option<usize>, q: Option<usize>, w: f64| {
        if let Some(p) = p {
            t.push((p, p, w));
        }
        if let Some(q) = q {
            t.push((q, q, w));
        }
        if let (Some(p), Some(q)) = (p, q) {
            t.push((p, q, -w));
            t.push((q, p, -w));
        }
    };
    for j in 0..=n {
        for i in 0..=n {
            if i < n && j > 0 && j < n {
                edge(interior(n, i, j), interior(n, i + 1, j), s * a[0][0]);
            }
            if j < n && i > 0 && i < n {
                edge(interior(n, i, j), interior(n, i, j + 1), s * a[1][1]);
            }
        }
    }
    let a12 = 0.5 * (a[0][1] + a[1][0]) * s;
    if a12 != 0.0 {
        for j in 0..n {
            for i in 0..n {
                // corners 00, 10, 01, 11 and the square's averaged differences
                let corners = [
                    interior(n, i, j),
                    interior(n, i + 1, j),
                    interior(n, i, j + 1),
                    interior(n, i + 1, j + 1),
                ];
                let dx = [-0.5, 0.5, -0.5, 0.5];
                let dy = [-0.5, -0.5, 0.5, 0.5];
                for p in 0..4 {
                    for q in 0..4 {
                        if let (Some(cp), Some(cq)) = (corners[p], corners[q]) {
                            t.push((cp, cq, a12 * (dx[p] * dy[q] + dy[p] * dx[q])));
                        }
                    }
                }
            }
        }
    }
    if reaction != 0.0 {
        for u in 0..size {
            t.push((u, u, reaction * h2));
        }
    }
    CsrMatrix::from_triplets(size, t)
}

fn macro_gradient(n: usize) -> [CsrMatrix; 2] {
    let size = (n - 1) * (n - 1);
    let c = 0.5 * n as f64;
    let mut gx = Vec::with_capacity(2 * size);
    let mut gy = Vec::with_capacity(2 * size);
    for j in 1..n {
        for i in 1..n {
            let u = interior(n, i, j).expect("interior node");
            for (v, w) in [(interior(n, i + 1, j), c), (interior(n, i - 1, j), -c)] {
                if let Some(v) = v {
                    gx.push((u, v, w));
                }
            }
            for (v, w) in [(interior(n, i, j + 1), c), (interior(n, i, j - 1), -c)] {
                if let Some(v) = v {
                    gy.push((u, v, w));
                }
            }
        }
    }
    [
        CsrMatrix::from_triplets(size, gx),
        CsrMatrix::from_triplets(size, gy),
    ]
}

pub fn assemble_macro(
    n: usize,
    tensor: &HomogenizedTensor,
    b: f64,
    dt: f64,
    form: EffectiveForm,
) -> Result<MacroOperator, MacroError> {
    assemble_macro_with(n, tensor, b, dt, form, SolverMethod::Cholesky, 1e-12)
}

pub fn assemble_macro_with(
    n: usize,
    tensor: &HomogenizedTensor,
    b: f64,
    dt: f64,
    form: EffectiveForm,
    method: SolverMethod,
    tol: f64,
) -> Result<MacroOperator, MacroError> {
    if n < 2 {
        return Err(MacroError::Resolution(n));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MacroError::TimeStep(dt));
    }
    if !(tensor.theta > 0.0 && tensor.theta <= 1.0) {
        return Err(MacroError::Theta(tensor.theta));
    }
    let eig = tensor.eigenvalues();
    if !(eig[0] > 0.0) || !eig[1].is_finite() {
        return Err(MacroError::Tensor(eig));
    }
    let reaction = form.reaction(b, tensor.theta, tensor.lambda);
    let stiffness = macro_stiffness(n, tensor.a, tensor.theta, reaction);
    let h2 = 1.0 / (n * n) as f64;
    let mass = vec![h2; stiffness.dim()];
    let solver = ImplicitSolver::new(stiffness.scaled_plus_diagonal(dt, &mass), method, tol)
        .map_err(MacroError::Indefinite)?;
    let h = 1.0 / n as f64;
    let positions = (1..n)
        .flat_map(|j| (1..n).map(move |i| (i as f64 * h, j as f64 * h)))
        .collect();
    Ok(MacroOperator {
        n,
        tensor: *tensor,
        form,
        b,
        dt,
        stiffness,
        positions,
        gradient: macro_gradient(n),
        solver,
    })
}

impl MacroOperator {
    pub fn intervals(&self) -> usize {
        self.n
    }

    pub fn tensor(&self) -> &HomogenizedTensor {
        &self.tensor
    }

    pub fn form(&self) -> EffectiveForm {
        self.form
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn unknown_count(&self) -> usize {
        self.stiffness.dim()
    }

    /// `K`, including the reaction term.
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn system(&self) -> &CsrMatrix {
        self.solver.matrix()
    }

    /// Interior node positions in unknown order.
    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn mass(&self) -> f64 {
        1.0 / (self.n * self.n) as f64
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<[f64; 2]> {
        let gx = self.gradient[0].mul(z);
        let gy = self.gradient[1].mul(z);
        gx.into_iter().zip(gy).map(|(a, b)| [a, b]).collect()
    }

    /// Embeds interior values in the full nodal grid with zero boundary values.
    pub fn nodal(&self, values: &[f64]) -> NodalField {
        let n = self.n;
        let mut full = vec![0.0; (n + 1) * (n + 1)];
        for j in 1..n {
            let src = &values[(j - 1) * (n - 1)..j * (n - 1)];
            full[j * (n + 1) + 1..j * (n + 1) + n].copy_from_slice(src);
        }
        NodalField::from_values(n, full).expect("sized to the grid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub time: f64,
    /// Values at interior nodes, row-major.
    pub values: Vec<f64>,
}

impl MacroState {
    pub fn zeros(op: &MacroOperator) -> Self {
        Self {
            time: 0.0,
            values: vec![0.0; op.unknown_count()],
        }
    }
}

/// One implicit step; the noise slices hold `g₁ΔW₁` and `g₂ΔW₂` at interior nodes.
pub fn step_macro(
    state: &MacroState,
    op: &MacroOperator,
    drift: &DriftSpec,
    bulk_noise: Option<&[f64]>,
    boundary_noise: Option<&[f64]>,
    dt: f64,
) -> Result<MacroState, MacroError> {
    let mut rhs = step_rhs(state, op, drift, bulk_noise, boundary_noise, dt)?;
    op.solver.solve(&mut rhs, &state.values)?;
    Ok(MacroState {
        time: state.time + dt,
        values: rhs,
    })
}

fn step_rhs(
    state: &MacroState,
    op: &MacroOperator,
    drift: &DriftSpec,
    bulk_noise: Option<&[f64]>,
    boundary_noise: Option<&[f64]>,
    dt: f64,
) -> Result<Vec<f64>, MacroError> {
    if dt != op.dt {
        return Err(MacroError::StepMismatch {
            assembled: op.dt,
            requested: dt,
        });
    }
    let size = op.unknown_count();
    for len in [
        Some(state.values.len()),
        bulk_noise.map(<[f64]>::len),
        boundary_noise.map(<[f64]>::len),
    ]
    .into_iter()
    .flatten()
    {
        if len != size {
            return Err(MacroError::Shape {
                expected: size,
                got: len,
            });
        }
    }
    let h2 = op.mass();
    let theta = op.tensor.theta;
    let z = &state.values;
    let mut rhs: Vec<f64> = z.iter().map(|v| h2 * v).collect();
    if !drift.is_zero() {
        let grad = drift.needs_gradient().then(|| op.gradient(z));
        let m = effective_gradient_matrix(&op.tensor);
        let f = eval_effective_drift(
            drift,
            op.form,
            theta,
            m,
            state.time,
            &op.positions,
            z,
            grad.as_deref(),
        )?;
        for (r, fv) in rhs.iter_mut().zip(f) {
            *r += dt * h2 * fv;
        }
    }
    if let Some(noise) = bulk_noise {
        for (r, dw) in rhs.iter_mut().zip(noise) {
            *r += h2 * theta * dw;
        }
    }
    if let Some(noise) = boundary_noise {
        let lambda = op.tensor.lambda;
        for (r, dw) in rhs.iter_mut().zip(noise) {
            *r += h2 * lambda * dw;
        }
    }
    Ok(rhs)
}

/// Everything needed to run macro paths, shared read-only by workers.
#[derive(Debug, Clone)]
pub struct MacroSimulation {
    op: MacroOperator,
    settings: PathSettings,
    initial_rule: MacroInitial,
    stream: u64,
    bulk_noise: Option<NoiseProjector>,
    boundary_noise: Option<NoiseProjector>,
}

impl MacroSimulation {
    /// `stream` selects the noise stream; micro paths use stream 0.
    pub fn new(
        n: usize,
        tensor: &HomogenizedTensor,
        form: EffectiveForm,
        initial_rule: MacroInitial,
        stream: u64,
        settings: PathSettings,
    ) -> Result<Self, MacroError> {
        settings.drift.validate()?;
        if settings.common_n == 0 || !n.is_multiple_of(settings.common_n) {
            return Err(GeometryError::NotDivisible {
                fine: n,
                coarse: settings.common_n,
            }
            .into());
        }
        let op = assemble_macro_with(
            n,
            tensor,
            settings.b,
            settings.time.dt,
            form,
            settings.solver,
            settings.solver_tol,
        )?;
        let nontrivial = |p: NoiseProjector| (!p.is_trivial()).then_some(p);
        let bulk_noise = (tensor.theta != 0.0)
            .then(|| NoiseProjector::new(&settings.noise, NoiseId::Bulk, &op.positions, true))
            .and_then(nontrivial);
        let boundary_noise = (tensor.lambda != 0.0)
            .then(|| NoiseProjector::new(&settings.noise, NoiseId::Boundary, &op.positions, true))
            .and_then(nontrivial);
        Ok(Self {
            op,
            settings,
            initial_rule,
            stream,
            bulk_noise,
            boundary_noise,
        })
    }

    pub fn operator(&self) -> &MacroOperator {
        &self.op
    }

    pub fn settings(&self) -> &PathSettings {
        &self.settings
    }

    pub fn initial_state(&self) -> MacroState {
        let k = self.initial_rule.factor(self.op.tensor.theta);
        MacroState {
            time: 0.0,
            values: self
                .op
                .positions
                .iter()
                .map(|&(x, y)| k * self.settings.initial.eval(x, y))
                .collect(),
        }
    }

    pub fn common_field(&self, state: &MacroState) -> CellField {
        PathModel::common_field(self, &state.values)
    }
}

impl PathModel for MacroSimulation {
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
                self.stream,
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
        let state = MacroState {
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
        restrict_to_common_grid(&self.op.nodal(z).cell_average(), self.settings.common_n)
            .expect("common grid divides the macro grid")
    }

    fn dissipation(&self, z: &[f64]) -> f64 {
        self.op.stiffness.energy(z)
    }

    fn norm_sq(&self, z: &[f64]) -> f64 {
        self.op.mass() * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn nodal(&self, z: &[f64]) -> NodalField {
        self.op.nodal(z)
    }
}

/// Runs one macro path; failures end the path early and are recorded, not returned.
pub fn simulate_macro_path(sim: &MacroSimulation, path_id: u64) -> PathRecord {
    simulate_batch(sim, &[path_id]).pop().expect("one record")
}

/// Runs several macro paths in lockstep. Records come back in the order of
/// `ids` and equal those of [`simulate_macro_path`].
pub fn simulate_macro_paths(sim: &MacroSimulation, ids: &[u64]) -> Vec<PathRecord> {
    ids.chunks(BATCH)
        .flat_map(|c| simulate_batch(sim, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::FieldExpr;
    use crate::linalg::BandedCholesky;
    use crate::noise::SpectralNoiseSpec;
    use crate::path::{Functional, TimeGrid};

    fn identity() -> HomogenizedTensor {
        HomogenizedTensor::from_entries([[1.0, 0.0], [0.0, 1.0]], 1.0, 0.0)
    }

    #[test]
    fn identity_tensor_gives_five_point_laplacian() {
        let op = assemble_macro(8, &identity(), 3.0, 0.1, EffectiveForm::Consistent).unwrap();
        let k = op.stiffness();
        let u = interior(8, 3, 4).unwrap();
        assert_eq!(k.get(u, u), 4.0);
        assert_eq!(k.get(u, interior(8, 4, 4).unwrap()), -1.0);
        assert_eq!(k.row(u).count(), 5);
    }

    #[test]
    fn scaled_isotropic_tensor() {
        let t = HomogenizedTensor::from_entries([[0.5, 0.0], [0.0, 0.5]], 0.75, 2.0);
        let op = assemble_macro(8, &t, 1.0, 0.1, EffectiveForm::Literal).unwrap();
        let u = interior(8, 3, 4).unwrap();
        let h2 = 1.0 / 64.0;
        assert!((op.stiffness().get(u, u) - (4.0 * 0.5 / 0.75 + 2.0 * h2)).abs() < 1e-14);
        let op = assemble_macro(8, &t, 1.0, 0.1, EffectiveForm::Consistent).unwrap();
        assert!((op.stiffness().get(u, u) - (4.0 * 0.5 / 0.75 + 2.0 / 0.75 * h2)).abs() < 1e-14);
    }

    #[test]
    fn cross_term_is_symmetric_and_definite() {
        let t = HomogenizedTensor::from_entries([[1.0, 0.4], [0.4, 0.7]], 0.9, 1.0);
        let op = assemble_macro(32, &t, 1.0, 1e-3, EffectiveForm::Consistent).unwrap();
        assert!(op.stiffness().max_asymmetry() <= 1e-14);
        assert!(BandedCholesky::factor(op.stiffness()).is_ok());
        // the reaction-free operator is positive on a smooth field
        let n = 32;
        let z: Vec<f64> = op
            .positions()
            .iter()
            .map(|&(x, y)| {
                (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin() * (1.0 + x)
            })
            .collect();
        let op0 = assemble_macro(n, &t, 0.0, 1e-3, EffectiveForm::Consistent).unwrap();
        let e = op0.stiffness().energy(&z);
        assert!(e > 0.0);
    }

    #[test]
    fn zero_stays_zero() {
        let op = assemble_macro(8, &identity(), 1.0, 1e-3, EffectiveForm::Consistent).unwrap();
        let z = MacroState::zeros(&op);
        let next = step_macro(&z, &op, &DriftSpec::default(), None, None, 1e-3).unwrap();
        assert!(next.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dissipative_without_forcing() {
        let t = HomogenizedTensor::from_entries([[0.6, 0.1], [0.1, 0.6]], 0.75, 2.0);
        let op = assemble_macro(16, &t, 1.0, 1e-2, EffectiveForm::Consistent).unwrap();
        let mut s = MacroState {
            time: 0.0,
            values: op
                .positions()
                .iter()
                .map(|&(x, y)| x * (1.0 - y) + (9.0 * x).cos())
                .collect(),
        };
        let mut norm: f64 = s.values.iter().map(|v| v * v).sum();
        for _ in 0..20 {
            s = step_macro(&s, &op, &DriftSpec::default(), None, None, 1e-2).unwrap();
            let next: f64 = s.values.iter().map(|v| v * v).sum();
            assert!(next <= norm);
            norm = next;
        }
    }

    #[test]
    fn steady_state_solves_elliptic_problem() {
        // steady state of the forced problem: (K) U = h²·ϑ·1
        let t = HomogenizedTensor::from_entries([[0.5, 0.0], [0.0, 0.5]], 0.75, 2.0);
        let n = 16;
        let settings = PathSettings {
            time: TimeGrid::new(500.0, 50.0, &[]).unwrap(),
            drift: DriftSpec::Forcing { f: FieldExpr::ONE },
            noise: SpectralNoiseSpec {
                amplitude: 0.0,
                ..Default::default()
            },
            common_n: n,
            functionals: vec![Functional::Mode { k: 1, l: 1 }],
            record: crate::path::RecordOptions {
                keep_final: true,
                keep_trajectory: false,
            },
            ..PathSettings::default()
        };
        let sim = MacroSimulation::new(
            n,
            &t,
            EffectiveForm::Consistent,
            MacroInitial::ThetaScaled,
            0,
            settings,
        )
        .unwrap();
        let rec = simulate_macro_path(&sim, 0);
        let u = rec.final_nodal.unwrap();
        let k = sim.operator().stiffness();
        let f = BandedCholesky::factor(k).unwrap();
        let mut x = vec![0.75 / (n * n) as f64; k.dim()];
        f.solve_in_place(&mut x);
        let oracle = sim.operator().nodal(&x);
        for (a, b) in u.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn initial_rules() {
        let t = HomogenizedTensor::from_entries([[0.5, 0.0], [0.0, 0.5]], 0.75, 2.0);
        let mk = |rule| {
            let settings = PathSettings {
                initial: FieldExpr::Constant(1.5),
                common_n: 8,
                ..PathSettings::default()
            };
            MacroSimulation::new(8, &t, EffectiveForm::Consistent, rule, 0, settings)
                .unwrap()
                .initial_state()
                .values[0]
        };
        assert_eq!(mk(MacroInitial::ThetaScaled), 1.5 * 0.75);
        assert_eq!(mk(MacroInitial::InverseTheta), 1.5 / 0.75);
    }
}
