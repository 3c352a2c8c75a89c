//! Periodic cell problems and the homogenized tensor.
//!
//! The corrector fluctuation `φ_i = w_i − y_i` minimizes the discrete cell
//! energy `Σ_edges weight·|h·e_i + Δφ|²` over periodic fields. Edges that
//! enter the hole have weight zero, which is the natural zero-flux
//! condition on the hole boundary.

use thiserror::Error;

use crate::geometry::CellGrid;
use crate::linalg::{conjugate_gradient, CgOptions, CsrMatrix, LinalgError};

pub const DEFAULT_CELL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("corrector solve for direction {direction} failed: {source}")]
    Solve {
        direction: usize,
        #[source]
        source: LinalgError,
    },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("correctors were solved on different grids")]
    GridMismatch,
}

/// Periodic fluctuation `φ_i` of the corrector `w_i = y_i + φ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorField {
    /// Direction index, 0 for `y₁` and 1 for `y₂`.
    pub direction: usize,
    /// Values on the cell unknowns, mean zero over the fluid part.
    pub values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    resolution: usize,
}

impl CorrectorField {
    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

/// Effective diffusion tensor and the cell constants it comes with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogenizedTensor {
    pub a: [[f64; 2]; 2],
    pub theta: f64,
    pub lambda: f64,
    pub rho: f64,
    pub m: usize,
    pub tol: f64,
    pub iterations: [usize; 2],
    pub residuals: [f64; 2],
    /// `(1/|Y|)∫_{Y*} w_i w_j` evaluated with nodal quadrature; kept for reference only.
    pub product_form: [[f64; 2]; 2],
}

impl HomogenizedTensor {
    /// Tensor with given entries and no cell provenance (e.g. supplied by hand).
    pub fn from_entries(a: [[f64; 2]; 2], theta: f64, lambda: f64) -> Self {
        Self {
            a,
            theta,
            lambda,
            rho: f64::NAN,
            m: 0,
            tol: 0.0,
            iterations: [0, 0],
            residuals: [0.0, 0.0],
            product_form: [[f64::NAN; 2]; 2],
        }
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let [[a, b], [c, d]] = self.a;
        let off = 0.5 * (b + c);
        let mean = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + off * off).sqrt();
        [mean - rad, mean + rad]
    }

    pub fn asymmetry(&self) -> f64 {
        (self.a[0][1] - self.a[1][0]).abs()
    }

    /// `ξ·A*ξ`
    pub fn quadratic(&self, xi: [f64; 2]) -> f64 {
        let a = &self.a;
        xi[0] * (a[0][0] * xi[0] + a[0][1] * xi[1]) + xi[1] * (a[1][0] * xi[0] + a[1][1] * xi[1])
    }
}

fn cell_stiffness(grid: &CellGrid) -> CsrMatrix {
    let m = grid.resolution();
    let mut triplets = Vec::with_capacity(5 * grid.dof_count());
    let mut add_edge = |p: Option<usize>, q: Option<usize>, w: f64| {
        if w == 0.0 {
            return;
        }
        let (p, q) = (
            p.expect("weighted edge endpoint"),
            q.expect("weighted edge endpoint"),
        );
        triplets.push((p, p, w));
        triplets.push((q, q, w));
        triplets.push((p, q, -w));
        triplets.push((q, p, -w));
    };
    for j in 0..m {
        for i in 0..m {
            add_edge(grid.dof(i, j), grid.dof(i + 1, j), grid.x_edge_weight(i, j));
            add_edge(grid.dof(i, j), grid.dof(i, j + 1), grid.y_edge_weight(i, j));
        }
    }
    CsrMatrix::from_triplets(grid.dof_count(), triplets)
}

/// Right-hand side `h·(w_in − w_out)` of the corrector equation for direction `dir`.
fn corrector_rhs(grid: &CellGrid, dir: usize) -> Vec<f64> {
    let m = grid.resolution();
    let h = grid.spacing();
    let mut rhs = vec![0.0; grid.dof_count()];
    for j in 0..m {
        for i in 0..m {
            let (w, next) = if dir == 0 {
                (grid.x_edge_weight(i, j), (i + 1, j))
            } else {
                (grid.y_edge_weight(i, j), (i, j + 1))
            };
            if w == 0.0 {
                continue;
            }
            let from = grid.dof(i, j).expect("weighted edge endpoint");
            let to = grid.dof(next.0, next.1).expect("weighted edge endpoint");
            rhs[from] += h * w;
            rhs[to] -= h * w;
        }
    }
    rhs
}

/// Solves the cell problem for the corrector in direction `direction` (0 or 1).
pub fn solve_corrector(
    grid: &CellGrid,
    direction: usize,
    tol: f64,
) -> Result<CorrectorField, CellError> {
    assert!(direction < 2, "direction must be 0 or 1");
    if !(tol > 0.0) {
        return Err(CellError::Tolerance(tol));
    }
    let stiffness = cell_stiffness(grid);
    let rhs = corrector_rhs(grid, direction);
    let n = grid.dof_count();
    let mut values = vec![0.0; n];
    let opts = CgOptions {
        tol,
        max_iter: 10 * n.max(1),
        project_constants: true,
    };
    let outcome = conjugate_gradient(&stiffness, &rhs, &mut values, opts)
        .map_err(|source| CellError::Solve { direction, source })?;
    // canonical representative: mean zero with respect to fluid area
    let volumes = grid.dof_volumes();
    let area: f64 = volumes.iter().sum();
    let mean = values.iter().zip(&volumes).map(|(v, w)| v * w).sum::<f64>() / area;
    values.iter_mut().for_each(|v| *v -= mean);
    Ok(CorrectorField {
        direction,
        values,
        residual: outcome.residual,
        iterations: outcome.iterations,
        resolution: grid.resolution(),
    })
}

/// Solves both correctors (concurrently) on `grid`.
pub fn solve_correctors(grid: &CellGrid, tol: f64) -> Result<[CorrectorField; 2], CellError> {
    let (c0, c1) = rayon::join(
        || solve_corrector(grid, 0, tol),
        || solve_corrector(grid, 1, tol),
    );
    Ok([c0?, c1?])
}

/// Energy-form tensor `A*_ij = Σ_edges weight·(h·e_i + Δφ_i)·(h·e_j + Δφ_j)`.
pub fn homogenized_tensor(
    correctors: &[CorrectorField; 2],
    grid: &CellGrid,
) -> Result<HomogenizedTensor, CellError> {
    let m = grid.resolution();
    if correctors
        .iter()
        .any(|c| c.resolution != m || c.values.len() != grid.dof_count())
    {
        return Err(CellError::GridMismatch);
    }
    let h = grid.spacing();
    let value =
        |c: &CorrectorField, i: usize, j: usize| grid.dof(i, j).map_or(0.0, |d| c.values[d]);
    let mut a = [[0.0; 2]; 2];
    for j in 0..m {
        for i in 0..m {
            for (axis, w, next) in [
                (0, grid.x_edge_weight(i, j), (i + 1, j)),
                (1, grid.y_edge_weight(i, j), (i, j + 1)),
            ] {
                if w == 0.0 {
                    continue;
                }
                let mut grad = [0.0; 2];
                for (k, c) in correctors.iter().enumerate() {
                    let jump = value(c, next.0, next.1) - value(c, i, j);
                    grad[k] = if k == axis { h + jump } else { jump };
                }
                for p in 0..2 {
                    for q in 0..2 {
                        a[p][q] += w * grad[p] * grad[q];
                    }
                }
            }
        }
    }
    let mut product_form = [[0.0; 2]; 2];
    let volumes = grid.dof_volumes();
    for (d, vol) in volumes.iter().enumerate() {
        let (i, j) = grid.dof_coords(d);
        let w = [
            i as f64 * h + correctors[0].values[d],
            j as f64 * h + correctors[1].values[d],
        ];
        for p in 0..2 {
            for q in 0..2 {
                product_form[p][q] += vol * w[p] * w[q];
            }
        }
    }
    Ok(HomogenizedTensor {
        a,
        theta: grid.theta(),
        lambda: grid.lambda(),
        rho: grid.spec().hole_fraction(),
        m,
        tol: 0.0_f64.max(correctors[0].residual.max(correctors[1].residual)),
        iterations: [correctors[0].iterations, correctors[1].iterations],
        residuals: [correctors[0].residual, correctors[1].residual],
        product_form,
    })
}

/// Builds the cell grid, solves both correctors and assembles `A*`.
pub fn compute_tensor(
    spec: crate::geometry::CellSpec,
    tol: f64,
) -> Result<(HomogenizedTensor, [CorrectorField; 2], CellGrid), CellError> {
    let grid = crate::geometry::build_cell_grid(spec);
    let correctors = solve_correctors(&grid, tol)?;
    let mut tensor = homogenized_tensor(&correctors, &grid)?;
    tensor.tol = tol;
    Ok((tensor, correctors, grid))
}

/// `M = A*/ϑ`, the matrix applied to `∇U` in the effective gradient drift.
pub fn effective_gradient_matrix(tensor: &HomogenizedTensor) -> [[f64; 2]; 2] {
    let t = tensor.theta;
    [
        [tensor.a[0][0] / t, tensor.a[0][1] / t],
        [tensor.a[1][0] / t, tensor.a[1][1] / t],
    ]
}

/// Cell CSV columns emitted by the `cell` command.
pub const CELL_CSV_HEADER: &str =
    "rho,m,theta,lambda,a11,a12,a21,a22,residual1,residual2,iters1,iters2";

pub fn cell_csv_row(t: &HomogenizedTensor) -> String {
    format!(
        "{:?},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
        t.rho,
        t.m,
        t.theta,
        t.lambda,
        t.a[0][0],
        t.a[0][1],
        t.a[1][0],
        t.a[1][1],
        t.residuals[0],
        t.residuals[1],
        t.iterations[0],
        t.iterations[1]
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cell_grid, CellSpec};

    fn tensor(rho: f64, m: usize) -> (HomogenizedTensor, [CorrectorField; 2], CellGrid) {
        compute_tensor(CellSpec::new(rho, m).unwrap(), DEFAULT_CELL_TOL).unwrap()
    }

    #[test]
    fn no_hole_gives_identity() {
        let (t, c, _) = tensor(0.0, 16);
        assert!(c.iter().all(|c| c.values.iter().all(|&v| v == 0.0)));
        for p in 0..2 {
            for q in 0..2 {
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((t.a[p][q] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(effective_gradient_matrix(&t), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn corrector_is_antisymmetric_under_reflection() {
        let (_, c, grid) = tensor(0.5, 16);
        let m = 16;
        let mut worst: f64 = 0.0;
        for j in 0..m {
            for i in 0..m {
                if let Some(d) = grid.dof(i, j) {
                    let r = grid.dof((m - i) % m, j).unwrap();
                    worst = worst.max((c[0].values[d] + c[0].values[r]).abs());
                }
            }
        }
        assert!(worst < 1e-8, "asymmetry {worst}");
    }

    #[test]
    fn second_corrector_is_the_swapped_first() {
        let (_, c, grid) = tensor(0.5, 16);
        for d in 0..grid.dof_count() {
            let (i, j) = grid.dof_coords(d);
            let swapped = grid.dof(j, i).unwrap();
            assert!((c[1].values[d] - c[0].values[swapped]).abs() < 1e-8);
        }
    }

    #[test]
    fn variational_residual_is_small() {
        let (_, c, grid) = tensor(0.5, 16);
        let l = cell_stiffness(&grid);
        for (dir, corr) in c.iter().enumerate() {
            let rhs = corrector_rhs(&grid, dir);
            let lphi = l.mul(&corr.values);
            let err: f64 = lphi
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-9 * norm);
        }
    }

    #[test]
    fn tensor_is_isotropic_and_within_voigt_bound() {
        let (t, _, _) = tensor(0.5, 16);
        assert!(t.asymmetry() <= 1e-12);
        assert!(t.a[0][1].abs() < 1e-9);
        assert!((t.a[0][0] - t.a[1][1]).abs() < 1e-9);
        let [lo, hi] = t.eigenvalues();
        assert!(lo > 0.0 && hi <= 0.75 + 1e-10);
        let m = effective_gradient_matrix(&t);
        assert!((m[0][0] * t.theta - t.a[0][0]).abs() < 1e-15);
    }

    #[test]
    fn tensor_monotone_in_hole_size() {
        let values: Vec<f64> = [0.0, 0.25, 0.5]
            .iter()
            .map(|&r| tensor(r, 16).0.a[0][0])
            .collect();
        assert!(
            values[0] >= values[1] && values[1] >= values[2],
            "{values:?}"
        );
    }

    #[test]
    fn energy_form_equals_gradient_product_form() {
        // Σ w ∇w_i·∇w_j with w_i = y_i + φ_i evaluated independently of the assembly loop.
        let (t, c, grid) = tensor(0.25, 16);
        let m = grid.resolution();
        let h = grid.spacing();
        let w_of = |k: usize, i: usize, j: usize| {
            let phi = grid.dof(i % m, j % m).map_or(0.0, |d| c[k].values[d]);
            let y = if k == 0 { i as f64 * h } else { j as f64 * h };
            y + phi
        };
        let mut a = [[0.0; 2]; 2];
        for j in 0..m {
            for i in 0..m {
                let wx = grid.x_edge_weight(i, j);
                let wy = grid.y_edge_weight(i, j);
                for p in 0..2 {
                    for q in 0..2 {
                        let gx = |k| w_of(k, i + 1, j) - w_of(k, i, j);
                        let gy = |k| w_of(k, i, j + 1) - w_of(k, i, j);
                        a[p][q] += wx * gx(p) * gx(q) + wy * gy(p) * gy(q);
                    }
                }
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                assert!((a[p][q] - t.a[p][q]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bad_tolerance_rejected() {
        let grid = build_cell_grid(CellSpec::new(0.5, 8).unwrap());
        assert!(matches!(
            solve_corrector(&grid, 0, 0.0),
            Err(CellError::Tolerance(_))
        ));
    }
}
