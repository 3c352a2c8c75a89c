//! Periodicity cell, perforated domain grids and the maps between them.
//!
//! The hole is a centered axis-aligned square whose sides lie on grid
//! lines, so every grid square is either entirely fluid or entirely hole.
//! Grid edges carry the weight `(fluid squares adjacent to the edge) / 2`
//! and grid nodes carry the fluid area of their dual square; with these
//! weights the discrete fluid area and the discrete hole perimeter are
//! exact, and the discrete gradient energy is the same expression on the
//! cell and on the perforated domain.

use thiserror::Error;

/// Default cap on the number of nodes of a perforated grid.
pub const DEFAULT_MAX_NODES: usize = 4_200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("hole fraction {0} must lie in [0, 1)")]
    HoleFraction(f64),
    #[error("resolution must be positive")]
    Resolution,
    #[error("hole misaligned with the grid: m·(1−ρ)/2 = {0} is not a positive integer")]
    Misaligned(f64),
    #[error("cells per side must be positive")]
    CellCount,
    #[error("grid with {nodes} nodes exceeds the cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error("field length {got} does not match the expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("coarse resolution {coarse} does not divide fine resolution {fine}")]
    NotDivisible { fine: usize, coarse: usize },
}

/// Unit periodicity cell with a centered square hole of side `ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    hole_fraction: f64,
    resolution: usize,
    offset: usize,
    width: usize,
}

impl CellSpec {
    pub fn new(hole_fraction: f64, resolution: usize) -> Result<Self, GeometryError> {
        if !(0.0..1.0).contains(&hole_fraction) {
            return Err(GeometryError::HoleFraction(hole_fraction));
        }
        if resolution == 0 {
            return Err(GeometryError::Resolution);
        }
        let layers = resolution as f64 * (1.0 - hole_fraction) / 2.0;
        let offset = layers.round();
        if (layers - offset).abs() > 1e-9 || offset < 1.0 {
            return Err(GeometryError::Misaligned(layers));
        }
        let offset = offset as usize;
        let width = resolution - 2 * offset;
        Ok(Self {
            hole_fraction,
            resolution,
            offset,
            width,
        })
    }

    pub fn hole_fraction(&self) -> f64 {
        self.hole_fraction
    }

    /// Grid intervals per cell side.
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Index of the first hole grid line within a cell.
    pub fn hole_offset(&self) -> usize {
        self.offset
    }

    /// Hole side in grid intervals.
    pub fn hole_width(&self) -> usize {
        self.width
    }

    pub fn has_hole(&self) -> bool {
        self.width > 0
    }

    /// Volume fraction `|Y*|/|Y| = 1 − ρ²`.
    pub fn theta(&self) -> f64 {
        1.0 - self.hole_fraction * self.hole_fraction
    }

    /// Surface density `|∂S|/|Y| = 4ρ`.
    pub fn lambda(&self) -> f64 {
        4.0 * self.hole_fraction
    }

    fn in_hole_square(&self, li: usize, lj: usize) -> bool {
        let (a, r) = (self.offset, self.width);
        (a..a + r).contains(&li) && (a..a + r).contains(&lj)
    }

    fn local_class(&self, li: usize, lj: usize) -> NodeClass {
        let (a, r) = (self.offset, self.width);
        if r == 0 {
            return NodeClass::Fluid;
        }
        let closed = |v: usize| (a..=a + r).contains(&v);
        let open = |v: usize| v > a && v < a + r;
        if open(li) && open(lj) {
            NodeClass::HoleInterior
        } else if closed(li) && closed(lj) {
            NodeClass::HoleBoundary
        } else {
            NodeClass::Fluid
        }
    }

    fn local_normals(&self, li: usize, lj: usize) -> Vec<Direction> {
        let (a, r) = (self.offset, self.width);
        let closed = |v: usize| (a..=a + r).contains(&v);
        let mut normals = Vec::with_capacity(2);
        if closed(lj) {
            if li == a {
                normals.push(Direction::PosX);
            }
            if li == a + r {
                normals.push(Direction::NegX);
            }
        }
        if closed(li) {
            if lj == a {
                normals.push(Direction::PosY);
            }
            if lj == a + r {
                normals.push(Direction::NegY);
            }
        }
        normals
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    Fluid,
    HoleInterior,
    HoleBoundary,
    OuterBoundary,
}

/// Axis direction of an outward (fluid-to-hole) normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    PosX,
    NegX,
    PosY,
    NegY,
}

/// Discretized periodicity cell on `[0,1)²` with spacing `1/m`.
#[derive(Debug, Clone)]
pub struct CellGrid {
    spec: CellSpec,
    class: Vec<NodeClass>,
    square_fluid: Vec<bool>,
    dof_of: Vec<Option<usize>>,
    dof_nodes: Vec<usize>,
}

/// Builds the discretized periodicity cell.
pub fn build_cell_grid(spec: CellSpec) -> CellGrid {
    let m = spec.resolution;
    let mut class = Vec::with_capacity(m * m);
    let mut square_fluid = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            class.push(spec.local_class(i, j));
            square_fluid.push(!spec.in_hole_square(i, j));
        }
    }
    let mut dof_of = vec![None; m * m];
    let mut dof_nodes = Vec::new();
    for (node, c) in class.iter().enumerate() {
        if *c != NodeClass::HoleInterior {
            dof_of[node] = Some(dof_nodes.len());
            dof_nodes.push(node);
        }
    }
    CellGrid {
        spec,
        class,
        square_fluid,
        dof_of,
        dof_nodes,
    }
}

impl CellGrid {
    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.spec.resolution as f64
    }

    pub fn theta(&self) -> f64 {
        self.spec.theta()
    }

    pub fn lambda(&self) -> f64 {
        self.spec.lambda()
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        let m = self.spec.resolution;
        (j % m) * m + (i % m)
    }

    pub fn class(&self, i: usize, j: usize) -> NodeClass {
        self.class[self.node(i, j)]
    }

    pub fn count(&self, c: NodeClass) -> usize {
        self.class.iter().filter(|&&k| k == c).count()
    }

    pub fn square_is_fluid(&self, i: usize, j: usize) -> bool {
        self.square_fluid[self.node(i, j)]
    }

    /// Weight of the edge from `(i, j)` to `(i+1, j)`.
    pub fn x_edge_weight(&self, i: usize, j: usize) -> f64 {
        let m = self.spec.resolution;
        let below = self.square_is_fluid(i, j + m - 1) as u8;
        let above = self.square_is_fluid(i, j) as u8;
        f64::from(below + above) / 2.0
    }

    /// Weight of the edge from `(i, j)` to `(i, j+1)`.
    pub fn y_edge_weight(&self, i: usize, j: usize) -> f64 {
        let m = self.spec.resolution;
        let left = self.square_is_fluid(i + m - 1, j) as u8;
        let right = self.square_is_fluid(i, j) as u8;
        f64::from(left + right) / 2.0
    }

    /// Fluid area fraction of the dual square around node `(i, j)`.
    pub fn node_fluid_fraction(&self, i: usize, j: usize) -> f64 {
        let m = self.spec.resolution;
        let count = [(0, 0), (m - 1, 0), (0, m - 1), (m - 1, m - 1)]
            .iter()
            .filter(|(di, dj)| self.square_is_fluid(i + di, j + dj))
            .count();
        count as f64 / 4.0
    }

    /// Number of unknowns (fluid and hole-boundary nodes).
    pub fn dof_count(&self) -> usize {
        self.dof_nodes.len()
    }

    pub fn dof(&self, i: usize, j: usize) -> Option<usize> {
        self.dof_of[self.node(i, j)]
    }

    /// Grid coordinates `(i, j)` of an unknown.
    pub fn dof_coords(&self, dof: usize) -> (usize, usize) {
        let m = self.spec.resolution;
        let node = self.dof_nodes[dof];
        (node % m, node / m)
    }

    /// Quadrature weights (fluid area) of the unknowns; they sum to `ϑ`.
    pub fn dof_volumes(&self) -> Vec<f64> {
        let h2 = self.spacing() * self.spacing();
        (0..self.dof_count())
            .map(|d| {
                let (i, j) = self.dof_coords(d);
                h2 * self.node_fluid_fraction(i, j)
            })
            .collect()
    }

    /// Hole perimeter `|∂S|` measured on the grid.
    pub fn hole_perimeter(&self) -> f64 {
        4.0 * self.spec.width as f64 * self.spacing()
    }

    /// Fluid area `|Y*|` measured on the grid.
    pub fn fluid_area(&self) -> f64 {
        let h2 = self.spacing() * self.spacing();
        self.square_fluid.iter().filter(|&&f| f).count() as f64 * h2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryNode {
    /// Global node index.
    pub node: usize,
    /// Sum of the adjacent hole-boundary half-edges.
    pub surface: f64,
    normals: [Option<Direction>; 2],
}

impl BoundaryNode {
    pub fn normals(&self) -> impl Iterator<Item = Direction> + '_ {
        self.normals.iter().flatten().copied()
    }
}

/// The ε-periodic perforated unit square on a uniform grid of spacing `ε/m`.
///
/// Unknowns are the Fluid and HoleBoundary nodes, numbered in row-major
/// order (x fastest), which keeps the assembled operators banded.
#[derive(Debug, Clone)]
pub struct PerforatedGrid {
    spec: CellSpec,
    cells_per_side: usize,
    class: Vec<NodeClass>,
    unknown_of: Vec<Option<usize>>,
    unknown_nodes: Vec<usize>,
    fluid_unknowns: Vec<usize>,
    boundary_unknowns: Vec<usize>,
    boundary_nodes: Vec<BoundaryNode>,
    boundary_slot: Vec<Option<usize>>,
}

pub fn build_perforated_grid(
    spec: CellSpec,
    cells_per_side: usize,
) -> Result<PerforatedGrid, GeometryError> {
    build_perforated_grid_capped(spec, cells_per_side, DEFAULT_MAX_NODES)
}

pub fn build_perforated_grid_capped(
    spec: CellSpec,
    cells_per_side: usize,
    max_nodes: usize,
) -> Result<PerforatedGrid, GeometryError> {
    if cells_per_side == 0 {
        return Err(GeometryError::CellCount);
    }
    let m = spec.resolution;
    let n = cells_per_side
        .checked_mul(m)
        .ok_or(GeometryError::TooLarge {
            nodes: usize::MAX,
            cap: max_nodes,
        })?;
    let nodes = (n + 1).saturating_mul(n + 1);
    if nodes > max_nodes {
        return Err(GeometryError::TooLarge {
            nodes,
            cap: max_nodes,
        });
    }
    let h = 1.0 / n as f64;
    let mut class = Vec::with_capacity(nodes);
    for j in 0..=n {
        for i in 0..=n {
            let c = if i == 0 || j == 0 || i == n || j == n {
                NodeClass::OuterBoundary
            } else {
                spec.local_class(i % m, j % m)
            };
            class.push(c);
        }
    }
    let mut unknown_of = vec![None; nodes];
    let mut unknown_nodes = Vec::new();
    let mut fluid_unknowns = Vec::new();
    let mut boundary_unknowns = Vec::new();
    let mut boundary_nodes = Vec::new();
    let mut boundary_slot = Vec::new();
    for (node, &c) in class.iter().enumerate() {
        if matches!(c, NodeClass::Fluid | NodeClass::HoleBoundary) {
            let u = unknown_nodes.len();
            unknown_of[node] = Some(u);
            unknown_nodes.push(node);
            if c == NodeClass::Fluid {
                fluid_unknowns.push(u);
                boundary_slot.push(None);
            } else {
                let (i, j) = (node % (n + 1), node / (n + 1));
                let list = spec.local_normals(i % m, j % m);
                let mut normals = [None; 2];
                for (slot, d) in normals.iter_mut().zip(list) {
                    *slot = Some(d);
                }
                boundary_slot.push(Some(boundary_nodes.len()));
                boundary_unknowns.push(u);
                boundary_nodes.push(BoundaryNode {
                    node,
                    // two half-edges, also at corners
                    surface: h,
                    normals,
                });
            }
        }
    }
    Ok(PerforatedGrid {
        spec,
        cells_per_side,
        class,
        unknown_of,
        unknown_nodes,
        fluid_unknowns,
        boundary_unknowns,
        boundary_nodes,
        boundary_slot,
    })
}

impl PerforatedGrid {
    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / self.cells_per_side as f64
    }

    /// Grid intervals per side of the unit square.
    pub fn intervals(&self) -> usize {
        self.cells_per_side * self.spec.resolution
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.intervals() as f64
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.intervals() + 1) + i
    }

    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        let w = self.intervals() + 1;
        (node % w, node / w)
    }

    pub fn position(&self, node: usize) -> (f64, f64) {
        let (i, j) = self.node_coords(node);
        let h = self.spacing();
        (i as f64 * h, j as f64 * h)
    }

    pub fn class(&self, i: usize, j: usize) -> NodeClass {
        self.class[self.node(i, j)]
    }

    pub fn classes(&self) -> &[NodeClass] {
        &self.class
    }

    pub fn count(&self, c: NodeClass) -> usize {
        self.class.iter().filter(|&&k| k == c).count()
    }

    pub fn square_is_fluid(&self, i: usize, j: usize) -> bool {
        let m = self.spec.resolution;
        !self.spec.in_hole_square(i % m, j % m)
    }

    /// Weight of the edge `(i, j)–(i+1, j)`; squares outside the domain count as absent.
    pub fn x_edge_weight(&self, i: usize, j: usize) -> f64 {
        let n = self.intervals();
        let below = j > 0 && self.square_is_fluid(i, j - 1);
        let above = j < n && self.square_is_fluid(i, j);
        f64::from(below as u8 + above as u8) / 2.0
    }

    /// Weight of the edge `(i, j)–(i, j+1)`.
    pub fn y_edge_weight(&self, i: usize, j: usize) -> f64 {
        let n = self.intervals();
        let left = i > 0 && self.square_is_fluid(i - 1, j);
        let right = i < n && self.square_is_fluid(i, j);
        f64::from(left as u8 + right as u8) / 2.0
    }

    /// Fluid area fraction of the dual square around an interior node.
    pub fn node_fluid_fraction(&self, i: usize, j: usize) -> f64 {
        let mut count = 0u8;
        for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if i >= di && j >= dj && self.square_is_fluid(i - di, j - dj) {
                count += 1;
            }
        }
        f64::from(count) / 4.0
    }

    pub fn unknown_count(&self) -> usize {
        self.unknown_nodes.len()
    }

    pub fn unknown(&self, i: usize, j: usize) -> Option<usize> {
        self.unknown_of[self.node(i, j)]
    }

    pub fn unknown_node(&self, u: usize) -> usize {
        self.unknown_nodes[u]
    }

    pub fn unknown_position(&self, u: usize) -> (f64, f64) {
        self.position(self.unknown_nodes[u])
    }

    pub fn unknown_positions(&self) -> Vec<(f64, f64)> {
        (0..self.unknown_count())
            .map(|u| self.unknown_position(u))
            .collect()
    }

    /// FluidDOF: unknown indices of Fluid nodes.
    pub fn fluid_unknowns(&self) -> &[usize] {
        &self.fluid_unknowns
    }

    /// BoundaryDOF: unknown indices of HoleBoundary nodes.
    pub fn boundary_unknowns(&self) -> &[usize] {
        &self.boundary_unknowns
    }

    pub fn boundary_nodes(&self) -> &[BoundaryNode] {
        &self.boundary_nodes
    }

    /// Boundary record of an unknown, if it is a hole-boundary node.
    pub fn boundary_of_unknown(&self, u: usize) -> Option<&BoundaryNode> {
        self.boundary_slot[u].map(|s| &self.boundary_nodes[s])
    }

    /// Surface measure `s_b` of each unknown (zero for fluid nodes).
    pub fn surface_measures(&self) -> Vec<f64> {
        (0..self.unknown_count())
            .map(|u| self.boundary_of_unknown(u).map_or(0.0, |b| b.surface))
            .collect()
    }

    /// Bulk quadrature weights (fluid area of the dual square) of the unknowns.
    pub fn bulk_weights(&self) -> Vec<f64> {
        let h2 = self.spacing() * self.spacing();
        self.unknown_nodes
            .iter()
            .map(|&node| {
                let (i, j) = self.node_coords(node);
                h2 * self.node_fluid_fraction(i, j)
            })
            .collect()
    }

    /// Sum of `s_b` over the boundary nodes of each hole, in cell row-major order.
    pub fn hole_perimeters(&self) -> Vec<f64> {
        let m = self.spec.resolution;
        let nc = self.cells_per_side;
        let mut sums = vec![0.0; nc * nc];
        for b in &self.boundary_nodes {
            let (i, j) = self.node_coords(b.node);
            sums[(j / m) * nc + i / m] += b.surface;
        }
        sums
    }

    /// Discrete `L²(D_ε)` norm squared of a field on the unknowns (`h²` per node).
    pub fn l2_norm_sq(&self, values: &[f64]) -> f64 {
        let h2 = self.spacing() * self.spacing();
        values.iter().map(|v| v * v).sum::<f64>() * h2
    }

    /// Averages a zero-extended nodal field onto grid squares; hole squares get 0.
    pub fn cell_average(&self, field: &NodalField) -> CellField {
        let n = self.intervals();
        assert_eq!(field.intervals(), n);
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                values.push(if self.square_is_fluid(i, j) {
                    field.square_mean(i, j)
                } else {
                    0.0
                });
            }
        }
        CellField { n, values }
    }

    pub fn summary(&self) -> GridSummary {
        GridSummary {
            epsilon: self.epsilon(),
            spacing: self.spacing(),
            rho: self.spec.hole_fraction,
            m: self.spec.resolution,
            fluid: self.count(NodeClass::Fluid),
            hole_interior: self.count(NodeClass::HoleInterior),
            hole_boundary: self.count(NodeClass::HoleBoundary),
            outer_boundary: self.count(NodeClass::OuterBoundary),
            theta: self.spec.theta(),
            lambda: self.spec.lambda(),
        }
    }
}

/// Node counts and constants of a perforated grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSummary {
    pub epsilon: f64,
    pub spacing: f64,
    pub rho: f64,
    pub m: usize,
    pub fluid: usize,
    pub hole_interior: usize,
    pub hole_boundary: usize,
    pub outer_boundary: usize,
    pub theta: f64,
    pub lambda: f64,
}

impl GridSummary {
    pub const CSV_HEADER: &'static str =
        "epsilon,h,rho,m,fluid,hole_interior,hole_boundary,outer_boundary,theta,lambda";

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{},{},{},{},{},{:?},{:?}",
            self.epsilon,
            self.spacing,
            self.rho,
            self.m,
            self.fluid,
            self.hole_interior,
            self.hole_boundary,
            self.outer_boundary,
            self.theta,
            self.lambda
        )
    }
}

/// Nodal field on the full `(n+1)²` grid of the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    n: usize,
    values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; (n + 1) * (n + 1)],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = 1.0 / n as f64;
        let mut values = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                values.push(f(i as f64 * h, j as f64 * h));
            }
        }
        Self { n, values }
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != (n + 1) * (n + 1) {
            return Err(GeometryError::Length {
                expected: (n + 1) * (n + 1),
                got: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    pub fn intervals(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * (self.n + 1) + i]
    }

    /// Discrete `L²(D)` norm squared with weight `h²` per node.
    pub fn l2_norm_sq(&self) -> f64 {
        let h = self.spacing();
        self.values.iter().map(|v| v * v).sum::<f64>() * h * h
    }

    fn square_mean(&self, i: usize, j: usize) -> f64 {
        0.25 * (self.get(i, j) + self.get(i + 1, j) + self.get(i, j + 1) + self.get(i + 1, j + 1))
    }

    /// Averages onto grid squares (no holes).
    pub fn cell_average(&self) -> CellField {
        let n = self.n;
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                values.push(self.square_mean(i, j));
            }
        }
        CellField { n, values }
    }
}

/// Square-centered field on an `n × n` grid of the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    n: usize,
    values: Vec<f64>,
}

impl CellField {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != n * n {
            return Err(GeometryError::Length {
                expected: n * n,
                got: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    /// Samples `f` at square centers.
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = 1.0 / n as f64;
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                values.push(f((i as f64 + 0.5) * h, (j as f64 + 0.5) * h));
            }
        }
        Self { n, values }
    }

    pub fn intervals(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `∫_D F²` with the midpoint rule.
    pub fn l2_norm_sq(&self) -> f64 {
        let h = 1.0 / self.n as f64;
        self.values.iter().map(|v| v * v).sum::<f64>() * h * h
    }

    /// `∫_D (F − G)²` with the midpoint rule.
    pub fn l2_distance_sq(&self, other: &CellField) -> f64 {
        assert_eq!(self.n, other.n);
        let h = 1.0 / self.n as f64;
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * h
            * h
    }
}

/// Zero extension of a field on the unknowns of `grid` to the full nodal grid.
pub fn zero_extend(values: &[f64], grid: &PerforatedGrid) -> Result<NodalField, GeometryError> {
    if values.len() != grid.unknown_count() {
        return Err(GeometryError::Length {
            expected: grid.unknown_count(),
            got: values.len(),
        });
    }
    let mut field = NodalField::zeros(grid.intervals());
    for (u, &v) in values.iter().enumerate() {
        field.values[grid.unknown_node(u)] = v;
    }
    Ok(field)
}

/// Block-average projection of a square-centered field onto a coarser grid.
pub fn restrict_to_common_grid(
    field: &CellField,
    coarse: usize,
) -> Result<CellField, GeometryError> {
    let fine = field.n;
    if coarse == 0 || !fine.is_multiple_of(coarse) {
        return Err(GeometryError::NotDivisible { fine, coarse });
    }
    let r = fine / coarse;
    let scale = 1.0 / (r * r) as f64;
    let mut values = vec![0.0; coarse * coarse];
    for j in 0..fine {
        let row = (j / r) * coarse;
        for i in 0..fine {
            values[row + i / r] += field.values[j * fine + i];
        }
    }
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(CellField { n: coarse, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_hole_cell() {
        let g = build_cell_grid(CellSpec::new(0.0, 8).unwrap());
        assert_eq!(g.count(NodeClass::Fluid), 64);
        assert_eq!(g.theta(), 1.0);
        assert_eq!(g.lambda(), 0.0);
        assert_eq!(g.dof_count(), 64);
    }

    #[test]
    fn half_hole_cell_m4() {
        let g = build_cell_grid(CellSpec::new(0.5, 4).unwrap());
        assert_eq!(g.count(NodeClass::HoleInterior), 1);
        assert_eq!(g.class(2, 2), NodeClass::HoleInterior);
        assert_eq!(g.count(NodeClass::HoleBoundary), 8);
        assert_eq!(
            g.count(NodeClass::Fluid)
                + g.count(NodeClass::HoleBoundary)
                + g.count(NodeClass::HoleInterior),
            16
        );
        assert_eq!(g.theta(), 0.75);
        assert_eq!(g.lambda(), 2.0);
        assert!((g.fluid_area() - 0.75).abs() < 1e-15);
        assert!((g.hole_perimeter() - 2.0).abs() < 1e-15);
        assert!((g.dof_volumes().iter().sum::<f64>() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn misaligned_and_out_of_range_rejected() {
        assert!(matches!(
            CellSpec::new(0.5, 3),
            Err(GeometryError::Misaligned(_))
        ));
        assert!(matches!(
            CellSpec::new(1.0, 8),
            Err(GeometryError::HoleFraction(_))
        ));
        assert!(matches!(
            CellSpec::new(-0.1, 8),
            Err(GeometryError::HoleFraction(_))
        ));
        // hole would touch the cell boundary
        assert!(CellSpec::new(1.0 - 1e-12, 8).is_err());
    }

    #[test]
    fn cell_edge_weights() {
        let g = build_cell_grid(CellSpec::new(0.5, 4).unwrap());
        // edge along the bottom side of the hole: one fluid square
        assert_eq!(g.x_edge_weight(1, 1), 0.5);
        // edge inside the hole
        assert_eq!(g.x_edge_weight(1, 2), 0.0);
        // edge in the fluid, wrapping
        assert_eq!(g.x_edge_weight(3, 0), 1.0);
        assert_eq!(g.node_fluid_fraction(1, 1), 0.75);
        assert_eq!(g.node_fluid_fraction(1, 2), 0.5);
    }

    #[test]
    fn perforated_grid_arithmetic() {
        let spec = CellSpec::new(0.5, 4).unwrap();
        let g = build_perforated_grid(spec, 2).unwrap();
        assert_eq!(g.epsilon(), 0.5);
        assert_eq!(g.spacing(), 0.125);
        let per_hole = g.hole_perimeters();
        assert_eq!(per_hole.len(), 4);
        for p in per_hole {
            assert!((p - 1.0).abs() < 1e-15);
        }
        let g4 = build_perforated_grid(spec, 4).unwrap();
        let total: f64 = g4.surface_measures().iter().sum();
        // N_ε² holes of perimeter 4ρε
        assert!((total - 8.0).abs() < 1e-12);
        // ε·Σ s_b = λ|D|
        assert!((g4.epsilon() * total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_hole_grid_has_no_boundary_dofs() {
        let g = build_perforated_grid(CellSpec::new(0.0, 4).unwrap(), 3).unwrap();
        assert!(g.boundary_unknowns().is_empty());
        assert_eq!(g.unknown_count(), 11 * 11);
    }

    #[test]
    fn bulk_weights_give_exact_fluid_area() {
        let g = build_perforated_grid(CellSpec::new(0.5, 8).unwrap(), 4).unwrap();
        let area: f64 = g.bulk_weights().iter().sum();
        // exact up to the half-weighted Dirichlet ring, which is fluid
        let n = g.intervals() as f64;
        let ring = (2.0 * n - 1.0) * g.spacing().powi(2);
        assert!((area + ring - 0.75).abs() < 1e-12, "area {area}");
    }

    #[test]
    fn boundary_normals() {
        let spec = CellSpec::new(0.5, 4).unwrap();
        let g = build_perforated_grid(spec, 1).unwrap();
        let corner = g.boundary_of_unknown(g.unknown(1, 1).unwrap()).unwrap();
        let n: Vec<_> = corner.normals().collect();
        assert_eq!(n, vec![Direction::PosX, Direction::PosY]);
        let edge = g.boundary_of_unknown(g.unknown(3, 2).unwrap()).unwrap();
        assert_eq!(edge.normals().collect::<Vec<_>>(), vec![Direction::NegX]);
        assert_eq!(edge.surface, 0.25);
    }

    #[test]
    fn classification_is_eps_periodic() {
        let spec = CellSpec::new(0.5, 8).unwrap();
        let g = build_perforated_grid(spec, 4).unwrap();
        let n = g.intervals();
        for j in 1..n {
            for i in 1..n {
                for (di, dj) in [(8, 0), (0, 8), (16, 8)] {
                    if i + di < n && j + dj < n {
                        assert_eq!(g.class(i, j), g.class(i + di, j + dj));
                    }
                }
            }
        }
    }

    #[test]
    fn resource_guard() {
        let spec = CellSpec::new(0.5, 8).unwrap();
        assert!(matches!(
            build_perforated_grid_capped(spec, 100, 10_000),
            Err(GeometryError::TooLarge { .. })
        ));
    }

    #[test]
    fn zero_extension_of_constant() {
        let g = build_perforated_grid(CellSpec::new(0.5, 8).unwrap(), 4).unwrap();
        let ones = vec![1.0; g.unknown_count()];
        let full = zero_extend(&ones, &g).unwrap();
        let n = g.intervals();
        for j in 0..=n {
            for i in 0..=n {
                let expect = if g.unknown(i, j).is_some() { 1.0 } else { 0.0 };
                assert_eq!(full.get(i, j), expect);
            }
        }
        let cells = g.cell_average(&full);
        // away from the Dirichlet ring, fluid squares average to 1 and hole squares to 0
        let interior: f64 = (1..n - 1)
            .flat_map(|j| (1..n - 1).map(move |i| (i, j)))
            .map(|(i, j)| cells.get(i, j))
            .sum();
        let fluid_squares = (1..n - 1)
            .flat_map(|j| (1..n - 1).map(move |i| (i, j)))
            .filter(|&(i, j)| g.square_is_fluid(i, j))
            .count();
        assert_eq!(interior, fluid_squares as f64);
        // 16 holes of 4×4 squares
        assert_eq!((n - 2) * (n - 2) - fluid_squares, 16 * 16);
        assert!(zero_extend(&ones[1..], &g).is_err());
        let zero = zero_extend(&vec![0.0; g.unknown_count()], &g).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restriction_of_ramp_and_constant() {
        let ramp = CellField::from_fn(128, |x, y| 2.0 * x - y + 0.5);
        let coarse = restrict_to_common_grid(&ramp, 32).unwrap();
        let expect = CellField::from_fn(32, |x, y| 2.0 * x - y + 0.5);
        for (a, b) in coarse.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = CellField::from_fn(16, |_, _| 3.25);
        assert!(restrict_to_common_grid(&c, 4)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 3.25));
        assert!(matches!(
            restrict_to_common_grid(&c, 5),
            Err(GeometryError::NotDivisible { .. })
        ));
    }
}
