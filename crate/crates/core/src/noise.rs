//! Truncated Q-Wiener increments in the Dirichlet sine basis of the unit square.
//!
//! Every increment is addressed by `(master seed, stream, path, noise, step)`.
//! The address is folded with the SplitMix64 finalizer into a 64-bit key,
//! the key seeds xoshiro256++ (state filled by SplitMix64, as in the
//! reference implementation), uniforms are the top 53 bits of each output,
//! and normals come from the Box–Muller transform taken in pairs. Nothing
//! else is needed to reproduce a stream in another language.

use std::f64::consts::PI;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::expr::FieldExpr;

/// Identifier recorded in run manifests.
pub const RNG_ALGORITHM: &str =
    "key=splitmix64-fold(seed,stream,path,noise,step); xoshiro256++ seeded via splitmix64; uniform=(x>>11)*2^-53; normal=box-muller(1-u1,u2)";

/// Which Wiener process an increment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseId {
    /// `W₁`, driving the bulk equation.
    Bulk,
    /// `W₂`, driving the hole boundaries.
    Boundary,
}

impl NoiseId {
    pub fn index(self) -> u64 {
        match self {
            NoiseId::Bulk => 1,
            NoiseId::Boundary => 2,
        }
    }
}

/// Diagonal covariance `q_j = q₀·j^(−γ)` over the first `J` Dirichlet modes,
/// with multiplication-operator fields `g₁`, `g₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNoiseSpec {
    pub modes: usize,
    pub decay: f64,
    pub amplitude: f64,
    pub g1: FieldExpr,
    pub g2: FieldExpr,
}

impl Default for SpectralNoiseSpec {
    fn default() -> Self {
        Self {
            modes: 16,
            decay: 2.0,
            amplitude: 0.1,
            g1: FieldExpr::ONE,
            g2: FieldExpr::ONE,
        }
    }
}

impl SpectralNoiseSpec {
    /// Mode pairs `(k, l)` ordered by `k² + l²`, ties by `(k, l)`.
    pub fn mode_indices(&self) -> Vec<(u32, u32)> {
        let kmax = self.modes.max(1) as u32;
        let mut all: Vec<(u32, u32)> = (1..=kmax)
            .flat_map(|k| (1..=kmax).map(move |l| (k, l)))
            .collect();
        all.sort_by_key(|&(k, l)| (k * k + l * l, k, l));
        all.truncate(self.modes);
        all
    }

    /// Eigenvalue weights `q_j`, `j = 1..J`.
    pub fn weights(&self) -> Vec<f64> {
        (1..=self.modes)
            .map(|j| self.amplitude * (j as f64).powf(-self.decay))
            .collect()
    }

    pub fn multiplier(&self, noise: NoiseId) -> FieldExpr {
        match noise {
            NoiseId::Bulk => self.g1,
            NoiseId::Boundary => self.g2,
        }
    }
}

/// `e_{k,l}(x) = 2·sin(kπx₁)·sin(lπx₂)`, orthonormal in `L²((0,1)²)`.
pub fn dirichlet_mode(k: u32, l: u32, x: f64, y: f64) -> f64 {
    2.0 * (k as f64 * PI * x).sin() * (l as f64 * PI * y).sin()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the counter coordinates of one increment into a generator seed.
pub fn counter_key(seed: u64, stream: u64, path: u64, noise: NoiseId, step: u64) -> u64 {
    let mut k = splitmix64(seed);
    for part in [stream, path, noise.index(), step] {
        k = splitmix64(k ^ part);
    }
    k
}

/// One time step's worth of modal Brownian increments `Δβ_j ~ N(0, Δt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub noise: NoiseId,
    pub dt: f64,
    pub increments: Vec<f64>,
}

fn standard_normals(key: u64, count: usize) -> Vec<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(key);
    let mut uniform = || (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1 = 1.0 - uniform();
        let u2 = uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        out.push(r * angle.cos());
        out.push(r * angle.sin());
    }
    out.truncate(count);
    out
}

/// Draws the increment for `(path_id, noise, step_index)` from stream 0.
pub fn sample_increment(
    spec: &SpectralNoiseSpec,
    path_id: u64,
    noise: NoiseId,
    step_index: u64,
    dt: f64,
    master_seed: u64,
) -> NoiseIncrement {
    sample_increment_in_stream(spec, 0, path_id, noise, step_index, dt, master_seed)
}

/// As [`sample_increment`], with an explicit stream (used to decouple models).
pub fn sample_increment_in_stream(
    spec: &SpectralNoiseSpec,
    stream: u64,
    path_id: u64,
    noise: NoiseId,
    step_index: u64,
    dt: f64,
    master_seed: u64,
) -> NoiseIncrement {
    let key = counter_key(master_seed, stream, path_id, noise, step_index);
    let scale = dt.max(0.0).sqrt();
    let increments = standard_normals(key, spec.modes)
        .into_iter()
        .map(|z| z * scale)
        .collect();
    NoiseIncrement {
        noise,
        dt,
        increments,
    }
}

/// `Σ_j √q_j · e_j(x) · Δβ_j`, optionally multiplied by `g_i(x)`.
pub fn evaluate_noise_field(
    inc: &NoiseIncrement,
    spec: &SpectralNoiseSpec,
    points: &[(f64, f64)],
    apply_multiplier: bool,
) -> Vec<f64> {
    NoiseProjector::new(spec, inc.noise, points, apply_multiplier).field(inc)
}

/// Precomputed `√q_j · g(x_p) · e_j(x_p)` for a fixed point set.
#[derive(Debug, Clone)]
pub struct NoiseProjector {
    points: usize,
    modes: usize,
    table: Vec<f64>,
}

impl NoiseProjector {
    pub fn new(
        spec: &SpectralNoiseSpec,
        noise: NoiseId,
        points: &[(f64, f64)],
        apply_multiplier: bool,
    ) -> Self {
        let modes = spec.mode_indices();
        let weights = spec.weights();
        let g = spec.multiplier(noise);
        let mut table = Vec::with_capacity(modes.len() * points.len());
        for (&(k, l), q) in modes.iter().zip(&weights) {
            let s = q.sqrt();
            for &(x, y) in points {
                let gx = if apply_multiplier { g.eval(x, y) } else { 1.0 };
                table.push(s * gx * dirichlet_mode(k, l, x, y));
            }
        }
        Self {
            points: points.len(),
            modes: modes.len(),
            table,
        }
    }

    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    /// True if every tabulated value is zero (zero amplitude or zero multiplier).
    pub fn is_trivial(&self) -> bool {
        self.table.iter().all(|&v| v == 0.0)
    }

    pub fn field_into(&self, inc: &NoiseIncrement, out: &mut [f64]) {
        assert_eq!(out.len(), self.points);
        assert_eq!(inc.increments.len(), self.modes);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &db) in inc.increments.iter().enumerate() {
            if db == 0.0 {
                continue;
            }
            let row = &self.table[j * self.points..(j + 1) * self.points];
            for (o, &t) in out.iter_mut().zip(row) {
                *o += t * db;
            }
        }
    }

    pub fn field(&self, inc: &NoiseIncrement) -> Vec<f64> {
        let mut out = vec![0.0; self.points];
        self.field_into(inc, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceReport {
    pub noise: NoiseId,
    /// `Σ_{j≤J} q_j ‖g_i e_j‖²_{L²}`
    pub partial_sum: f64,
    /// Whether the full series converges (`γ > 1`, or zero amplitude).
    pub convergent: bool,
}

/// Evaluates the truncated Hilbert–Schmidt norm of `g_i Q_i^{1/2}` by grid quadrature.
pub fn check_trace_condition(spec: &SpectralNoiseSpec, noise: NoiseId) -> TraceReport {
    let modes = spec.mode_indices();
    let weights = spec.weights();
    let kmax = modes.iter().map(|&(k, l)| k.max(l)).max().unwrap_or(1) as usize;
    let n = 128usize.max(4 * kmax);
    let h = 1.0 / n as f64;
    let g = spec.multiplier(noise);
    let mut partial_sum = 0.0;
    for (&(k, l), q) in modes.iter().zip(&weights) {
        if *q == 0.0 {
            continue;
        }
        let mut norm_sq = 0.0;
        for j in 1..n {
            for i in 1..n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let v = g.eval(x, y) * dirichlet_mode(k, l, x, y);
                norm_sq += v * v;
            }
        }
        partial_sum += q * norm_sq * h * h;
    }
    TraceReport {
        noise,
        partial_sum,
        convergent: spec.amplitude == 0.0 || spec.decay > 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_values() {
        assert!((dirichlet_mode(1, 1, 0.5, 0.5) - 2.0).abs() < 1e-15);
        for k in 1..4 {
            for l in 1..4 {
                assert!(dirichlet_mode(k, l, 0.0, 0.3).abs() < 1e-15);
                assert!(dirichlet_mode(k, l, 0.7, 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn discrete_orthonormality() {
        let n = 64;
        let h = 1.0 / n as f64;
        let (mut cross, mut same) = (0.0, 0.0);
        for j in 1..n {
            for i in 1..n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                cross += dirichlet_mode(1, 1, x, y) * dirichlet_mode(2, 1, x, y) * h * h;
                same += dirichlet_mode(1, 1, x, y).powi(2) * h * h;
            }
        }
        assert!(cross.abs() < 1e-12);
        assert!((same - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mode_ordering() {
        let spec = SpectralNoiseSpec {
            modes: 6,
            ..Default::default()
        };
        assert_eq!(
            spec.mode_indices(),
            vec![(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1)]
        );
        let w = spec.weights();
        assert!((w[1] - 0.1 / 4.0).abs() < 1e-16);
    }

    #[test]
    fn zero_step_and_determinism() {
        let spec = SpectralNoiseSpec::default();
        let z = sample_increment(&spec, 3, NoiseId::Bulk, 7, 0.0, 42);
        assert!(z.increments.iter().all(|&v| v == 0.0));
        let a = sample_increment(&spec, 3, NoiseId::Bulk, 7, 0.01, 42);
        let b = sample_increment(&spec, 3, NoiseId::Bulk, 7, 0.01, 42);
        assert_eq!(a, b);
        let c = sample_increment(&spec, 3, NoiseId::Boundary, 7, 0.01, 42);
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn increment_variance() {
        let spec = SpectralNoiseSpec {
            modes: 1,
            ..Default::default()
        };
        let dt = 0.01;
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|s| sample_increment(&spec, 0, NoiseId::Bulk, s, dt, 9).increments[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // standard error of a normal sample variance: σ²·√(2/(n−1))
        let se = dt * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - dt).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn bulk_and_boundary_streams_uncorrelated() {
        let spec = SpectralNoiseSpec {
            modes: 1,
            ..Default::default()
        };
        let n = 10_000;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for s in 0..n {
            let a = sample_increment(&spec, 5, NoiseId::Bulk, s, 1.0, 1).increments[0];
            let b = sample_increment(&spec, 5, NoiseId::Boundary, s, 1.0, 1).increments[0];
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let corr = sab / (saa * sbb).sqrt();
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn single_mode_field_is_the_mode() {
        let spec = SpectralNoiseSpec {
            modes: 1,
            decay: 2.0,
            amplitude: 1.0,
            ..Default::default()
        };
        let inc = NoiseIncrement {
            noise: NoiseId::Bulk,
            dt: 1.0,
            increments: vec![1.0],
        };
        let pts = [(0.5, 0.5), (0.25, 0.75), (0.1, 0.9)];
        let f = evaluate_noise_field(&inc, &spec, &pts, true);
        for (v, &(x, y)) in f.iter().zip(&pts) {
            assert_eq!(*v, dirichlet_mode(1, 1, x, y));
        }
        let zero = NoiseIncrement {
            increments: vec![0.0],
            ..inc
        };
        assert!(evaluate_noise_field(&zero, &spec, &pts, true)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_on_grid() {
        let spec = SpectralNoiseSpec {
            modes: 10,
            decay: 1.5,
            amplitude: 0.3,
            ..Default::default()
        };
        let inc = sample_increment(&spec, 1, NoiseId::Bulk, 2, 1.0, 11);
        let n = 128;
        let h = 1.0 / n as f64;
        let pts: Vec<(f64, f64)> = (1..n)
            .flat_map(|j| (1..n).map(move |i| (i as f64 * h, j as f64 * h)))
            .collect();
        let f = evaluate_noise_field(&inc, &spec, &pts, true);
        let norm_sq: f64 = f.iter().map(|v| v * v).sum::<f64>() * h * h;
        let expect: f64 = spec
            .weights()
            .iter()
            .zip(&inc.increments)
            .map(|(q, b)| q * b * b)
            .sum();
        assert!((norm_sq - expect).abs() < 1e-6);
    }

    #[test]
    fn trace_condition_reports() {
        let spec = SpectralNoiseSpec {
            modes: 100,
            decay: 2.0,
            amplitude: 1.0,
            ..Default::default()
        };
        let r = check_trace_condition(&spec, NoiseId::Bulk);
        let direct: f64 = (1..=100).map(|j| (j as f64).powi(-2)).sum();
        assert!((r.partial_sum - direct).abs() < 1e-10);
        assert!(r.partial_sum <= PI * PI / 6.0);
        assert!(r.convergent);
        let zero = SpectralNoiseSpec {
            amplitude: 0.0,
            ..spec.clone()
        };
        assert_eq!(
            check_trace_condition(&zero, NoiseId::Boundary).partial_sum,
            0.0
        );
        let slow = SpectralNoiseSpec {
            decay: 0.5,
            modes: 10,
            ..spec
        };
        assert!(!check_trace_condition(&slow, NoiseId::Bulk).convergent);
    }
}
