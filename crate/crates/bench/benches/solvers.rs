use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use perfhom::geometry::build_perforated_grid;
use perfhom::micro::{assemble_micro_with, simulate_micro_paths, step_micro, MicroState};
use perfhom::{
    compute_tensor, CellSpec, DriftSpec, FieldExpr, MicroSimulation, PathSettings, SolverMethod,
    TimeGrid,
};

fn cell_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("cell_solve");
    for m in [16usize, 32, 64] {
        let spec = CellSpec::new(0.5, m).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &spec, |b, &spec| {
            b.iter(|| compute_tensor(black_box(spec), 1e-10).unwrap())
        });
    }
    g.finish();
}

fn micro_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("micro_step");
    g.sample_size(20);
    let drift = DriftSpec::Forcing {
        f: FieldExpr::Constant(1.0),
    };
    for cells in [4usize, 8, 16] {
        let grid = Arc::new(build_perforated_grid(CellSpec::new(0.5, 8).unwrap(), cells).unwrap());
        for method in [SolverMethod::Cholesky, SolverMethod::Cg] {
            let op = assemble_micro_with(Arc::clone(&grid), 1.0, 1e-3, method, 1e-10).unwrap();
            let state = MicroState::zeros(&op);
            g.bench_with_input(BenchmarkId::new(method.name(), cells), &state, |b, s| {
                b.iter(|| step_micro(black_box(s), &op, &drift, None, None, 1e-3).unwrap())
            });
        }
    }
    g.finish();
}

fn micro_batch(c: &mut Criterion) {
    let mut g = c.benchmark_group("micro_path_batch");
    g.sample_size(10);
    let grid = Arc::new(build_perforated_grid(CellSpec::new(0.5, 8).unwrap(), 16).unwrap());
    let settings = PathSettings {
        time: TimeGrid::new(0.01, 1e-3, &[]).unwrap(),
        common_n: 32,
        ..PathSettings::default()
    };
    let sim = MicroSimulation::new(grid, settings).unwrap();
    for paths in [1u64, 16] {
        let ids: Vec<u64> = (0..paths).collect();
        g.bench_with_input(
            BenchmarkId::new("ten_steps_eps_1_16", paths),
            &ids,
            |b, ids| b.iter(|| simulate_micro_paths(&sim, ids)),
        );
    }
    g.finish();
}

criterion_group!(benches, cell_solve, micro_step, micro_batch);
criterion_main!(benches);
