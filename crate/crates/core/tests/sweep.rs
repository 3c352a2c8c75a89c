use std::path::PathBuf;

use perfhom::output::{level_sets, samples_csv, SAMPLES_CSV_HEADER};
use perfhom::{run_sweep, Coupling, ExperimentPlan, FieldExpr, PathSettings, TimeGrid};

fn small_plan(ladder: Vec<usize>, paths: usize, final_time: f64) -> ExperimentPlan {
    ExperimentPlan {
        m: 4,
        ladder,
        paths,
        settings: PathSettings {
            time: TimeGrid::new(final_time, 2e-3, &[final_time / 2.0, final_time]).unwrap(),
            initial: FieldExpr::SineProduct {
                amp: 1.0,
                k: 1,
                l: 1,
            },
            common_n: 16,
            ..PathSettings::default()
        },
        macro_n: 16,
        ..ExperimentPlan::default()
    }
}

fn difference_variance(coupling: Coupling) -> f64 {
    let plan = ExperimentPlan {
        coupling,
        ..small_plan(vec![4], 200, 0.05)
    };
    let out = run_sweep(&plan).unwrap();
    let level = &out.levels[0];
    let d: Vec<f64> = level
        .micro
        .iter()
        .zip(level.macro_.iter())
        .map(|(a, b)| a.final_value(0).unwrap() - b.final_value(0).unwrap())
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64
}

#[test]
fn shared_increments_reduce_difference_variance() {
    let shared = difference_variance(Coupling::Shared);
    let independent = difference_variance(Coupling::Independent);
    assert!(
        2.0 * shared < independent,
        "shared {shared:.3e} vs independent {independent:.3e}"
    );
}

#[test]
fn samples_csv_matches_golden_file() {
    let plan = small_plan(vec![4, 8], 2, 0.004);
    let out = run_sweep(&plan).unwrap();
    let csv = samples_csv(&level_sets(&out.levels), &out.report.context.functionals);
    assert!(csv.starts_with(SAMPLES_CSV_HEADER));
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/samples_small.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &csv).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv, golden);
}
