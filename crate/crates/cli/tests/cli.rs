use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use perfhom::config::KEYS;
use perfhom::{ComparisonReport, RunManifest};

fn perfhom(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfhom"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PERFHOM_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &[&str] = &[
    "--m",
    "4",
    "--T",
    "0.01",
    "--paths",
    "4",
    "--set",
    "time.dt=0.002",
    "--set",
    "macro.n=16",
];

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["--help"], vec!["sweep", "--help"]] {
        let o = perfhom(&args, dir.path());
        assert_eq!(code(&o), 0);
        let text = String::from_utf8(o.stdout).unwrap();
        for (k, _) in KEYS {
            assert!(text.contains(k), "{k} missing from help");
        }
    }
}

#[test]
fn cell_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = perfhom(
        &["cell", "--rho", "0.5", "--m", "8", "--out", "c"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("c/cell.csv")).unwrap();
    let t = perfhom::output::read_cell_csv(&csv).unwrap();
    assert_eq!(t.theta, 0.75);
    assert_eq!(t.lambda, 2.0);
    let m =
        RunManifest::from_json(&fs::read_to_string(dir.path().join("c/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        m.files["cell.csv"],
        perfhom::output::sha256_hex(csv.as_bytes())
    );
    assert!(m.files.contains_key("correctors.csv"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&perfhom(&["cell", "--rho", "1.5"], p)), 2);
    assert_eq!(
        code(&perfhom(&["cell", "--set", "geometry.rhoo=0.5"], p)),
        2
    );
    assert_eq!(
        code(&perfhom(&["check-noise", "--set", "noise.gamma=1"], p)),
        2
    );
    assert_eq!(code(&perfhom(&["check-noise"], p)), 0);
    assert_eq!(code(&perfhom(&["cell", "--config", "missing.cfg"], p)), 4);
    fs::write(p.join("bad.cfg"), "[geometry]\nm = x\n").unwrap();
    let o = perfhom(&["cell", "--config", "bad.cfg"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    fs::write(p.join("file"), "").unwrap();
    assert_eq!(
        code(&perfhom(&["cell", "--m", "4", "--out", "file/sub"], p)),
        4
    );
    // a blow-up cap below the initial state fails every path
    let args = with_tiny(
        &["simulate-macro"],
        &[
            "--set",
            "initial.u0=sines(1,1,1)",
            "--set",
            "solver.blowup_cap=0.01",
        ],
    );
    assert_eq!(code(&perfhom(&args, p)), 3);
}

#[test]
fn env_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_perfhom"))
        .args(["cell", "--m", "4"])
        .current_dir(dir.path())
        .env("PERFHOM_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("root/cell/cell.csv").exists());
}

#[test]
fn sweep_is_reproducible_and_compare_rebuilds_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        let args = with_tiny(
            &["sweep", "--eps", "1/2,1/4,1/8", "--seed", "9"],
            &["--out", out],
        );
        let o = perfhom(&args, p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |f: &str| fs::read_to_string(p.join(f)).unwrap();
    assert_eq!(read("a/manifest.json"), read("b/manifest.json"));
    assert_eq!(read("a/samples.csv"), read("b/samples.csv"));

    let o = perfhom(&["compare", "a", "--out", "cmp"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let original: ComparisonReport = serde_json::from_str(&read("a/report.json")).unwrap();
    let rebuilt: ComparisonReport = serde_json::from_str(&read("cmp/report.json")).unwrap();
    assert_eq!(original, rebuilt);
}

#[test]
fn separate_runs_can_be_compared() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for (cmd, eps, out) in [
        ("simulate-micro", "1/2", "m2"),
        ("simulate-micro", "1/4", "m4"),
        ("simulate-macro", "1/4", "mac"),
    ] {
        let args = with_tiny(
            &[cmd, "--eps", eps],
            &["--out", out, "--set", "experiment.common_n=8"],
        );
        let o = perfhom(&args, p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = perfhom(&["compare", "m2", "m4", "mac", "--out", "cmp"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: ComparisonReport =
        serde_json::from_str(&fs::read_to_string(p.join("cmp/report.json")).unwrap()).unwrap();
    assert_eq!(report.levels.len(), 2);

    // a macro run on another comparison grid is refused
    let args = with_tiny(
        &["simulate-macro"],
        &["--out", "mac16", "--set", "experiment.common_n=16"],
    );
    assert_eq!(code(&perfhom(&args, p)), 0);
    assert_eq!(code(&perfhom(&["compare", "m4", "mac16"], p)), 2);
}

#[test]
fn snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = with_tiny(
        &["simulate-micro", "--eps", "1/4", "--snapshot", "csv"],
        &["--out", "s"],
    );
    assert_eq!(code(&perfhom(&args, p)), 0);
    let csv = fs::read_to_string(p.join("s/final_path0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 17 * 17);
    let args = with_tiny(&["simulate-macro", "--snapshot", "raw"], &["--out", "r"]);
    assert_eq!(code(&perfhom(&args, p)), 0);
    assert_eq!(
        fs::metadata(p.join("r/final_path0.f64")).unwrap().len(),
        17 * 17 * 8
    );
}
