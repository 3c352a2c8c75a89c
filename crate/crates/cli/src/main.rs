use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use perfhom::cell::{cell_csv_row, CELL_CSV_HEADER};
use perfhom::config::TensorSource;
use perfhom::effective::{simulate_macro_path, simulate_macro_paths};
use perfhom::experiment::{build_report, run_paths, ExperimentPlan, ReportContext};
use perfhom::micro::{simulate_micro_path, simulate_micro_paths};
use perfhom::noise::check_trace_condition;
use perfhom::output::{
    assemble_levels, energy_csv, level_sets, nodal_csv, nodal_raw, read_cell_csv, read_records,
    read_text, samples_csv, RecordSet, TensorProvenance, MANIFEST_FILE,
};
use perfhom::{
    compute_tensor, CellSpec, ComparisonReport, Config, ExperimentError, HomogenizedTensor, Model,
    NoiseId, OutputDir, OutputError, PathRecord, RunManifest,
};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "PERFHOM_OUT";

#[derive(Parser)]
#[command(
    name = "perfhom",
    version,
    about = "Micro and homogenized simulation of SPDEs with dynamical boundary conditions on perforated domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the cell problem and write the effective tensor.
    Cell(Common),
    /// Monte Carlo paths of the perforated-domain model at one epsilon.
    SimulateMicro(Simulate),
    /// Monte Carlo paths of the homogenized model.
    SimulateMacro(Simulate),
    /// Micro and macro samples across the epsilon ladder, with the comparison report.
    Sweep(Common),
    /// Rebuild a comparison report from the tables of earlier runs.
    Compare(Compare),
    /// Report the trace-class condition of the configured noise.
    CheckNoise(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. --set noise.q0=0.05 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Hole fraction (geometry.rho).
    #[arg(long)]
    rho: Option<String>,
    /// Grid intervals per cell side (geometry.m).
    #[arg(long)]
    m: Option<String>,
    /// Epsilon values such as 1/8 or 0.125; a list sets the sweep ladder.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<String>,
    /// Final time (time.T).
    #[arg(long = "T", value_name = "T")]
    final_time: Option<String>,
    /// Time step (time.dt).
    #[arg(long)]
    dt: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<String>,
    /// Paths per model (experiment.paths).
    #[arg(long)]
    paths: Option<String>,
    /// Output directory (default: $PERFHOM_OUT/<command> or ./perfhom-out/<command>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Simulate {
    #[command(flatten)]
    common: Common,
    /// Also write the final field of path 0.
    #[arg(long, value_enum)]
    snapshot: Option<SnapshotFormat>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SnapshotFormat {
    Csv,
    Raw,
}

#[derive(Args, Clone)]
struct Compare {
    /// Run directories (sweep, simulate-micro or simulate-macro outputs).
    #[arg(required = true, value_name = "RUN_DIR")]
    runs: Vec<PathBuf>,
    /// Output directory for the rebuilt report.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<OutputError> for Failure {
    fn from(e: OutputError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Plan(_) | ExperimentError::Geometry(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

fn cells_from_eps(s: &str) -> Result<usize, Failure> {
    let bad = || {
        Failure::Config(format!(
            "--eps `{s}`: expected 1/N or a decimal whose inverse is an integer"
        ))
    };
    let eps = match s.split_once('/') {
        Some((a, b)) => {
            a.trim().parse::<f64>().map_err(|_| bad())?
                / b.trim().parse::<f64>().map_err(|_| bad())?
        }
        None => s.trim().parse::<f64>().map_err(|_| bad())?,
    };
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(bad());
    }
    let n = (1.0 / eps).round();
    if (1.0 / eps - n).abs() > 1e-9 * n {
        return Err(bad());
    }
    Ok(n as usize)
}

/// Config file, then named flags, then `--set` pairs.
fn load_config(c: &Common, sweep: bool) -> Result<Config, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = read_text(p)?;
            Config::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    let named = [
        ("geometry.rho", &c.rho),
        ("geometry.m", &c.m),
        ("time.T", &c.final_time),
        ("time.dt", &c.dt),
        ("seed", &c.seed),
        ("experiment.paths", &c.paths),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.clone()));
        }
    }
    if !c.eps.is_empty() {
        let cells = c
            .eps
            .iter()
            .map(|s| cells_from_eps(s))
            .collect::<Result<Vec<_>, _>>()?;
        if sweep {
            let list = cells
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",");
            pairs.push(("geometry.ladder".into(), list));
        } else if cells.len() == 1 {
            pairs.push(("geometry.n_eps".into(), cells[0].to_string()));
        } else {
            return Err(Failure::Config(
                "--eps takes a single value outside sweep".into(),
            ));
        }
    }
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set `{s}`: expected KEY=VALUE")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(
    explicit: Option<&Path>,
    cfg: Option<&Config>,
    command: &str,
) -> Result<OutputDir, Failure> {
    let path = match (explicit, cfg.and_then(|c| c.out_dir.as_deref())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| "perfhom-out".into());
            root.join(command)
        }
    };
    Ok(OutputDir::create(path)?)
}

/// The configured tensor, with a provenance label.
fn resolve_tensor(cfg: &Config) -> Result<(HomogenizedTensor, String), Failure> {
    match &cfg.tensor {
        TensorSource::Solve => {
            let spec = CellSpec::new(cfg.rho, cfg.m).map_err(|e| Failure::Config(e.to_string()))?;
            let (t, _, _) = compute_tensor(spec, cfg.cell_tol)
                .map_err(|e| Failure::Numerical(e.to_string()))?;
            Ok((t, "solved".into()))
        }
        TensorSource::Inline { .. } => {
            Ok((cfg.tensor.inline().expect("inline tensor"), "inline".into()))
        }
        TensorSource::File(p) => {
            let text = read_text(Path::new(p))?;
            Ok((read_cell_csv(&text)?, format!("file:{p}")))
        }
    }
}

fn manifest(
    command: &str,
    cfg: &Config,
    tensor: Option<(&HomogenizedTensor, &str)>,
) -> RunManifest {
    let mut m = RunManifest::new(command, cfg.to_text());
    m.tensor = tensor.map(|(t, src)| TensorProvenance::new(src, t));
    m
}

fn print_tensor(t: &HomogenizedTensor) {
    println!("theta  = {:.12}", t.theta);
    println!("lambda = {:.12}", t.lambda);
    println!(
        "A*     = [[{:.10}, {:.3e}], [{:.3e}, {:.10}]]",
        t.a[0][0], t.a[0][1], t.a[1][0], t.a[1][1]
    );
}

fn run_cell(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let spec = CellSpec::new(cfg.rho, cfg.m).map_err(|e| Failure::Config(e.to_string()))?;
    let (t, correctors, grid) =
        compute_tensor(spec, cfg.cell_tol).map_err(|e| Failure::Numerical(e.to_string()))?;
    let mut out = out_dir(c.out.as_deref(), Some(&cfg), "cell")?;
    out.write(
        "cell.csv",
        format!("{CELL_CSV_HEADER}\n{}\n", cell_csv_row(&t)),
    )?;
    let mut s = String::from("i,j,phi1,phi2\n");
    for dof in 0..grid.dof_count() {
        let (i, j) = grid.dof_coords(dof);
        s.push_str(&format!(
            "{i},{j},{:?},{:?}\n",
            correctors[0].values[dof], correctors[1].values[dof]
        ));
    }
    out.write("correctors.csv", s)?;
    let root = out.root().to_path_buf();
    out.finish(manifest("cell", &cfg, Some((&t, "solved"))))?;
    print_tensor(&t);
    println!("wrote {}", root.display());
    Ok(())
}

fn summarize(records: &[PathRecord], functionals: &[String]) {
    let ok: Vec<&PathRecord> = records.iter().filter(|r| !r.failed()).collect();
    println!(
        "paths: {} ({} failed)",
        records.len(),
        records.len() - ok.len()
    );
    for (f, name) in functionals.iter().enumerate() {
        let v: Vec<f64> = ok.iter().filter_map(|r| r.final_value(f)).collect();
        if v.is_empty() {
            continue;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        println!("{name:>6} at T: mean {mean:.6e}  std {:.6e}", var.sqrt());
    }
}

fn write_snapshot(
    out: &mut OutputDir,
    record: &PathRecord,
    format: SnapshotFormat,
    time: f64,
) -> Result<(), Failure> {
    let Some(field) = &record.final_nodal else {
        return Err(Failure::Numerical(
            "path 0 failed before the final time; no snapshot".into(),
        ));
    };
    match format {
        SnapshotFormat::Csv => {
            out.write("final_path0.csv", nodal_csv(field))?;
        }
        SnapshotFormat::Raw => {
            let (bytes, sidecar) = nodal_raw(field, time);
            out.write("final_path0.f64", bytes)?;
            out.write("final_path0.txt", sidecar)?;
        }
    }
    Ok(())
}

fn run_simulate(s: &Simulate, model: Model) -> Result<(), Failure> {
    let cfg = load_config(&s.common, false)?;
    // macro runs use the same default comparison grid as the matching micro run
    let cells = vec![cfg.n_eps];
    let (tensor, source) = resolve_tensor(&cfg)?;
    let mut plan: ExperimentPlan = cfg.plan(Some(tensor));
    plan.ladder = vec![cfg.n_eps];
    plan.settings = cfg.path_settings(&cells);
    let functionals: Vec<String> = plan
        .settings
        .functionals
        .iter()
        .map(|f| f.to_string())
        .collect();
    let (records, epsilon, snapshot) = match model {
        Model::Micro => {
            let sim = plan.micro_simulation(cfg.n_eps)?;
            let records = run_paths(cfg.paths, |ids| simulate_micro_paths(&sim, ids));
            let snap = s.snapshot.map(|_| {
                let mut settings = plan.settings.clone();
                settings.record.keep_final = true;
                perfhom::MicroSimulation::new(Arc::clone(sim.operator().grid()), settings)
                    .map(|sim| simulate_micro_path(&sim, 0))
            });
            (
                records,
                1.0 / cfg.n_eps as f64,
                snap.transpose()
                    .map_err(|e| Failure::Numerical(e.to_string()))?,
            )
        }
        Model::Macro => {
            let sim = plan.macro_simulation(&tensor)?;
            let records = run_paths(cfg.paths, |ids| simulate_macro_paths(&sim, ids));
            let snap = s.snapshot.map(|_| {
                let mut p = plan.clone();
                p.settings.record.keep_final = true;
                p.macro_simulation(&tensor)
                    .map(|sim| simulate_macro_path(&sim, 0))
            });
            (records, 0.0, snap.transpose()?)
        }
    };
    let command = match model {
        Model::Micro => "simulate-micro",
        Model::Macro => "simulate-macro",
    };
    let mut out = out_dir(s.common.out.as_deref(), Some(&cfg), command)?;
    let sets = [RecordSet {
        epsilon,
        model,
        records: &records,
    }];
    out.write("samples.csv", samples_csv(&sets, &functionals))?;
    out.write("energy.csv", energy_csv(&sets))?;
    if let (Some(format), Some(rec)) = (s.snapshot, snapshot.as_ref()) {
        write_snapshot(&mut out, rec, format, cfg.final_time)?;
    }
    let root = out.root().to_path_buf();
    let mut m = manifest(command, &cfg, Some((&tensor, &source)));
    m.context = Some(ReportContext::new(&plan, &tensor));
    out.finish(m)?;
    summarize(&records, &functionals);
    println!("wrote {}", root.display());
    if records.iter().all(|r| r.failed()) {
        return Err(Failure::Numerical("every path failed".into()));
    }
    Ok(())
}

fn print_report(report: &ComparisonReport) {
    println!(
        "{:>8} {:>8} {:>10} {:>14} {:>14} {:>14}",
        "epsilon", "func", "time", "W1", "micro mean", "macro mean"
    );
    for level in &report.levels {
        for s in &level.stats {
            println!(
                "{:>8.5} {:>8} {:>10.4} {:>14.6e} {:>14.6e} {:>14.6e}",
                level.epsilon,
                s.functional,
                s.sample_time,
                s.wasserstein,
                s.micro_mean,
                s.macro_mean
            );
        }
    }
    for v in &report.verdicts {
        println!(
            "[{}] {}: {}",
            if v.pass { "pass" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
}

fn run_sweep(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, true)?;
    let (tensor, source) = resolve_tensor(&cfg)?;
    let plan = cfg.plan(Some(tensor));
    let outcome = perfhom::run_sweep(&plan)?;
    let mut out = out_dir(c.out.as_deref(), Some(&cfg), "sweep")?;
    let sets = level_sets(&outcome.levels);
    out.write(
        "samples.csv",
        samples_csv(&sets, &outcome.report.context.functionals),
    )?;
    out.write("energy.csv", energy_csv(&sets))?;
    out.write("report.json", outcome.report.to_json())?;
    let root = out.root().to_path_buf();
    let mut m = manifest("sweep", &cfg, Some((&tensor, &source)));
    m.context = Some(outcome.report.context.clone());
    out.finish(m)?;
    print_report(&outcome.report);
    println!("wrote {}", root.display());
    Ok(())
}

fn run_compare(c: &Compare) -> Result<(), Failure> {
    let mut groups = Vec::new();
    let mut context: Option<ReportContext> = None;
    for dir in &c.runs {
        let m = RunManifest::from_json(&read_text(&dir.join(MANIFEST_FILE))?)?;
        let ctx = m.context.ok_or_else(|| {
            Failure::Config(format!("{}: manifest has no report context", dir.display()))
        })?;
        if let Some(first) = &context {
            if first.functionals != ctx.functionals
                || first.sample_times != ctx.sample_times
                || first.common_n != ctx.common_n
            {
                return Err(Failure::Config(format!(
                    "{}: functionals, sample times or comparison grid differ from {}",
                    dir.display(),
                    c.runs[0].display()
                )));
            }
        }
        let samples = read_text(&dir.join("samples.csv"))?;
        let energy = read_text(&dir.join("energy.csv"))?;
        groups.extend(read_records(
            &samples,
            &energy,
            &ctx.sample_times,
            &ctx.functionals,
        )?);
        // prefer the context of a run that produced macro records
        if m.command != "simulate-micro" || context.is_none() {
            context = Some(ctx);
        }
    }
    let context = context.expect("at least one run");
    let levels = assemble_levels(groups);
    if levels.is_empty() {
        return Err(Failure::Config(
            "no ladder point has both micro and macro records".into(),
        ));
    }
    let report = build_report(context, &levels);
    let mut out = out_dir(c.out.as_deref(), None, "compare")?;
    out.write("report.json", report.to_json())?;
    let root = out.root().to_path_buf();
    let mut m = RunManifest::new("compare", String::new());
    m.context = Some(report.context.clone());
    out.finish(m)?;
    print_report(&report);
    println!("wrote {}", root.display());
    Ok(())
}

fn run_check_noise(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c, false)?;
    let mut ok = true;
    for noise in [NoiseId::Bulk, NoiseId::Boundary] {
        let r = check_trace_condition(&cfg.noise, noise);
        println!(
            "{:?} noise: partial trace sum over {} modes = {:.6e}, series {}",
            noise,
            cfg.noise.modes,
            r.partial_sum,
            if r.convergent {
                "converges"
            } else {
                "diverges"
            }
        );
        ok &= r.convergent;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Config(
            "noise is not trace class: raise noise.gamma above 1 or set noise.q0 = 0".into(),
        ))
    }
}

fn main() -> ExitCode {
    let keys = format!(
        "Configuration keys (use with --set KEY=VALUE or in a --config file):\n{}",
        Config::key_help()
    );
    let mut cmd = Cli::command().after_long_help(keys.clone());
    for name in [
        "cell",
        "simulate-micro",
        "simulate-macro",
        "sweep",
        "check-noise",
    ] {
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(keys.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Cell(c) => run_cell(c),
        Command::SimulateMicro(s) => run_simulate(s, Model::Micro),
        Command::SimulateMacro(s) => run_simulate(s, Model::Macro),
        Command::Sweep(c) => run_sweep(c),
        Command::Compare(c) => run_compare(c),
        Command::CheckNoise(c) => run_check_noise(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("perfhom: {e}");
            ExitCode::from(e.code())
        }
    }
}
