//! File formats: sample and energy tables, field snapshots, the cell table
//! and the run manifest.
//!
//! Floats are written in shortest round-trip form, so reading a table back
//! reproduces the exact values that were simulated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cell::{HomogenizedTensor, CELL_CSV_HEADER};
use crate::experiment::{LevelRecords, Model, ReportContext};
use crate::geometry::NodalField;
use crate::noise::RNG_ALGORITHM;
use crate::path::{EnergyDiagnostics, PathFailure, PathRecord};

pub const SAMPLES_CSV_HEADER: &str = "epsilon,model,path_id,functional_id,sample_time,value";
pub const ENERGY_CSV_HEADER: &str = "epsilon,model,path_id,x0_final,x1_integral,failure_step";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what} line {line}: {message}")]
    Parse {
        what: String,
        line: usize,
        message: String,
    },
}

/// Records of one model at one ladder point. `epsilon = 0` marks a macro run
/// that is not tied to a ladder point.
#[derive(Debug, Clone, Copy)]
pub struct RecordSet<'a> {
    pub epsilon: f64,
    pub model: Model,
    pub records: &'a [PathRecord],
}

/// Micro then macro records for every level, in ladder order.
pub fn level_sets(levels: &[LevelRecords]) -> Vec<RecordSet<'_>> {
    levels
        .iter()
        .flat_map(|l| {
            [
                RecordSet {
                    epsilon: l.epsilon,
                    model: Model::Micro,
                    records: &l.micro,
                },
                RecordSet {
                    epsilon: l.epsilon,
                    model: Model::Macro,
                    records: &l.macro_,
                },
            ]
        })
        .collect()
}

pub fn samples_csv(sets: &[RecordSet], functionals: &[String]) -> String {
    let mut s = String::from(SAMPLES_CSV_HEADER);
    s.push('\n');
    for set in sets {
        for r in set.records {
            for (t, row) in r.sample_times.iter().zip(&r.values) {
                for (name, v) in functionals.iter().zip(row) {
                    let _ = writeln!(
                        s,
                        "{:?},{},{},{},{:?},{:?}",
                        set.epsilon,
                        set.model.name(),
                        r.path_id,
                        name,
                        t,
                        v
                    );
                }
            }
        }
    }
    s
}

pub fn energy_csv(sets: &[RecordSet]) -> String {
    let mut s = String::from(ENERGY_CSV_HEADER);
    s.push('\n');
    for set in sets {
        for r in set.records {
            let step = r
                .failure
                .as_ref()
                .map(|f| f.step.to_string())
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{:?},{},{},{:?},{:?},{}",
                set.epsilon,
                set.model.name(),
                r.path_id,
                r.energy.x0_final,
                r.energy.x1_integral,
                step
            );
        }
    }
    s
}

fn parse_err(what: &str, line: usize, message: impl Into<String>) -> OutputError {
    OutputError::Parse {
        what: what.to_string(),
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(
    what: &str,
    line: usize,
    name: &str,
    v: &str,
) -> Result<T, OutputError> {
    v.parse()
        .map_err(|_| parse_err(what, line, format!("bad {name} `{v}`")))
}

fn check_header(what: &str, text: &str, header: &str) -> Result<(), OutputError> {
    match text.lines().next() {
        Some(h) if h.trim() == header => Ok(()),
        _ => Err(parse_err(what, 1, format!("expected header `{header}`"))),
    }
}

/// Records of one model at one epsilon, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordGroup {
    pub epsilon: f64,
    pub model: Model,
    pub records: Vec<PathRecord>,
}

/// Reads sample and energy tables back into per-(epsilon, model) groups.
///
/// `sample_times` and `functionals` give the layout of each record, as
/// stored in the manifest's report context.
pub fn read_records(
    samples: &str,
    energy: &str,
    sample_times: &[f64],
    functionals: &[String],
) -> Result<Vec<RecordGroup>, OutputError> {
    check_header("samples.csv", samples, SAMPLES_CSV_HEADER)?;
    check_header("energy.csv", energy, ENERGY_CSV_HEADER)?;
    type Key = (u64, Model, u64);
    let mut records: BTreeMap<Key, PathRecord> = BTreeMap::new();
    let blank = |path_id| PathRecord {
        path_id,
        sample_times: sample_times.to_vec(),
        values: vec![vec![f64::NAN; functionals.len()]; sample_times.len()],
        energy: EnergyDiagnostics::default(),
        final_nodal: None,
        trajectory: Vec::new(),
        failure: None,
    };
    for (idx, line) in energy.lines().enumerate().skip(1) {
        let n = idx + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(parse_err("energy.csv", n, "expected 6 columns"));
        }
        let eps: f64 = field("energy.csv", n, "epsilon", cols[0])?;
        let model: Model = field("energy.csv", n, "model", cols[1])?;
        let id: u64 = field("energy.csv", n, "path_id", cols[2])?;
        let mut r = blank(id);
        r.energy.x0_final = field("energy.csv", n, "x0_final", cols[3])?;
        r.energy.x1_integral = field("energy.csv", n, "x1_integral", cols[4])?;
        if !cols[5].is_empty() {
            r.failure = Some(PathFailure {
                step: field("energy.csv", n, "failure_step", cols[5])?,
                reason: "recorded as failed".into(),
            });
        }
        records.insert((eps.to_bits(), model, id), r);
    }
    for (idx, line) in samples.lines().enumerate().skip(1) {
        let n = idx + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(parse_err("samples.csv", n, "expected 6 columns"));
        }
        let eps: f64 = field("samples.csv", n, "epsilon", cols[0])?;
        let model: Model = field("samples.csv", n, "model", cols[1])?;
        let id: u64 = field("samples.csv", n, "path_id", cols[2])?;
        let f = functionals
            .iter()
            .position(|name| name == cols[3])
            .ok_or_else(|| {
                parse_err(
                    "samples.csv",
                    n,
                    format!("unknown functional `{}`", cols[3]),
                )
            })?;
        let t: f64 = field("samples.csv", n, "sample_time", cols[4])?;
        let s = sample_times
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| parse_err("samples.csv", n, format!("unknown sample time {t}")))?;
        let value: f64 = field("samples.csv", n, "value", cols[5])?;
        let r = records
            .get_mut(&(eps.to_bits(), model, id))
            .ok_or_else(|| parse_err("samples.csv", n, "path missing from energy.csv"))?;
        r.values[s][f] = value;
    }
    // a failed path keeps only the samples taken before the failure
    for r in records.values_mut() {
        if r.failed() {
            while r
                .values
                .last()
                .is_some_and(|row| row.iter().all(|v| v.is_nan()))
            {
                r.values.pop();
                r.sample_times.pop();
            }
        }
    }
    let mut groups: Vec<RecordGroup> = Vec::new();
    for ((eps, model, _), r) in records {
        let epsilon = f64::from_bits(eps);
        match groups.last_mut() {
            Some(g) if g.epsilon.to_bits() == eps && g.model == model => g.records.push(r),
            _ => groups.push(RecordGroup {
                epsilon,
                model,
                records: vec![r],
            }),
        }
    }
    Ok(groups)
}

/// Pairs micro groups with macro groups into ladder levels, by decreasing
/// epsilon. A level uses the macro group at its own epsilon when there is
/// one and the epsilon-free (`epsilon = 0`) macro group otherwise; levels
/// without any macro group are dropped.
pub fn assemble_levels(groups: Vec<RecordGroup>) -> Vec<LevelRecords> {
    let mut micro: BTreeMap<u64, Vec<PathRecord>> = BTreeMap::new();
    let mut macro_: BTreeMap<u64, Arc<Vec<PathRecord>>> = BTreeMap::new();
    for g in groups {
        let key = g.epsilon.to_bits();
        match g.model {
            Model::Micro => micro.entry(key).or_default().extend(g.records),
            Model::Macro => {
                macro_.insert(key, Arc::new(g.records));
            }
        }
    }
    let fallback = macro_.get(&0f64.to_bits()).cloned();
    let mut levels: Vec<LevelRecords> = micro
        .into_iter()
        .filter(|(eps, _)| f64::from_bits(*eps) > 0.0)
        .filter_map(|(eps, mut records)| {
            records.sort_by_key(|r| r.path_id);
            let m = macro_.get(&eps).cloned().or_else(|| fallback.clone())?;
            let epsilon = f64::from_bits(eps);
            Some(LevelRecords {
                cells: (1.0 / epsilon).round() as usize,
                epsilon,
                micro: records,
                macro_: m,
            })
        })
        .collect();
    levels.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    levels
}

/// Reads the first data row of a cell table.
pub fn read_cell_csv(text: &str) -> Result<HomogenizedTensor, OutputError> {
    check_header("cell csv", text, CELL_CSV_HEADER)?;
    let row = text
        .lines()
        .nth(1)
        .ok_or_else(|| parse_err("cell csv", 2, "missing data row"))?;
    let cols: Vec<&str> = row.split(',').map(str::trim).collect();
    if cols.len() != 12 {
        return Err(parse_err("cell csv", 2, "expected 12 columns"));
    }
    let num = |i: usize, name: &str| field::<f64>("cell csv", 2, name, cols[i]);
    let a = [
        [num(4, "a11")?, num(5, "a12")?],
        [num(6, "a21")?, num(7, "a22")?],
    ];
    let mut t = HomogenizedTensor::from_entries(a, num(2, "theta")?, num(3, "lambda")?);
    t.rho = num(0, "rho")?;
    t.m = field("cell csv", 2, "m", cols[1])?;
    t.residuals = [num(8, "residual1")?, num(9, "residual2")?];
    t.iterations = [
        field("cell csv", 2, "iters1", cols[10])?,
        field("cell csv", 2, "iters2", cols[11])?,
    ];
    Ok(t)
}

/// Nodal field as `x,y,value` rows.
pub fn nodal_csv(field: &NodalField) -> String {
    let n = field.intervals();
    let h = field.spacing();
    let mut s = String::from("x,y,value\n");
    for j in 0..=n {
        for i in 0..=n {
            let _ = writeln!(
                s,
                "{:?},{:?},{:?}",
                i as f64 * h,
                j as f64 * h,
                field.get(i, j)
            );
        }
    }
    s
}

/// Raw little-endian f64 dump of a nodal field and its text sidecar.
pub fn nodal_raw(field: &NodalField, time: f64) -> (Vec<u8>, String) {
    let bytes = field
        .values()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let n = field.intervals();
    let sidecar = format!(
        "format = f64 little-endian\nlayout = row-major, x index fastest, node (i, j) at (i*h, j*h)\n\
         nodes_per_side = {}\nspacing = {:?}\ntime = {:?}\ncount = {}\n",
        n + 1,
        field.spacing(),
        time,
        (n + 1) * (n + 1)
    );
    (bytes, sidecar)
}

/// Where the tensor used by a run came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorProvenance {
    /// `solved`, `inline` or `file:<path>`.
    pub source: String,
    pub a: [[f64; 2]; 2],
    pub theta: f64,
    pub lambda: f64,
    pub rho: Option<f64>,
    pub m: usize,
    pub tol: f64,
    pub iterations: [usize; 2],
    pub residuals: [f64; 2],
}

impl TensorProvenance {
    pub fn new(source: impl Into<String>, t: &HomogenizedTensor) -> Self {
        Self {
            source: source.into(),
            a: t.a,
            theta: t.theta,
            lambda: t.lambda,
            rho: t.rho.is_finite().then_some(t.rho),
            m: t.m,
            tol: t.tol,
            iterations: t.iterations,
            residuals: t.residuals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub rng_algorithm: String,
    /// Resolved configuration in canonical text form.
    pub config: String,
    pub tensor: Option<TensorProvenance>,
    pub context: Option<ReportContext>,
    /// SHA-256 of each written file, by file name.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: String) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            config,
            tensor: None,
            context: None,
            files: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, OutputError> {
        serde_json::from_str(text).map_err(|e| parse_err(MANIFEST_FILE, e.line(), e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Output directory that checksums every file it writes.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, OutputError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| OutputError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self {
            root,
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, OutputError> {
        let bytes = bytes.as_ref();
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|source| OutputError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Writes the manifest with the checksums of every file written so far.
    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, OutputError> {
        manifest.files = self.files;
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()).map_err(|source| OutputError::Io { path, source })?;
        Ok(manifest)
    }
}

/// Reads a whole file, attaching the path to any error.
pub fn read_text(path: &Path) -> Result<String, OutputError> {
    fs::read_to_string(path).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}
