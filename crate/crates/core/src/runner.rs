//! The three commands behind the binary: `run`, `verify` and `report`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, parse_config, RunConfig, TaskSource};
use crate::data::{load_idx, parse_groups, split_by_class, synth_tasks, TaskSequence};
use crate::driver::{run_mode, Mode, RunOutcome, RunReport};
use crate::error::{Error, Result};
use crate::prop1::{self, Fault, SweepReport};
use crate::rng::SeededRng;
use crate::snapshot::{backbone_to_bytes, write_atomic};
use crate::verify::{gradient_suites, SuiteResult};

/// Overrides the configured output root.
pub const OUT_ENV: &str = "GROWCL_OUT";

pub const MANIFEST: &str = "manifest.json";

/// Build the task sequence named by the config. Data randomness comes from
/// the `data` sub-stream of the run seed.
pub fn load_tasks(cfg: &RunConfig) -> Result<TaskSequence> {
    let mut rng = SeededRng::new(cfg.seed).substream("data");
    match &cfg.data {
        TaskSource::Synthetic(p) => synth_tasks(&mut rng, p),
        TaskSource::Idx(src) => {
            let data = load_idx(&src.images, &src.labels)?;
            let text =
                std::fs::read_to_string(&src.groups).map_err(|e| Error::io(&src.groups, e))?;
            let groups = parse_groups(&text)?;
            split_by_class(&data, &groups, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub seed: u64,
    pub config_digest: String,
    /// The config without `output_dir`.
    pub config: serde_json::Value,
    pub report: RunReport,
    /// File name (relative to the run directory) to SHA-256.
    pub files: Vec<(String, String)>,
}

pub fn run_dir_name(cfg: &RunConfig, mode: Mode) -> String {
    format!("{}-seed{}-{}", mode.name(), cfg.seed, &cfg.digest()[..12])
}

pub fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn table_header(tasks: usize, tail: &[&str]) -> String {
    let mut s = String::from("method");
    for t in 1..=tasks {
        let _ = write!(s, ",{t}");
    }
    for c in tail {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    s
}

pub fn accuracy_csv(r: &RunReport) -> String {
    let mut s = table_header(r.accuracy.len(), &["Avg"]);
    s.push_str(r.mode.name());
    for a in &r.accuracy {
        let _ = write!(s, ",{a}");
    }
    let _ = writeln!(s, ",{}", r.average);
    s
}

pub fn size_csv(r: &RunReport) -> String {
    let mut s = table_header(r.size.len(), &[]);
    s.push_str(r.mode.name());
    for x in &r.size {
        let _ = write!(s, ",{x}");
    }
    s.push('\n');
    s
}

fn curves_csv(o: &RunOutcome) -> String {
    let mut s = String::from("task,phase,epoch,loss,train_acc,val_acc,growth_ratio,temperature\n");
    for c in &o.curves {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.task, c.phase, c.epoch, c.loss, c.train_acc, c.val_acc, c.growth_ratio, c.temperature
        );
    }
    s
}

fn gates_csv(o: &RunOutcome) -> String {
    let mut s = String::from("task,scratch_val_acc,target,pick_val_acc,expanded,final_val_acc\n");
    for g in &o.gates {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            g.task, g.scratch_val_acc, g.target, g.pick_val_acc, g.expanded, g.final_val_acc
        );
    }
    s
}

fn forgetting_csv(o: &RunOutcome) -> String {
    let mut s = String::from("boundary,task,pass\n");
    for f in &o.forgetting {
        let _ = writeln!(s, "{},{},{}", f.boundary, f.task, f.pass);
    }
    s
}

/// Every artifact of a finished run, as (relative path, bytes).
pub fn run_artifacts(o: &RunOutcome) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![
        (
            "accuracy.csv".to_string(),
            accuracy_csv(&o.report).into_bytes(),
        ),
        ("size.csv".to_string(), size_csv(&o.report).into_bytes()),
        ("ledger.csv".to_string(), o.ledger.to_csv().into_bytes()),
        ("curves.csv".to_string(), curves_csv(o).into_bytes()),
        ("gates.csv".to_string(), gates_csv(o).into_bytes()),
        ("forgetting.csv".to_string(), forgetting_csv(o).into_bytes()),
    ];
    if o.backbones.len() == 1 {
        files.push((
            "backbone.bin".to_string(),
            backbone_to_bytes(&o.backbones[0]),
        ));
    } else {
        for (b, s) in o.backbones.iter().zip(&o.snapshots) {
            files.push((
                format!("backbones/task_{:02}.bin", s.task_id),
                backbone_to_bytes(b),
            ));
        }
    }
    for s in &o.snapshots {
        files.push((
            format!("snapshots/task_{:02}.snap", s.task_id),
            s.to_bytes(),
        ));
    }
    files
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(o) = v.as_object_mut() {
        o.remove("output_dir");
    }
    v
}

/// Write a finished run under `root`; returns the run directory.
pub fn write_run(root: &Path, cfg: &RunConfig, mode: Mode, o: &RunOutcome) -> Result<PathBuf> {
    let dir = root.join(run_dir_name(cfg, mode));
    let files = run_artifacts(o);
    let mut hashes = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        hashes.push((name.clone(), hex(&Sha256::digest(bytes))));
    }
    let manifest = Manifest {
        mode,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        config: config_value(cfg),
        report: o.report.clone(),
        files: hashes,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(dir)
}

/// `run`: parse, execute and write. Invariant failures surface as errors
/// after nothing has been written.
pub fn cmd_run(config: &Path, mode: Mode) -> Result<PathBuf> {
    let cfg = parse_config(config)?;
    let seq = load_tasks(&cfg)?;
    let outcome = run_mode(&cfg, &seq, mode)?;
    write_run(&output_root(&cfg), &cfg, mode, &outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub sweep: SweepReport,
    pub suites: Vec<SuiteResult>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.sweep.ok() && self.suites.iter().all(|s| s.pass)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyArgs {
    pub instances: usize,
    pub seed: u64,
    pub budget: u128,
    pub grad_points: usize,
    pub plant_fault: bool,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        Self {
            instances: 200,
            seed: 0,
            budget: prop1::DEFAULT_BUDGET,
            grad_points: 100,
            plant_fault: cfg!(feature = "planted-fault"),
        }
    }
}

pub fn cmd_verify(args: VerifyArgs) -> Result<VerifyOutcome> {
    if args.instances == 0 {
        return Err(Error::invalid("verify", "--instances must be at least 1"));
    }
    if args.grad_points == 0 {
        return Err(Error::invalid("verify", "--grad-points must be at least 1"));
    }
    let fault = Fault {
        pin_attentive: args.plant_fault,
    };
    Ok(VerifyOutcome {
        sweep: prop1::sweep(args.instances, args.seed, args.budget, fault)?,
        suites: gradient_suites(args.grad_points, args.seed),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Merge run directories into one table: `method, 1..T, Avg, Model Size`.
/// For every seed with both a grown and a grow-only run, a
/// `delta:grown-grow_only:seed=S` row follows with per-task differences.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::invalid("report", "need at least one run directory"));
    }
    let reports: Vec<RunReport> = dirs
        .iter()
        .map(|d| read_manifest(d).map(|m| m.report))
        .collect::<Result<_>>()?;
    let tasks = reports[0].accuracy.len();
    if let Some(r) = reports.iter().find(|r| r.accuracy.len() != tasks) {
        return Err(Error::invalid(
            "report",
            format!(
                "runs disagree on task count ({tasks} vs {})",
                r.accuracy.len()
            ),
        ));
    }
    let mut s = table_header(tasks, &["Avg", "Model Size"]);
    for r in &reports {
        s.push_str(&table_row(
            r.mode.name(),
            &r.accuracy,
            r.size.last().map(String::as_str).unwrap_or(""),
        ));
    }
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for seed in seeds {
        let find = |m: Mode| reports.iter().find(|r| r.mode == m && r.seed == seed);
        if let (Some(g), Some(o)) = (find(Mode::Grown), find(Mode::GrowOnly)) {
            let d: Vec<f64> = g
                .accuracy
                .iter()
                .zip(&o.accuracy)
                .map(|(a, b)| a - b)
                .collect();
            s.push_str(&table_row(
                &format!("delta:grown-grow_only:seed={seed}"),
                &d,
                "",
            ));
        }
    }
    Ok(s)
}

fn table_row(method: &str, values: &[f64], size: &str) -> String {
    let mut s = method.to_string();
    for v in values {
        let _ = write!(s, ",{v}");
    }
    let avg = values.iter().sum::<f64>() / values.len() as f64;
    let _ = writeln!(s, ",{avg},{size}");
    s
}

/// Exit status for an error: 1 for invariant failures, 2 for bad input.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_invariant_failure() {
        return 1;
    }
    match e {
        Error::Task { source, .. } => exit_code(source),
        Error::Config(_)
        | Error::InvalidArgument { .. }
        | Error::Io { .. }
        | Error::Format { .. }
        | Error::Data(_)
        | Error::MissingSnapshot(_) => 2,
        _ => 1,
    }
}
