//! Command implementations behind the `shilnikov-lab` binary: fixed-point
//! tables, the heteroclinic grid search and the example spectrum report, each
//! with a run manifest. Outputs go to temporary names first and are renamed
//! into place only once every artifact of the run has been produced.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, LabConfig};
use crate::flow_sim::{linearize_origin, reflect_state, vector_field, FlowError, State};
use crate::homoclinic::{pipeline_cell, survival_threshold, PipelineRecord};
use crate::orbit_tools::{fixed_point_for, OrbitError, OrbitRecord};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    Ok,
    NoFinding,
    BadInput,
    ConditionFail,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Ok => 0,
            ExitKind::NoFinding => 1,
            ExitKind::BadInput => 2,
            ExitKind::ConditionFail => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStatus {
    pub task: String,
    pub status: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: String,
    /// Verbatim text of the config file.
    pub config_snapshot: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub exit_code: i32,
    pub tasks: Vec<TaskStatus>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

/// Shared flags of every command.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

/// Result of a command: exit status plus a one-line summary for the terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit: ExitKind,
    pub summary: String,
}

impl Outcome {
    fn bad_input(msg: impl Into<String>) -> Self {
        Outcome { exit: ExitKind::BadInput, summary: msg.into() }
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn load(args: &CommonArgs) -> Result<LabConfig, ConfigError> {
    LabConfig::load(&args.config)
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if jobs > 0 {
        b = b.num_threads(jobs);
    }
    b.build().expect("thread pool")
}

/// Files staged under temporary names in the output directory.
struct Staged {
    dir: PathBuf,
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Staged { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn add(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let fin = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        self.files.push((tmp, fin));
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.files.iter().map(|(_, f)| f.display().to_string()).collect()
    }

    /// Renames everything into place; the manifest is renamed last.
    fn commit(self) -> std::io::Result<()> {
        for (tmp, fin) in &self.files {
            fs::rename(tmp, fin)?;
        }
        Ok(())
    }

    fn abandon(self) {
        for (tmp, _) in &self.files {
            let _ = fs::remove_file(tmp);
        }
    }
}

struct Report {
    command: &'static str,
    started: String,
    tasks: Vec<TaskStatus>,
    notes: Vec<String>,
}

fn finish(
    args: &CommonArgs,
    cfg: &LabConfig,
    report: Report,
    mut staged: Staged,
    exit: ExitKind,
    summary: String,
) -> Outcome {
    let outputs = {
        let mut o = staged.names();
        o.push(staged.dir.join("config_snapshot.ini").display().to_string());
        o
    };
    let manifest = RunManifest {
        command: report.command.into(),
        tool_version: TOOL_VERSION.into(),
        config_path: args.config.display().to_string(),
        config_snapshot: String::from_utf8_lossy(&cfg.snapshot).into_owned(),
        seed: args.seed.unwrap_or(cfg.run.seed),
        started: report.started,
        finished: now(),
        exit_code: exit.code(),
        tasks: report.tasks,
        outputs,
        notes: report.notes,
    };
    let result = staged
        .add("config_snapshot.ini", &cfg.snapshot)
        .and_then(|_| serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other))
        .and_then(|m| staged.add("manifest.json", &m));
    match result {
        Ok(()) => match staged.commit() {
            Ok(()) => Outcome { exit, summary },
            Err(e) => Outcome::bad_input(format!("cannot move outputs into place: {e}")),
        },
        Err(e) => {
            staged.abandon();
            Outcome::bad_input(format!("cannot write outputs: {e}"))
        }
    }
}

/// One row of the fixed-point table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointRow {
    pub k: i64,
    pub x: f64,
    pub y: f64,
    pub z: String,
    pub index: usize,
    pub residual: f64,
    pub max_multiplier: f64,
}

fn row_of(k: i64, o: &OrbitRecord) -> FixedPointRow {
    let p = &o.points[0];
    FixedPointRow {
        k,
        x: p.x,
        y: p.y,
        z: p.z.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(";"),
        index: o.index,
        residual: o.residual,
        max_multiplier: o.multipliers.first().map_or(f64::NAN, |m| m.norm()),
    }
}

fn csv_bytes(rows: &[FixedPointRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "x", "y", "z", "index", "residual", "max_multiplier"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            format!("{:.17e}", r.x),
            format!("{:.17e}", r.y),
            r.z.clone(),
            r.index.to_string(),
            format!("{:.3e}", r.residual),
            format!("{:.17e}", r.max_multiplier),
        ])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Fixed points of `T1` over a ladder range, pruned by the survival threshold
/// when `μ ≠ 0`.
pub fn cmd_fixed_points(args: &CommonArgs, k_min: Option<i64>, k_max: Option<i64>) -> Outcome {
    let started = now();
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => return Outcome::bad_input(e.to_string()),
    };
    let (k_min, k_max) = (k_min.unwrap_or(cfg.run.k_min), k_max.unwrap_or(cfg.run.k_max));
    if k_min > k_max {
        return Outcome::bad_input(format!("empty k range {k_min}..{k_max}"));
    }
    let params = &cfg.map;
    let mut notes = Vec::new();
    let k_star = if params.mu != 0.0 {
        match survival_threshold(params, params.mu, cfg.survival()) {
            Ok(th) => {
                notes.push(format!(
                    "survival threshold k* = {} (x = {:e}, sandwich ok = {})",
                    th.k_star, th.x_kstar, th.sandwich_ok
                ));
                Some(th.k_star)
            }
            Err(e) => return Outcome::bad_input(e.to_string()),
        }
    } else {
        None
    };
    let attempted: Vec<i64> = (k_min..=k_max).filter(|k| k_star.is_none_or(|ks| *k <= ks + 1)).collect();
    let results: Vec<(i64, Result<OrbitRecord, OrbitError>)> = pool(args.jobs.unwrap_or(cfg.run.jobs))
        .install(|| attempted.par_iter().map(|&k| (k, fixed_point_for(params, k))).collect());
    let mut tasks = Vec::new();
    let mut rows = Vec::new();
    let mut failed = false;
    for k in k_min..=k_max {
        let task = format!("k={k}");
        match results.iter().find(|(kk, _)| *kk == k) {
            None => tasks.push(TaskStatus {
                task,
                status: "pruned".into(),
                note: Some("beyond the survival threshold".into()),
            }),
            Some((_, Ok(o))) => {
                rows.push(row_of(k, o));
                tasks.push(TaskStatus { task, status: "ok".into(), note: None });
            }
            Some((_, Err(e))) => {
                let boundary = k_star.is_some_and(|ks| k >= ks);
                failed |= !boundary;
                let status = if boundary { "pruned" } else { "failed" };
                tasks.push(TaskStatus { task, status: status.into(), note: Some(e.to_string()) });
            }
        }
    }
    if rows.is_empty() {
        notes.push("no surviving fixed points in range".into());
    }
    let csv = match csv_bytes(&rows) {
        Ok(b) => b,
        Err(e) => return Outcome::bad_input(e.to_string()),
    };
    let mut staged = match Staged::new(&args.out) {
        Ok(s) => s,
        Err(e) => return Outcome::bad_input(format!("cannot create {}: {e}", args.out.display())),
    };
    if let Err(e) = staged.add("fixed_points.csv", &csv) {
        staged.abandon();
        return Outcome::bad_input(format!("cannot write outputs: {e}"));
    }
    let exit = if failed { ExitKind::NoFinding } else { ExitKind::Ok };
    let summary = format!("{} fixed points written for k = {k_min}..{k_max}", rows.len());
    finish(args, &cfg, Report { command: "fixed-points", started, tasks, notes }, staged, exit, summary)
}

/// Grid bounds of the heteroclinic search.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridArgs {
    pub j0_min: Option<i64>,
    pub j0_max: Option<i64>,
    pub k_min: Option<i64>,
    pub k_max: Option<i64>,
}

/// Runs the loop → heteroclinic → index-2 → walk pipeline over a `(j0, k)` grid.
pub fn cmd_hetero_search(args: &CommonArgs, grid: GridArgs) -> Outcome {
    let started = now();
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => return Outcome::bad_input(e.to_string()),
    };
    let j0 = (grid.j0_min.unwrap_or(cfg.run.j0_min), grid.j0_max.unwrap_or(cfg.run.j0_max));
    let ks = (grid.k_min.unwrap_or(cfg.run.hetero_k_min), grid.k_max.unwrap_or(cfg.run.hetero_k_max));
    let cells: Vec<(i64, i64)> = (j0.0..=j0.1).flat_map(|j| (ks.0..=ks.1).map(move |k| (j, k))).collect();
    let opts = cfg.pipeline();
    let records: Vec<PipelineRecord> = pool(args.jobs.unwrap_or(cfg.run.jobs))
        .install(|| cells.par_iter().map(|&(j, k)| pipeline_cell(&cfg.map, j, k, &opts)).collect());
    let mut body = Vec::new();
    for r in &records {
        if let Err(e) = serde_json::to_writer(&mut body, r) {
            return Outcome::bad_input(e.to_string());
        }
        body.push(b'\n');
    }
    let successes = records.iter().filter(|r| r.is_success()).count();
    let tasks = records
        .iter()
        .map(|r| TaskStatus {
            task: format!("j0={},k={}", r.j0, r.k),
            status: serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            note: r.reason.clone(),
        })
        .collect();
    let mut notes = vec![format!("{successes} of {} grid points passed every pipeline check", records.len())];
    if cells.is_empty() {
        notes.push("empty grid".into());
    }
    let mut staged = match Staged::new(&args.out) {
        Ok(s) => s,
        Err(e) => return Outcome::bad_input(format!("cannot create {}: {e}", args.out.display())),
    };
    if let Err(e) = staged.add("hetero.jsonl", &body) {
        staged.abandon();
        return Outcome::bad_input(format!("cannot write outputs: {e}"));
    }
    let exit = if successes > 0 { ExitKind::Ok } else { ExitKind::NoFinding };
    let summary = format!("{successes} full-pipeline successes over {} grid points", records.len());
    finish(args, &cfg, Report { command: "hetero-search", started, tasks, notes }, staged, exit, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub sigma: f64,
    pub b: f64,
    pub r: f64,
    pub eps: f64,
    /// `[re, im]` pairs.
    pub eigenvalues: Vec<[f64; 2]>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub omega: Option<f64>,
    pub rho: Option<f64>,
    pub c2: bool,
    pub c3: bool,
    /// Equivariance of the field under `(x, y) → (−x, −y)` at sample states.
    pub c4: bool,
    pub not_saddle_focus: Option<String>,
}

fn equivariance_holds(cfg: &LabConfig) -> bool {
    let samples: [State; 4] =
        [[1.0, -2.0, 3.0, 0.5], [-7.5, 0.25, 20.0, -1.0], [0.1, 0.2, 0.3, 0.4], [12.0, 9.0, 31.0, 2.5]];
    samples
        .iter()
        .all(|s| vector_field(&reflect_state(s), &cfg.example) == reflect_state(&vector_field(s, &cfg.example)))
}

/// Eigenvalues at the origin of the example flow with the C2/C3/C4 verdicts.
pub fn cmd_spectrum(args: &CommonArgs) -> Outcome {
    let started = now();
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => return Outcome::bad_input(e.to_string()),
    };
    let e = &cfg.example;
    let c4 = equivariance_holds(&cfg);
    let mut report = SpectrumReport {
        sigma: e.sigma,
        b: e.b,
        r: e.r,
        eps: e.eps,
        eigenvalues: Vec::new(),
        gamma: None,
        lambda: None,
        omega: None,
        rho: None,
        c2: false,
        c3: false,
        c4,
        not_saddle_focus: None,
    };
    match linearize_origin(e) {
        Ok(s) => {
            report.eigenvalues = s.eigenvalues.iter().map(|c| [c.re, c.im]).collect();
            report.gamma = Some(s.gamma);
            report.lambda = Some(s.lambda);
            report.omega = Some(s.omega);
            report.rho = Some(s.rho);
            report.c2 = s.c2;
            report.c3 = s.c3;
        }
        Err(FlowError::NotSaddleFocus(msg)) => report.not_saddle_focus = Some(msg),
        Err(other) => return Outcome::bad_input(other.to_string()),
    }
    let exit = if report.c2 && report.c3 && report.c4 { ExitKind::Ok } else { ExitKind::ConditionFail };
    let body = match serde_json::to_vec_pretty(&report) {
        Ok(b) => b,
        Err(e) => return Outcome::bad_input(e.to_string()),
    };
    let mut staged = match Staged::new(&args.out) {
        Ok(s) => s,
        Err(e) => return Outcome::bad_input(format!("cannot create {}: {e}", args.out.display())),
    };
    if let Err(e) = staged.add("spectrum.json", &body) {
        staged.abandon();
        return Outcome::bad_input(format!("cannot write outputs: {e}"));
    }
    let verdict = |b: bool| if b { "pass" } else { "fail" };
    let summary = match report.rho {
        Some(rho) => {
            format!("rho = {rho:.6}; C2 {}, C3 {}, C4 {}", verdict(report.c2), verdict(report.c3), verdict(report.c4))
        }
        None => format!("origin is not a saddle-focus: {}", report.not_saddle_focus.clone().unwrap_or_default()),
    };
    let tasks = vec![TaskStatus {
        task: "spectrum".into(),
        status: verdict(exit == ExitKind::Ok).into(),
        note: report.not_saddle_focus.clone(),
    }];
    finish(args, &cfg, Report { command: "spectrum", started, tasks, notes: Vec::new() }, staged, exit, summary)
}
