//! The five subcommands. Every file they write is a pure function of the
//! config and the seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use openworld::data::{export_text, generate, DatasetSpec};
use openworld::dept::TheoremReport;
use openworld::metrics::{eval_csv_row, roc_points, EvalReport, EVAL_CSV_HEADER};
use openworld::pipeline::{run_seed, Method, PipelineConfig, SeedOutcome};

use crate::config::ExperimentConfig;
use crate::{io_error, CliError};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Runs `methods` for every seed on its own thread; results come back in seed order.
fn run_seeds(pipeline: &PipelineConfig, seeds: &[u64], methods: &[Method]) -> Result<Vec<SeedOutcome>, CliError> {
    let outcomes: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| scope.spawn(move || run_seed(pipeline, seed, methods)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    outcomes.into_iter().map(|o| o.map_err(CliError::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub seed: u64,
    pub kind: &'static str,
    pub path: PathBuf,
}

/// Mean and population standard deviation (divide by n) over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub eval_csv: PathBuf,
    pub artifacts: Vec<Artifact>,
    pub reports: Vec<(u64, Method, EvalReport)>,
    pub summary: Vec<SummaryRow>,
}

fn metric_values(report: &EvalReport) -> [(&'static str, Option<f64>); 5] {
    [
        ("acc_base", report.acc_base),
        ("acc_new", report.acc_new),
        ("acc_overall", Some(report.acc_overall)),
        ("h", report.h_metric),
        ("auroc", report.auroc),
    ]
}

fn summarize(methods: &[Method], reports: &[(u64, Method, EvalReport)]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &method in methods {
        for (i, (metric, _)) in metric_values(&reports[0].2).iter().enumerate() {
            let values: Vec<f64> = reports
                .iter()
                .filter(|r| r.1 == method)
                .filter_map(|r| metric_values(&r.2)[i].1)
                .collect();
            if values.is_empty() {
                continue;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            rows.push(SummaryRow { method, metric, mean, std, n: values.len() });
        }
    }
    rows
}

impl RunManifest {
    pub fn summary_of(&self, method: Method, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("format=owpt-manifest-v1\n");
        let _ = writeln!(out, "run_id={}", self.run_id);
        for line in self.config.to_text().lines() {
            let _ = writeln!(out, "config.{line}");
        }
        let _ = writeln!(out, "eval_csv={}", self.eval_csv.display());
        for a in &self.artifacts {
            let _ = writeln!(out, "artifact.{}.{}={}", a.seed, a.kind, a.path.display());
        }
        for (seed, method, report) in &self.reports {
            for (metric, v) in metric_values(report) {
                let v = v.map(|x| x.to_string()).unwrap_or_default();
                let _ = writeln!(out, "report.{seed}.{method}.{metric}={v}");
            }
        }
        out.push_str("# std is the population standard deviation over seeds\n");
        for r in &self.summary {
            let _ = writeln!(out, "summary.{}.{}.mean={}", r.method, r.metric, r.mean);
            let _ = writeln!(out, "summary.{}.{}.std={}", r.method, r.metric, r.std);
        }
        out
    }
}

fn eval_csv(run_id: &str, reports: &[(u64, Method, EvalReport)]) -> String {
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for (seed, method, report) in reports {
        csv.push_str(&eval_csv_row(run_id, method.as_str(), *seed, report));
        csv.push('\n');
    }
    csv
}

/// Trains and evaluates every method for every seed; writes `eval.csv`,
/// per-seed checkpoints and `manifest.txt` under the output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let id = cfg.run_id.clone();
    let dir = &cfg.output_dir;
    let outcomes = run_seeds(&cfg.pipeline, &cfg.seeds, &cfg.methods)?;
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for out in &outcomes {
        for r in &out.results {
            reports.push((out.seed, r.method, r.report.clone()));
        }
        let seed_dir = dir.join(format!("seed-{}", out.seed));
        if let Some(coop) = &out.coop {
            let path = seed_dir.join("coop.prompt");
            write_file(&path, &coop.to_checkpoint())?;
            artifacts.push(Artifact { seed: out.seed, kind: "coop", path });
        }
        if let Some(model) = &out.decoop {
            let path = seed_dir.join("decoop.bundle");
            write_file(&path, &model.to_bundle())?;
            artifacts.push(Artifact { seed: out.seed, kind: "decoop", path });
        }
    }
    let eval_path = dir.join("eval.csv");
    write_file(&eval_path, &eval_csv(&id, &reports))?;
    let manifest = RunManifest {
        run_id: id,
        config: cfg.clone(),
        eval_csv: eval_path,
        artifacts,
        summary: summarize(&cfg.methods, &reports),
        reports,
    };
    write_file(&dir.join("manifest.txt"), &manifest.to_text())?;
    Ok(manifest)
}

/// Writes `theorem-seed-<s>.txt` per seed. Fails with
/// [`CliError::InvalidTheorem`] after writing every report if any report is
/// invalid or has a failing bound.
pub fn cmd_theorem(cfg: &ExperimentConfig) -> Result<Vec<TheoremReport>, CliError> {
    cfg.validate()?;
    let reports: Vec<TheoremReport> = run_seeds(&cfg.pipeline, &cfg.seeds, &[Method::Dept])?
        .into_iter()
        .map(|o| o.theorem.expect("dept run carries a bound report"))
        .collect();
    let mut failing = Vec::new();
    for (seed, report) in cfg.seeds.iter().zip(&reports) {
        write_file(&cfg.output_dir.join(format!("theorem-seed-{seed}.txt")), &report.to_kv())?;
        if !(report.valid && report.bound_zs_holds && report.bound_dept_holds) {
            failing.push(seed.to_string());
        }
    }
    if !failing.is_empty() {
        return Err(CliError::InvalidTheorem(format!("seeds {}", failing.join(","))));
    }
    Ok(reports)
}

pub const SWEEP_CSV_HEADER: &str = "gamma,run_id,method,seed,acc_base,acc_new,acc_overall,h,auroc";

/// Retrains DeCoOp for every margin in `gammas` and seed; writes
/// `sweep_gamma.csv` and returns its rows as `(gamma, seed, report)`.
pub fn cmd_sweep_gamma(cfg: &ExperimentConfig, gammas: &[f64]) -> Result<Vec<(f64, u64, EvalReport)>, CliError> {
    let swept = ExperimentConfig { gammas: gammas.to_vec(), ..cfg.clone() };
    swept.validate()?;
    let id = cfg.run_id.clone();
    let mut rows = Vec::new();
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for &gamma in gammas {
        let pipeline = PipelineConfig { gamma, ..cfg.pipeline };
        for out in run_seeds(&pipeline, &cfg.seeds, &[Method::Decoop])? {
            let report = out.results[0].report.clone();
            let _ = writeln!(csv, "{gamma},{}", eval_csv_row(&id, Method::Decoop.as_str(), out.seed, &report));
            rows.push((gamma, out.seed, report));
        }
    }
    write_file(&cfg.output_dir.join("sweep_gamma.csv"), &csv)?;
    Ok(rows)
}

/// Methods whose base-vs-new scores get an ROC export.
pub const ROC_METHODS: [Method; 3] = [Method::Zs, Method::Coop, Method::Decoop];

/// Writes `roc-seed-<s>-<method>.csv` for the zero-shot MSP, CoOp MSP and
/// DeCoOp ensemble scores, plus `auroc.csv` with the exact AUROC of each.
pub fn cmd_roc(cfg: &ExperimentConfig) -> Result<Vec<(u64, Method, f64)>, CliError> {
    cfg.validate()?;
    let mut summary = String::from("seed,method,auroc\n");
    let mut rows = Vec::new();
    for out in run_seeds(&cfg.pipeline, &cfg.seeds, &ROC_METHODS)? {
        for r in &out.results {
            let curve = roc_points(&r.base_scores, &r.new_scores)?;
            let path = cfg.output_dir.join(format!("roc-seed-{}-{}.csv", out.seed, r.method));
            write_file(&path, &curve.to_csv())?;
            let auroc = r.report.auroc.expect("scored methods carry an AUROC");
            let _ = writeln!(summary, "{},{},{}", out.seed, r.method, auroc);
            rows.push((out.seed, r.method, auroc));
        }
    }
    write_file(&cfg.output_dir.join("auroc.csv"), &summary)?;
    Ok(rows)
}

/// Writes `dataset-seed-<s>.txt` for every seed; no training.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let mut paths = Vec::new();
    for &seed in &cfg.seeds {
        let dataset = generate(&DatasetSpec { seed, ..cfg.pipeline.dataset })?;
        let path = cfg.output_dir.join(format!("dataset-seed-{seed}.txt"));
        write_file(&path, &export_text(&dataset))?;
        paths.push(path);
    }
    Ok(paths)
}
