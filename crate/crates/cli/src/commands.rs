use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;

use multigrain::eval::{RecallReport, Stratum};
use multigrain::model::{evaluate_model, train_with, ModelParams, TrainConfig};
use multigrain::synthdata::{self, coarse_split, Dataset, SynthSpec};
use multigrain::uncertainty::{GammaSchedule, LossBreakdown};
use multigrain::Error;

use crate::args::{parse_gamma0, SweepAxis, TrainArgs};
use crate::files::{read_json, reports_csv, write_atomic, write_json};
use crate::manifest::{version_string, Artifacts, RunKind, RunManifest, MANIFEST_FORMAT_VERSION};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_FILE: &str = "failure.json";
pub const DATASET_FILE: &str = "dataset.mgds";

/// Bad invocation that clap cannot catch; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn generate(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SynthSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = synthdata::generate(&spec)?;
    data.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let (coarse, fine) = coarse_split(&data.train);
    println!("items: {}", data.n_items());
    println!(
        "train triplets: {} ({} coarse, {} fine)",
        data.train.len(),
        coarse.len(),
        fine.len()
    );
    println!("eval queries: {}", data.eval.len());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    args.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn train(data_path: &Path, args: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(args)?;
    let data = load_dataset(data_path)?;
    run_train(&cfg, &data, data_path, out)
}

fn evaluate_all(params: &ModelParams, data: &Dataset, ks: &[usize]) -> Result<Vec<RecallReport>> {
    Stratum::ALL
        .iter()
        .map(|&s| evaluate_model(params, data, s, ks).map_err(Into::into))
        .collect()
}

fn run_train(cfg: &TrainConfig, data: &Dataset, dataset_path: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let start = Instant::now();

    let trace_path = out.join(TRACE_FILE);
    let mut trace_out = BufWriter::new(fs::File::create(&trace_path)?);
    let mut trace_err = None;
    let result = train_with(cfg, data, |rec| {
        if trace_err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).map_err(anyhow::Error::from);
        let written = line.and_then(|l| {
            writeln!(trace_out, "{l}")?;
            trace_out.flush().map_err(Into::into)
        });
        if let Err(e) = written {
            trace_err = Some(e);
        }
    });
    drop(trace_out);
    if let Some(e) = trace_err {
        return Err(e.context("writing trace"));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NumericFailure(diag)) => {
            write_json(&out.join(FAILURE_FILE), &diag)?;
            eprintln!(
                "diagnostics written to {}",
                out.join(FAILURE_FILE).display()
            );
            return Err(Error::NumericFailure(diag).into());
        }
        Err(e) => return Err(e.into()),
    };

    let ckpt = out.join(CHECKPOINT_FILE);
    outcome.params.save(&ckpt)?;
    let reports = evaluate_all(&outcome.params, data, &cfg.eval_ks)?;
    write_json(&out.join(REPORT_JSON), &reports)?;
    write_atomic(&out.join(REPORT_CSV), &reports_csv(&reports)?)?;

    if let Some(last) = outcome.trace.last() {
        print_losses(&last.loss);
    }
    for r in &reports {
        print_report(r);
    }

    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        version: version_string(),
        run: RunKind::Train,
        config: cfg.clone(),
        synth_spec: data.spec.clone(),
        artifacts: Artifacts {
            dataset: dataset_path.to_path_buf(),
            checkpoint: Some(ckpt),
            trace: Some(trace_path),
            reports: vec![out.join(REPORT_JSON), out.join(REPORT_CSV)],
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

fn print_losses(l: &LossBreakdown) {
    println!(
        "final epoch: info {:.4}  u {:.4}  total {:.4}  gamma {:.4}  sigma {:.4}",
        l.info, l.u, l.total, l.gamma, l.sigma_scalar
    );
}

fn print_report(r: &RecallReport) {
    let cells: Vec<String> = r
        .per_k
        .iter()
        .map(|(k, v)| format!("R@{k} {:.4}", v))
        .collect();
    println!(
        "{:<7} n={:<4} {}",
        r.stratum.as_str(),
        r.n_queries,
        cells.join("  ")
    );
}

pub fn eval(
    checkpoint: &Path,
    data_path: &Path,
    stratum: Stratum,
    ks: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    let params = ModelParams::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data = load_dataset(data_path)?;
    let report = evaluate_model(&params, &data, stratum, ks)?;
    if report.n_queries == 0 {
        eprintln!(
            "warning: the dataset has no {} queries; recall is undefined and left empty",
            stratum.as_str()
        );
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?) {
        // a closed pipe (e.g. `| head`) is not a failure of the evaluation
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        other => other?,
    }
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

/// Parses one sweep value for `axis`.
pub fn parse_axis_value(axis: SweepAxis, raw: &str) -> Result<f64> {
    let v = match axis {
        SweepAxis::Gamma0 => parse_gamma0(raw),
        _ => raw
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("expected a finite number, got `{raw}`")),
    };
    v.map_err(|e| UsageError(format!("--values for axis {}: {e}", axis.as_str())).into())
}

/// `base` with the swept setting replaced. The dropout comparator always
/// trains without the uncertainty term.
pub fn config_for(base: &TrainConfig, axis: SweepAxis, value: f64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::W1 => cfg.noise.w1 = value,
        SweepAxis::W2 => cfg.noise.w2 = value,
        SweepAxis::Gamma0 if value.is_infinite() => cfg.schedule = GammaSchedule::baseline(),
        SweepAxis::Gamma0 => cfg.schedule = GammaSchedule::exponential(value)?,
        SweepAxis::GammaFixed => cfg.schedule = GammaSchedule::fixed(value)?,
        SweepAxis::Dropout => {
            cfg.dropout_rate = Some(value);
            cfg.schedule = GammaSchedule::baseline();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct SweepRow {
    axis: String,
    value: String,
    config: TrainConfig,
    final_loss: LossBreakdown,
    reports: Vec<RecallReport>,
}

pub fn sweep(
    data_path: &Path,
    axis: SweepAxis,
    values: &[String],
    args: &TrainArgs,
    out: &Path,
) -> Result<()> {
    let values: Vec<String> = values
        .iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        bail!(UsageError("--values needs at least one value".into()));
    }
    let base = resolve_config(args)?;
    let data = load_dataset(data_path)?;
    run_sweep(&base, &data, data_path, axis, &values, out)
}

fn run_sweep(
    base: &TrainConfig,
    data: &Dataset,
    dataset_path: &Path,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
) -> Result<()> {
    let configs = values
        .iter()
        .map(|raw| config_for(base, axis, parse_axis_value(axis, raw)?))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let start = Instant::now();

    let mut rows = Vec::with_capacity(values.len());
    for (raw, cfg) in values.iter().zip(configs) {
        eprintln!("{} = {raw}", axis.as_str());
        let outcome = match train_with(&cfg, data, |_| {}) {
            Ok(o) => o,
            Err(Error::NumericFailure(diag)) => {
                let path = out.join(FAILURE_FILE);
                write_json(&path, &diag)?;
                eprintln!("diagnostics written to {}", path.display());
                return Err(Error::NumericFailure(diag).into());
            }
            Err(e) => return Err(e.into()),
        };
        let reports = evaluate_all(&outcome.params, data, &cfg.eval_ks)?;
        for r in &reports {
            print_report(r);
        }
        rows.push(SweepRow {
            axis: axis.as_str().to_string(),
            value: raw.clone(),
            final_loss: outcome.trace.last().map(|t| t.loss).unwrap_or_default(),
            config: cfg,
            reports,
        });
    }

    write_atomic(&out.join(SWEEP_CSV), &sweep_csv(&rows)?)?;
    write_json(&out.join(SWEEP_JSON), &rows)?;

    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        version: version_string(),
        run: RunKind::Sweep {
            axis: axis.as_str().to_string(),
            values: values.to_vec(),
        },
        config: base.clone(),
        synth_spec: data.spec.clone(),
        artifacts: Artifacts {
            dataset: dataset_path.to_path_buf(),
            checkpoint: None,
            trace: None,
            reports: vec![out.join(SWEEP_CSV), out.join(SWEEP_JSON)],
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

/// Wide CSV: one row per swept value, one column per (stratum, K).
fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "axis".to_string(),
        "value".into(),
        "final_info".into(),
        "final_total".into(),
    ];
    let columns: Vec<(Stratum, usize)> = rows
        .first()
        .map(|r| {
            r.reports
                .iter()
                .flat_map(|rep| r.config.eval_ks.iter().map(move |&k| (rep.stratum, k)))
                .collect()
        })
        .unwrap_or_default();
    for (s, k) in &columns {
        header.push(format!("{}_r{}", s.as_str(), k));
    }
    for s in Stratum::ALL {
        header.push(format!("{}_n", s.as_str()));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.axis.clone(),
            row.value.clone(),
            row.final_loss.info.to_string(),
            row.final_loss.total.to_string(),
        ];
        for (s, k) in &columns {
            let v = row
                .reports
                .iter()
                .find(|r| r.stratum == *s)
                .and_then(|r| r.recall(*k));
            rec.push(v.map(|x| x.to_string()).unwrap_or_default());
        }
        for s in Stratum::ALL {
            let n = row
                .reports
                .iter()
                .find(|r| r.stratum == s)
                .map_or(0, |r| r.n_queries);
            rec.push(n.to_string());
        }
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

pub fn replay(manifest_path: &Path, out: &Path) -> Result<()> {
    let m: RunManifest = read_json(manifest_path)?;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        bail!(
            "manifest format version {} is not supported (expected {MANIFEST_FORMAT_VERSION})",
            m.format_version
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = synthdata::generate(&m.synth_spec)?;
    let dataset_path: PathBuf = out.join(DATASET_FILE);
    data.save(&dataset_path)?;
    match &m.run {
        RunKind::Train => run_train(&m.config, &data, &dataset_path, out),
        RunKind::Sweep { axis, values } => {
            let axis = SweepAxis::from_str(axis, false)
                .map_err(|e| anyhow::anyhow!("manifest has unknown sweep axis: {e}"))?;
            run_sweep(&m.config, &data, &dataset_path, axis, values, out)
        }
    }
}
