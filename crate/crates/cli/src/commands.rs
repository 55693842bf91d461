use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use molpde::datagen::{build_dataset, GenerationConfig};
use molpde::io;
use molpde::train_eval::{self, ModelKind, TrainConfig, TrainSplits, TrainedModel};
use molpde::{lookup_system, Error, ModelSolver, PdeSystem, SolverMethod};
use serde_json::json;

use crate::config::{need, pick, RunConfig};
use crate::{EvaluateArgs, ExportArgs, GenerateArgs, TrainArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<String> for Failure {
    fn from(m: String) -> Self {
        Failure::Usage(m)
    }
}

type CmdResult = Result<(), Failure>;

fn build_system(args: &GenerateArgs, file: &RunConfig) -> Result<PdeSystem, Failure> {
    let name = need(args.system.clone(), file.system.clone(), "system")?;
    let mut system = lookup_system(&name)?;
    let mut overrides: Vec<(String, f64)> = file.params.clone().unwrap_or_default().into_iter().collect();
    for p in &args.params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| format!("--param expects KEY=VALUE, got `{p}`"))?;
        let v: f64 = v.trim().parse().map_err(|_| format!("--param {k}: `{v}` is not a number"))?;
        overrides.push((k.trim().to_string(), v));
    }
    for (k, v) in overrides {
        system.params.set(&k, v)?;
    }
    let scale = pick(args.derivative_scale, file.derivative_scale, system.scale);
    Ok(PdeSystem::new(system.params, scale)?)
}

pub fn generate(args: GenerateArgs, file: &RunConfig) -> CmdResult {
    let system = build_system(&args, file)?;
    let out = need(args.out.clone(), file.out.clone(), "out")?;
    let scale = pick(args.scale.clone(), file.scale.clone(), "full".to_string());
    let seed = pick(args.seed, file.seed, 0);
    let cfg = GenerationConfig::preset(&scale, system, seed)?;
    let start = Instant::now();
    let splits = build_dataset(&cfg)?;
    io::save_dataset(&out, &splits, Some(&cfg))?;
    for s in splits.iter() {
        println!("{}: {} trajectories x {} frames", s.split, s.len(), s.frames());
    }
    println!("wrote {} in {:.1} s", out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn existing_dir(path: PathBuf, what: &str) -> Result<PathBuf, Failure> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("{what} directory {} does not exist", path.display())))
    }
}

fn train_config(args: &TrainArgs, file: &RunConfig, kind: ModelKind) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::for_kind(kind);
    let method_name = args.solver.clone().or(file.solver.clone());
    let method = match method_name {
        Some(m) => m.parse::<SolverMethod>()?,
        None => d.solver.method,
    };
    let solver = ModelSolver {
        method,
        dt: pick(args.dt, file.dt, d.solver.dt),
        rtol: pick(args.rtol, file.rtol, d.solver.rtol),
        atol: pick(args.atol, file.atol, d.solver.atol),
    };
    let cfg = TrainConfig {
        horizon: pick(args.horizon, file.horizon, d.horizon),
        batch_size: pick(args.batch_size, file.batch_size, d.batch_size),
        steps_per_epoch: pick(args.steps_per_epoch, file.steps_per_epoch, d.steps_per_epoch),
        epochs: pick(args.epochs, file.epochs, d.epochs),
        adam: molpde::train_eval::AdamConfig { lr: pick(args.lr, file.lr, d.adam.lr), ..d.adam },
        solver,
        eval_batches: pick(args.eval_batches, file.eval_batches, d.eval_batches),
        seed: pick(args.seed, file.seed, d.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: TrainArgs, file: &RunConfig) -> CmdResult {
    let data = existing_dir(need(args.data.clone(), file.data.clone(), "data")?, "data")?;
    let kind: ModelKind = need(args.model.clone(), file.model.clone(), "model")?.parse()?;
    if kind == ModelKind::Persistence {
        return Err(Failure::Usage("the persistence model has no parameters; evaluate it directly".into()));
    }
    let out = need(args.out.clone(), file.out.clone(), "out")?;
    let cfg = train_config(&args, file, kind)?;
    let (manifest, splits) = io::load_dataset(&data)?;

    let start = Instant::now();
    let report = train_eval::train(kind, &TrainSplits { train: &splits.train, val: &splits.val }, &cfg)?;
    let info = json!({
        "system": manifest.system.name(),
        "dataset": data.display().to_string(),
        "train_config": cfg,
        "best_epoch": report.best_epoch,
        "initial_train_loss": report.initial_train_loss,
        "final_train_loss": report.final_train_loss,
        "initial_val_loss": report.initial_val_loss,
        "epochs": report.epochs,
        "diverged": report.diverged,
    });
    io::save_checkpoint(&out, &report.model, info)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(|e| e.to_string())?;
    for e in &report.epochs {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])
            .map_err(|e| e.to_string())?;
    }
    let bytes = w.into_inner().map_err(|e| e.to_string())?;
    io::write_atomic(&out.join("loss.csv"), &bytes)?;

    println!(
        "{kind}: monitor loss {:.4e} -> {:.4e}, best epoch {} of {} ({:.1} s)",
        report.initial_train_loss,
        report.final_train_loss,
        report.best_epoch,
        report.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    println!("wrote {}", out.display());
    match report.diverged {
        Some(d) => Err(Failure::Numerical(format!(
            "training diverged at epoch {}, step {}: {}; kept the last good checkpoint",
            d.epoch, d.step, d.message
        ))),
        None => Ok(()),
    }
}

pub fn evaluate(args: EvaluateArgs, file: &RunConfig) -> CmdResult {
    let data = existing_dir(need(args.data.clone(), file.data.clone(), "data")?, "data")?;
    let horizon = pick(args.horizon, file.horizon, 16);
    let split = pick(args.split.clone(), file.split.clone(), "test".to_string());
    let out = pick(args.out.clone(), file.out.clone(), PathBuf::from("report.csv"));
    let model = match (args.ckpt.clone().or(file.ckpt.clone()), args.model.clone().or(file.model.clone())) {
        (Some(ckpt), _) => io::load_checkpoint(&existing_dir(ckpt, "checkpoint")?)?.0,
        (None, Some(m)) if m.parse::<ModelKind>()? == ModelKind::Persistence => TrainedModel::persistence(),
        (None, Some(m)) => return Err(Failure::Usage(format!("--model {m} needs a --ckpt"))),
        (None, None) => return Err(Failure::Usage("pass --ckpt or --model persistence".into())),
    };
    let manifest = io::load_manifest(&data)?;
    let dataset = io::load_split(&data, &manifest, &split)?;
    let report = train_eval::evaluate(&model, &dataset, horizon, model.kind().name())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["horizon", "channel", "rmse"]).map_err(|e| e.to_string())?;
    for (h, row) in report.rmse.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            w.write_record([(h + 1).to_string(), report.channels[c].clone(), v.to_string()])
                .map_err(|e| e.to_string())?;
        }
    }
    io::write_atomic(&out, &w.into_inner().map_err(|e| e.to_string())?)?;
    let summary = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    io::write_atomic(&out.with_extension("json"), summary.as_bytes())?;
    println!(
        "{} on {}: mean RMSE over {} steps = {:.6e} ({} starts)",
        report.model, report.dataset, horizon, report.mean_rmse, report.starts
    );
    Ok(())
}

struct ReportRows {
    model: String,
    channels: Vec<String>,
    rows: Vec<(String, String, String)>,
}

fn read_report(path: &Path, name: Option<&String>) -> Result<ReportRows, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("cannot read report {}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["horizon", "channel", "rmse"] {
        return Err(Failure::Usage(format!("{} is not an evaluation report (header {:?})", path.display(), headers)));
    }
    let mut rows = Vec::new();
    let mut channels: Vec<String> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let (h, c, v) = (rec[0].to_string(), rec[1].to_string(), rec[2].to_string());
        if !channels.contains(&c) {
            channels.push(c.clone());
        }
        rows.push((h, c, v));
    }
    let model = match name {
        Some(n) => n.clone(),
        None => std::fs::read(path.with_extension("json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
            .and_then(|v| v.get("model").and_then(|m| m.as_str()).map(str::to_string))
            .unwrap_or_else(|| path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())),
    };
    channels.sort();
    Ok(ReportRows { model, channels, rows })
}

pub fn export_curves(args: ExportArgs) -> CmdResult {
    if !args.names.is_empty() && args.names.len() != args.reports.len() {
        return Err(Failure::Usage(format!(
            "{} names given for {} reports",
            args.names.len(),
            args.reports.len()
        )));
    }
    let reports = args
        .reports
        .iter()
        .enumerate()
        .map(|(i, p)| read_report(p, args.names.get(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &reports[0];
    for (r, p) in reports.iter().zip(&args.reports).skip(1) {
        if r.channels != first.channels {
            return Err(Failure::Usage(format!(
                "{} has channels {:?} but {} has {:?}",
                p.display(),
                r.channels,
                args.reports[0].display(),
                first.channels
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "horizon", "channel", "rmse"]).map_err(|e| e.to_string())?;
    let mut n = 0;
    for r in &reports {
        for (h, c, v) in &r.rows {
            w.write_record([r.model.as_str(), h, c, v]).map_err(|e| e.to_string())?;
            n += 1;
        }
    }
    io::write_atomic(&args.out, &w.into_inner().map_err(|e| e.to_string())?)?;
    println!("wrote {n} rows from {} reports to {}", reports.len(), args.out.display());
    Ok(())
}
