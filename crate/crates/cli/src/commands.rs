use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use demt_core::checkpoint::Checkpoint;
use demt_core::data::{generate_dataset, load_dataset, write_dataset, Dataset};
use demt_core::gradcheck::suite::{run_suite, SuiteOptions};
use demt_core::loss::LossReport;
use demt_core::metrics::{delta_m, MetricRecord};
use demt_core::train::{evaluate_loss, evaluate_metrics, format_step_line, split, Session};
use demt_core::{DemtError, Fault};

use crate::{ensure_dir, write_file, write_resolved, CliError, CliResult, CommonArgs};

pub const TRAIN_LOG: &str = "train.log";
pub const EVAL_LOG: &str = "eval.log";
pub const REPORT_FILE: &str = "report.txt";
pub const GRADCHECK_REPORT: &str = "gradcheck.txt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    DemtError::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

/// `<kind> split=<split> total=<loss> <task>=<loss> ...` with ten decimals.
pub fn final_loss_line(kind: &str, split: &str, report: &LossReport) -> String {
    let mut s = format!("{kind} split={split} total={:.10}", report.total);
    for (name, v) in &report.per_task {
        s.push_str(&format!(" {name}={v:.10}"));
    }
    s
}

/// A parsed [`final_loss_line`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossLine {
    pub kind: String,
    pub split: String,
    pub total: f64,
    pub per_task: Vec<(String, f64)>,
}

pub fn parse_loss_line(line: &str) -> Option<LossLine> {
    let mut tokens = line.split_whitespace();
    let kind = tokens.next()?.to_string();
    let split = tokens.next()?.strip_prefix("split=")?.to_string();
    let total = tokens.next()?.strip_prefix("total=")?.parse().ok()?;
    let mut per_task = Vec::new();
    for t in tokens {
        let (k, v) = t.split_once('=')?;
        per_task.push((k.to_string(), v.parse().ok()?));
    }
    Some(LossLine {
        kind,
        split,
        total,
        per_task,
    })
}

pub fn gen(args: &CommonArgs) -> CliResult<()> {
    let mut cfg = args.resolve()?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
    cfg.data.dir = dir.display().to_string();
    let d = &cfg.data;
    let data = generate_dataset(cfg.seed, d.count, d.height, d.width, d.classes, &d.split)?;
    write_dataset(&dir, &data.manifest, &data.samples)?;
    write_resolved(&dir, &cfg)?;
    let m = &data.manifest;
    println!(
        "wrote {} samples {}x{} classes={} split={} seed={} to {}",
        m.count,
        m.height,
        m.width,
        m.classes,
        m.split,
        m.seed,
        dir.display()
    );
    Ok(())
}

fn load_data(dir: &str) -> CliResult<Dataset> {
    Ok(load_dataset(Path::new(dir))?)
}

pub fn train(args: &CommonArgs) -> CliResult<()> {
    let resuming = args.ckpt.is_some();
    let mut session = match &args.ckpt {
        Some(path) => Session::from_checkpoint(&Checkpoint::load(path)?, &args.overrides()?)?,
        None => Session::new(args.resolve()?)?,
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    ensure_dir(&out)?;
    write_resolved(&out, &session.config)?;
    let data = load_data(&session.config.data.dir)?;
    let (train_set, val_set) = split(&data, session.config.data.val_count)?;
    let steps = session.config.train.steps;
    if session.step > steps {
        return Err(CliError::Usage(format!(
            "checkpoint is at step {} but train.steps is {steps}",
            session.step
        )));
    }
    let log_path = out.join(TRAIN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let every = session.config.train.checkpoint_every;
    let mut failure: Option<CliError> = None;
    let result = session.run(&train_set, steps, |s, report| {
        let line = format_step_line(s.step, report);
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            failure = Some(io_err(&log_path, e));
            return Err(DemtError::Format("log write failed".into()));
        }
        if every > 0 && s.step % every == 0 {
            s.to_checkpoint()
                .save(&out.join(format!("ckpt_{:06}.dmtc", s.step)))?;
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    session.to_checkpoint().save(&out.join("final.dmtc"))?;
    let mut finals = vec![final_loss_line(
        "final",
        "train",
        &evaluate_loss(&mut session.model, &train_set)?,
    )];
    if !val_set.is_empty() {
        finals.push(final_loss_line(
            "final",
            "val",
            &evaluate_loss(&mut session.model, &val_set)?,
        ));
    }
    for line in &finals {
        println!("{line}");
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
    }
    Ok(())
}

fn eval_split(data: &Dataset, which: &str, val_count: usize) -> CliResult<Dataset> {
    let (train_set, val_set) = split(data, val_count)?;
    match which {
        "train" => Ok(train_set),
        "val" if val_set.is_empty() => {
            Err(DemtError::Config("eval.split = val but data.val_count is 0".into()).into())
        }
        "val" => Ok(val_set),
        "all" => Ok(data.clone()),
        other => Err(DemtError::Config(format!(
            "eval.split must be train, val or all, got {other:?}"
        ))
        .into()),
    }
}

pub fn eval(args: &CommonArgs) -> CliResult<()> {
    let requested = args.resolve()?;
    let (config, mut record, loss_line) = match (&requested.eval.multi_report, &args.ckpt) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--ckpt and eval.multi_report are mutually exclusive".into(),
            ));
        }
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e))?;
            (requested, MetricRecord::parse_report(&text)?, None)
        }
        (None, Some(path)) => {
            let mut session =
                Session::from_checkpoint(&Checkpoint::load(path)?, &args.overrides()?)?;
            let data = load_data(&session.config.data.dir)?;
            let which = session.config.eval.split.clone();
            let subset = eval_split(&data, &which, session.config.data.val_count)?;
            let loss = evaluate_loss(&mut session.model, &subset)?;
            let record = evaluate_metrics(&mut session.model, &subset)?;
            (
                session.config,
                record,
                Some(final_loss_line("eval", &which, &loss)),
            )
        }
        (None, None) => {
            return Err(CliError::Usage(
                "eval needs --ckpt or eval.multi_report".into(),
            ));
        }
    };
    let out = match (&args.out, &args.ckpt) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => PathBuf::from("."),
    };
    ensure_dir(&out)?;
    write_resolved(&out, &config)?;
    if let Some(line) = &loss_line {
        println!("{line}");
        write_file(&out.join(EVAL_LOG), &format!("{line}\n"))?;
    }
    if let Some(path) = &args.single_task_ref {
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            record.delta_m = Some(delta_m(&record, &MetricRecord::parse_report(&text)?)?);
        } else {
            eprintln!(
                "single-task reference {} not found; delta_m omitted",
                path.display()
            );
            record.delta_m = None;
        }
    }
    let report = record.to_report();
    print!("{report}");
    write_file(&out.join(REPORT_FILE), &report)
}

fn parse_fault(name: &str) -> CliResult<Option<Fault>> {
    match name {
        "none" => Ok(None),
        "bilinear_coord_sign" => Ok(Some(Fault::BilinearCoordSign)),
        other => Err(DemtError::Config(format!("unknown gradcheck.fault {other:?}")).into()),
    }
}

pub fn gradcheck(args: &CommonArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    let g = &cfg.gradcheck;
    let opts = SuiteOptions {
        seed: cfg.seed,
        eps: g.eps,
        fault: parse_fault(&g.fault)?,
        ..SuiteOptions::default()
    };
    let start = std::time::Instant::now();
    let results = run_suite(&opts, None)?;
    let mut report = String::new();
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed(g.tolerance);
        if !ok {
            failed.push(r.name);
        }
        report.push_str(&format!(
            "op={} instances={} worst_rel_err={:.3e} status={}\n",
            r.name,
            r.instances,
            r.worst,
            if ok { "pass" } else { "fail" }
        ));
    }
    report.push_str(&format!(
        "checks={} failed={} tolerance={:e} elapsed_s={:.1}\n",
        results.len(),
        failed.len(),
        g.tolerance,
        start.elapsed().as_secs_f64()
    ));
    print!("{report}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_resolved(out, &cfg)?;
        write_file(&out.join(GRADCHECK_REPORT), &report)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn inspect(args: &CommonArgs) -> CliResult<()> {
    let path = args
        .ckpt
        .as_ref()
        .ok_or_else(|| CliError::Usage("inspect needs --ckpt".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let mut text = format!("version={} records={}\n", ckpt.version, ckpt.records.len());
    for line in ckpt.header.lines() {
        text.push_str(&format!("header {line}\n"));
    }
    let mut values = 0;
    for r in &ckpt.records {
        let t = &r.tensor;
        values += t.len();
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        text.push_str(&format!(
            "record name={} shape={:?} values={} l2={norm:.6e}\n",
            r.name,
            t.shape(),
            t.len()
        ));
    }
    text.push_str(&format!("total_values={values}\n"));
    print!("{text}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_file(&out.join("inspect.txt"), &text)?;
    }
    Ok(())
}
