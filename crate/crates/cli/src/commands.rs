use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ednil::config::{build_splits, ExperimentConfig, Method, Splits};
use ednil::datagen::{write_dataset, DataError, LabeledDataset, Oracle};
use ednil::engine::{
    self, csv_header, csv_row, entropy_diagnostics, evaluate, EngineError, SweepAxis,
};
use ednil::envinfer::posterior;
use ednil::nets::{EIModel, ILModel, Mlp, NetError};
use serde::Serialize;
use thiserror::Error;

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, $($arg)*);
    }};
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read config {path}: {source}")]
    Config { path: PathBuf, source: DataError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} runs did not complete")]
    RunsFailed { failed: usize, total: usize },
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the config and applies the command-line overrides.
fn load(path: &Path, seeds: &[u64], output: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("no seeds to run".into()));
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    io(dir, fs::create_dir_all(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io(path, fs::write(path, text))
}

fn read_phi(path: &Path) -> Result<ILModel> {
    let file = io(path, File::open(path))?;
    Ok(ILModel::from_phi(Mlp::read_binary(BufReader::new(file))?))
}

fn write_phi(path: &Path, model: &ILModel) -> Result<()> {
    let mut w = BufWriter::new(io(path, File::create(path))?);
    model.phi.write_binary(&mut w)?;
    io(path, w.flush())
}

fn read_ei(path: &Path) -> Result<EIModel> {
    let file = io(path, File::open(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    split: &'a str,
    n: usize,
    d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_flip_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    color_flip_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    black_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    male_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    env_sizes: Option<Vec<usize>>,
}

fn rate(v: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for b in v {
        hit += usize::from(b);
        n += 1;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

fn summarise<'a>(split: &'a str, ds: &LabeledDataset) -> DatasetSummary<'a> {
    let mut s = DatasetSummary {
        split,
        n: ds.n(),
        d: ds.d(),
        label_flip_rate: None,
        color_flip_rate: None,
        black_rate: None,
        male_rate: None,
        env_sizes: None,
    };
    match (&ds.oracle, ds.targets.labels()) {
        (Some(Oracle::Color { shape, color }), Some(y)) => {
            s.label_flip_rate = rate(y.iter().zip(shape).map(|(a, b)| a != b));
            s.color_flip_rate = rate(y.iter().zip(color).map(|(a, b)| a != b));
        }
        (Some(Oracle::Subgroup { black, male }), _) => {
            s.black_rate = rate(black.iter().copied());
            s.male_rate = rate(male.iter().copied());
        }
        (Some(Oracle::Sem { env, n_envs, .. }), _) => {
            s.env_sizes = Some(ednil::envinfer::env_sizes(env, *n_envs));
        }
        _ => {}
    }
    s
}

fn named_splits(splits: &Splits) -> Vec<(String, &LabeledDataset)> {
    let mut out = vec![("train".to_string(), &splits.train), ("val".to_string(), &splits.val)];
    out.extend(splits.tests.iter().map(|(n, d)| (format!("test-{n}"), d)));
    out
}

pub fn gen(config: &Path, seeds: &[u64], output: Option<PathBuf>) -> Result<()> {
    let cfg = load(config, seeds, output)?;
    for &seed in &cfg.seeds {
        let splits = build_splits(&cfg.dataset, seed, cfg.plan.validation_fraction)?;
        let dir = cfg.output_dir.join("data").join(format!("seed{seed}"));
        create_dir(&dir)?;
        for (name, ds) in named_splits(&splits) {
            let path = dir.join(format!("{name}.ednil"));
            let mut w = BufWriter::new(io(&path, File::create(&path))?);
            write_dataset(ds, &mut w)?;
            io(&path, w.flush())?;
            write_json(
                &dir.join(format!("{name}.provenance.json")),
                &serde_json::json!({
                    "config_hash": cfg.hash(),
                    "seed": seed,
                    "provenance": ds.provenance,
                }),
            )?;
            out!("{}", serde_json::to_string(&summarise(&name, ds))?);
        }
        log::info!("wrote datasets for seed {seed} to {}", dir.display());
    }
    Ok(())
}

fn append_csv(path: &Path, row: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let file = io(path, OpenOptions::new().create(true).append(true).open(path))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(csv_header())?;
    }
    w.write_record(row)?;
    io(path, w.flush())
}

fn run_stem(method: Method, seed: u64) -> String {
    format!("{}-seed{seed}", method.name())
}

pub fn train(config: &Path, seeds: &[u64], output: Option<PathBuf>, method: Option<Method>) -> Result<()> {
    let mut cfg = load(config, seeds, output)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let mut failed = 0;
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let (report, outcome) = engine::run(&cfg, cfg.method, seed)?;
        let stem = run_stem(cfg.method, seed);
        write_json(&dir.join(format!("{stem}.report.json")), &report)?;
        write_json(
            &dir.join(format!("{stem}.timing.json")),
            &serde_json::json!({
                "config_hash": report.config_hash,
                "seed": seed,
                "wall_clock_seconds": started.elapsed().as_secs_f64(),
            }),
        )?;
        append_csv(&dir.join("runs.csv"), &csv_row(&report))?;
        if let Some(o) = outcome {
            write_phi(&dir.join(format!("{stem}.phi.bin")), &o.il)?;
            if let Some(ei) = &o.ei {
                write_json(&dir.join(format!("{stem}.ei.json")), ei)?;
            }
        }
        if report.is_completed() {
            out!("{} seed {seed}: worst-case {:.4}", cfg.method.name(), report.worst_case);
        } else {
            failed += 1;
            eprintln!(
                "{} seed {seed}: {}",
                cfg.method.name(),
                report.error.as_deref().unwrap_or("did not complete")
            );
        }
    }
    if failed > 0 {
        return Err(CliError::RunsFailed {
            failed,
            total: cfg.seeds.len(),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    config_hash: String,
    seed: u64,
    checkpoint: String,
    evaluation: engine::Evaluation,
}

pub fn eval(config: &Path, seeds: &[u64], output: Option<PathBuf>, checkpoint: &Path) -> Result<()> {
    let cfg = load(config, seeds, output)?;
    let model = read_phi(checkpoint)?;
    for &seed in &cfg.seeds {
        let splits = build_splits(&cfg.dataset, seed, cfg.plan.validation_fraction)?;
        if splits.tests.is_empty() {
            return Err(CliError::Usage("the config lists no test environments".into()));
        }
        let tests: Vec<(&str, &LabeledDataset)> = splits.tests.iter().map(|(n, d)| (n.as_str(), d)).collect();
        let report = EvalReport {
            config_hash: cfg.hash(),
            seed,
            checkpoint: checkpoint.display().to_string(),
            evaluation: evaluate(&model, &tests)?,
        };
        out!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

/// `a,b,c` or `start:stop:step` (inclusive, tolerant to rounding).
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Usage(format!("cannot parse sweep values {spec:?}"));
    if let Some((start, rest)) = spec.split_once(':') {
        let (stop, step) = rest.split_once(':').ok_or_else(bad)?;
        let [start, stop, step] = [start, stop, step].map(|s| s.trim().parse::<f64>());
        let (start, stop, step) = (start.map_err(|_| bad())?, stop.map_err(|_| bad())?, step.map_err(|_| bad())?);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect());
    }
    let values = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(bad());
    }
    Ok(values)
}

pub fn sweep(
    config: &Path,
    seeds: &[u64],
    output: Option<PathBuf>,
    axis: SweepAxis,
    values: &str,
    method: Option<Method>,
) -> Result<()> {
    let mut cfg = load(config, seeds, output)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    let values = parse_values(values)?;
    let report = engine::sweep(&cfg, axis, &values)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let stem = format!("sweep-{axis}-{}", cfg.method.name());
    write_json(&dir.join(format!("{stem}.json")), &report)?;
    let path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_writer(io(&path, File::create(&path))?);
    let (header, rows) = report.csv_table();
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    io(&path, w.flush())?;
    for row in &report.rows {
        out!(
            "{axis}={}: worst-case {:.4} ± {:.4} ({} ok, {} failed)",
            row.value, row.worst_mean, row.worst_sd, row.completed, row.failed
        );
    }
    for f in &report.failures {
        eprintln!("failed: {f}");
    }
    if !report.failures.is_empty() {
        return Err(CliError::RunsFailed {
            failed: report.failures.len(),
            total: values.len() * cfg.seeds.len(),
        });
    }
    Ok(())
}

pub fn diag(config: &Path, seeds: &[u64], output: Option<PathBuf>, checkpoint: &Path, bins: usize) -> Result<()> {
    let cfg = load(config, seeds, output)?;
    let model = read_ei(checkpoint)?;
    for &seed in &cfg.seeds {
        let splits = build_splits(&cfg.dataset, seed, cfg.plan.validation_fraction)?;
        let post = posterior(&model, &splits.train.x, &splits.train.targets).map_err(EngineError::from)?;
        let result = entropy_diagnostics(&post.assignments, post.k(), &splits.train, bins)?;
        let out = serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": seed,
            "checkpoint": checkpoint.display().to_string(),
            "sizes": post.sizes,
            "diagnostics": result,
        });
        out!("{}", serde_json::to_string_pretty(&out)?);
    }
    Ok(())
}
