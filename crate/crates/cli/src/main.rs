//! `alignlab`: generate scene datasets, train and evaluate segmentation
//! models, and run ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignlab_core::experiments::{
    report_svg, report_text, rows_to_csv, ExperimentError, ExperimentSpec, Runner, EVAL_OFFSET, SEEN_APPEARANCES,
    TARGET_OFFSET,
};
use alignlab_core::scenegen::{read_dataset, write_dataset_with, Appearance, SceneConfig, SceneDataset, SceneError, DUSK_ID};
use alignlab_core::segmodel::ModelParams;
use alignlab_core::tensor::{read_checkpoint, write_checkpoint};
use alignlab_core::trainer::{evaluate, train_dg, train_uda, EvalSet, Mode, TargetImages, TrainConfig, TrainError};
use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "alignlab", version, about = "Appearance-aligned scene generation and segmentation training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render layouts under the four appearance presets into a directory.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        layouts: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
        /// First layout index.
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Also render the unseen dusk appearance.
        #[arg(long)]
        dusk: bool,
    },
    /// Train a model; writes model.ckpt, log.csv, config.txt and summary.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        /// Labeled source dataset directory; generated from `data.*` keys when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Unlabeled target dataset directory for uda mode.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `seen` (the four presets), `unseen` (dusk), `all`, or one appearance name.
        #[arg(long, default_value = "seen")]
        split: String,
        /// Write per-class results as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a one-axis sweep over seeds; writes results.csv, report.md and chart.svg.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate report.md and chart.svg from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dg,
    Uda,
}

/// Keys read by `train` for in-memory data generation.
#[derive(Debug, Clone, Copy)]
struct DataKeys {
    layouts: u64,
    seed: u64,
    width: usize,
    height: usize,
}

impl Default for DataKeys {
    fn default() -> Self {
        Self { layouts: 500, seed: 7, width: 64, height: 48 }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|cause| {
                if let Some(e) = cause.downcast_ref::<TrainError>() {
                    Some(match e {
                        e if e.is_numeric() => 3,
                        TrainError::Config(_) => 1,
                        _ => 2,
                    })
                } else if let Some(e) = cause.downcast_ref::<SceneError>() {
                    Some(if matches!(e, SceneError::Config(_)) { 1 } else { 2 })
                } else if let Some(e) = cause.downcast_ref::<ExperimentError>() {
                    Some(match e {
                        ExperimentError::Spec(_) => 1,
                        ExperimentError::Train(t) if t.is_numeric() => 3,
                        ExperimentError::Train(TrainError::Config(_)) => 1,
                        _ => 2,
                    })
                } else {
                    None
                }
            })
            .unwrap_or(2);
        Failure { code, error }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { seed, layouts, out, width, height, start, dusk } => {
            if layouts == 0 {
                return Err(usage(anyhow!("--layouts must be at least 1")));
            }
            let mut ids: Vec<usize> = Appearance::ALL.iter().map(|a| a.id()).collect();
            if dusk {
                ids.push(DUSK_ID);
            }
            let config = SceneConfig::with_size(width, height);
            let manifest = write_dataset_with(&out, seed, &config, start..start + layouts, &ids)
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            println!("wrote {} layouts x {} appearances to {}", manifest.entries.len(), ids.len(), out.display());
            Ok(())
        }
        Command::Train { config, mode, out, dataset, target, overrides } => {
            train(config.as_deref(), mode, &out, dataset.as_deref(), target.as_deref(), &overrides)
        }
        Command::Eval { checkpoint, dataset, split, out } => eval(&checkpoint, &dataset, &split, out.as_deref()),
        Command::Ablate { spec, out } => ablate(&spec, &out),
        Command::Report { results, out } => {
            let csv = read_text(&results)?;
            write_reports(&csv, &out)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::from)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(Failure::from)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::from)
}

/// Splits `data.*` keys from training keys and parses both.
fn parse_train_config(text: &str) -> Result<(TrainConfig, DataKeys), Failure> {
    let mut data = DataKeys::default();
    let mut rest = String::new();
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        let Some((k, v)) = body.split_once('=') else {
            rest.push_str(line);
            rest.push('\n');
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        let int = || v.parse::<u64>().map_err(|_| usage(anyhow!("`{k}` must be a non-negative integer, got `{v}`")));
        match k {
            "data.layouts" => data.layouts = int()?,
            "data.seed" => data.seed = int()?,
            "data.width" => data.width = int()? as usize,
            "data.height" => data.height = int()? as usize,
            _ => {
                rest.push_str(body);
                rest.push('\n');
            }
        }
    }
    let cfg = TrainConfig::parse(&rest).map_err(|e| usage(e.into()))?;
    Ok((cfg, data))
}

fn train(
    config: Option<&Path>,
    mode: Option<ModeArg>,
    out: &Path,
    dataset: Option<&Path>,
    target: Option<&Path>,
    overrides: &[String],
) -> Result<(), Failure> {
    let mut text = match config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    for o in overrides {
        if !o.contains('=') {
            return Err(usage(anyhow!("--set expects KEY=VALUE, got `{o}`")));
        }
        text.push('\n');
        text.push_str(o);
    }
    let (mut cfg, data_keys) = parse_train_config(&text)?;
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Dg => Mode::Dg,
            ModeArg::Uda => Mode::Uda,
        };
    }
    cfg.validate().map_err(|e| usage(e.into()))?;

    let scene = SceneConfig::with_size(data_keys.width, data_keys.height);
    let source = match dataset {
        Some(dir) => read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?,
        None => {
            if data_keys.layouts == 0 {
                return Err(usage(anyhow!("data.layouts must be at least 1")));
            }
            SceneDataset::generate(data_keys.seed, &scene, 0..data_keys.layouts, false).context("generating source data")?
        }
    };
    let outcome = match cfg.mode {
        Mode::Dg => train_dg(&cfg, &source, None).context("training")?,
        Mode::Uda => {
            let images = match target {
                Some(dir) => {
                    let t = read_dataset(dir).with_context(|| format!("reading target {}", dir.display()))?;
                    TargetImages::from_dataset(&t, cfg.target_appearance).context("target split")?
                }
                None => {
                    let t = SceneDataset::generate_with(
                        data_keys.seed,
                        &SceneConfig::with_size(source.width, source.height),
                        TARGET_OFFSET..TARGET_OFFSET + source.len() as u64,
                        &[cfg.target_appearance],
                    )
                    .context("generating target data")?;
                    TargetImages::from_dataset(&t, cfg.target_appearance).context("target split")?
                }
            };
            train_uda(&cfg, &source, &images, None).context("training")?
        }
    };

    create_dir(out)?;
    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &outcome.params.tensors).context("encoding checkpoint")?;
    write(&out.join("model.ckpt"), ckpt)?;
    if let Some(teacher) = &outcome.teacher {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &teacher.tensors).context("encoding teacher checkpoint")?;
        write(&out.join("teacher.ckpt"), buf)?;
    }
    write(&out.join("log.csv"), outcome.log.to_csv())?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let last = outcome.log.records.last();
    let summary = serde_json::json!({
        "mode": match cfg.mode { Mode::Dg => "dg", Mode::Uda => "uda" },
        "align": cfg.align.name(),
        "lambda": outcome.log.lambda,
        "iterations": outcome.log.records.len(),
        "final_total": last.map(|r| r.total),
        "wall_clock_s": outcome.log.wall_clock_s,
    });
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    println!(
        "trained {} iterations ({}, lambda {}) in {:.1}s; final total loss {:.4}",
        outcome.log.records.len(),
        cfg.align.name(),
        outcome.log.lambda,
        outcome.log.wall_clock_s,
        last.map(|r| r.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn split_appearances(split: &str, data: &SceneDataset) -> Result<Vec<usize>, Failure> {
    let ids: Vec<usize> = match split.trim().to_ascii_lowercase().as_str() {
        "seen" => SEEN_APPEARANCES.to_vec(),
        "unseen" | "dusk" => vec![DUSK_ID],
        "all" => data.appearance_ids.clone(),
        name => vec![name
            .parse::<Appearance>()
            .map_err(|e| usage(anyhow!("unknown split `{split}`: {e}")))?
            .id()],
    };
    if let Some(missing) = ids.iter().find(|&&id| !data.has_appearance(id)) {
        return Err(Failure {
            code: 2,
            error: anyhow!("dataset has no images for appearance {missing} (split `{split}`)"),
        });
    }
    Ok(ids)
}

fn eval(checkpoint: &Path, dataset: &Path, split: &str, out: Option<&Path>) -> Result<(), Failure> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let tensors = read_checkpoint(bytes.as_slice()).with_context(|| format!("decoding {}", checkpoint.display()))?;
    let params = ModelParams::from_tensors(tensors).context("checkpoint does not describe a model")?;
    let data = read_dataset(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    let appearances = split_appearances(split, &data)?;
    let cm = evaluate(&params, EvalSet { data: &data, appearances: &appearances }).context("evaluating")?;
    let scores = cm.scores();
    print!("{}", scores.to_table());
    if let Some(path) = out {
        write(path, scores.to_csv())?;
    }
    Ok(())
}

fn write_reports(csv: &str, out: &Path) -> Result<(), Failure> {
    let text = report_text(csv).context("building report")?;
    let svg = report_svg(csv).context("building chart")?;
    create_dir(out)?;
    write(&out.join("report.md"), text)?;
    write(&out.join("chart.svg"), svg)
}

fn ablate(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let spec = ExperimentSpec::parse(&read_text(spec_path)?).context("parsing experiment spec")?;
    let runner = Runner::for_spec(&spec).context("preparing evaluation split")?;
    let rows = runner.ablate(&spec).context("running sweep")?;
    let failed = rows.iter().filter(|r| !r.ok()).count();
    let csv = rows_to_csv(&rows);
    create_dir(out)?;
    write(&out.join("results.csv"), &csv)?;
    write_reports(&csv, out)?;
    println!(
        "{} runs ({} failed) over {} values of {}; evaluation layouts start at {}",
        rows.len(),
        failed,
        spec.values.len(),
        spec.axis,
        EVAL_OFFSET
    );
    if failed == rows.len() {
        bail_numeric_or_data(&rows)?;
    }
    Ok(())
}

fn bail_numeric_or_data(rows: &[alignlab_core::experiments::RunRow]) -> Result<(), Failure> {
    let numeric = rows.iter().all(|r| r.status.contains("non-finite"));
    Err(Failure { code: if numeric { 3 } else { 2 }, error: anyhow!("every run failed; first: {}", rows[0].status) })
}
