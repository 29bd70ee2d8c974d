//! Experiment harness behind the `protoseg` binary: TOML configs, per-seed
//! training runs with summaries, the ablation sweeps, checkpoint evaluation
//! and dataset export.

mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{ExperimentConfig, ExperimentSection, Precision};

use crate::data::{write_sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{DiscriminationStats, PseudoLabelQuality};
use crate::model::Checkpoint;
use crate::scalar::Scalar;
use crate::trainer::{
    metrics_csv, pseudo_label_report, train, DataSplits, EpochMetrics, RunMeta, TrainConfig, TrainState, Variant,
    METRICS_HEADER,
};

pub const SUMMARY_SCHEMA: u32 = 1;
pub const K_SWEEP: [usize; 4] = [1, 2, 4, 8];
pub const TAU_SWEEP: [f64; 6] = [0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Marker written last into a seed directory; its presence means the run is complete.
const RESULT_FILE: &str = "result.json";

#[derive(Debug, Parser)]
#[command(name = "protoseg", version, about = "Prototype-based consistency regularization for semi-supervised segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed of an experiment and write a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Re-run seeds that already completed.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print JSON metrics.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Write the JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component matrix, prototype-count sweep and threshold sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every sample as a flat binary file.
    ExportDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Labeled,
    Unlabeled,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Labeled => Split::Labeled,
            SplitArg::Unlabeled => Split::Unlabeled,
            SplitArg::Val => Split::Val,
        }
    }
}

/// Process exit code for an error: 2 for a missing input file, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            force,
            out,
        } => {
            let mut exp = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                exp.experiment.seeds = vec![s];
            }
            let dir = out.unwrap_or_else(|| exp.experiment.output_dir.clone());
            let summary = run(&exp, &dir, force)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            split,
            out,
        } => {
            let exp = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let report = eval_checkpoint(&checkpoint, &exp, split.into())?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                fs::write(&p, format!("{text}\n")).map_err(|e| Error::io(&p, e))?;
            }
            println!("{text}");
            Ok(())
        }
        Command::Ablate { config, force, out } => {
            let exp = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| exp.experiment.output_dir.clone());
            let tables = ablate(&exp, &dir, force)?;
            for t in &tables {
                println!("{}", t.path.display());
            }
            Ok(())
        }
        Command::ExportDataset { config, out } => {
            let exp = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let n = export_dataset(&exp, &out)?;
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// JSON has no NaN; serde_json writes it as `null`, read back here as NaN.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Final numbers of one completed seed; also the completion marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub epochs: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub primary_miou: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub val_miou_linear: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub val_miou_proto: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub intra_var: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub inter_var: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub ratio: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub valid_pixel_fraction: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub pseudo_label_accuracy: f64,
    pub unlabeled_steps: u64,
}

impl SeedResult {
    fn new(seed: u64, variant: Variant, last: &EpochMetrics, unlabeled_steps: u64) -> Self {
        SeedResult {
            seed,
            epochs: last.epoch,
            primary_miou: last.primary_miou(variant),
            val_miou_linear: last.val_miou_linear,
            val_miou_proto: last.val_miou_proto,
            intra_var: last.intra_var,
            inter_var: last.inter_var,
            ratio: if last.intra_var > 0.0 {
                last.inter_var / last.intra_var
            } else {
                f64::NAN
            },
            valid_pixel_fraction: last.valid_pixel_fraction,
            pseudo_label_accuracy: last.pseudo_label_accuracy,
            unlabeled_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub variant: Variant,
    pub k: usize,
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub primary_miou: Stat,
    pub val_miou_linear: Stat,
    pub val_miou_proto: Stat,
    pub ratio: Stat,
    pub runs: Vec<SeedResult>,
}

impl Summary {
    fn new(cfg: &TrainConfig, runs: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Summary {
            schema: SUMMARY_SCHEMA,
            variant: cfg.variant,
            k: cfg.k,
            tau: cfg.tau,
            seeds: runs.iter().map(|r| r.seed).collect(),
            primary_miou: col(|r| r.primary_miou),
            val_miou_linear: col(|r| r.val_miou_linear),
            val_miou_proto: col(|r| r.val_miou_proto),
            ratio: col(|r| r.ratio),
            runs,
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn load_result(dir: &Path) -> Option<SeedResult> {
    let text = fs::read_to_string(dir.join(RESULT_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Trains one seed into `dir`: metrics CSV (rewritten after every epoch),
/// periodic and final checkpoints, prototype CSV, then the result marker.
fn run_seed<S: Scalar>(exp: &ExperimentConfig, data: &DataSplits, seed: u64, dir: &Path) -> Result<SeedResult> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    create_dir(dir)?;
    let cfg = &exp.train;
    let meta = RunMeta::new(cfg, seed);
    let every = exp.experiment.checkpoint_every;
    let mut log: Vec<EpochMetrics> = Vec::new();
    let save = |state: &TrainState<S>, path: &Path| -> Result<()> {
        let mut ck = state.to_checkpoint();
        meta.write(&mut ck);
        ck.save(path)
    };
    let metrics_path = dir.join("metrics.csv");
    write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
    let out = train::<S>(cfg, data, seed, |state, m| {
        log.push(*m);
        write_file(&metrics_path, &metrics_csv(&log))?;
        if every > 0 && m.epoch % every == 0 && m.epoch < cfg.epochs {
            save(state, &dir.join(format!("checkpoint_epoch_{:04}.pseg", m.epoch)))?;
        }
        Ok(())
    })?;
    save(&out.state, &dir.join("checkpoint.pseg"))?;
    write_file(&dir.join("prototypes.csv"), &out.state.bank.to_csv())?;
    let warm = out.warmup_losses.iter().map(|l| format!("{l}\n")).collect::<String>();
    write_file(&dir.join("warmup_loss.csv"), &format!("loss\n{warm}"))?;
    let last = out.log.last().expect("epochs >= 1");
    let result = SeedResult::new(seed, cfg.variant, last, out.state.unlabeled_steps);
    write_file(&dir.join(RESULT_FILE), &format!("{}\n", serde_json::to_string_pretty(&result)?))?;
    Ok(result)
}

/// Trains every configured seed under `out` and writes `summary.json`.
/// Seeds whose directory already holds a result are skipped unless `force`.
pub fn run(exp: &ExperimentConfig, out: &Path, force: bool) -> Result<Summary> {
    exp.validate()?;
    create_dir(out)?;
    write_file(&out.join("config.toml"), &exp.to_toml()?)?;
    let mut data = None;
    let mut runs = Vec::new();
    for &seed in &exp.experiment.seeds {
        let dir = seed_dir(out, seed);
        if !force {
            if let Some(r) = load_result(&dir) {
                info!("{}: seed {seed} already complete, skipping", out.display());
                runs.push(r);
                continue;
            }
        }
        if data.is_none() {
            data = Some(DataSplits::generate(&exp.dataset)?);
        }
        let data = data.as_ref().unwrap();
        info!("{}: training seed {seed}", out.display());
        let r = match exp.experiment.precision {
            Precision::F32 => run_seed::<f32>(exp, data, seed, &dir)?,
            Precision::F64 => run_seed::<f64>(exp, data, seed, &dir)?,
        };
        runs.push(r);
    }
    let summary = Summary::new(&exp.train, runs);
    write_file(&out.join("summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    Ok(summary)
}

/// One written sweep table.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub path: PathBuf,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: String,
    /// `None` where the cell failed.
    pub summary: Option<Summary>,
}

fn cell_name(cfg: &TrainConfig) -> String {
    format!("{}_k{}_tau{}", cfg.variant.name(), cfg.k, cfg.tau)
}

fn write_sweep(path: &Path, key: &str, seeds: &[u64], rows: &[SweepRow]) -> Result<()> {
    let mut text = key.to_string();
    for s in seeds {
        text.push_str(&format!(",seed_{s}"));
    }
    text.push_str(",mean,std,linear_mean,proto_mean,ratio_mean,complete\n");
    for row in rows {
        text.push_str(&row.cell);
        match &row.summary {
            Some(s) => {
                for r in &s.runs {
                    text.push_str(&format!(",{}", r.primary_miou));
                }
                text.push_str(&format!(
                    ",{},{},{},{},{},true\n",
                    s.primary_miou.mean, s.primary_miou.std, s.val_miou_linear.mean, s.val_miou_proto.mean, s.ratio.mean
                ));
            }
            None => {
                text.push_str(&",NaN".repeat(seeds.len() + 5));
                text.push_str(",false\n");
            }
        }
    }
    write_file(path, &text)
}

/// Runs the component matrix, the K sweep and the tau sweep. Cells that
/// share a training configuration share one run directory.
pub fn ablate(exp: &ExperimentConfig, out: &Path, force: bool) -> Result<Vec<SweepTable>> {
    exp.validate()?;
    if exp.experiment.seeds.len() < 3 {
        warn!("ablation with fewer than 3 seeds; comparisons are not meaningful");
    }
    create_dir(out)?;
    let cells_dir = out.join("cells");
    let mut done: Vec<(String, Option<Summary>)> = Vec::new();
    let mut run_cell = |cfg: TrainConfig| -> SweepRow {
        let name = cell_name(&cfg);
        if let Some((_, s)) = done.iter().find(|(n, _)| *n == name) {
            return SweepRow {
                cell: name,
                summary: s.clone(),
            };
        }
        let cell_exp = ExperimentConfig {
            train: cfg,
            ..exp.clone()
        };
        let summary = match run(&cell_exp, &cells_dir.join(&name), force) {
            Ok(s) => Some(s),
            Err(e) => {
                warn!("cell {name} failed: {e}");
                None
            }
        };
        done.push((name.clone(), summary.clone()));
        SweepRow { cell: name, summary }
    };

    let base = exp.train.clone();
    let components: Vec<SweepRow> = Variant::ALL
        .iter()
        .map(|&variant| {
            let mut row = run_cell(TrainConfig {
                variant,
                ..base.clone()
            });
            row.cell = variant.name().to_string();
            row
        })
        .collect();
    let k_rows: Vec<SweepRow> = K_SWEEP
        .iter()
        .map(|&k| {
            let mut row = run_cell(TrainConfig {
                variant: Variant::Full,
                k,
                ..base.clone()
            });
            row.cell = k.to_string();
            row
        })
        .collect();
    let tau_rows: Vec<SweepRow> = TAU_SWEEP
        .iter()
        .map(|&tau| {
            let mut row = run_cell(TrainConfig {
                variant: Variant::Full,
                tau,
                ..base.clone()
            });
            row.cell = tau.to_string();
            row
        })
        .collect();

    let seeds = &exp.experiment.seeds;
    let mut tables = Vec::new();
    for (file, key, rows) in [
        ("components.csv", "variant", components),
        ("k_sweep.csv", "k", k_rows),
        ("tau_sweep.csv", "tau", tau_rows),
    ] {
        let path = out.join(file);
        write_sweep(&path, key, seeds, &rows)?;
        if rows.iter().any(|r| r.summary.is_none()) {
            warn!("{} is partial", path.display());
        }
        tables.push(SweepTable { path, rows });
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub schema: u32,
    pub split: Split,
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
    pub val_miou_linear: f64,
    pub val_miou_proto: f64,
    pub discrimination: DiscriminationStats,
    pub tau: f64,
    pub pseudo_label: PseudoLabelQuality,
    pub zero_norm_features: u64,
}

fn eval_typed<S: Scalar>(ck: &Checkpoint, exp: &ExperimentConfig, split: Split) -> Result<EvalOutput> {
    let state = TrainState::<S>::from_checkpoint(ck)?;
    let meta = RunMeta::read(ck)?;
    let samples = exp.dataset.generate_split(split)?;
    let report = state.evaluate(&samples, meta.temperature, meta.eval_pixels_per_class, meta.seed)?;
    let unlabeled = exp.dataset.generate_split(Split::Unlabeled)?;
    let pseudo = pseudo_label_report(&state.teacher.net, &unlabeled, meta.tau)?;
    Ok(EvalOutput {
        schema: SUMMARY_SCHEMA,
        split,
        variant: meta.variant,
        seed: meta.seed,
        epoch: state.epoch,
        val_miou_linear: report.miou_linear,
        val_miou_proto: report.miou_proto,
        discrimination: report.discrimination,
        tau: meta.tau,
        pseudo_label: pseudo,
        zero_norm_features: state.zero_norm_features,
    })
}

/// Evaluates the teacher and bank stored in a checkpoint on `split` of the
/// configured dataset, plus pseudo-label quality on the unlabeled split.
pub fn eval_checkpoint(path: &Path, exp: &ExperimentConfig, split: Split) -> Result<EvalOutput> {
    let ck = Checkpoint::load(path)?;
    exp.dataset.validate()?;
    match ck.scalar("meta.scalar_bits")? as u32 {
        32 => eval_typed::<f32>(&ck, exp, split),
        64 => eval_typed::<f64>(&ck, exp, split),
        b => Err(Error::Checkpoint(format!("unsupported scalar width {b}"))),
    }
}

/// Writes `out/{labeled,unlabeled,val}/sample_XXXXX.bin`; returns the sample count.
pub fn export_dataset(exp: &ExperimentConfig, out: &Path) -> Result<usize> {
    let spec = &exp.dataset;
    spec.validate()?;
    let mut n = 0;
    for (split, name) in [
        (Split::Labeled, "labeled"),
        (Split::Unlabeled, "unlabeled"),
        (Split::Val, "val"),
    ] {
        let dir = out.join(name);
        create_dir(&dir)?;
        for id in spec.ids(split) {
            let sample = spec.generate(id)?;
            let path = dir.join(format!("sample_{id:05}.bin"));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_sample(BufWriter::new(file), &sample, spec.classes).map_err(|e| Error::io(&path, e))?;
            n += 1;
        }
    }
    write_file(
        &out.join("dataset.json"),
        &format!("{}\n", serde_json::to_string_pretty(&json!({ "schema": SUMMARY_SCHEMA, "spec": spec }))?),
    )?;
    Ok(n)
}
