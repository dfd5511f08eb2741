//! Command-line front end for the full pipeline: dataset validation and
//! statistics, oversegmentation caching, synthetic data generation,
//! training, evaluation, and report emission.
//!
//! Exit codes: 0 on success, 1 when a run completed but found data
//! problems, 2 on operational errors (bad flags, unreadable files).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use phraseseg::annotation::{
    dataset_stats, load_dataset, load_records, load_scene_dir, save_records, save_scene,
    summary_table, SceneMap,
};
use phraseseg::mask::validate_scene;
use phraseseg::metrics::{compare_reference_stats, render_table, report, to_csv, MetricsReport};
use phraseseg::model::{load_checkpoint, save_checkpoint};
use phraseseg::pipeline::{
    align_predictions, ground_truth_masks, load_partition_dir, prepare_items, PredictionLine,
    RunConfig,
};
use phraseseg::superpoint::{oversegment, save_partition, SuperpointConfig};
use phraseseg::synth::{gen_dataset, gen_scenes, point_features, save_feature_table, SynthConfig};
use phraseseg::training::{save_training_log, train};

#[derive(Parser)]
#[command(name = "phraseseg", version, about = "Phrase-level point cloud segmentation toolkit")]
struct Cli {
    /// Override every seed used by the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output; errors still go to stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Check a record file and its scenes against every invariant.
    Validate {
        /// Record file (one JSON description per line).
        records: PathBuf,
        /// Directory of `*.scene` files.
        scenes: PathBuf,
    },
    /// Corpus statistics of a record file.
    Stats {
        records: PathBuf,
        /// Compare against the published reference dataset statistics.
        #[arg(long)]
        reference: bool,
        /// Write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition scenes into superpoints and cache the result.
    Oversegment {
        /// Directory of `*.scene` files.
        scenes: PathBuf,
        /// Output directory for `*.superpoints` files.
        #[arg(long)]
        out: PathBuf,
        /// Oversegmentation config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// Generator config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Also emit per-scene feature tables of this width.
        #[arg(long)]
        features_dims: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        /// Dataset directory (`records.jsonl` + `scenes/`).
        #[arg(long)]
        data: PathBuf,
        /// Run config (model, loss, schedule, providers) as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log output (line-delimited JSON).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory of cached `*.superpoints` partitions.
        #[arg(long)]
        superpoints: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or external predictions) on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to score.
        #[arg(long, conflicts_with = "predictions")]
        ckpt: Option<PathBuf>,
        /// External predictions (line-delimited JSON, point indices per
        /// phrase) instead of a checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Where to write the metrics report (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Run config for feature providers and superpoints.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        superpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Re-emit a stored metrics report in another format.
    Report {
        /// Metrics report JSON produced by `evaluate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
}

/// Whether the run found data problems (exit 1) or was clean (exit 0).
enum Outcome {
    Clean,
    DataProblems(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::DataProblems(summary)) => {
            eprintln!("{summary}");
            ExitCode::from(1)
        }
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(2)
        }
    }
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
    what: &str,
) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(path) => {
            let raw = fs::read_to_string(path)
                .with_context(|| format!("reading {what} config {}", path.display()))?;
            serde_json::from_str(&raw)
                .with_context(|| format!("parsing {what} config {}", path.display()))
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let quiet = cli.quiet;
    let say = |text: String| {
        if !quiet {
            println!("{text}");
        }
    };
    match cli.command {
        Command::Validate { records, scenes } => {
            let scene_map = load_scene_dir(&scenes)
                .with_context(|| format!("loading scenes from {}", scenes.display()))?;
            let mut problems = 0usize;
            for scene in scene_map.values() {
                for violation in validate_scene(scene) {
                    problems += 1;
                    say(format!(
                        "scene {}: point {:?}: {}",
                        scene.scene_id, violation.point, violation.rule
                    ));
                }
            }
            let (descriptions, violations) = load_dataset(&records, Some(&scene_map))
                .with_context(|| format!("loading records from {}", records.display()))?;
            for violation in &violations {
                problems += 1;
                say(format!(
                    "record line {} ({}): {}",
                    violation.line,
                    violation.description_id.as_deref().unwrap_or("?"),
                    violation.message
                ));
            }
            say(format!(
                "{} descriptions, {} scenes, {problems} violations",
                descriptions.len(),
                scene_map.len()
            ));
            if problems > 0 {
                Ok(Outcome::DataProblems(format!("{problems} violations found")))
            } else {
                Ok(Outcome::Clean)
            }
        }

        Command::Stats {
            records,
            reference,
            out,
        } => {
            let (descriptions, violations) = load_records(&records)
                .with_context(|| format!("loading records from {}", records.display()))?;
            if !violations.is_empty() {
                bail!("{} malformed records; run `validate` first", violations.len());
            }
            let summary = dataset_stats(&descriptions).context("computing statistics")?;
            say(summary_table(&summary).trim_end().to_string());
            if let Some(path) = out {
                let mut text = serde_json::to_string_pretty(&summary)?;
                text.push('\n');
                fs::write(&path, text)
                    .with_context(|| format!("writing summary to {}", path.display()))?;
                say(format!("summary written to {}", path.display()));
            }
            if reference {
                let comparison = compare_reference_stats(&summary);
                for check in &comparison.checks {
                    say(format!(
                        "{:<20} expected {:>10.3} actual {:>10.3} {}",
                        check.name,
                        check.expected,
                        check.actual,
                        if check.within_tolerance { "ok" } else { "MISMATCH" }
                    ));
                }
                if !comparison.matches {
                    return Ok(Outcome::DataProblems(
                        "statistics do not match the reference dataset".into(),
                    ));
                }
            }
            Ok(Outcome::Clean)
        }

        Command::Oversegment {
            scenes,
            out,
            config,
        } => {
            let sp_config: SuperpointConfig = read_json_config(config.as_deref(), "superpoint")?;
            let scene_map = load_scene_dir(&scenes)
                .with_context(|| format!("loading scenes from {}", scenes.display()))?;
            fs::create_dir_all(&out)
                .with_context(|| format!("creating cache dir {}", out.display()))?;
            let fingerprint = sp_config.fingerprint();
            for scene in scene_map.values() {
                let partition = oversegment(scene, &sp_config)
                    .with_context(|| format!("oversegmenting scene {}", scene.scene_id))?;
                let path = out.join(format!("{}.superpoints", scene.scene_id));
                save_partition(&partition, &fingerprint, &path)?;
                say(format!(
                    "{}: {} points -> {} superpoints",
                    scene.scene_id,
                    partition.num_points(),
                    partition.num_superpoints()
                ));
            }
            Ok(Outcome::Clean)
        }

        Command::Synth {
            config,
            out,
            features_dims,
        } => {
            let mut synth_config: SynthConfig = read_json_config(config.as_deref(), "synth")?;
            if let Some(seed) = cli.seed {
                synth_config.seed = seed;
            }
            let scenes_dir = out.join("scenes");
            fs::create_dir_all(&scenes_dir)
                .with_context(|| format!("creating {}", scenes_dir.display()))?;
            let scenes = gen_scenes(&synth_config)?;
            let descriptions = gen_dataset(&synth_config, &scenes)?;
            for scene in &scenes {
                save_scene(scene, &scenes_dir.join(format!("{}.scene", scene.scene_id)))?;
            }
            save_records(&descriptions, &out.join("records.jsonl"))?;
            if let Some(dims) = features_dims {
                let features_dir = out.join("features");
                fs::create_dir_all(&features_dir)?;
                let provider = phraseseg::synth::FeatureProvider::GeometricPointFeatures {
                    dims,
                    seed: synth_config.seed,
                };
                for scene in &scenes {
                    let table = point_features(scene, &provider)?;
                    save_feature_table(&table, &scene.scene_id, &features_dir)?;
                }
            }
            say(format!(
                "wrote {} scenes and {} descriptions to {}",
                scenes.len(),
                descriptions.len(),
                out.display()
            ));
            Ok(Outcome::Clean)
        }

        Command::Train {
            data,
            config,
            out,
            log,
            superpoints,
        } => {
            let mut run_config: RunConfig = read_json_config(config.as_deref(), "run")?;
            if let Some(seed) = cli.seed {
                run_config.schedule.seed = seed;
            }
            let (scene_map, descriptions) = load_data_dir(&data)?;
            let cache = superpoints
                .map(|dir| load_partition_dir(&dir))
                .transpose()?;
            let items = prepare_items(&scene_map, &descriptions, &run_config, cache.as_ref())
                .context("preparing training items")?;
            let (state, train_log) = train(
                &items,
                &run_config.model,
                &run_config.loss,
                &run_config.schedule,
                run_config.optimizer,
            )
            .context("training")?;
            save_checkpoint(&run_config.model, &state, &out)?;
            if let Some(last) = train_log.last() {
                say(format!(
                    "trained {} epochs: loss {:.4}, train mIoU {:.4}",
                    train_log.len(),
                    last.total,
                    last.train_miou
                ));
            }
            if let Some(log_path) = log {
                save_training_log(&train_log, &log_path)?;
                say(format!("log written to {}", log_path.display()));
            }
            say(format!("checkpoint written to {}", out.display()));
            Ok(Outcome::Clean)
        }

        Command::Evaluate {
            data,
            ckpt,
            predictions,
            report: report_path,
            config,
            superpoints,
            format,
        } => {
            let run_config: RunConfig = read_json_config(config.as_deref(), "run")?;
            let (scene_map, descriptions) = load_data_dir(&data)?;
            let records = match (ckpt, predictions) {
                (Some(ckpt_path), None) => {
                    let (model_config, state) = load_checkpoint(&ckpt_path)?;
                    let cache = superpoints
                        .map(|dir| load_partition_dir(&dir))
                        .transpose()?;
                    let mut eval_config = run_config;
                    eval_config.model = model_config;
                    let items =
                        prepare_items(&scene_map, &descriptions, &eval_config, cache.as_ref())?;
                    phraseseg::pipeline::evaluate_items(&items, &eval_config.model, &state)?
                }
                (None, Some(pred_path)) => {
                    let lines = load_prediction_file(&pred_path)?;
                    let gt = ground_truth_masks(&scene_map, &descriptions)?;
                    let aligned = align_predictions(&lines, &descriptions, &scene_map)?;
                    phraseseg::metrics::evaluate(&descriptions, &aligned, &gt)?
                }
                _ => bail!("exactly one of --ckpt or --predictions is required"),
            };
            let metrics_report = report(&records)?;
            let mut text = serde_json::to_string_pretty(&metrics_report)?;
            text.push('\n');
            fs::write(&report_path, text)
                .with_context(|| format!("writing report to {}", report_path.display()))?;
            say(emit_report(&metrics_report, format));
            say(format!("report written to {}", report_path.display()));
            Ok(Outcome::Clean)
        }

        Command::Report { input, format } => {
            let raw = fs::read_to_string(&input)
                .with_context(|| format!("reading report {}", input.display()))?;
            let metrics_report: MetricsReport =
                serde_json::from_str(&raw).context("parsing report")?;
            println!("{}", emit_report(&metrics_report, format));
            Ok(Outcome::Clean)
        }
    }
}

fn emit_report(metrics_report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(metrics_report).trim_end().to_string(),
        ReportFormat::Csv => to_csv(metrics_report).trim_end().to_string(),
        ReportFormat::Structured => {
            serde_json::to_string_pretty(metrics_report).expect("report serialization")
        }
    }
}

/// Load `records.jsonl` + `scenes/` from a dataset directory, failing on
/// any record violation.
fn load_data_dir(dir: &Path) -> Result<(SceneMap, Vec<phraseseg::AnnotatedDescription>)> {
    let scene_map = load_scene_dir(&dir.join("scenes"))
        .with_context(|| format!("loading scenes under {}", dir.display()))?;
    let records_path = dir.join("records.jsonl");
    let (descriptions, violations) = load_dataset(&records_path, Some(&scene_map))
        .with_context(|| format!("loading {}", records_path.display()))?;
    if !violations.is_empty() {
        bail!(
            "{} violations in {}; run `validate` for details",
            violations.len(),
            records_path.display()
        );
    }
    Ok((scene_map, descriptions))
}

fn load_prediction_file(path: &Path) -> Result<Vec<PredictionLine>> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    raw.lines()
        .filter(|line| !line.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("parsing prediction line {}", i + 1))
        })
        .collect()
}
