//! `mbl`: configuration-driven experiments on miniature vision-language
//! models -- synthetic data generation, base training, modality-targeted
//! debiasing, probe evaluation, and report rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mbl_core::debias::{
    apply_task_vector, compute_task_vector, finetune, run_daudos_with, DosPolarity,
    TaskVectorParams,
};
use mbl_core::eval::{evaluate_model, ReportRow};
use mbl_core::forge::{annotate_gender, annotate_stereotype, Gender};
use mbl_core::models::{freeze_mask, FreezeSetting, Model};
use mbl_core::rng::mix;

use mbl_lab::config::{ExperimentConfig, Method};
use mbl_lab::runner::{run_cell, run_experiment, seed_dataset, seed_probes, train_base};
use mbl_lab::{io, render, LabError};

#[derive(Parser)]
#[command(
    name = "mbl",
    about = "Modality-targeted debiasing laboratory for miniature vision-language models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed list with a single seed
    /// (the MBL_SEED environment variable does the same).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [gen] block.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output dataset file (one record per line).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-annotate gender and stereotype labels of a dataset file;
    /// unknown-gender rows are pruned with a counted warning.
    Annotate {
        /// Input dataset file.
        #[arg(long)]
        input: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual fine-tuning under a freeze setting.
    Cda {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Base checkpoint to debias.
        #[arg(long)]
        base: PathBuf,
        /// Freeze setting: raw | text_only | vision_only | both.
        #[arg(long)]
        setting: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weighted task-vector editing, with fixed strength or random search.
    Taskvector {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        setting: String,
        #[arg(long)]
        out: PathBuf,
        /// Fixed edit intensity (used with --blend; skips the search).
        #[arg(long)]
        alpha: Option<f64>,
        /// Fixed blend toward the original weights.
        #[arg(long)]
        blend: Option<f64>,
        /// Number of random-search trials (overrides the config).
        #[arg(long)]
        search_trials: Option<u32>,
        /// Where to write the search trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Selective fine-tuning on the top-K most stereotypical samples.
    Daudos {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        setting: String,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of the dataset to keep (K = ceil(fraction * N)).
        #[arg(long)]
        k_fraction: Option<f64>,
        /// Score ordering: ascending (default) or descending.
        #[arg(long)]
        dos_polarity: Option<String>,
    },
    /// Evaluate a checkpoint on the probe grid and write a report.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Method label for the report rows.
        #[arg(long, default_value = "raw")]
        method: String,
        /// Setting label for the report rows.
        #[arg(long, default_value = "raw")]
        setting: String,
    },
    /// Run the full experiment matrix: every seed x method x setting.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Base output directory (defaults to the config's output_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render the comparison table and gender-gap charts from report files.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        /// Report files to render.
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Output directory for table.md and the SVG charts.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(arg: &ConfigArg) -> mbl_lab::Result<ExperimentConfig> {
    if let Some(seed) = arg.seed {
        // Same override channel as the environment variable.
        std::env::set_var("MBL_SEED", seed.to_string());
    }
    let text = std::fs::read_to_string(&arg.config).map_err(|source| LabError::Io {
        path: arg.config.clone(),
        source,
    })?;
    ExperimentConfig::from_toml(&text)
}

fn first_seed(config: &ExperimentConfig) -> u64 {
    config.seeds[0]
}

fn load_model(config: &ExperimentConfig, path: &Path) -> mbl_lab::Result<Model> {
    let params = io::read_checkpoint(path)?;
    Ok(Model::from_params(config.archetype, params)?)
}

fn parse_setting(s: &str) -> mbl_lab::Result<FreezeSetting> {
    FreezeSetting::parse(s).map_err(|e| LabError::Validation(e.to_string()))
}

fn run(cli: Cli) -> mbl_lab::Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let data = seed_dataset(&cfg, first_seed(&cfg))?;
            io::write_dataset(&out, &data)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Annotate { input, out } => {
            let (mut samples, pruned) = io::read_dataset(&input)?;
            for s in samples.iter_mut() {
                s.gender = annotate_gender(&s.caption.text());
                if s.gender != Gender::Unknown {
                    s.stereotypical = annotate_stereotype(&s.attributes, s.gender)?;
                }
            }
            let before = samples.len();
            samples.retain(|s| s.gender != Gender::Unknown);
            let newly_pruned = before - samples.len();
            io::write_dataset(&out, &samples)?;
            println!(
                "kept {} samples, pruned {} unknown-gender rows",
                samples.len(),
                pruned + newly_pruned
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let (samples, pruned) = io::read_dataset(&data)?;
            if pruned > 0 {
                eprintln!("warning: pruned {pruned} unknown-gender rows");
            }
            let (model, epochs) = train_base(&cfg, first_seed(&cfg), &samples)?;
            io::write_checkpoint(&out, model.params())?;
            println!("trained for {epochs} epochs, wrote {}", out.display());
        }
        Command::Cda {
            config,
            data,
            base,
            setting,
            out,
        } => {
            let cfg = load_config(&config)?;
            let setting = parse_setting(&setting)?;
            let (samples, _) = io::read_dataset(&data)?;
            let model = load_model(&cfg, &base)?;
            let seed = first_seed(&cfg);
            let (debiased, _) = run_cell(&cfg, seed, Method::Cda, setting, &model, &samples)?;
            io::write_checkpoint(&out, debiased.params())?;
            println!("wrote {}", out.display());
        }
        Command::Taskvector {
            config,
            data,
            base,
            setting,
            out,
            alpha,
            blend,
            search_trials,
            trace,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(trials) = search_trials {
                cfg.search.trials = trials;
            }
            let setting = parse_setting(&setting)?;
            let (samples, _) = io::read_dataset(&data)?;
            let model = load_model(&cfg, &base)?;
            let seed = first_seed(&cfg);
            match (alpha, blend) {
                (Some(alpha), Some(blend)) => {
                    let params = TaskVectorParams::new(alpha, blend)?;
                    let stereo: Vec<_> =
                        samples.iter().filter(|s| s.stereotypical).cloned().collect();
                    let ft = finetune(
                        &model,
                        &stereo,
                        setting,
                        cfg.train.debias_epochs,
                        cfg.train.debias_lr,
                        mix(seed, 0x0CDA),
                    )?;
                    let tv = compute_task_vector(model.params(), ft.params())?;
                    let mask = freeze_mask(setting);
                    let edited = apply_task_vector(model.params(), &tv, &params, &mask)?;
                    io::write_checkpoint(&out, &edited)?;
                    println!(
                        "applied coefficient {:.4}, wrote {}",
                        params.coefficient(),
                        out.display()
                    );
                }
                (None, None) => {
                    let (debiased, tr) =
                        run_cell(&cfg, seed, Method::TaskVector, setting, &model, &samples)?;
                    io::write_checkpoint(&out, debiased.params())?;
                    if let (Some(path), Some(tr)) = (trace.as_ref(), tr.as_ref()) {
                        io::write_trace(path, tr)?;
                    }
                    println!("wrote {}", out.display());
                }
                _ => {
                    return Err(LabError::Validation(
                        "--alpha and --blend must be given together".into(),
                    ))
                }
            }
        }
        Command::Daudos {
            config,
            data,
            base,
            setting,
            out,
            k_fraction,
            dos_polarity,
        } => {
            let cfg = load_config(&config)?;
            let setting = parse_setting(&setting)?;
            let (samples, _) = io::read_dataset(&data)?;
            let model = load_model(&cfg, &base)?;
            let fraction = k_fraction.unwrap_or(cfg.daudos_k_fraction);
            if !(0.0 < fraction && fraction <= 1.0) {
                return Err(LabError::Validation(format!(
                    "k-fraction {fraction} outside (0, 1]"
                )));
            }
            let polarity = match dos_polarity {
                Some(p) => DosPolarity::parse(&p).map_err(|e| LabError::Validation(e.to_string()))?,
                None => cfg.dos_polarity,
            };
            let k = ((samples.len() as f64) * fraction).ceil() as usize;
            let k = k.clamp(1, samples.len());
            let seed = first_seed(&cfg);
            let debiased = run_daudos_with(
                &model,
                &samples,
                k,
                setting,
                polarity,
                cfg.cav_source,
                cfg.train.debias_epochs * cfg.train.daudos_epoch_factor,
                cfg.train.debias_lr,
                mix(seed, 0xDA0D),
            )?;
            io::write_checkpoint(&out, debiased.params())?;
            println!("selected K = {k}, wrote {}", out.display());
        }
        Command::Eval {
            config,
            ckpt,
            out,
            method,
            setting,
        } => {
            let cfg = load_config(&config)?;
            let model = load_model(&cfg, &ckpt)?;
            let probes = seed_probes(&cfg, first_seed(&cfg))?;
            let report = evaluate_model(&model, &probes)?;
            let rows: Vec<ReportRow> = [mbl_core::eval::ProbeKind::OO, mbl_core::eval::ProbeKind::OP]
                .into_iter()
                .map(|kind| ReportRow {
                    setting: setting.clone(),
                    method: method.clone(),
                    kind,
                    cell: *report.cell(kind),
                })
                .collect();
            io::write_report(&out, &rows)?;
            for row in &rows {
                println!(
                    "{} {} {}: ra_m {:.4} ra_f {:.4} ra_avg {:.4} gg {:.4}",
                    row.method,
                    row.setting,
                    row.kind.as_str(),
                    row.cell.ra_m,
                    row.cell.ra_f,
                    row.cell.ra_avg,
                    row.cell.gg
                );
            }
        }
        Command::Run { config, out_dir } => {
            let cfg = load_config(&config)?;
            let base_dir = match (&out_dir, &cfg.output_dir) {
                (Some(dir), _) => dir.clone(),
                (None, Some(dir)) => PathBuf::from(dir),
                (None, None) => {
                    return Err(LabError::Validation(
                        "no output directory: set output_dir in the config or pass --out-dir"
                            .into(),
                    ))
                }
            };
            let summary = run_experiment(&cfg, &base_dir)?;
            println!(
                "run {}: {} report rows, {} of {} cells failed",
                summary.run_dir.display(),
                summary.rows.len(),
                summary.failures.len(),
                summary.cells_total
            );
            for (cell, err) in &summary.failures {
                eprintln!("failed cell {cell}: {err}");
            }
            if !summary.failures.is_empty() {
                return Err(LabError::PartialFailure {
                    failed: summary.failures.len(),
                    total: summary.cells_total,
                });
            }
        }
        Command::Report {
            config,
            reports,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            if reports.is_empty() {
                return Err(LabError::Validation("no report files given".into()));
            }
            let mut rows = Vec::new();
            for path in &reports {
                rows.extend(io::read_report(path)?);
            }
            render::render_into(&rows, &cfg, &out_dir)?;
            println!("rendered {} rows into {}", rows.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
