//! The experiment matrix: for every seed, generate data, train a base model
//! (early-stopped on a training-set resolution target), evaluate the raw
//! baseline, then debias and evaluate every (method, setting) cell. Cell
//! failures are recorded and the run continues.
//!
//! Every artifact path is a pure function of (config digest, seed, method,
//! setting), and everything written is bitwise reproducible from the
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};

use mbl_core::debias::{
    apply_task_vector, compute_task_vector, finetune, finetune_until_resolved, run_cda,
    run_daudos_with, search_hyperparams,
};
use mbl_core::eval::{build_probes, evaluate_model, EvalReport, Probe, ProbeKind, ReportRow};
use mbl_core::forge::{generate_dataset, Sample};
use mbl_core::models::{freeze_mask, FreezeSetting, Model};
use mbl_core::rng::mix;

use crate::config::{ExperimentConfig, Method};
use crate::io;
use crate::{LabError, Result};

// Stream salts for the per-seed derived seeds.
const SALT_DATA: u64 = 0xDA7A;
const SALT_PROBES: u64 = 0xB0BE;
const SALT_INIT: u64 = 0x1217;
const SALT_BASE: u64 = 0x7247;
const SALT_DEBIAS: u64 = 0x0CDA;
const SALT_DAUDOS: u64 = 0xDA0D;
const SALT_SEARCH_PROBES: u64 = 0x5EA7;

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<(String, String)>,
    pub cells_total: usize,
}

pub fn run_dir(config: &ExperimentConfig, base_dir: &Path) -> PathBuf {
    base_dir.join(format!("run_{}", config.digest_hex()))
}

fn cell_paths(run: &Path, seed: u64, method: &str, setting: &str) -> (PathBuf, PathBuf) {
    (
        run.join(format!("reports/s{seed}_{method}_{setting}.jsonl")),
        run.join(format!("ckpt/s{seed}_{method}_{setting}.ckpt")),
    )
}

fn report_rows(setting: &str, method: &str, report: &EvalReport) -> Vec<ReportRow> {
    [ProbeKind::OO, ProbeKind::OP]
        .into_iter()
        .map(|kind| ReportRow {
            setting: setting.to_string(),
            method: method.to_string(),
            kind,
            cell: *report.cell(kind),
        })
        .collect()
}

/// Train the per-seed base model on the generated dataset.
pub fn train_base(config: &ExperimentConfig, seed: u64, data: &[Sample]) -> Result<(Model, usize)> {
    let init = Model::init(config.archetype, mix(seed, SALT_INIT));
    let (model, epochs) = finetune_until_resolved(
        &init,
        data,
        FreezeSetting::Both,
        config.train.lr,
        mix(seed, SALT_BASE),
        config.train.base_target_ra,
        config.train.epochs,
    )?;
    Ok((model, epochs))
}

/// Generate this seed's dataset.
pub fn seed_dataset(config: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut spec = config.gen.clone();
    spec.seed = mix(seed, SALT_DATA).wrapping_add(config.gen.seed);
    Ok(generate_dataset(&spec)?)
}

/// Build this seed's evaluation probes.
pub fn seed_probes(config: &ExperimentConfig, seed: u64) -> Result<Vec<Probe>> {
    Ok(build_probes(mix(seed, SALT_PROBES), config.n_per_cell)?)
}

/// Run one debiasing cell, returning the debiased model and, for the task
/// vector method, the search trace.
pub fn run_cell(
    config: &ExperimentConfig,
    seed: u64,
    method: Method,
    setting: FreezeSetting,
    base: &Model,
    data: &[Sample],
) -> Result<(Model, Option<Vec<mbl_core::debias::SearchTrial>>)> {
    let t = &config.train;
    match method {
        Method::Cda => {
            let model = run_cda(
                base,
                data,
                setting,
                t.debias_epochs,
                t.debias_lr,
                mix(seed, SALT_DEBIAS),
            )?;
            Ok((model, None))
        }
        Method::Daudos => {
            let k = ((data.len() as f64) * config.daudos_k_fraction).ceil() as usize;
            let k = k.clamp(1, data.len());
            let model = run_daudos_with(
                base,
                data,
                k,
                setting,
                config.dos_polarity,
                config.cav_source,
                t.debias_epochs * t.daudos_epoch_factor,
                t.debias_lr,
                mix(seed, SALT_DAUDOS),
            )?;
            Ok((model, None))
        }
        Method::TaskVector => {
            // Fine-tune on the stereotypical subset to obtain the edit
            // direction, then search the edit strength on held-out probes.
            let stereo: Vec<Sample> = data.iter().filter(|s| s.stereotypical).cloned().collect();
            let ft = finetune(
                base,
                &stereo,
                setting,
                t.debias_epochs,
                t.debias_lr,
                mix(seed, SALT_DEBIAS),
            )?;
            let tv = compute_task_vector(base.params(), ft.params())?;
            let search_probes = build_probes(mix(seed, SALT_SEARCH_PROBES), config.n_per_cell)?;
            let mask = freeze_mask(setting);
            let outcome = search_hyperparams(base, &tv, &search_probes, &config.search, &mask)?;
            let edited = apply_task_vector(base.params(), &tv, &outcome.best, &mask)?;
            Ok((base.with_params(edited)?, Some(outcome.trace)))
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<RunSummary> {
    let run = run_dir(config, base_dir);
    for sub in ["data", "ckpt", "reports", "traces", "summary"] {
        let dir = run.join(sub);
        fs::create_dir_all(&dir).map_err(|source| LabError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let mut summary = RunSummary {
        run_dir: run.clone(),
        rows: Vec::new(),
        failures: Vec::new(),
        cells_total: 0,
    };

    for &seed in &config.seeds {
        let data = seed_dataset(config, seed)?;
        io::write_dataset(&run.join(format!("data/s{seed}.jsonl")), &data)?;
        let probes = seed_probes(config, seed)?;

        let (base, _epochs) = match train_base(config, seed, &data) {
            Ok(v) => v,
            Err(e) => {
                summary.cells_total += 1;
                summary
                    .failures
                    .push((format!("s{seed} base"), e.to_string()));
                continue;
            }
        };
        io::write_checkpoint(&run.join(format!("ckpt/s{seed}_base.ckpt")), base.params())?;

        // Raw baseline, once per seed.
        summary.cells_total += 1;
        match evaluate_model(&base, &probes) {
            Ok(report) => {
                let rows = report_rows("raw", "raw", &report);
                io::write_report(&run.join(format!("reports/s{seed}_raw.jsonl")), &rows)?;
                summary.rows.extend(rows);
            }
            Err(e) => summary
                .failures
                .push((format!("s{seed} raw"), e.to_string())),
        }

        for &method in &config.methods {
            for &setting in &config.settings {
                if setting == FreezeSetting::Raw {
                    continue;
                }
                summary.cells_total += 1;
                let cell_name = format!("s{seed} {} {}", method.as_str(), setting.as_str());
                let result = run_cell(config, seed, method, setting, &base, &data)
                    .and_then(|(model, trace)| {
                        let report = evaluate_model(&model, &probes)?;
                        Ok((model, trace, report))
                    });
                match result {
                    Ok((model, trace, report)) => {
                        let (report_path, ckpt_path) =
                            cell_paths(&run, seed, method.as_str(), setting.as_str());
                        let rows = report_rows(setting.as_str(), method.as_str(), &report);
                        io::write_report(&report_path, &rows)?;
                        io::write_checkpoint(&ckpt_path, model.params())?;
                        if let Some(trace) = trace {
                            io::write_trace(
                                &run.join(format!(
                                    "traces/s{seed}_{}_{}.jsonl",
                                    method.as_str(),
                                    setting.as_str()
                                )),
                                &trace,
                            )?;
                        }
                        summary.rows.extend(rows);
                    }
                    Err(e) => summary.failures.push((cell_name, e.to_string())),
                }
            }
        }
    }

    write_manifest(config, &run)?;
    let summary_dir = run.join("summary");
    crate::render::render_into(&summary.rows, config, &summary_dir)?;
    if !summary.failures.is_empty() {
        let mut text = String::new();
        for (cell, err) in &summary.failures {
            text.push_str(&format!("{cell}: {err}\n"));
        }
        let path = run.join("summary/failures.txt");
        fs::write(&path, text).map_err(|source| LabError::Io { path, source })?;
    }
    Ok(summary)
}

fn write_manifest(config: &ExperimentConfig, run: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("digest = \"{}\"\n", config.digest_hex()));
    text.push_str(&format!("archetype = \"{}\"\n", config.archetype.as_str()));
    let methods: Vec<String> = config
        .methods
        .iter()
        .map(|m| format!("\"{}\"", m.as_str()))
        .collect();
    text.push_str(&format!("methods = [{}]\n", methods.join(", ")));
    let settings: Vec<String> = config
        .settings
        .iter()
        .map(|s| format!("\"{}\"", s.as_str()))
        .collect();
    text.push_str(&format!("settings = [{}]\n", settings.join(", ")));
    let seeds: Vec<String> = config.seeds.iter().map(|s| s.to_string()).collect();
    text.push_str(&format!("seeds = [{}]\n", seeds.join(", ")));
    let path = run.join("manifest.toml");
    fs::write(&path, text).map_err(|source| LabError::Io { path, source })
}
