//! Verb implementations: train, evaluate, transfer, probe, report.
//!
//! Every failure names its pipeline stage. Errors raised while interpreting
//! user input map to exit status 1, anything after that to exit status 2.

use crate::artifacts::{
    self, MaskingDoc, ProbeDoc, ReportDoc, StatsDoc, TransferDoc,
};
use crate::checkpoint;
use crate::config::{parse_attack_name, DatasetConfig, ExperimentConfig};
use crate::render::{self, Format};
use logitreg_core::data::{
    load_idx_dataset, make_synthetic_dataset, Dataset, MixMode, Split,
};
use logitreg_core::evaluation::{
    blackbox_transfer, logit_statistics, masking_probe, pairing_gradient_probe,
    robustness_report, AttackSpec,
};
use logitreg_core::models::{ModelConfig, ModelParams};
use logitreg_core::objectives::DefenseKind;
use logitreg_core::rng;
use logitreg_core::training::{train, TrainSpec};
use std::path::{Path, PathBuf};

/// Failure plus the phase it belongs to; the phase picks the exit status.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Runtime(String),
}

type Result<T> = std::result::Result<T, RunError>;

fn config_err<T>(stage: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(RunError::Config(format!("{stage}: {msg}")))
}

fn runtime_err<T>(stage: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(RunError::Runtime(format!("{stage}: {msg}")))
}

/// Load train and test splits as the config describes them.
pub fn load_dataset(config: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match config {
        DatasetConfig::Synthetic {
            spec,
            train_examples,
            test_examples,
            seed,
        } => {
            let train = make_synthetic_dataset(spec, *train_examples, Split::Train, *seed)
                .or_else(|e| runtime_err("dataset", e))?;
            let test = make_synthetic_dataset(spec, *test_examples, Split::Test, *seed)
                .or_else(|e| runtime_err("dataset", e))?;
            Ok((train, test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => {
            let load = |images: &Path, labels: &Path, split: Split| -> Result<Dataset> {
                let ds = load_idx_dataset(images, labels)
                    .or_else(|e| runtime_err("dataset", e))?
                    .with_split(split);
                match classes {
                    None => Ok(ds),
                    Some(c) => Dataset::new(ds.examples().clone(), ds.labels().to_vec(), *c, split)
                        .or_else(|e| runtime_err("dataset", e)),
                }
            };
            Ok((
                load(train_images, train_labels, Split::Train)?,
                load(test_images, test_labels, Split::Test)?,
            ))
        }
    }
}

/// Row label for rendered tables: objective kind plus smoothing and mix
/// decorations, e.g. `alp+ls0.1+mixup`.
pub fn training_label(config: &ExperimentConfig) -> String {
    let mut label = match config.objective.kind {
        DefenseKind::Plain => "plain",
        DefenseKind::AdvTrain => "advtrain",
        DefenseKind::Alp => "alp",
        DefenseKind::LogitSqueeze => "squeeze",
        DefenseKind::Decoupled => "decoupled",
    }
    .to_string();
    if config.objective.smoothing > 0.0 {
        label.push_str(&format!("+ls{}", config.objective.smoothing));
    }
    match config.mix.mode {
        MixMode::Off => {}
        MixMode::Mixup => label.push_str("+mixup"),
        MixMode::VhMixup => label.push_str("+vhmixup"),
    }
    label
}

fn model_config_for(config: &ExperimentConfig, dataset: &Dataset) -> ModelConfig {
    config
        .model
        .build(dataset.example_shape().to_vec(), dataset.classes())
}

fn checkpoint_model(
    config: &ExperimentConfig,
    dataset: &Dataset,
    path: &Path,
) -> Result<ModelParams> {
    let model = model_config_for(config, dataset);
    let (params, _step) = checkpoint::load_checkpoint(path, &model)
        .or_else(|e| runtime_err("checkpoint", e))?;
    Ok(params)
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .or_else(|e| runtime_err("io", format!("cannot create {}: {e}", out.display())))
}

/// Run evaluation and write `report.json` plus the rendered table; returns
/// the rendered text for stdout.
fn evaluate_and_write(
    params: &ModelParams,
    config: &ExperimentConfig,
    test: &Dataset,
    out: &Path,
    format: Format,
) -> Result<String> {
    let report = robustness_report(
        params,
        test,
        &config.evaluation.attacks,
        config.threat.as_ref(),
        config.evaluation.seed,
    )
    .or_else(|e| runtime_err("evaluate", e))?;
    let doc = ReportDoc::from_report(&training_label(config), &report);
    artifacts::write_json(&out.join("report.json"), &doc)
        .or_else(|e| runtime_err("io", e))?;
    let table = render::render_reports(&[doc], format).or_else(|e| runtime_err("render", e))?;
    artifacts::write_text(
        &out.join(format!("report.{}", format.extension())),
        &table,
    )
    .or_else(|e| runtime_err("io", e))?;
    Ok(table)
}

/// Full pipeline: train, checkpoint, log, evaluate, render.
pub fn cmd_train(config: &ExperimentConfig, format: Format) -> Result<String> {
    let (train_set, test_set) = load_dataset(&config.dataset)?;
    let model = model_config_for(config, &train_set);

    let mut spec = TrainSpec::new(model, config.training.clone(), config.objective.clone())
        .with_mix(config.mix);
    if config.objective.requires_adversarial() {
        // Config validation already guarantees the threat model is present.
        spec = spec.with_threat(config.threat.expect("validated threat"));
    }
    if let Some(augment) = config.augment {
        spec = spec.with_augment(augment);
    }

    let (params, log) = train(&spec, &train_set).or_else(|e| runtime_err("train", e))?;

    let out = &config.out_dir;
    ensure_out_dir(out)?;
    let batches = train_set.len().div_ceil(config.training.batch_size);
    let steps = (log.records.len() * batches) as u64;
    checkpoint::save_checkpoint(&out.join("checkpoint.bin"), &params, steps)
        .or_else(|e| runtime_err("checkpoint", e))?;
    artifacts::write_training_log(&out.join("training_log.jsonl"), &log.records)
        .or_else(|e| runtime_err("io", e))?;
    evaluate_and_write(&params, config, &test_set, out, format)
}

/// Evaluation-only mode against an existing checkpoint; training is skipped
/// and the checkpoint is left untouched.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    format: Format,
) -> Result<String> {
    let (_train_set, test_set) = load_dataset(&config.dataset)?;
    let params = checkpoint_model(config, &test_set, checkpoint_path)?;
    let out = &config.out_dir;
    ensure_out_dir(out)?;
    evaluate_and_write(&params, config, &test_set, out, format)
}

/// Black-box transfer across several checkpoints of the same architecture.
pub fn cmd_transfer(
    config: &ExperimentConfig,
    checkpoint_paths: &[PathBuf],
    attack_name: &str,
    format: Format,
) -> Result<String> {
    if checkpoint_paths.len() < 2 {
        return config_err("transfer", "needs at least two --checkpoint paths");
    }
    let attack = parse_attack_name(attack_name, config.evaluation.spsa)
        .map_err(|e| RunError::Config(format!("transfer: {e}")))?;
    if !matches!(attack, AttackSpec::Natural) && config.threat.is_none() {
        return config_err("transfer", "attack requires a [threat] section in the config");
    }

    let (_train_set, test_set) = load_dataset(&config.dataset)?;
    let mut labels = Vec::with_capacity(checkpoint_paths.len());
    let mut models = Vec::with_capacity(checkpoint_paths.len());
    for path in checkpoint_paths {
        labels.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        );
        models.push(checkpoint_model(config, &test_set, path)?);
    }
    let refs: Vec<&ModelParams> = models.iter().collect();

    let matrix = blackbox_transfer(
        &refs,
        &refs,
        &test_set,
        &attack,
        config.threat.as_ref(),
        config.evaluation.seed,
    )
    .or_else(|e| runtime_err("transfer", e))?;

    let out = &config.out_dir;
    ensure_out_dir(out)?;
    let doc = TransferDoc::from_matrix(&labels, &matrix, config.evaluation.seed);
    artifacts::write_json(&out.join("transfer.json"), &doc)
        .or_else(|e| runtime_err("io", e))?;
    let table = render::render_transfer(&doc, format);
    artifacts::write_text(
        &out.join(format!("transfer.{}", format.extension())),
        &table,
    )
    .or_else(|e| runtime_err("io", e))?;
    Ok(table)
}

/// Examples the probe batch is capped at; keeps SPSA and PGD runs short.
const PROBE_BATCH: usize = 256;

/// PGD depths used when the config's attack list does not pin at least two.
const DEFAULT_PROBE_DEPTHS: [usize; 3] = [1, 5, 10];

/// Gradient-masking, logit-statistics, and pairing-gradient probes.
pub fn cmd_probe(config: &ExperimentConfig, checkpoint_path: &Path) -> Result<String> {
    let Some(threat) = config.threat.as_ref() else {
        return config_err("probe", "requires a [threat] section in the config");
    };
    let (_train_set, test_set) = load_dataset(&config.dataset)?;
    let params = checkpoint_model(config, &test_set, checkpoint_path)?;
    let seed = config.evaluation.seed;

    let mut depths: Vec<usize> = config
        .evaluation
        .attacks
        .iter()
        .filter_map(|a| match a {
            AttackSpec::Pgd { steps } => Some(*steps),
            _ => None,
        })
        .collect();
    depths.sort_unstable();
    depths.dedup();
    if depths.len() < 2 {
        depths = DEFAULT_PROBE_DEPTHS.to_vec();
    }

    let probe_set = test_set
        .take(PROBE_BATCH.min(test_set.len()))
        .or_else(|e| runtime_err("probe", e))?;

    let masking = masking_probe(
        &params,
        &probe_set,
        threat,
        &depths,
        &config.evaluation.spsa,
        seed,
    )
    .or_else(|e| runtime_err("probe", e))?;

    let clean_stats = logit_statistics(&params, &probe_set)
        .or_else(|e| runtime_err("probe", e))?;
    let attack = logitreg_core::attacks::pgd_attack(
        &params,
        probe_set.examples(),
        probe_set.labels(),
        threat,
        rng::derive_seed(seed, "probe/adv"),
    )
    .or_else(|e| runtime_err("probe", e))?;
    let adv_set = Dataset::new(
        attack.adversarial,
        probe_set.labels().to_vec(),
        probe_set.classes(),
        Split::Test,
    )
    .or_else(|e| runtime_err("probe", e))?;
    let adv_stats = logit_statistics(&params, &adv_set)
        .or_else(|e| runtime_err("probe", e))?;

    let clean_logits = params
        .forward_logits(probe_set.examples())
        .or_else(|e| runtime_err("probe", e))?;
    let adv_logits = params
        .forward_logits(adv_set.examples())
        .or_else(|e| runtime_err("probe", e))?;
    let pairing = pairing_gradient_probe(&clean_logits, &adv_logits, &[-1.0, 0.5, 1.0, 2.0])
        .or_else(|e| runtime_err("probe", e))?;

    let doc = ProbeDoc {
        training: training_label(config),
        examples: probe_set.len(),
        seed,
        masking: MaskingDoc::from_probe(&masking),
        clean_logits: StatsDoc::from_stats(&clean_stats),
        adversarial_logits: StatsDoc::from_stats(&adv_stats),
        pairing_checks: ProbeDoc::pairing_from(&pairing),
    };

    let out = &config.out_dir;
    ensure_out_dir(out)?;
    artifacts::write_json(&out.join("probe.json"), &doc)
        .or_else(|e| runtime_err("io", e))?;
    let text = render::render_probe(&doc);
    artifacts::write_text(&out.join("probe.md"), &text)
        .or_else(|e| runtime_err("io", e))?;
    Ok(text)
}

/// Merge stored reports into one table, one row per training method.
pub fn cmd_report(inputs: &[PathBuf], format: Format) -> Result<String> {
    let mut docs = Vec::with_capacity(inputs.len());
    for path in inputs {
        docs.push(
            artifacts::read_json::<ReportDoc>(path)
                .map_err(|e| RunError::Config(format!("report: {e}")))?,
        );
    }
    render::render_reports(&docs, format).or_else(|e| runtime_err("render", e))
}
