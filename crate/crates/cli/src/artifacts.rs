//! On-disk JSON documents and the training log.
//!
//! Every artifact stores raw counts next to any percentage so downstream
//! tooling never re-rounds. Serialization is timestamp-free; rerunning the
//! same config and seed rewrites every file byte-identically.

use crate::config::ConfigError;
use crate::render::percent;
use logitreg_core::attacks::ThreatModel;
use logitreg_core::evaluation::{MaskingProbe, PairingGradientProbe, RobustnessReport, TransferMatrix};
use logitreg_core::evaluation::LogitStats;
use logitreg_core::training::EpochRecord;
use serde::{Deserialize, Serialize};
use std::path::Path;

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatDoc {
    pub epsilon: f64,
    pub step: f64,
    pub steps: usize,
    pub min: f64,
    pub max: f64,
}

impl ThreatDoc {
    pub fn from_threat(t: &ThreatModel) -> ThreatDoc {
        ThreatDoc {
            epsilon: t.epsilon(),
            step: t.step_size(),
            steps: t.steps(),
            min: t.data_range().0,
            max: t.data_range().1,
        }
    }
}

/// One adversary's row: raw correct count, exact accuracy, and the rendered
/// percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDoc {
    pub attack: String,
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub percent: String,
    pub forward_passes: usize,
    pub backward_passes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Vec<usize>>,
}

/// Serialized robustness report for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    /// Training-method label; becomes the row name in rendered tables.
    pub training: String,
    pub classes: usize,
    pub examples: usize,
    pub seed: u64,
    pub threat: Option<ThreatDoc>,
    pub entries: Vec<EntryDoc>,
}

impl ReportDoc {
    pub fn from_report(training: &str, report: &RobustnessReport) -> ReportDoc {
        ReportDoc {
            training: training.to_string(),
            classes: report.classes,
            examples: report.examples,
            seed: report.seed,
            threat: report.threat.as_ref().map(ThreatDoc::from_threat),
            entries: report
                .entries
                .iter()
                .map(|e| EntryDoc {
                    attack: e.name.clone(),
                    examples: e.examples,
                    correct: (e.accuracy * e.examples as f64).round() as usize,
                    accuracy: e.accuracy,
                    percent: percent(e.accuracy),
                    forward_passes: e.passes.forwards,
                    backward_passes: e.passes.backwards,
                    subsample: e.subsample.clone(),
                })
                .collect(),
        }
    }
}

/// Serialized transfer matrix; `accuracies[source][target]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDoc {
    pub attack: String,
    pub examples: usize,
    pub seed: u64,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub source_seeds: Vec<u64>,
    pub accuracies: Vec<Vec<f64>>,
}

impl TransferDoc {
    pub fn from_matrix(labels: &[String], matrix: &TransferMatrix, seed: u64) -> TransferDoc {
        TransferDoc {
            attack: matrix.attack.to_string(),
            examples: matrix.examples,
            seed,
            sources: labels.to_vec(),
            targets: labels.to_vec(),
            source_seeds: matrix.source_seeds.clone(),
            accuracies: matrix.accuracies.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsDoc {
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl StatsDoc {
    pub fn from_stats(s: &LogitStats) -> StatsDoc {
        StatsDoc {
            mean: s.mean,
            variance: s.variance,
            min: s.min,
            max: s.max,
            bin_edges: s.bin_edges.clone(),
            counts: s.counts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthDoc {
    pub steps: usize,
    pub accuracy: f64,
    pub percent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingDoc {
    pub pgd: Vec<DepthDoc>,
    pub spsa_accuracy: f64,
    pub spsa_percent: String,
    pub spsa_minus_deepest_pgd: f64,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spsa_subsample: Option<Vec<usize>>,
}

impl MaskingDoc {
    pub fn from_probe(p: &MaskingProbe) -> MaskingDoc {
        MaskingDoc {
            pgd: p
                .pgd
                .iter()
                .map(|&(steps, accuracy)| DepthDoc {
                    steps,
                    accuracy,
                    percent: percent(accuracy),
                })
                .collect(),
            spsa_accuracy: p.spsa_accuracy,
            spsa_percent: percent(p.spsa_accuracy),
            spsa_minus_deepest_pgd: p.spsa_minus_deepest_pgd,
            flagged: p.flagged,
            spsa_subsample: p.spsa_subsample.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaDoc {
    pub gamma: f64,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    pub sign_agrees: bool,
}

/// Serialized gradient-masking and logit-geometry probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDoc {
    pub training: String,
    pub examples: usize,
    pub seed: u64,
    pub masking: MaskingDoc,
    pub clean_logits: StatsDoc,
    pub adversarial_logits: StatsDoc,
    /// Pairing-loss scale checks on the probe batch.
    pub pairing_checks: Vec<GammaDoc>,
}

impl ProbeDoc {
    pub fn pairing_from(probe: &PairingGradientProbe) -> Vec<GammaDoc> {
        probe
            .gamma_checks
            .iter()
            .map(|c| GammaDoc {
                gamma: c.gamma,
                analytic: c.analytic,
                finite_difference: c.finite_difference,
                relative_error: c.relative_error,
                sign_agrees: c.sign_agrees,
            })
            .collect()
    }
}

/// One training-log line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLineDoc {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub pairing: f64,
    pub regularization: f64,
    pub mean_pairing_weight: f64,
    pub ratio_clamp_steps: usize,
    pub clean_accuracy: f64,
    pub attack_forwards: usize,
    pub attack_backwards: usize,
    pub update_forwards: usize,
    pub update_backwards: usize,
}

impl LogLineDoc {
    pub fn from_record(r: &EpochRecord) -> LogLineDoc {
        LogLineDoc {
            epoch: r.epoch,
            lr: r.lr,
            total_loss: r.total_loss,
            clean_ce: r.clean_ce,
            adv_ce: r.adv_ce,
            pairing: r.pairing,
            regularization: r.regularization,
            mean_pairing_weight: r.mean_pairing_weight,
            ratio_clamp_steps: r.ratio_clamp_steps,
            clean_accuracy: r.clean_accuracy,
            attack_forwards: r.attack_passes.forwards,
            attack_backwards: r.attack_passes.backwards,
            update_forwards: r.update_passes.forwards,
            update_backwards: r.update_passes.backwards,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| ConfigError(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("cannot parse {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))
}

pub fn write_training_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(&LogLineDoc::from_record(record))
            .map_err(|e| ConfigError(format!("cannot serialize training log: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_text(path, &out)
}
