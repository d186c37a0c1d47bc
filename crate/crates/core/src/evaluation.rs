//! Robustness measurement: white-box accuracy under each attack, black-box
//! transfer matrices, logit statistics, and the gradient-masking and
//! pairing-gradient probes.
//!
//! White-box evaluation and transfer-matrix rows share one generation path,
//! so a matrix diagonal reproduces the white-box number bit-exactly under
//! the same seed.

use crate::attacks::{self, PassCounts, ThreatModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::models::ModelParams;
use crate::objectives;
use crate::rng;
use crate::tensor::Tensor;
use std::fmt;

/// Examples attacked per generation call; bounds tape memory.
const EVAL_CHUNK: usize = 256;

/// Accuracy-point gap beyond which PGD outperforming SPSA flags masking.
pub const MASKING_GAP_POINTS: f64 = 0.02;

/// Default histogram resolution for [`logit_statistics`].
pub const LOGIT_HISTOGRAM_BINS: usize = 20;

/// SPSA evaluation settings. Step count comes from the threat model, same
/// as PGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsaSpec {
    pub samples_per_step: usize,
    pub perturbation_scale: f64,
    /// Evaluate on a fixed-seed subsample of this size when set; chosen
    /// indices are recorded in the report.
    pub subsample: Option<usize>,
}

impl Default for SpsaSpec {
    fn default() -> Self {
        SpsaSpec {
            samples_per_step: 128,
            perturbation_scale: 0.01,
            subsample: None,
        }
    }
}

/// Which adversary to measure against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackSpec {
    /// No perturbation; plain test accuracy.
    Natural,
    Fgsm,
    /// PGD at the given depth; overrides the threat model's step count.
    Pgd { steps: usize },
    Spsa(SpsaSpec),
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Natural => write!(f, "natural"),
            AttackSpec::Fgsm => write!(f, "fgsm"),
            AttackSpec::Pgd { steps } => write!(f, "pgd-{steps}"),
            AttackSpec::Spsa(_) => write!(f, "spsa"),
        }
    }
}

/// Result of one accuracy measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Examples evaluated (the subsample size when one is active).
    pub examples: usize,
    /// Attack-generation cost; the per-example prediction forwards are not
    /// included.
    pub passes: PassCounts,
    /// Dataset indices evaluated when a subsample was active.
    pub subsample: Option<Vec<usize>>,
}

/// One attack's row in a [`RobustnessReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub attack: AttackSpec,
    /// Stable name for renderers ("natural", "fgsm", "pgd-N", "spsa").
    pub name: String,
    pub accuracy: f64,
    pub examples: usize,
    pub passes: PassCounts,
    pub subsample: Option<Vec<usize>>,
}

/// Accuracy per adversary over one dataset, with the evaluation seed and
/// threat model echoed for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub entries: Vec<ReportEntry>,
    pub threat: Option<ThreatModel>,
    pub seed: u64,
    /// Full dataset size the report ran against.
    pub examples: usize,
    pub classes: usize,
}

impl RobustnessReport {
    pub fn accuracy_for(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.accuracy)
    }
}

/// Logit-value statistics over a dataset; variance is the population form.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitStats {
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    /// `bins + 1` edges; together with `counts` a partition of the values.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Source-by-target accuracy under transfer attack.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    /// `accuracies[source][target]`.
    pub accuracies: Vec<Vec<f64>>,
    /// Per-source generation seeds; feeding seed `i` to
    /// [`evaluate_attack`] on model `i` reproduces the diagonal cell.
    pub source_seeds: Vec<u64>,
    pub attack: AttackSpec,
    pub examples: usize,
}

/// Gradient-masking probe: PGD at several depths against gradient-free
/// SPSA.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingProbe {
    /// (steps, accuracy) per configured PGD depth, in given order.
    pub pgd: Vec<(usize, f64)>,
    pub spsa_accuracy: f64,
    /// Negative when the deepest PGD looks stronger than it should; a gap
    /// below `-MASKING_GAP_POINTS` sets the flag.
    pub spsa_minus_deepest_pgd: f64,
    pub flagged: bool,
    pub spsa_subsample: Option<Vec<usize>>,
}

/// One scale-factor check in [`pairing_gradient_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCheck {
    pub gamma: f64,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    /// Analytic and finite-difference values agree in sign (both near zero
    /// also counts).
    pub sign_agrees: bool,
}

/// Pairing-gradient probe output.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingGradientProbe {
    /// Gradient of the pairing term with respect to the clean logits.
    pub analytic_gradient: Tensor,
    pub gamma_checks: Vec<GammaCheck>,
}

fn evaluation_indices(
    dataset: &Dataset,
    spec: &AttackSpec,
    seed: u64,
) -> (Vec<usize>, Option<Vec<usize>>) {
    if let AttackSpec::Spsa(s) = spec {
        if let Some(k) = s.subsample {
            if k < dataset.len() {
                let mut r = rng::derived_rng(seed, "subsample");
                let mut chosen = rand::seq::index::sample(&mut r, dataset.len(), k).into_vec();
                chosen.sort_unstable();
                return (chosen.clone(), Some(chosen));
            }
        }
    }
    ((0..dataset.len()).collect(), None)
}

fn attack_chunk(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    threat: Option<&ThreatModel>,
    seed: u64,
) -> Result<(Tensor, PassCounts)> {
    let need_threat = || {
        threat.ok_or_else(|| {
            Error::invalid(format!("attack '{spec}' needs a threat model but none was given"))
        })
    };
    Ok(match spec {
        AttackSpec::Natural => (x.clone(), PassCounts::default()),
        AttackSpec::Fgsm => {
            let out = attacks::fgsm_attack(params, x, labels, need_threat()?)?;
            (out.adversarial, out.passes)
        }
        AttackSpec::Pgd { steps } => {
            let t = need_threat()?.with_steps(*steps);
            let out = attacks::pgd_attack(params, x, labels, &t, seed)?;
            (out.adversarial, out.passes)
        }
        AttackSpec::Spsa(s) => {
            let out = attacks::spsa_attack(
                params,
                x,
                labels,
                need_threat()?,
                s.samples_per_step,
                s.perturbation_scale,
                seed,
            )?;
            (out.adversarial, out.passes)
        }
    })
}

/// Walk the evaluation set in fixed chunks, generating adversarial
/// examples against `generator` and handing each chunk to `visit`. Both
/// white-box evaluation and transfer rows run through here, which is what
/// makes their numbers comparable bit-for-bit.
fn for_each_attacked_chunk(
    generator: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    spec: &AttackSpec,
    threat: Option<&ThreatModel>,
    seed: u64,
    mut visit: impl FnMut(&[usize], &Tensor) -> Result<()>,
) -> Result<PassCounts> {
    let mut passes = PassCounts::default();
    for (c, chunk) in indices.chunks(EVAL_CHUNK).enumerate() {
        let x = dataset.examples().take_rows(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
        let chunk_seed = rng::derive_seed(seed, &format!("chunk/{c}"));
        let (adv, p) = attack_chunk(generator, &x, &labels, spec, threat, chunk_seed)?;
        passes.absorb(p);
        visit(chunk, &adv)?;
    }
    Ok(passes)
}

/// Measure accuracy of `params` under one attack. Deterministic per seed.
pub fn evaluate_attack(
    params: &ModelParams,
    dataset: &Dataset,
    spec: &AttackSpec,
    threat: Option<&ThreatModel>,
    seed: u64,
) -> Result<EvalOutcome> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation on an empty dataset".into()));
    }
    let (indices, subsample) = evaluation_indices(dataset, spec, seed);
    let mut correct = 0usize;
    let passes = for_each_attacked_chunk(
        params,
        dataset,
        &indices,
        spec,
        threat,
        seed,
        |chunk, adv| {
            let preds = params.predict(adv)?;
            correct += preds
                .iter()
                .zip(chunk.iter().map(|&i| dataset.labels()[i]))
                .filter(|&(p, l)| *p == l)
                .count();
            Ok(())
        },
    )?;
    Ok(EvalOutcome {
        accuracy: correct as f64 / indices.len() as f64,
        examples: indices.len(),
        passes,
        subsample,
    })
}

/// Accuracy-only convenience over [`evaluate_attack`].
pub fn accuracy_under_attack(
    params: &ModelParams,
    dataset: &Dataset,
    spec: &AttackSpec,
    threat: Option<&ThreatModel>,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate_attack(params, dataset, spec, threat, seed)?.accuracy)
}

/// Run a list of attacks against one model; each entry draws its own seed
/// stream from `seed` keyed by the attack name.
pub fn robustness_report(
    params: &ModelParams,
    dataset: &Dataset,
    specs: &[AttackSpec],
    threat: Option<&ThreatModel>,
    seed: u64,
) -> Result<RobustnessReport> {
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let name = spec.to_string();
        let attack_seed = rng::derive_seed(seed, &format!("attack/{name}"));
        let outcome = evaluate_attack(params, dataset, spec, threat, attack_seed)?;
        entries.push(ReportEntry {
            attack: *spec,
            name,
            accuracy: outcome.accuracy,
            examples: outcome.examples,
            passes: outcome.passes,
            subsample: outcome.subsample,
        });
    }
    Ok(RobustnessReport {
        entries,
        threat: threat.cloned(),
        seed,
        examples: dataset.len(),
        classes: dataset.classes(),
    })
}

/// Generate adversarial examples once per source and score every target on
/// them. Cell `[i][i]` equals the white-box accuracy of model `i` under
/// `evaluate_attack` with seed `source_seeds[i]`.
pub fn blackbox_transfer(
    sources: &[&ModelParams],
    targets: &[&ModelParams],
    dataset: &Dataset,
    spec: &AttackSpec,
    threat: Option<&ThreatModel>,
    seed: u64,
) -> Result<TransferMatrix> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::invalid("transfer needs at least one source and one target"));
    }
    let reference = sources[0].config();
    for m in sources.iter().chain(targets) {
        if m.config().input_len() != reference.input_len()
            || m.config().classes != reference.classes
        {
            return Err(Error::invalid(
                "transfer models must share input shape and class count",
            ));
        }
    }
    let mut accuracies = Vec::with_capacity(sources.len());
    let mut source_seeds = Vec::with_capacity(sources.len());
    let mut examples = dataset.len();
    for (i, source) in sources.iter().enumerate() {
        let source_seed = rng::derive_seed(seed, &format!("source/{i}"));
        source_seeds.push(source_seed);
        let (indices, _) = evaluation_indices(dataset, spec, source_seed);
        examples = indices.len();
        let mut correct = vec![0usize; targets.len()];
        for_each_attacked_chunk(
            source,
            dataset,
            &indices,
            spec,
            threat,
            source_seed,
            |chunk, adv| {
                for (j, target) in targets.iter().enumerate() {
                    let preds = target.predict(adv)?;
                    correct[j] += preds
                        .iter()
                        .zip(chunk.iter().map(|&i| dataset.labels()[i]))
                        .filter(|&(p, l)| *p == l)
                        .count();
                }
                Ok(())
            },
        )?;
        accuracies.push(
            correct
                .into_iter()
                .map(|c| c as f64 / indices.len() as f64)
                .collect(),
        );
    }
    Ok(TransferMatrix {
        accuracies,
        source_seeds,
        attack: *spec,
        examples,
    })
}

/// Logit-value statistics with the default histogram resolution.
pub fn logit_statistics(params: &ModelParams, dataset: &Dataset) -> Result<LogitStats> {
    logit_statistics_with_bins(params, dataset, LOGIT_HISTOGRAM_BINS)
}

/// Mean, population variance, extrema, and a uniform-bin histogram over
/// every logit the model produces on the dataset.
pub fn logit_statistics_with_bins(
    params: &ModelParams,
    dataset: &Dataset,
    bins: usize,
) -> Result<LogitStats> {
    if dataset.is_empty() {
        return Err(Error::Dataset("logit statistics of an empty dataset".into()));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut values = Vec::with_capacity(dataset.len() * dataset.classes());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = dataset.examples().take_rows(chunk)?;
        let logits = params.forward_logits(&x)?;
        values.extend_from_slice(logits.data());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    // Degenerate span still yields a well-formed partition around the value.
    let (lo, hi) = if max > min { (min, max) } else { (min - 0.5, min + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let bin_edges = (0..=bins).map(|b| lo + width * b as f64).collect();
    Ok(LogitStats {
        mean,
        variance,
        min,
        max,
        bin_edges,
        counts,
    })
}

/// Compare PGD at several depths against gradient-free SPSA. Needs at
/// least two PGD depths so depth sensitivity itself is visible. SPSA
/// accuracy more than [`MASKING_GAP_POINTS`] below the deepest PGD flags
/// suspected gradient masking; SPSA above PGD never flags.
pub fn masking_probe(
    params: &ModelParams,
    dataset: &Dataset,
    threat: &ThreatModel,
    pgd_steps: &[usize],
    spsa: &SpsaSpec,
    seed: u64,
) -> Result<MaskingProbe> {
    if pgd_steps.len() < 2 {
        return Err(Error::invalid(
            "masking probe needs at least two PGD depths",
        ));
    }
    let mut pgd = Vec::with_capacity(pgd_steps.len());
    for &steps in pgd_steps {
        let acc = accuracy_under_attack(
            params,
            dataset,
            &AttackSpec::Pgd { steps },
            Some(threat),
            rng::derive_seed(seed, &format!("pgd/{steps}")),
        )?;
        pgd.push((steps, acc));
    }
    let spsa_outcome = evaluate_attack(
        params,
        dataset,
        &AttackSpec::Spsa(*spsa),
        Some(threat),
        rng::derive_seed(seed, "spsa"),
    )?;
    let deepest = pgd
        .iter()
        .max_by_key(|(steps, _)| *steps)
        .expect("at least two depths")
        .1;
    let gap = spsa_outcome.accuracy - deepest;
    Ok(MaskingProbe {
        pgd,
        spsa_accuracy: spsa_outcome.accuracy,
        spsa_minus_deepest_pgd: gap,
        flagged: gap < -MASKING_GAP_POINTS,
        spsa_subsample: spsa_outcome.subsample,
    })
}

/// Check the pairing term's gradient structure. Returns the autodiff
/// gradient with respect to the clean logits, and for each `gamma` the
/// derivative of the pairing term under a shared logit scale `gamma`
/// against a central finite difference.
pub fn pairing_gradient_probe(
    clean_logits: &Tensor,
    adv_logits: &Tensor,
    gammas: &[f64],
) -> Result<PairingGradientProbe> {
    if clean_logits.shape() != adv_logits.shape() || clean_logits.rank() != 2 {
        return Err(Error::shape(
            "pairing_gradient_probe",
            format!("{:?} vs {:?}", clean_logits.shape(), adv_logits.shape()),
        ));
    }
    let batch = clean_logits.shape()[0] as f64;

    let mut tape = Tape::new();
    let c = tape.leaf(clean_logits.clone());
    let a = tape.constant(adv_logits.clone());
    let node = objectives::alp_pairing_on_tape(&mut tape, c, a)?;
    let grads = tape.backward(node)?;
    let analytic_gradient = grads.grad(c).expect("clean side is tracked").clone();

    let pairing_at = |gamma: f64| -> Result<f64> {
        let cs = clean_logits.map(|v| gamma * v);
        let as_ = adv_logits.map(|v| gamma * v);
        objectives::alp_pairing_term(&cs, &as_)
    };
    let sum_sq_diff: f64 = clean_logits
        .data()
        .iter()
        .zip(adv_logits.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let mut gamma_checks = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        // d/dgamma of gamma^2/(2B) * sum (l - lt)^2.
        let analytic = gamma * sum_sq_diff / batch;
        let h = 1e-4 * gamma.abs().max(1.0);
        let finite_difference = (pairing_at(gamma + h)? - pairing_at(gamma - h)?) / (2.0 * h);
        let relative_error =
            (analytic - finite_difference).abs() / analytic.abs().max(1.0);
        let sign_agrees = (analytic.abs() < 1e-9 && finite_difference.abs() < 1e-9)
            || analytic.signum() == finite_difference.signum();
        gamma_checks.push(GammaCheck {
            gamma,
            analytic,
            finite_difference,
            relative_error,
            sign_agrees,
        });
    }
    Ok(PairingGradientProbe {
        analytic_gradient,
        gamma_checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, Split, SyntheticSpec};
    use crate::models::ModelConfig;

    fn blob_set(classes: usize, n: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec::blobs(vec![1, 4, 4], classes, 0.08);
        make_synthetic_dataset(&spec, n, Split::Test, seed).unwrap()
    }

    fn threat() -> ThreatModel {
        ThreatModel::new(0.06, 0.02, 5, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn natural_spec_equals_plain_accuracy() {
        let dataset = blob_set(2, 60, 5);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![8], 2), 1).unwrap();
        let natural =
            accuracy_under_attack(&params, &dataset, &AttackSpec::Natural, None, 0).unwrap();
        let preds = params.predict(dataset.examples()).unwrap();
        let manual = preds
            .iter()
            .zip(dataset.labels())
            .filter(|(p, l)| p == l)
            .count() as f64
            / dataset.len() as f64;
        assert_eq!(natural, manual);
    }

    #[test]
    fn untrained_ten_class_model_sits_at_chance() {
        let dataset = blob_set(10, 1000, 7);
        for model_seed in [0, 1] {
            let params =
                ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![12], 10), model_seed)
                    .unwrap();
            let acc =
                accuracy_under_attack(&params, &dataset, &AttackSpec::Natural, None, 0).unwrap();
            assert!(
                (acc - 0.10).abs() <= 0.03,
                "seed {model_seed}: accuracy {acc} not chance-level"
            );
        }
    }

    #[test]
    fn non_natural_attacks_require_threat_model() {
        let dataset = blob_set(2, 10, 5);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![4], 2), 1).unwrap();
        for spec in [
            AttackSpec::Fgsm,
            AttackSpec::Pgd { steps: 3 },
            AttackSpec::Spsa(SpsaSpec::default()),
        ] {
            assert!(accuracy_under_attack(&params, &dataset, &spec, None, 0).is_err());
        }
    }

    #[test]
    fn evaluation_is_deterministic_per_seed() {
        let dataset = blob_set(2, 50, 5);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![8], 2), 1).unwrap();
        let spec = AttackSpec::Pgd { steps: 4 };
        let a = evaluate_attack(&params, &dataset, &spec, Some(&threat()), 3).unwrap();
        let b = evaluate_attack(&params, &dataset, &spec, Some(&threat()), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transfer_diagonal_reproduces_white_box_bit_exactly() {
        let dataset = blob_set(2, 40, 5);
        let m0 = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![8], 2), 1).unwrap();
        let m1 = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![6], 2), 2).unwrap();
        let spec = AttackSpec::Pgd { steps: 4 };
        let t = threat();
        let matrix =
            blackbox_transfer(&[&m0, &m1], &[&m0, &m1], &dataset, &spec, Some(&t), 9).unwrap();
        for (i, m) in [&m0, &m1].iter().enumerate() {
            let white = accuracy_under_attack(m, &dataset, &spec, Some(&t), matrix.source_seeds[i])
                .unwrap();
            assert_eq!(matrix.accuracies[i][i], white, "diagonal {i}");
        }
    }

    #[test]
    fn identity_attack_fills_matrix_with_natural_accuracy() {
        let dataset = blob_set(2, 30, 5);
        let m0 = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![8], 2), 1).unwrap();
        let m1 = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![6], 2), 2).unwrap();
        let matrix =
            blackbox_transfer(&[&m0, &m1], &[&m0, &m1], &dataset, &AttackSpec::Natural, None, 0)
                .unwrap();
        for (j, target) in [&m0, &m1].iter().enumerate() {
            let natural =
                accuracy_under_attack(target, &dataset, &AttackSpec::Natural, None, 0).unwrap();
            assert_eq!(matrix.accuracies[0][j], natural);
            assert_eq!(matrix.accuracies[1][j], natural);
        }
    }

    #[test]
    fn transfer_rejects_incompatible_models() {
        let dataset = blob_set(2, 10, 5);
        let m0 = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![4], 2), 1).unwrap();
        let m1 = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![4], 3), 2).unwrap();
        assert!(blackbox_transfer(&[&m0], &[&m1], &dataset, &AttackSpec::Natural, None, 0).is_err());
    }

    /// Model with zero weights and a fixed bias: every example produces the
    /// same logit row.
    fn constant_logit_model(bias: &[f64]) -> ModelParams {
        let classes = bias.len();
        let config = ModelConfig::mlp(vec![1, 4, 4], vec![], classes);
        let tensors = vec![
            (
                "fc0.weight".to_string(),
                Tensor::zeros(&[16, classes]),
            ),
            (
                "fc0.bias".to_string(),
                Tensor::new(vec![classes], bias.to_vec()).unwrap(),
            ),
        ];
        ModelParams::from_tensors(config, tensors).unwrap()
    }

    #[test]
    fn logit_stats_hand_values() {
        let dataset = blob_set(2, 25, 5);
        let params = constant_logit_model(&[1.0, 3.0]);
        let stats = logit_statistics(&params, &dataset).unwrap();
        assert!((stats.mean - 2.0).abs() < 1e-12);
        assert!((stats.variance - 1.0).abs() < 1e-12);
        assert_eq!(stats.min, 1.0);
        assert_eq!(stats.max, 3.0);
        assert_eq!(stats.counts.iter().sum::<usize>(), 25 * 2);
        assert_eq!(stats.bin_edges.len(), stats.counts.len() + 1);

        let constant = constant_logit_model(&[2.0, 2.0]);
        let stats = logit_statistics(&constant, &dataset).unwrap();
        assert_eq!(stats.variance, 0.0);
        assert_eq!(stats.counts.iter().sum::<usize>(), 25 * 2);
    }

    #[test]
    fn histogram_partitions_all_values() {
        let dataset = blob_set(3, 40, 6);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![8], 3), 4).unwrap();
        let stats = logit_statistics_with_bins(&params, &dataset, 7).unwrap();
        assert_eq!(stats.counts.iter().sum::<usize>(), 40 * 3);
        assert_eq!(stats.bin_edges.len(), 8);
        assert!(stats.bin_edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn masking_probe_zero_budget_has_no_flag() {
        let dataset = blob_set(2, 30, 5);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![8], 2), 1).unwrap();
        // With a zero-budget threat every attack is the identity, so all
        // accuracies coincide.
        let t = ThreatModel::limit_case(0.0, 0.0, 2, (0.0, 1.0)).unwrap();
        let spsa = SpsaSpec {
            samples_per_step: 4,
            ..SpsaSpec::default()
        };
        let probe = masking_probe(&params, &dataset, &t, &[1, 3], &spsa, 0).unwrap();
        assert_eq!(probe.spsa_minus_deepest_pgd, 0.0);
        assert!(!probe.flagged);
        assert_eq!(probe.pgd[0].1, probe.pgd[1].1);
    }

    #[test]
    fn masking_probe_needs_two_depths() {
        let dataset = blob_set(2, 10, 5);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![4], 2), 1).unwrap();
        let err = masking_probe(&params, &dataset, &threat(), &[10], &SpsaSpec::default(), 0);
        assert!(err.is_err());
    }

    #[test]
    fn spsa_subsample_indices_are_recorded_and_deterministic() {
        let dataset = blob_set(2, 50, 5);
        let params = ModelParams::init(ModelConfig::mlp(vec![1, 4, 4], vec![4], 2), 1).unwrap();
        let spec = AttackSpec::Spsa(SpsaSpec {
            samples_per_step: 2,
            subsample: Some(10),
            ..SpsaSpec::default()
        });
        let t = ThreatModel::new(0.05, 0.02, 1, (0.0, 1.0)).unwrap();
        let a = evaluate_attack(&params, &dataset, &spec, Some(&t), 3).unwrap();
        let b = evaluate_attack(&params, &dataset, &spec, Some(&t), 3).unwrap();
        assert_eq!(a.subsample, b.subsample);
        let ids = a.subsample.unwrap();
        assert_eq!(ids.len(), 10);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.examples, 10);
    }

    #[test]
    fn pairing_probe_matches_hand_derivatives() {
        let clean = Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap();
        let adv = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let probe = pairing_gradient_probe(&clean, &adv, &[-1.0, 0.5, 1.0, 2.0]).unwrap();
        assert_eq!(probe.analytic_gradient.data(), &[2.0, -2.0]);
        let by_gamma: Vec<f64> = probe.gamma_checks.iter().map(|c| c.analytic).collect();
        assert_eq!(by_gamma, vec![-8.0, 4.0, 8.0, 16.0]);
        for check in &probe.gamma_checks {
            assert!(check.relative_error < 1e-6, "gamma {}: {}", check.gamma, check.relative_error);
            assert!(check.sign_agrees);
        }
    }

    #[test]
    fn pairing_probe_identical_logits_is_flat() {
        let l = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let probe = pairing_gradient_probe(&l, &l, &[-1.0, 1.0, 2.0]).unwrap();
        assert!(probe.analytic_gradient.data().iter().all(|&g| g == 0.0));
        for check in &probe.gamma_checks {
            assert_eq!(check.analytic, 0.0);
            assert!(check.finite_difference.abs() < 1e-9);
            assert!(check.sign_agrees);
        }
    }

    #[test]
    fn pgd_accuracy_non_increasing_in_depth_on_trained_model() {
        use crate::objectives::ObjectiveConfig;
        use crate::training::{train, TrainSpec, TrainingConfig};
        let train_set = make_synthetic_dataset(
            &SyntheticSpec::blobs(vec![1, 4, 4], 2, 0.08),
            120,
            Split::Train,
            5,
        )
        .unwrap();
        let spec = TrainSpec::new(
            ModelConfig::mlp(vec![1, 4, 4], vec![8], 2),
            TrainingConfig {
                epochs: 10,
                warmup_epochs: 2,
                decay_epochs: vec![],
                batch_size: 40,
                ..TrainingConfig::default()
            },
            ObjectiveConfig::plain(),
        );
        let (params, _) = train(&spec, &train_set).unwrap();
        let test_set = blob_set(2, 80, 5);
        let t = ThreatModel::new(0.08, 0.02, 1, (0.0, 1.0)).unwrap();
        // Median accuracy over five seeds per depth.
        let median_at = |steps: usize| {
            let mut accs: Vec<f64> = (0..5)
                .map(|s| {
                    accuracy_under_attack(
                        &params,
                        &test_set,
                        &AttackSpec::Pgd { steps },
                        Some(&t),
                        s,
                    )
                    .unwrap()
                })
                .collect();
            accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            accs[2]
        };
        let shallow = median_at(1);
        let mid = median_at(5);
        let deep = median_at(20);
        assert!(shallow >= mid - 1e-12, "{shallow} vs {mid}");
        assert!(mid >= deep - 1e-12, "{mid} vs {deep}");
    }

    #[test]
    fn white_box_ordering_pgd_below_fgsm_below_natural() {
        use crate::objectives::ObjectiveConfig;
        use crate::training::{train, TrainSpec, TrainingConfig};
        let train_set = make_synthetic_dataset(
            &SyntheticSpec::blobs(vec![1, 4, 4], 2, 0.08),
            120,
            Split::Train,
            5,
        )
        .unwrap();
        let spec = TrainSpec::new(
            ModelConfig::mlp(vec![1, 4, 4], vec![8], 2),
            TrainingConfig {
                epochs: 10,
                warmup_epochs: 2,
                decay_epochs: vec![],
                batch_size: 40,
                ..TrainingConfig::default()
            },
            ObjectiveConfig::plain(),
        );
        let (params, _) = train(&spec, &train_set).unwrap();
        let test_set = blob_set(2, 80, 5);
        let t = ThreatModel::new(0.08, 0.02, 10, (0.0, 1.0)).unwrap();
        let median_acc = |attack: &AttackSpec| {
            let mut accs: Vec<f64> = (0..5)
                .map(|s| accuracy_under_attack(&params, &test_set, attack, Some(&t), s).unwrap())
                .collect();
            accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            accs[2]
        };
        let natural =
            accuracy_under_attack(&params, &test_set, &AttackSpec::Natural, None, 0).unwrap();
        let fgsm = median_acc(&AttackSpec::Fgsm);
        let pgd = median_acc(&AttackSpec::Pgd { steps: 10 });
        assert!(pgd <= fgsm + 1e-12, "pgd {pgd} vs fgsm {fgsm}");
        assert!(fgsm <= natural + 1e-12, "fgsm {fgsm} vs natural {natural}");
    }
}
