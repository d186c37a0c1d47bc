//! Training objectives: cross-entropy, adversarial training, adversarial
//! logit pairing (ALP), logit squeezing, and decoupled pairing with its
//! loss-ratio coefficient.
//!
//! Each loss exists once, as a tape construction; the plain-value entry
//! points wrap constants on a throwaway tape, so numeric behavior cannot
//! drift between training and analysis. Reductions are sum over classes,
//! mean over batch, keeping coefficients batch-size invariant.

use crate::attacks::{self, AttackKind, PassCounts, ThreatModel};
use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::models::ModelParams;
use crate::tensor::Tensor;

/// Coefficient floor guarding the loss-ratio division when clean and
/// adversarial logits coincide.
pub const PAIRING_LOSS_FLOOR: f64 = 1e-8;

/// Defense family selecting which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    /// Cross-entropy on clean examples only.
    Plain,
    /// Weighted clean/adversarial cross-entropy.
    AdvTrain,
    /// Adversarial training plus the L2 logit-pairing term.
    Alp,
    /// Adversarial training plus L2 regularization of logit magnitudes.
    LogitSqueeze,
    /// Adversarial training plus distribution-similarity pairing and
    /// explicit logit-norm regularization, weighted separately.
    Decoupled,
}

/// How the pairing term is weighted against the rest of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingWeightMode {
    /// Constant coefficient lambda.
    Fixed,
    /// Coefficient `ratio_constant * adv_loss / pairing_loss`, recomputed
    /// each step and treated as a constant under differentiation.
    Ratio,
}

/// Full objective description.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: DefenseKind,
    /// Clean-loss weight in [0,1]; the adversarial loss gets `1 - alpha`.
    pub alpha: f64,
    /// Fixed pairing coefficient (used in `Fixed` mode).
    pub lambda: f64,
    /// Explicit logit-regularization weight.
    pub beta: f64,
    /// Target pairing-to-adversarial loss fraction (used in `Ratio` mode).
    pub ratio_constant: f64,
    pub pairing_mode: PairingWeightMode,
    /// Label smoothing strength passed to the data pipeline.
    pub smoothing: f64,
    /// Whether smoothed targets are also used for the adversarial loss term.
    pub smooth_adversarial: bool,
    /// Attack generating the training adversaries.
    pub attack: AttackKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: DefenseKind::Plain,
            alpha: 0.5,
            lambda: 1.0,
            beta: 1e-3,
            ratio_constant: 0.125,
            pairing_mode: PairingWeightMode::Ratio,
            smoothing: 0.0,
            smooth_adversarial: true,
            attack: AttackKind::Pgd,
        }
    }
}

impl ObjectiveConfig {
    pub fn plain() -> Self {
        ObjectiveConfig::default()
    }

    pub fn adv_train(alpha: f64) -> Self {
        ObjectiveConfig {
            kind: DefenseKind::AdvTrain,
            alpha,
            ..ObjectiveConfig::default()
        }
    }

    pub fn alp(alpha: f64) -> Self {
        ObjectiveConfig {
            kind: DefenseKind::Alp,
            alpha,
            ..ObjectiveConfig::default()
        }
    }

    pub fn logit_squeeze(alpha: f64, weight: f64) -> Self {
        ObjectiveConfig {
            kind: DefenseKind::LogitSqueeze,
            alpha,
            beta: weight,
            ..ObjectiveConfig::default()
        }
    }

    pub fn decoupled(alpha: f64, beta: f64) -> Self {
        ObjectiveConfig {
            kind: DefenseKind::Decoupled,
            alpha,
            beta,
            ..ObjectiveConfig::default()
        }
    }

    pub fn with_smoothing(mut self, s: f64) -> Self {
        self.smoothing = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid(format!("lambda {} negative", self.lambda)));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid(format!("beta {} negative", self.beta)));
        }
        if !self.ratio_constant.is_finite() || self.ratio_constant <= 0.0 {
            return Err(Error::invalid(format!(
                "ratio constant {} must be > 0",
                self.ratio_constant
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid(format!(
                "smoothing {} outside [0,1)",
                self.smoothing
            )));
        }
        Ok(())
    }

    /// Whether training under this objective needs adversarial examples.
    pub fn requires_adversarial(&self) -> bool {
        self.kind != DefenseKind::Plain
    }
}

/// Per-component view of one loss evaluation. `total` always reconstitutes
/// as `alpha*clean + (1-alpha)*adv + pairing_weight*pairing +
/// regularization` (weights are the effective ones; plain training stores
/// `alpha = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub pairing: f64,
    pub regularization: f64,
    pub alpha: f64,
    pub pairing_weight: f64,
    /// The ratio coefficient hit the pairing-loss floor this step.
    pub ratio_clamped: bool,
}

impl LossBreakdown {
    pub fn reconstituted(&self) -> f64 {
        self.alpha * self.clean_ce
            + (1.0 - self.alpha) * self.adv_ce
            + self.pairing_weight * self.pairing
            + self.regularization
    }
}

/// Mean cross-entropy between logits and a target distribution:
/// `mean_B of -sum_c p_c log softmax(l)_c`.
pub fn cross_entropy(logits: &Tensor, targets: &LabelDistribution) -> Result<f64> {
    let per = per_example_cross_entropy(logits, targets)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-example cross-entropy, computed stably as
/// `max + log sum exp(z - max) - sum_c p_c z_c`.
pub fn per_example_cross_entropy(logits: &Tensor, targets: &LabelDistribution) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.shape() != targets.probs().shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{:?} vs {:?}", logits.shape(), targets.probs().shape()),
        ));
    }
    let (rows, _cols) = (logits.shape()[0], logits.shape()[1]);
    if rows == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let z = logits.row(r);
        let p = targets.row(r);
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse: f64 = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let dot: f64 = z.iter().zip(p).map(|(&zv, &pv)| pv * zv).sum();
        out.push(max + lse - dot);
    }
    Ok(out)
}

/// Record mean cross-entropy on the tape; gradients flow into `logits`.
pub(crate) fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    targets: &LabelDistribution,
) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape.as_slice() != targets.probs().shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{:?} vs {:?}", shape, targets.probs().shape()),
        ));
    }
    let batch = shape[0];
    let ls = tape.log_softmax(logits)?;
    let p = tape.constant(targets.probs().clone());
    let prod = tape.mul(ls, p)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / batch as f64)
}

/// ALP pairing term on the tape: `mean_B of (1/2) sum_c (l_c - lt_c)^2`.
/// The 1/2 is part of this term's definition; coefficients are applied on
/// top of it.
pub(crate) fn alp_pairing_on_tape(tape: &mut Tape, clean: NodeId, adv: NodeId) -> Result<NodeId> {
    let batch = tape.value(clean).shape()[0];
    let d = tape.sub(clean, adv)?;
    let ssq = tape.sum_sq(d)?;
    tape.scale(ssq, 0.5 / batch as f64)
}

/// ALP pairing term as a value.
pub fn alp_pairing_term(clean_logits: &Tensor, adv_logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(clean_logits.clone());
    let a = tape.constant(adv_logits.clone());
    let node = alp_pairing_on_tape(&mut tape, c, a)?;
    tape.value(node).scalar_value()
}

/// Mean squared logit magnitude on the tape: `mean_B of sum_c l_c^2`.
pub(crate) fn mean_sum_sq_on_tape(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let batch = tape.value(logits).shape()[0];
    let ssq = tape.sum_sq(logits)?;
    tape.scale(ssq, 1.0 / batch as f64)
}

/// Logit squeezing penalty: `weight * mean_B of sum_c l_c^2`.
pub fn logit_squeeze(logits: &Tensor, weight: f64) -> Result<f64> {
    if weight < 0.0 {
        return Err(Error::invalid(format!("squeeze weight {} negative", weight)));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let node = mean_sum_sq_on_tape(&mut tape, l)?;
    Ok(weight * tape.value(node).scalar_value()?)
}

/// Distribution-similarity half of the decoupled objective:
/// `mean_B of CE(softmax(clean) as target, softmax(adv))`. Gradients flow
/// through both logit sets; neither side is detached.
pub(crate) fn softmax_pairing_on_tape(tape: &mut Tape, clean: NodeId, adv: NodeId) -> Result<NodeId> {
    let shape = tape.value(clean).shape();
    if shape != tape.value(adv).shape() || shape.len() != 2 {
        return Err(Error::shape(
            "softmax_pairing",
            format!("{:?} vs {:?}", shape, tape.value(adv).shape()),
        ));
    }
    let batch = shape[0];
    let p = tape.softmax(clean)?;
    let lq = tape.log_softmax(adv)?;
    let prod = tape.mul(p, lq)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / batch as f64)
}

/// Decoupled pairing value: similarity term plus
/// `beta * (mean sum clean^2 + mean sum adv^2)`.
pub fn decoupled_pairing_objective(clean_logits: &Tensor, adv_logits: &Tensor, beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::invalid(format!("beta {} negative", beta)));
    }
    let mut tape = Tape::new();
    let c = tape.constant(clean_logits.clone());
    let a = tape.constant(adv_logits.clone());
    let h = softmax_pairing_on_tape(&mut tape, c, a)?;
    let nc = mean_sum_sq_on_tape(&mut tape, c)?;
    let na = mean_sum_sq_on_tape(&mut tape, a)?;
    let norms = tape.add(nc, na)?;
    let reg = tape.scale(norms, beta)?;
    let total = tape.add(h, reg)?;
    tape.value(total).scalar_value()
}

/// Loss-ratio coefficient `ratio_constant * adv_loss / pairing_loss`,
/// computed outside the graph so no gradient flows through it. When the
/// pairing loss sits below [`PAIRING_LOSS_FLOOR`] the denominator is clamped
/// and the returned flag is set for the caller to log.
pub fn ratio_coefficient(adv_loss: f64, pairing_loss: f64, ratio_constant: f64) -> (f64, bool) {
    let clamped = pairing_loss < PAIRING_LOSS_FLOOR;
    let denom = if clamped { PAIRING_LOSS_FLOOR } else { pairing_loss };
    (ratio_constant * adv_loss / denom, clamped)
}

/// Both sides of the square-expansion identity:
/// `(|l - lt|^2, |l|^2 - 2 l.lt + |lt|^2)`.
pub fn pairing_expansion_check(clean_logits: &Tensor, adv_logits: &Tensor) -> Result<(f64, f64)> {
    if clean_logits.shape() != adv_logits.shape() {
        return Err(Error::shape(
            "pairing_expansion_check",
            format!("{:?} vs {:?}", clean_logits.shape(), adv_logits.shape()),
        ));
    }
    let lhs: f64 = clean_logits
        .data()
        .iter()
        .zip(adv_logits.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let na: f64 = clean_logits.data().iter().map(|v| v * v).sum();
    let nb: f64 = adv_logits.data().iter().map(|v| v * v).sum();
    let dot: f64 = clean_logits
        .data()
        .iter()
        .zip(adv_logits.data())
        .map(|(&a, &b)| a * b)
        .sum();
    Ok((lhs, na - 2.0 * dot + nb))
}

/// Assemble the configured training loss from already-recorded logit nodes.
/// `adv_logits`/`adv_targets` must be present for every kind except plain.
/// Returns the scalar loss node plus the value-level breakdown.
pub fn training_loss_on_tape(
    tape: &mut Tape,
    clean_logits: NodeId,
    clean_targets: &LabelDistribution,
    adv_logits: Option<NodeId>,
    adv_targets: Option<&LabelDistribution>,
    config: &ObjectiveConfig,
) -> Result<(NodeId, LossBreakdown)> {
    config.validate()?;
    let clean_ce_node = cross_entropy_on_tape(tape, clean_logits, clean_targets)?;
    let clean_ce = tape.value(clean_ce_node).scalar_value()?;

    if config.kind == DefenseKind::Plain {
        return Ok((
            clean_ce_node,
            LossBreakdown {
                total: clean_ce,
                clean_ce,
                adv_ce: 0.0,
                pairing: 0.0,
                regularization: 0.0,
                alpha: 1.0,
                pairing_weight: 0.0,
                ratio_clamped: false,
            },
        ));
    }

    let adv_logits = adv_logits
        .ok_or_else(|| Error::invalid("objective requires adversarial logits"))?;
    let adv_targets = adv_targets
        .ok_or_else(|| Error::invalid("objective requires adversarial targets"))?;
    let adv_ce_node = cross_entropy_on_tape(tape, adv_logits, adv_targets)?;
    let adv_ce = tape.value(adv_ce_node).scalar_value()?;

    let clean_part = tape.scale(clean_ce_node, config.alpha)?;
    let adv_part = tape.scale(adv_ce_node, 1.0 - config.alpha)?;
    let base = tape.add(clean_part, adv_part)?;

    let mut pairing = 0.0;
    let mut pairing_weight = 0.0;
    let mut regularization = 0.0;
    let mut ratio_clamped = false;
    let total_node = match config.kind {
        DefenseKind::Plain => unreachable!(),
        DefenseKind::AdvTrain => base,
        DefenseKind::Alp => {
            let pairing_node = alp_pairing_on_tape(tape, clean_logits, adv_logits)?;
            pairing = tape.value(pairing_node).scalar_value()?;
            (pairing_weight, ratio_clamped) = pairing_coefficient(config, adv_ce, pairing);
            let weighted = tape.scale(pairing_node, pairing_weight)?;
            tape.add(base, weighted)?
        }
        DefenseKind::LogitSqueeze => {
            let nc = mean_sum_sq_on_tape(tape, clean_logits)?;
            let na = mean_sum_sq_on_tape(tape, adv_logits)?;
            let norms = tape.add(nc, na)?;
            let reg_node = tape.scale(norms, config.beta)?;
            regularization = tape.value(reg_node).scalar_value()?;
            tape.add(base, reg_node)?
        }
        DefenseKind::Decoupled => {
            let h_node = softmax_pairing_on_tape(tape, clean_logits, adv_logits)?;
            pairing = tape.value(h_node).scalar_value()?;
            (pairing_weight, ratio_clamped) = pairing_coefficient(config, adv_ce, pairing);
            let weighted = tape.scale(h_node, pairing_weight)?;
            let nc = mean_sum_sq_on_tape(tape, clean_logits)?;
            let na = mean_sum_sq_on_tape(tape, adv_logits)?;
            let norms = tape.add(nc, na)?;
            let reg_node = tape.scale(norms, config.beta)?;
            regularization = tape.value(reg_node).scalar_value()?;
            let with_pairing = tape.add(base, weighted)?;
            tape.add(with_pairing, reg_node)?
        }
    };
    let total = tape.value(total_node).scalar_value()?;
    Ok((
        total_node,
        LossBreakdown {
            total,
            clean_ce,
            adv_ce,
            pairing,
            regularization,
            alpha: config.alpha,
            pairing_weight,
            ratio_clamped,
        },
    ))
}

fn pairing_coefficient(config: &ObjectiveConfig, adv_ce: f64, pairing: f64) -> (f64, bool) {
    match config.pairing_mode {
        PairingWeightMode::Fixed => (config.lambda, false),
        PairingWeightMode::Ratio => ratio_coefficient(adv_ce, pairing, config.ratio_constant),
    }
}

/// Value-level objective evaluation: generate this step's adversarial
/// examples (when the kind needs them), run both forwards with parameters
/// held constant, and decompose the loss. Also returns the attack's
/// generation pass counts.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    params: &ModelParams,
    batch: &Tensor,
    clean_targets: &LabelDistribution,
    attack_targets: &LabelDistribution,
    adv_targets: &LabelDistribution,
    threat: Option<&ThreatModel>,
    config: &ObjectiveConfig,
    seed: u64,
) -> Result<(LossBreakdown, PassCounts)> {
    config.validate()?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let clean_pass = params.forward_on_tape(&mut tape, x, false)?;
    if !config.requires_adversarial() {
        let (_, breakdown) =
            training_loss_on_tape(&mut tape, clean_pass.logits, clean_targets, None, None, config)?;
        return Ok((breakdown, PassCounts::default()));
    }
    let threat = threat.ok_or_else(|| Error::invalid("adversarial objective without a threat model"))?;
    let (adv, passes) =
        attacks::adversarial_examples(params, batch, attack_targets, threat, config.attack, seed)?;
    let adv_node = tape.constant(adv);
    let adv_pass = params.forward_on_tape(&mut tape, adv_node, false)?;
    let (_, breakdown) = training_loss_on_tape(
        &mut tape,
        clean_pass.logits,
        clean_targets,
        Some(adv_pass.logits),
        Some(adv_targets),
        config,
    )?;
    Ok((breakdown, passes))
}
