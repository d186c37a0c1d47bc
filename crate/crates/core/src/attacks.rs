//! L-infinity adversarial attacks: FGSM, randomized multi-step PGD, and
//! gradient-free SPSA.
//!
//! All attacks are untargeted, maximizing cross-entropy of the true label,
//! and pure functions of (params, batch, seed). Every returned example is
//! checked against the threat model before the outcome leaves this module:
//! within `epsilon + 1e-9` of the origin in L-infinity and inside the data
//! range.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::objectives::{cross_entropy_on_tape, per_example_cross_entropy};
use crate::data::LabelDistribution;
use crate::graph::Tape;
use crate::rng;
use crate::tensor::Tensor;

/// Slack applied when asserting L-infinity containment of attack outputs.
pub const LINF_TOLERANCE: f64 = 1e-9;

/// L-infinity threat model: perturbation budget, iteration schedule, and the
/// valid input interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatModel {
    epsilon: f64,
    step_size: f64,
    steps: usize,
    data_range: (f64, f64),
}

impl Default for ThreatModel {
    /// Shipped defaults for 8-bit color images scaled to [0,1]: budget 0.03,
    /// step 0.0078, 10 iterations.
    fn default() -> Self {
        ThreatModel {
            epsilon: 0.03,
            step_size: 0.0078,
            steps: 10,
            data_range: (0.0, 1.0),
        }
    }
}

impl ThreatModel {
    pub fn new(epsilon: f64, step_size: f64, steps: usize, data_range: (f64, f64)) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", epsilon)));
        }
        Self::limit_case(epsilon, step_size, steps, data_range)
    }

    /// Construction that admits `epsilon == 0`, for exercising the
    /// zero-budget limit that [`ThreatModel::new`] rejects.
    pub fn limit_case(epsilon: f64, step_size: f64, steps: usize, data_range: (f64, f64)) -> Result<Self> {
        if !epsilon.is_finite() || !step_size.is_finite() || epsilon < 0.0 || step_size < 0.0 {
            return Err(Error::invalid("negative attack magnitudes"));
        }
        if steps == 0 {
            return Err(Error::invalid("iterative attacks need at least one step"));
        }
        if !data_range.0.is_finite() || !data_range.1.is_finite() || data_range.0 >= data_range.1 {
            return Err(Error::invalid(format!(
                "degenerate data range [{}, {}]",
                data_range.0, data_range.1
            )));
        }
        Ok(ThreatModel {
            epsilon,
            step_size,
            steps,
            data_range,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn data_range(&self) -> (f64, f64) {
        self.data_range
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        assert!(steps >= 1);
        self.steps = steps;
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        assert!(step_size > 0.0);
        self.step_size = step_size;
        self
    }
}

/// Forward/backward pass spend of an attack's generation phase. The final
/// success-check forward is evaluation cost and is not counted here.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forwards: usize,
    pub backwards: usize,
}

impl PassCounts {
    /// Fold another tally into this one.
    pub fn absorb(&mut self, other: PassCounts) {
        self.forwards += other.forwards;
        self.backwards += other.backwards;
    }
}

/// Result of running an attack on a batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    /// Per example: post-attack prediction differs from the true label.
    pub success: Vec<bool>,
    /// Per-example cross-entropy at the final iterate.
    pub final_loss: Vec<f64>,
    pub passes: PassCounts,
}

/// PGD starting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PgdInit {
    /// Uniform per-coordinate noise in `[-epsilon, epsilon]`.
    #[default]
    Random,
    /// Start at the clean input.
    Zero,
}

/// Optional PGD behaviors beyond the single-restart default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PgdOptions {
    pub init: PgdInit,
    /// Independent random restarts; the highest-loss result wins per example.
    pub restarts: usize,
    /// Keep the best iterate seen per example instead of the final one.
    pub track_best: bool,
}

impl Default for PgdOptions {
    fn default() -> Self {
        PgdOptions {
            init: PgdInit::Random,
            restarts: 1,
            track_best: false,
        }
    }
}

/// Which gradient-based attack generates training adversaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project onto the intersection of the epsilon-ball around `origin` and the
/// data range: per-coordinate clamp to `[origin - eps, origin + eps]`, then
/// to the range.
pub fn project_linf_ball(candidate: &Tensor, origin: &Tensor, threat: &ThreatModel) -> Result<Tensor> {
    if candidate.shape() != origin.shape() {
        return Err(Error::shape(
            "project_linf_ball",
            format!("{:?} vs {:?}", candidate.shape(), origin.shape()),
        ));
    }
    let eps = threat.epsilon;
    let (low, high) = threat.data_range;
    let data = candidate
        .data()
        .iter()
        .zip(origin.data())
        .map(|(&c, &o)| c.clamp(o - eps, o + eps).clamp(low, high))
        .collect();
    Ok(Tensor::from_parts(candidate.shape().to_vec(), data))
}

fn containment_check(adv: &Tensor, origin: &Tensor, threat: &ThreatModel) -> Result<()> {
    let dist = adv.linf_distance(origin)?;
    if dist > threat.epsilon + LINF_TOLERANCE {
        return Err(Error::invalid(format!(
            "attack escaped the ball: distance {} > epsilon {}",
            dist, threat.epsilon
        )));
    }
    let (low, high) = threat.data_range;
    if adv.data().iter().any(|&v| v < low || v > high) {
        return Err(Error::invalid("attack escaped the data range"));
    }
    Ok(())
}

/// One signed-ascent step from `x` followed by projection.
fn ascend_step(
    x: &Tensor,
    gradient: &Tensor,
    origin: &Tensor,
    step_size: f64,
    threat: &ThreatModel,
) -> Result<Tensor> {
    let stepped = Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(gradient.data())
            .map(|(&xv, &gv)| xv + step_size * sign0(gv))
            .collect(),
    );
    project_linf_ball(&stepped, origin, threat)
}

fn initial_point(origin: &Tensor, threat: &ThreatModel, init: PgdInit, seed: u64) -> Result<Tensor> {
    match init {
        PgdInit::Zero => Ok(origin.clone()),
        PgdInit::Random => {
            let eps = threat.epsilon;
            if eps == 0.0 {
                return Ok(origin.clone());
            }
            let mut r = rng::derived_rng(seed, "attack/init");
            let noised = Tensor::from_parts(
                origin.shape().to_vec(),
                origin
                    .data()
                    .iter()
                    .map(|&v| v + r.gen_range(-eps..eps))
                    .collect(),
            );
            project_linf_ball(&noised, origin, threat)
        }
    }
}

/// Iterated signed-gradient ascent on cross-entropy against `targets`.
/// Costs exactly `steps` forward and `steps` backward passes.
#[allow(clippy::too_many_arguments)]
fn gradient_ascend(
    params: &ModelParams,
    origin: &Tensor,
    targets: &LabelDistribution,
    threat: &ThreatModel,
    steps: usize,
    step_size: f64,
    init: PgdInit,
    track_best: bool,
    seed: u64,
) -> Result<(Tensor, PassCounts)> {
    let mut x = initial_point(origin, threat, init, seed)?;
    let mut passes = PassCounts::default();
    let batch = origin.shape()[0];
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let pass = params.forward_on_tape(&mut tape, xn, false)?;
        let loss = cross_entropy_on_tape(&mut tape, pass.logits, targets)?;
        let grads = tape.backward(loss)?;
        passes.forwards += 1;
        passes.backwards += 1;
        if track_best {
            let losses = per_example_cross_entropy(tape.value(pass.logits), targets)?;
            best = Some(match best.take() {
                None => (x.clone(), losses),
                Some((mut bx, mut bl)) => {
                    let per_example = origin.len() / batch;
                    for i in 0..batch {
                        if losses[i] > bl[i] {
                            bl[i] = losses[i];
                            let span = i * per_example..(i + 1) * per_example;
                            bx.data_mut()[span.clone()].copy_from_slice(&x.data()[span]);
                        }
                    }
                    (bx, bl)
                }
            });
        }
        let g = grads
            .grad(xn)
            .ok_or_else(|| Error::invalid("input gradient missing"))?;
        x = ascend_step(&x, g, origin, step_size, threat)?;
    }
    if let Some((bx, bl)) = best {
        // The final iterate competes against the best recorded one.
        let logits = params.forward_logits(&x)?;
        passes.forwards += 1;
        let losses = per_example_cross_entropy(&logits, targets)?;
        let per_example = origin.len() / batch;
        for i in 0..batch {
            if bl[i] > losses[i] {
                let span = i * per_example..(i + 1) * per_example;
                x.data_mut()[span.clone()].copy_from_slice(&bx.data()[span]);
            }
        }
    }
    Ok((x, passes))
}

/// Score a finished iterate and package the outcome, verifying containment.
fn finish_outcome(
    params: &ModelParams,
    adv: Tensor,
    origin: &Tensor,
    labels: &[usize],
    threat: &ThreatModel,
    passes: PassCounts,
) -> Result<AttackOutcome> {
    containment_check(&adv, origin, threat)?;
    let logits = params.forward_logits(&adv)?;
    let targets = LabelDistribution::one_hot(labels, logits.shape()[1])?;
    let final_loss = per_example_cross_entropy(&logits, &targets)?;
    let predictions = logits.argmax_rows();
    let success = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &l)| p != l)
        .collect();
    Ok(AttackOutcome {
        adversarial: adv,
        success,
        final_loss,
        passes,
    })
}

/// Fast gradient sign method: `x + epsilon * sign(grad)` in one step, then
/// range clamp. Exactly one forward and one backward pass.
pub fn fgsm_attack(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    threat: &ThreatModel,
) -> Result<AttackOutcome> {
    let targets = LabelDistribution::one_hot(labels, params.config().classes)?;
    let (adv, passes) = gradient_ascend(
        params,
        batch,
        &targets,
        threat,
        1,
        threat.epsilon,
        PgdInit::Zero,
        false,
        0,
    )?;
    finish_outcome(params, adv, batch, labels, threat, passes)
}

/// PGD with uniform random initialization and `threat.steps` iterations of
/// `step_size`-scaled signed ascent. Deterministic per seed.
pub fn pgd_attack(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    threat: &ThreatModel,
    seed: u64,
) -> Result<AttackOutcome> {
    pgd_attack_with(params, batch, labels, threat, seed, &PgdOptions::default())
}

/// PGD with explicit init/restart/best-iterate options.
pub fn pgd_attack_with(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    threat: &ThreatModel,
    seed: u64,
    options: &PgdOptions,
) -> Result<AttackOutcome> {
    if options.restarts == 0 {
        return Err(Error::invalid("PGD needs at least one restart"));
    }
    let targets = LabelDistribution::one_hot(labels, params.config().classes)?;
    let batch_size = batch.shape()[0];
    let per_example = batch.len() / batch_size;
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    let mut passes = PassCounts::default();
    for restart in 0..options.restarts {
        let restart_seed = rng::derive_seed(seed, &format!("restart/{}", restart));
        let (adv, p) = gradient_ascend(
            params,
            batch,
            &targets,
            threat,
            threat.steps,
            threat.step_size,
            options.init,
            options.track_best,
            restart_seed,
        )?;
        passes.absorb(p);
        if options.restarts == 1 {
            return finish_outcome(params, adv, batch, labels, threat, passes);
        }
        // Restart selection needs per-example losses at the final iterate.
        let logits = params.forward_logits(&adv)?;
        passes.forwards += 1;
        let losses = per_example_cross_entropy(&logits, &targets)?;
        best = Some(match best.take() {
            None => (adv, losses),
            Some((mut bx, mut bl)) => {
                for i in 0..batch_size {
                    if losses[i] > bl[i] {
                        bl[i] = losses[i];
                        let span = i * per_example..(i + 1) * per_example;
                        bx.data_mut()[span.clone()].copy_from_slice(&adv.data()[span]);
                    }
                }
                (bx, bl)
            }
        });
    }
    let (adv, _) = best.expect("at least one restart ran");
    finish_outcome(params, adv, batch, labels, threat, passes)
}

/// Adversarial examples for training against arbitrary target distributions
/// (smoothed or mixed targets). No success bookkeeping; returns examples and
/// the generation pass counts.
pub(crate) fn adversarial_examples(
    params: &ModelParams,
    batch: &Tensor,
    targets: &LabelDistribution,
    threat: &ThreatModel,
    kind: AttackKind,
    seed: u64,
) -> Result<(Tensor, PassCounts)> {
    let (adv, passes) = match kind {
        AttackKind::Fgsm => gradient_ascend(
            params,
            batch,
            targets,
            threat,
            1,
            threat.epsilon,
            PgdInit::Zero,
            false,
            seed,
        )?,
        AttackKind::Pgd => gradient_ascend(
            params,
            batch,
            targets,
            threat,
            threat.steps,
            threat.step_size,
            PgdInit::Random,
            false,
            seed,
        )?,
    };
    containment_check(&adv, batch, threat)?;
    Ok((adv, passes))
}

/// SPSA gradient estimate of a scalar function by paired random-sign
/// probes: the mean over samples of `(f(x + delta v) - f(x - delta v)) /
/// (2 delta) * v` with Rademacher `v`.
pub fn spsa_gradient_estimate(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::invalid("SPSA needs at least one sample"));
    }
    let mut wrapped = |probe: &Tensor| -> Result<Vec<f64>> { Ok(vec![f(probe)?]) };
    spsa_batched_estimate(&mut wrapped, x, 1, delta, samples, seed)
}

/// Core SPSA estimator over a batch: `eval` returns one loss per example and
/// every example gets its own Rademacher probe signs.
fn spsa_batched_estimate(
    eval: &mut dyn FnMut(&Tensor) -> Result<Vec<f64>>,
    x: &Tensor,
    batch: usize,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<Tensor> {
    if delta <= 0.0 {
        return Err(Error::invalid("SPSA perturbation scale must be > 0"));
    }
    let per_example = x.len() / batch;
    let mut r = rng::derived_rng(seed, "spsa/probes");
    let mut estimate = Tensor::zeros(x.shape());
    let mut plus = x.clone();
    let mut minus = x.clone();
    let mut signs = vec![0.0f64; x.len()];
    for _ in 0..samples {
        for (i, s) in signs.iter_mut().enumerate() {
            *s = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            plus.data_mut()[i] = x.data()[i] + delta * *s;
            minus.data_mut()[i] = x.data()[i] - delta * *s;
        }
        let f_plus = eval(&plus)?;
        let f_minus = eval(&minus)?;
        if f_plus.len() != batch || f_minus.len() != batch {
            return Err(Error::invalid("SPSA eval returned wrong batch size"));
        }
        for b in 0..batch {
            let diff = (f_plus[b] - f_minus[b]) / (2.0 * delta);
            if !diff.is_finite() {
                return Err(Error::NonFinite { op: "spsa" });
            }
            let span = b * per_example..(b + 1) * per_example;
            for (e, s) in estimate.data_mut()[span.clone()].iter_mut().zip(&signs[span]) {
                *e += diff * s;
            }
        }
    }
    let inv = 1.0 / samples as f64;
    Ok(estimate.map(|v| v * inv))
}

/// Gradient-free SPSA attack: estimate the input gradient by paired
/// random-sign evaluations, then ascend and project exactly as PGD does.
/// Uses `2 * samples_per_step` forward passes per step and no backward
/// passes.
pub fn spsa_attack(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    threat: &ThreatModel,
    samples_per_step: usize,
    perturbation_scale: f64,
    seed: u64,
) -> Result<AttackOutcome> {
    if samples_per_step == 0 {
        return Err(Error::invalid("SPSA needs at least one sample per step"));
    }
    let targets = LabelDistribution::one_hot(labels, params.config().classes)?;
    let batch_size = batch.shape()[0];
    let mut x = initial_point(batch, threat, PgdInit::Random, rng::derive_seed(seed, "spsa"))?;
    let mut passes = PassCounts::default();
    for step in 0..threat.steps {
        let mut eval = |probe: &Tensor| -> Result<Vec<f64>> {
            let logits = params.forward_logits(probe)?;
            per_example_cross_entropy(&logits, &targets)
        };
        let step_seed = rng::derive_seed(seed, &format!("spsa/step/{}", step));
        let estimate = spsa_batched_estimate(
            &mut eval,
            &x,
            batch_size,
            perturbation_scale,
            samples_per_step,
            step_seed,
        )?;
        passes.forwards += 2 * samples_per_step;
        x = ascend_step(&x, &estimate, batch, threat.step_size, threat)?;
    }
    finish_outcome(params, x, batch, labels, threat, passes)
}
