//! Deterministic minibatch training: momentum SGD with weight decay, a
//! warmup-then-step learning-rate schedule, and per-step adversarial
//! example generation driven by the objective.
//!
//! Training is a pure function of (configs, dataset, seed): batch order,
//! augmentation, mixing, and attack randomness all derive from the master
//! seed with labeled stream names, so reruns are bit-identical.

use crate::attacks::{self, PassCounts, ThreatModel};
use crate::data::{
    self, batch_iter, smooth_labels, Dataset, LabelDistribution, MixConfig, MixMode,
};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::models::{ModelConfig, ModelParams};
use crate::objectives::{self, ObjectiveConfig};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Optimizer and schedule settings. Defaults are the desk-scale schedule;
/// [`TrainingConfig::paper`] restores the full-scale constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    /// Epochs at which the rate divides by `decay_factor`; ascending.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether weight decay also applies to bias parameters.
    pub decay_biases: bool,
    pub batch_size: usize,
    /// Master seed for batch order, augmentation, mixing, and attacks.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            warmup_epochs: 5,
            peak_lr: 0.1,
            decay_epochs: vec![15, 23],
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 2e-4,
            decay_biases: false,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Full-scale schedule: 200 epochs, decays at 100 and 150.
    pub fn paper() -> Self {
        TrainingConfig {
            epochs: 200,
            decay_epochs: vec![100, 150],
            ..TrainingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::invalid(format!("peak lr {} must be > 0", self.peak_lr)));
        }
        if !self.decay_factor.is_finite() || self.decay_factor <= 0.0 {
            return Err(Error::invalid(format!(
                "decay factor {} must be > 0",
                self.decay_factor
            )));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "decay epochs {:?} must be ascending",
                self.decay_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum {} outside [0,1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight decay {} negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear warmup from `peak/10` to `peak` over
/// `warmup_epochs`, then constant with division by `decay_factor` at each
/// decay epoch (the decay applies from the decay epoch itself).
pub fn lr_at_epoch(config: &TrainingConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::invalid(format!(
            "epoch {} out of range for {} epochs",
            epoch, config.epochs
        )));
    }
    if epoch < config.warmup_epochs {
        let start = config.peak_lr / 10.0;
        let t = epoch as f64 / config.warmup_epochs as f64;
        return Ok(start + (config.peak_lr - start) * t);
    }
    let decays = config.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    Ok(config.peak_lr / config.decay_factor.powi(decays as i32))
}

/// Momentum buffers, one per parameter tensor in layout order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn for_params(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: params
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// One momentum-SGD update: `g = grad + wd*theta; v = m*v + g;
/// theta = theta - lr*v`. `grads` align with the parameter layout order.
/// Biases skip weight decay unless `decay_biases` is set.
pub fn momentum_update(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainingConfig,
) -> Result<()> {
    if grads.len() != params.tensors().len() || grads.len() != state.velocity.len() {
        return Err(Error::shape(
            "momentum_update",
            format!(
                "{} grads for {} params with {} velocities",
                grads.len(),
                params.tensors().len(),
                state.velocity.len()
            ),
        ));
    }
    for ((name, theta), (grad, v)) in params
        .iter_mut()
        .zip(grads.iter().zip(state.velocity.iter_mut()))
    {
        if grad.shape() != theta.shape() {
            return Err(Error::shape(
                "momentum_update",
                format!("{name}: grad {:?} vs param {:?}", grad.shape(), theta.shape()),
            ));
        }
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "momentum_update" });
        }
        let decay = if config.decay_biases || !name.ends_with(".bias") {
            config.weight_decay
        } else {
            0.0
        };
        let vd = v.data_mut();
        let td = theta.data_mut();
        for i in 0..vd.len() {
            let g = grad.data()[i] + decay * td[i];
            vd[i] = config.momentum * vd[i] + g;
            td[i] -= lr * vd[i];
        }
    }
    state.step += 1;
    Ok(())
}

/// Padding/flip augmentation settings for the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub objective: ObjectiveConfig,
    /// Required exactly when the objective trains on adversarial examples.
    pub threat: Option<ThreatModel>,
    pub mix: MixConfig,
    pub augment: Option<AugmentConfig>,
}

impl TrainSpec {
    pub fn new(model: ModelConfig, training: TrainingConfig, objective: ObjectiveConfig) -> Self {
        TrainSpec {
            model,
            training,
            objective,
            threat: None,
            mix: MixConfig::default(),
            augment: None,
        }
    }

    pub fn with_threat(mut self, threat: ThreatModel) -> Self {
        self.threat = Some(threat);
        self
    }

    pub fn with_mix(mut self, mix: MixConfig) -> Self {
        self.mix = mix;
        self
    }

    pub fn with_augment(mut self, augment: AugmentConfig) -> Self {
        self.augment = Some(augment);
        self
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.training.validate()?;
        self.objective.validate()?;
        self.mix.validate()?;
        if self.objective.requires_adversarial() && self.threat.is_none() {
            return Err(Error::invalid(
                "objective trains on adversarial examples but no threat model was given",
            ));
        }
        if !self.objective.requires_adversarial() && self.threat.is_some() {
            return Err(Error::invalid(
                "threat model given but the objective never generates adversarial examples",
            ));
        }
        if dataset.classes() != self.model.classes {
            return Err(Error::invalid(format!(
                "dataset has {} classes, model expects {}",
                dataset.classes(),
                self.model.classes
            )));
        }
        let example_len: usize = dataset.example_shape().iter().product();
        if example_len != self.model.input_len() {
            return Err(Error::invalid(format!(
                "dataset examples have {} values, model expects {}",
                example_len,
                self.model.input_len()
            )));
        }
        Ok(())
    }
}

/// One epoch's worth of averaged loss components and bookkeeping. Loss
/// fields are means over the epoch's steps; pass counts are totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub pairing: f64,
    pub regularization: f64,
    pub mean_pairing_weight: f64,
    /// Steps where the ratio coefficient hit the pairing-loss floor.
    pub ratio_clamp_steps: usize,
    /// Accuracy of the clean-term forward pass against the batch's original
    /// labels; with mixing active the inputs are the mixed ones.
    pub clean_accuracy: f64,
    /// Attack-generation passes this epoch.
    pub attack_passes: PassCounts,
    /// Passes spent on the parameter update itself.
    pub update_passes: PassCounts,
}

/// Parameters captured at the end of an epoch.
#[derive(Debug, Clone)]
pub struct TrainingSnapshot {
    pub epoch: usize,
    pub params: ModelParams,
}

/// Full run history: per-epoch records plus post-decay snapshots, taken at
/// the end of each decay epoch (the first epoch trained at the lower rate,
/// where adversarial accuracy tends to peak briefly).
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<TrainingSnapshot>,
}

impl TrainingLog {
    pub fn total_attack_passes(&self) -> PassCounts {
        let mut total = PassCounts::default();
        for r in &self.records {
            total.absorb(r.attack_passes);
        }
        total
    }

    pub fn total_update_passes(&self) -> PassCounts {
        let mut total = PassCounts::default();
        for r in &self.records {
            total.absorb(r.update_passes);
        }
        total
    }
}

/// Train a freshly initialized model. Deterministic in
/// `spec.training.seed`; non-finite losses abort with a diverged error
/// naming the epoch and step.
pub fn train(spec: &TrainSpec, dataset: &Dataset) -> Result<(ModelParams, TrainingLog)> {
    spec.validate(dataset)?;
    let master = spec.training.seed;
    let mut params = ModelParams::init(spec.model.clone(), rng::derive_seed(master, "init"))?;
    let mut state = OptimizerState::for_params(&params);
    let mut log = TrainingLog::default();

    for epoch in 0..spec.training.epochs {
        let lr = lr_at_epoch(&spec.training, epoch)?;
        let shuffle = rng::derive_seed(master, &format!("epoch/{epoch}/shuffle"));
        let batches = batch_iter(dataset, spec.training.batch_size, Some(shuffle))?;

        let mut sums = LossSums::default();
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut attack_passes = PassCounts::default();
        let mut update_passes = PassCounts::default();

        for (step, batch) in batches.iter().enumerate() {
            let outcome = train_step(&mut params, &mut state, spec, dataset.classes(), batch, lr, master, epoch, step)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch,
                        step,
                        source: Box::new(e),
                    },
                    other => other,
                })?;
            sums.absorb(&outcome);
            correct += outcome.correct;
            seen += batch.labels.len();
            attack_passes.absorb(outcome.attack_passes);
            update_passes.absorb(outcome.update_passes);
        }

        let steps = batches.len() as f64;
        log.records.push(EpochRecord {
            epoch,
            lr,
            total_loss: sums.total / steps,
            clean_ce: sums.clean_ce / steps,
            adv_ce: sums.adv_ce / steps,
            pairing: sums.pairing / steps,
            regularization: sums.regularization / steps,
            mean_pairing_weight: sums.pairing_weight / steps,
            ratio_clamp_steps: sums.ratio_clamps,
            clean_accuracy: correct as f64 / seen as f64,
            attack_passes,
            update_passes,
        });
        if spec.training.decay_epochs.contains(&epoch) {
            log.snapshots.push(TrainingSnapshot {
                epoch,
                params: params.clone(),
            });
        }
    }
    Ok((params, log))
}

#[derive(Default)]
struct LossSums {
    total: f64,
    clean_ce: f64,
    adv_ce: f64,
    pairing: f64,
    regularization: f64,
    pairing_weight: f64,
    ratio_clamps: usize,
}

impl LossSums {
    fn absorb(&mut self, o: &StepOutcome) {
        self.total += o.breakdown.total;
        self.clean_ce += o.breakdown.clean_ce;
        self.adv_ce += o.breakdown.adv_ce;
        self.pairing += o.breakdown.pairing;
        self.regularization += o.breakdown.regularization;
        self.pairing_weight += o.breakdown.pairing_weight;
        self.ratio_clamps += o.breakdown.ratio_clamped as usize;
    }
}

struct StepOutcome {
    breakdown: objectives::LossBreakdown,
    correct: usize,
    attack_passes: PassCounts,
    update_passes: PassCounts,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    spec: &TrainSpec,
    classes: usize,
    batch: &data::Batch,
    lr: f64,
    master: u64,
    epoch: usize,
    step: usize,
) -> Result<StepOutcome> {
    let stream = |name: &str| rng::derive_seed(master, &format!("epoch/{epoch}/step/{step}/{name}"));

    let mut x = batch.examples.clone();
    if let Some(aug) = &spec.augment {
        x = data::standard_augment(&x, aug.pad, aug.flip, stream("augment"))?;
    }

    // Smoothing composes before mixing; mixing then blends the smoothed
    // rows. The unsmoothed set is carried alongside so the adversarial term
    // can opt out of smoothing while sharing the same mix weights.
    let smoothed = smooth_labels(&batch.labels, classes, spec.objective.smoothing)?;
    let plain = LabelDistribution::one_hot(&batch.labels, classes)?;

    let (x, clean_targets, adv_targets) = if spec.mix.mode == MixMode::Off {
        (x, smoothed, plain)
    } else {
        let rows = batch.labels.len();
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(&mut rng::rng_from_seed(stream("mix-partner")));
        let xb = x.take_rows(&perm)?;
        let smoothed_b = LabelDistribution::from_probs(smoothed.probs().take_rows(&perm)?)?;
        let plain_b = LabelDistribution::from_probs(plain.probs().take_rows(&perm)?)?;
        let mix_seed = stream("mix");
        // Both calls replay the same weight stream, so images coincide and
        // the two label sets stay mutually consistent.
        let (mixed_x, mixed_smoothed) =
            data::mix_examples((&x, &smoothed), (&xb, &smoothed_b), &spec.mix, mix_seed)?;
        let (_, mixed_plain) =
            data::mix_examples((&x, &plain), (&xb, &plain_b), &spec.mix, mix_seed)?;
        (mixed_x, mixed_smoothed, mixed_plain)
    };
    let adv_targets = if spec.objective.smooth_adversarial {
        clean_targets.clone()
    } else {
        adv_targets
    };

    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let clean_pass = params.forward_on_tape(&mut tape, xc, true)?;
    let mut update_passes = PassCounts {
        forwards: 1,
        backwards: 0,
    };

    let mut attack_passes = PassCounts::default();
    let (adv_logits, adv_pass_nodes) = if spec.objective.requires_adversarial() {
        let threat = spec.threat.as_ref().expect("validated");
        let (adv_x, passes) = attacks::adversarial_examples(
            params,
            &x,
            &adv_targets,
            threat,
            spec.objective.attack,
            stream("attack"),
        )?;
        attack_passes = passes;
        let xa = tape.constant(adv_x);
        let adv_pass = params.forward_on_tape(&mut tape, xa, true)?;
        update_passes.forwards += 1;
        (Some(adv_pass.logits), adv_pass.param_nodes)
    } else {
        (None, Vec::new())
    };

    let (loss_node, breakdown) = objectives::training_loss_on_tape(
        &mut tape,
        clean_pass.logits,
        &clean_targets,
        adv_logits,
        adv_logits.map(|_| &adv_targets),
        &spec.objective,
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }

    let clean_logits = tape.value(clean_pass.logits).clone();
    let grads = tape.backward(loss_node)?;
    update_passes.backwards += 1;

    // Parameters appear as separate leaves in the clean and adversarial
    // passes; their gradients add.
    let mut total_grads: Vec<Tensor> = Vec::with_capacity(params.tensors().len());
    for (i, (_, id)) in clean_pass.param_nodes.iter().enumerate() {
        let mut g = grads
            .grad(*id)
            .ok_or(Error::NonFinite { op: "missing gradient" })?
            .clone();
        if let Some((_, adv_id)) = adv_pass_nodes.get(i) {
            if let Some(ga) = grads.grad(*adv_id) {
                let gd = g.data_mut();
                for (dst, src) in gd.iter_mut().zip(ga.data()) {
                    *dst += src;
                }
            }
        }
        total_grads.push(g);
    }

    momentum_update(params, &total_grads, state, lr, &spec.training)?;

    let preds = clean_logits.argmax_rows();
    let correct = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();

    Ok(StepOutcome {
        breakdown,
        correct,
        attack_passes,
        update_passes,
    })
}
