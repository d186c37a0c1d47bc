//! Sectioned key-value experiment configs.
//!
//! Format: `[section]` headers, `key = value` lines, `#` comments. Unknown
//! sections and keys are rejected, and every diagnostic carries the line
//! number it came from. Missing keys fall back to documented defaults, so a
//! minimal config is a dataset plus whatever the run overrides.

use logitreg_core::attacks::{AttackKind, ThreatModel};
use logitreg_core::data::{MixConfig, MixMode, SyntheticKind, SyntheticSpec};
use logitreg_core::evaluation::{AttackSpec, SpsaSpec};
use logitreg_core::models::ModelConfig;
use logitreg_core::objectives::{DefenseKind, ObjectiveConfig, PairingWeightMode};
use logitreg_core::training::{AugmentConfig, TrainingConfig};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

/// Configuration-phase failure; rendered with file context by the caller.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Synthetic {
        spec: SyntheticSpec,
        train_examples: usize,
        test_examples: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: Option<usize>,
    },
}

/// Attacks to run after training, plus their shared seed and SPSA settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationConfig {
    pub attacks: Vec<AttackSpec>,
    pub seed: u64,
    pub spsa: SpsaSpec,
}

/// Fully parsed experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Model shape; input shape and class count come from the dataset.
    pub model: ModelShape,
    pub training: TrainingConfig,
    pub objective: ObjectiveConfig,
    pub threat: Option<ThreatModel>,
    pub evaluation: EvaluationConfig,
    pub mix: MixConfig,
    pub augment: Option<AugmentConfig>,
    pub out_dir: PathBuf,
}

/// Architecture choice before the dataset pins input shape and classes.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelShape {
    Mlp { hidden: Vec<usize> },
    Conv { channels: usize, blocks: usize },
}

impl ModelShape {
    pub fn build(&self, input_shape: Vec<usize>, classes: usize) -> ModelConfig {
        match self {
            ModelShape::Mlp { hidden } => ModelConfig::mlp(input_shape, hidden.clone(), classes),
            ModelShape::Conv { channels, blocks } => {
                ModelConfig::small_conv(input_shape, *channels, *blocks, classes)
            }
        }
    }
}

/// One parsed `key = value` with its source line.
#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
}

#[derive(Debug, Default)]
struct Sections {
    /// section -> key -> entry; section order does not matter.
    map: HashMap<String, HashMap<String, Entry>>,
}

impl Sections {
    fn parse(text: &str) -> Result<Sections> {
        let mut sections = Sections::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return err(format!("line {line_no}: unterminated section header"));
                };
                let name = name.trim().to_string();
                if !KNOWN_SECTIONS.contains(&name.as_str()) {
                    return err(format!("line {line_no}: unknown section [{name}]"));
                }
                sections.map.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {line_no}: expected 'key = value', got '{line}'"));
            };
            let Some(section) = &current else {
                return err(format!("line {line_no}: key outside any [section]"));
            };
            let key = key.trim().to_string();
            let known = section_keys(section);
            if !known.contains(&key.as_str()) {
                return err(format!("line {line_no}: unknown key '{key}' in [{section}]"));
            }
            let entry = Entry {
                line: line_no,
                value: value.trim().to_string(),
            };
            if let Some(prev) = sections
                .map
                .get_mut(section)
                .expect("section inserted")
                .insert(key.clone(), entry)
            {
                return err(format!(
                    "line {line_no}: duplicate key '{key}' in [{section}] (first on line {})",
                    prev.line
                ));
            }
        }
        Ok(sections)
    }

    fn section(&mut self, name: &str) -> SectionView<'_> {
        SectionView {
            name: name.to_string(),
            entries: self.map.get_mut(name),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

const KNOWN_SECTIONS: &[&str] = &[
    "dataset",
    "model",
    "training",
    "objective",
    "threat",
    "evaluation",
    "mix",
    "augment",
    "output",
];

fn section_keys(section: &str) -> &'static [&'static str] {
    match section {
        "dataset" => &[
            "kind",
            "shape",
            "classes",
            "noise",
            "train_examples",
            "test_examples",
            "seed",
            "train_images",
            "train_labels",
            "test_images",
            "test_labels",
        ],
        "model" => &["arch", "hidden", "channels", "blocks"],
        "training" => &[
            "epochs",
            "warmup_epochs",
            "peak_lr",
            "decay_epochs",
            "decay_factor",
            "momentum",
            "weight_decay",
            "decay_biases",
            "batch_size",
            "seed",
        ],
        "objective" => &[
            "kind",
            "alpha",
            "lambda",
            "beta",
            "ratio_constant",
            "pairing_mode",
            "smoothing",
            "smooth_adversarial",
            "attack",
        ],
        "threat" => &["epsilon", "step", "steps", "min", "max"],
        "evaluation" => &["attacks", "seed", "spsa_samples", "spsa_scale", "spsa_subsample"],
        "mix" => &["mode", "a"],
        "augment" => &["pad", "flip"],
        "output" => &["dir"],
        _ => &[],
    }
}

struct SectionView<'a> {
    name: String,
    entries: Option<&'a mut HashMap<String, Entry>>,
}

impl SectionView<'_> {
    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        let entry = self.entries.as_mut()?.get(key)?;
        Some((entry.line, entry.value.clone()))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, value)) => match value.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(_) => err(format!(
                    "line {line}: key '{key}' in [{}] expects {what}, got '{value}'",
                    self.name
                )),
            },
        }
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.parse(key, "a number")
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.parse(key, "a non-negative integer")
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.parse(key, "a non-negative integer")
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, value)) => match value.as_str() {
                "true" => Ok(Some(true)),
                "false" => Ok(Some(false)),
                other => err(format!(
                    "line {line}: key '{key}' in [{}] expects true or false, got '{other}'",
                    self.name
                )),
            },
        }
    }

    fn usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, value)) => {
                if value.is_empty() {
                    return Ok(Some(Vec::new()));
                }
                value
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<usize>().map_err(|_| {
                            ConfigError(format!(
                                "line {line}: key '{key}' expects comma-separated integers, got '{p}'"
                            ))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()
                    .map(Some)
            }
        }
    }

    fn path(&mut self, key: &str) -> Option<(usize, PathBuf)> {
        self.raw(key).map(|(line, v)| (line, PathBuf::from(v)))
    }
}

fn parse_shape(line: usize, value: &str) -> Result<Vec<usize>> {
    let dims: std::result::Result<Vec<usize>, _> =
        value.split('x').map(|p| p.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&v| v > 0) => Ok(d),
        _ => err(format!(
            "line {line}: shape expects dimensions like '1x8x8', got '{value}'"
        )),
    }
}

/// Parse one attack name: `natural`, `fgsm`, `pgd-N`, or `spsa`.
pub fn parse_attack_name(name: &str, spsa: SpsaSpec) -> Result<AttackSpec> {
    match name {
        "natural" => Ok(AttackSpec::Natural),
        "fgsm" => Ok(AttackSpec::Fgsm),
        "spsa" => Ok(AttackSpec::Spsa(spsa)),
        other => {
            if let Some(n) = other.strip_prefix("pgd-") {
                match n.parse::<usize>() {
                    Ok(steps) if steps >= 1 => Ok(AttackSpec::Pgd { steps }),
                    _ => err(format!("bad PGD depth in attack '{other}'")),
                }
            } else {
                err(format!(
                    "unknown attack '{other}' (expected natural, fgsm, pgd-N, spsa)"
                ))
            }
        }
    }
}

fn parse_attack_list(line: usize, value: &str, spsa: SpsaSpec) -> Result<Vec<AttackSpec>> {
    let mut attacks = Vec::new();
    for part in value.split(',') {
        let spec = parse_attack_name(part.trim(), spsa)
            .map_err(|e| ConfigError(format!("line {line}: {e}")))?;
        attacks.push(spec);
    }
    if attacks.is_empty() {
        return err(format!("line {line}: empty attack list"));
    }
    Ok(attacks)
}

/// Parse and cross-validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Parse config text; exposed for tests.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut sections = Sections::parse(text)?;

    let dataset = {
        let mut s = sections.section("dataset");
        let kind = s.raw("kind").map(|(_, v)| v);
        match kind.as_deref() {
            Some("idx") => {
                let mut need = |key: &str| {
                    s.path(key)
                        .map(|(_, p)| p)
                        .ok_or_else(|| ConfigError(format!("[dataset] kind idx requires '{key}'")))
                };
                let train_images = need("train_images")?;
                let train_labels = need("train_labels")?;
                let test_images = need("test_images")?;
                let test_labels = need("test_labels")?;
                let classes = s.usize("classes")?;
                for p in [&train_images, &train_labels, &test_images, &test_labels] {
                    if !p.exists() {
                        return err(format!("[dataset] file does not exist: {}", p.display()));
                    }
                }
                DatasetConfig::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                    classes,
                }
            }
            None | Some("blobs") | Some("rings") => {
                let synthetic_kind = match kind.as_deref() {
                    Some("rings") => SyntheticKind::TwoRings,
                    _ => SyntheticKind::Blobs,
                };
                let shape = match s.raw("shape") {
                    Some((line, v)) => parse_shape(line, &v)?,
                    None => vec![1, 8, 8],
                };
                let classes = s.usize("classes")?.unwrap_or(10);
                let noise = s.f64("noise")?.unwrap_or(0.15);
                DatasetConfig::Synthetic {
                    spec: SyntheticSpec {
                        kind: synthetic_kind,
                        shape,
                        classes,
                        noise,
                    },
                    train_examples: s.usize("train_examples")?.unwrap_or(2000),
                    test_examples: s.usize("test_examples")?.unwrap_or(500),
                    seed: s.u64("seed")?.unwrap_or(0),
                }
            }
            Some(other) => {
                return err(format!(
                    "[dataset] unknown kind '{other}' (expected blobs, rings, idx)"
                ));
            }
        }
    };

    let model = {
        let mut s = sections.section("model");
        let arch = s.raw("arch").map(|(_, v)| v);
        match arch.as_deref() {
            None | Some("mlp") => ModelShape::Mlp {
                hidden: s.usize_list("hidden")?.unwrap_or_else(|| vec![32]),
            },
            Some("conv") => ModelShape::Conv {
                channels: s.usize("channels")?.unwrap_or(8),
                blocks: s.usize("blocks")?.unwrap_or(1),
            },
            Some(other) => {
                return err(format!("[model] unknown arch '{other}' (expected mlp, conv)"))
            }
        }
    };

    let training = {
        let mut s = sections.section("training");
        let d = TrainingConfig::default();
        TrainingConfig {
            epochs: s.usize("epochs")?.unwrap_or(d.epochs),
            warmup_epochs: s.usize("warmup_epochs")?.unwrap_or(d.warmup_epochs),
            peak_lr: s.f64("peak_lr")?.unwrap_or(d.peak_lr),
            decay_epochs: s.usize_list("decay_epochs")?.unwrap_or(d.decay_epochs),
            decay_factor: s.f64("decay_factor")?.unwrap_or(d.decay_factor),
            momentum: s.f64("momentum")?.unwrap_or(d.momentum),
            weight_decay: s.f64("weight_decay")?.unwrap_or(d.weight_decay),
            decay_biases: s.bool("decay_biases")?.unwrap_or(d.decay_biases),
            batch_size: s.usize("batch_size")?.unwrap_or(d.batch_size),
            seed: s.u64("seed")?.unwrap_or(d.seed),
        }
    };

    let objective = {
        let mut s = sections.section("objective");
        let d = ObjectiveConfig::default();
        let kind = match s.raw("kind") {
            None => DefenseKind::Plain,
            Some((line, v)) => match v.as_str() {
                "plain" => DefenseKind::Plain,
                "advtrain" => DefenseKind::AdvTrain,
                "alp" => DefenseKind::Alp,
                "squeeze" => DefenseKind::LogitSqueeze,
                "decoupled" => DefenseKind::Decoupled,
                other => {
                    return err(format!(
                        "line {line}: unknown objective kind '{other}' (expected plain, advtrain, alp, squeeze, decoupled)"
                    ))
                }
            },
        };
        let pairing_mode = match s.raw("pairing_mode") {
            None => d.pairing_mode,
            Some((line, v)) => match v.as_str() {
                "fixed" => PairingWeightMode::Fixed,
                "ratio" => PairingWeightMode::Ratio,
                other => {
                    return err(format!(
                        "line {line}: unknown pairing_mode '{other}' (expected fixed, ratio)"
                    ))
                }
            },
        };
        let attack = match s.raw("attack") {
            None => d.attack,
            Some((line, v)) => match v.as_str() {
                "pgd" => AttackKind::Pgd,
                "fgsm" => AttackKind::Fgsm,
                other => {
                    return err(format!(
                        "line {line}: unknown training attack '{other}' (expected pgd, fgsm)"
                    ))
                }
            },
        };
        ObjectiveConfig {
            kind,
            alpha: s.f64("alpha")?.unwrap_or(d.alpha),
            lambda: s.f64("lambda")?.unwrap_or(d.lambda),
            beta: s.f64("beta")?.unwrap_or(d.beta),
            ratio_constant: s.f64("ratio_constant")?.unwrap_or(d.ratio_constant),
            pairing_mode,
            smoothing: s.f64("smoothing")?.unwrap_or(d.smoothing),
            smooth_adversarial: s.bool("smooth_adversarial")?.unwrap_or(d.smooth_adversarial),
            attack,
        }
    };

    let threat = if sections.has("threat") {
        let mut s = sections.section("threat");
        let epsilon = s.f64("epsilon")?.unwrap_or(0.03);
        let step = s.f64("step")?.unwrap_or(0.0078);
        let steps = s.usize("steps")?.unwrap_or(10);
        let min = s.f64("min")?.unwrap_or(0.0);
        let max = s.f64("max")?.unwrap_or(1.0);
        Some(
            ThreatModel::new(epsilon, step, steps, (min, max))
                .map_err(|e| ConfigError(format!("[threat] {e}")))?,
        )
    } else {
        None
    };

    let evaluation = {
        let mut s = sections.section("evaluation");
        let spsa = SpsaSpec {
            samples_per_step: s.usize("spsa_samples")?.unwrap_or(128),
            perturbation_scale: s.f64("spsa_scale")?.unwrap_or(0.01),
            subsample: s.usize("spsa_subsample")?,
        };
        let attacks = match s.raw("attacks") {
            Some((line, v)) => parse_attack_list(line, &v, spsa)?,
            None => vec![AttackSpec::Natural],
        };
        EvaluationConfig {
            attacks,
            seed: s.u64("seed")?.unwrap_or(0),
            spsa,
        }
    };

    let mix = {
        let mut s = sections.section("mix");
        let mode = match s.raw("mode") {
            None => MixMode::Off,
            Some((line, v)) => match v.as_str() {
                "off" => MixMode::Off,
                "mixup" => MixMode::Mixup,
                "vhmixup" => MixMode::VhMixup,
                other => {
                    return err(format!(
                        "line {line}: unknown mix mode '{other}' (expected off, mixup, vhmixup)"
                    ))
                }
            },
        };
        MixConfig {
            mode,
            a: s.f64("a")?.unwrap_or(1.0),
        }
    };

    let augment = if sections.has("augment") {
        let mut s = sections.section("augment");
        Some(AugmentConfig {
            pad: s.usize("pad")?.unwrap_or(1),
            flip: s.bool("flip")?.unwrap_or(true),
        })
    } else {
        None
    };

    let out_dir = {
        let mut s = sections.section("output");
        s.path("dir").map(|(_, p)| p).unwrap_or_else(|| PathBuf::from("out"))
    };

    let config = ExperimentConfig {
        dataset,
        model,
        training,
        objective,
        threat,
        evaluation,
        mix,
        augment,
        out_dir,
    };
    validate(&config)?;
    Ok(config)
}

fn validate(config: &ExperimentConfig) -> Result<()> {
    if config.objective.requires_adversarial() && config.threat.is_none() {
        return err(
            "adversarial objective requires a [threat] section (epsilon, step, steps)",
        );
    }
    let needs_threat = config
        .evaluation
        .attacks
        .iter()
        .any(|a| !matches!(a, AttackSpec::Natural));
    if needs_threat && config.threat.is_none() {
        return err("evaluation attacks beyond 'natural' require a [threat] section");
    }
    config
        .objective
        .validate()
        .map_err(|e| ConfigError(format!("[objective] {e}")))?;
    config
        .training
        .validate()
        .map_err(|e| ConfigError(format!("[training] {e}")))?;
    config
        .mix
        .validate()
        .map_err(|e| ConfigError(format!("[mix] {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threat_section_echoes_published_constants() {
        let config = parse_config_str(
            "[dataset]\nkind = blobs\n[threat]\nepsilon = 0.03\nstep = 0.0078\nsteps = 10\n",
        )
        .unwrap();
        let t = config.threat.unwrap();
        assert_eq!(t.epsilon(), 0.03);
        assert_eq!(t.step_size(), 0.0078);
        assert_eq!(t.steps(), 10);
        assert_eq!(t.data_range(), (0.0, 1.0));
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let text = "[dataset]\nkind = blobs\n[threat]\nepsilonn = 0.03\n";
        let e = parse_config_str(text).unwrap_err();
        assert!(e.0.contains("line 4"), "{}", e.0);
        assert!(e.0.contains("epsilonn"), "{}", e.0);
    }

    #[test]
    fn adversarial_objective_without_threat_is_inconsistent() {
        let text = "[dataset]\nkind = blobs\n[objective]\nkind = advtrain\n";
        let e = parse_config_str(text).unwrap_err();
        assert!(e.0.contains("threat"), "{}", e.0);
    }

    #[test]
    fn unknown_section_and_bad_types_carry_line_numbers() {
        let e = parse_config_str("[dataset]\nkind = blobs\n[threats]\n").unwrap_err();
        assert!(e.0.contains("line 3") && e.0.contains("[threats]"), "{}", e.0);

        let e = parse_config_str("[training]\nepochs = soon\n").unwrap_err();
        assert!(e.0.contains("line 2") && e.0.contains("epochs"), "{}", e.0);

        let e = parse_config_str("[training]\nepochs = 5\nepochs = 6\n").unwrap_err();
        assert!(e.0.contains("duplicate"), "{}", e.0);
    }

    #[test]
    fn defaults_fill_every_section() {
        let config = parse_config_str("[dataset]\nkind = blobs\n").unwrap();
        assert_eq!(config.training, TrainingConfig::default());
        assert_eq!(config.objective.kind, DefenseKind::Plain);
        assert!(config.threat.is_none());
        assert_eq!(config.evaluation.attacks, vec![AttackSpec::Natural]);
        assert_eq!(config.mix.mode, MixMode::Off);
        assert!(config.augment.is_none());
        assert_eq!(config.out_dir, PathBuf::from("out"));
        match config.dataset {
            DatasetConfig::Synthetic { spec, .. } => {
                assert_eq!(spec.shape, vec![1, 8, 8]);
                assert_eq!(spec.classes, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attack_list_parses_every_form() {
        let text = "[dataset]\nkind = blobs\n[threat]\n[evaluation]\nattacks = natural, fgsm, pgd-10, spsa\nspsa_subsample = 50\n";
        let config = parse_config_str(text).unwrap();
        assert_eq!(config.evaluation.attacks.len(), 4);
        assert_eq!(config.evaluation.attacks[2], AttackSpec::Pgd { steps: 10 });
        match config.evaluation.attacks[3] {
            AttackSpec::Spsa(s) => assert_eq!(s.subsample, Some(50)),
            other => panic!("unexpected {other:?}"),
        }

        let bad = "[dataset]\nkind = blobs\n[evaluation]\nattacks = pgd-zero\n";
        let e = parse_config_str(bad).unwrap_err();
        assert!(e.0.contains("pgd-zero") || e.0.contains("PGD depth"), "{}", e.0);
    }

    #[test]
    fn conv_model_section_parses() {
        let text = "[dataset]\nkind = blobs\n[model]\narch = conv\nchannels = 6\nblocks = 2\n";
        let config = parse_config_str(text).unwrap();
        assert_eq!(
            config.model,
            ModelShape::Conv {
                channels: 6,
                blocks: 2
            }
        );
        let built = config.model.build(vec![1, 8, 8], 10);
        assert_eq!(built.classes, 10);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# experiment\n\n[dataset]\n# synthetic\nkind = blobs\n";
        assert!(parse_config_str(text).is_ok());
    }
}
