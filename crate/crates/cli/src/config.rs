//! Line-oriented `key = value` run configuration with dotted section
//! prefixes. Every key has a default; unknown keys are hard errors so typos
//! never pass silently.

use ssg_core::attack::{ClipMode, InitMode, NeuronOrder, StopRule};
use std::path::{Path, PathBuf};

/// Which defenses `defend` applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefenseMode {
    Threshold,
    Evm,
    Both,
}

/// Full run configuration; field groups mirror the library modules.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,

    // data.*
    pub data_classes: usize,
    pub data_per_class: usize,
    pub data_image_side: usize,
    pub data_source_classes: usize,
    pub data_target_classes: usize,
    pub data_train_per_class: usize,
    pub data_holdout_per_class: usize,
    pub data_images: Option<PathBuf>,
    pub data_labels: Option<PathBuf>,

    // teacher.*
    pub teacher_hidden: Vec<usize>,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_batch_size: usize,
    pub teacher_holdout_per_class: usize,

    // retrain.*
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    pub retrain_batch_size: usize,
    pub retrain_tune_from_layer: Option<usize>,
    pub retrain_n_new_layers: usize,
    pub retrain_new_layer_width: Option<usize>,
    pub retrain_reject_pool: usize,

    // attack.*
    pub attack_k: usize,
    pub attack_alpha: f64,
    pub attack_beta: f64,
    pub attack_gamma: f64,
    pub attack_target_value: f64,
    pub attack_init_mode: InitMode,
    pub attack_clip: ClipMode,
    pub attack_confidence_threshold: f64,
    pub attack_neuron_order: NeuronOrder,
    pub attack_stop: StopRule,
    pub attack_dump_crafted: bool,

    // defense.*
    pub defense_safety_factor: f64,
    pub defense_tail_size: usize,
    pub defense_delta: f64,
    pub defense_coverage: Option<f64>,
    pub defense_mode: DefenseMode,

    // baseline.*
    pub baseline_n: usize,

    // sweep.* (values stay raw text; the axis decides how to parse them)
    pub sweep_axis: String,
    pub sweep_values: String,
    pub sweep_repetitions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("./out"),
            workers: 0,
            data_classes: 10,
            data_per_class: 30,
            data_image_side: 28,
            data_source_classes: 5,
            data_target_classes: 5,
            data_train_per_class: 20,
            data_holdout_per_class: 5,
            data_images: None,
            data_labels: None,
            teacher_hidden: vec![512, 256],
            teacher_epochs: 30,
            teacher_lr: 1e-3,
            teacher_batch_size: 32,
            teacher_holdout_per_class: 5,
            retrain_epochs: 100,
            retrain_lr: 1e-3,
            retrain_batch_size: 32,
            retrain_tune_from_layer: None,
            retrain_n_new_layers: 0,
            retrain_new_layer_width: None,
            retrain_reject_pool: 0,
            attack_k: 2000,
            attack_alpha: 0.1,
            attack_beta: 0.01,
            attack_gamma: 1.0,
            attack_target_value: 1000.0,
            attack_init_mode: InitMode::Blank,
            attack_clip: ClipMode::UnitRange,
            attack_confidence_threshold: 0.99,
            attack_neuron_order: NeuronOrder::Sequential,
            attack_stop: StopRule::Exhaust,
            attack_dump_crafted: false,
            defense_safety_factor: 1.5,
            defense_tail_size: 10,
            defense_delta: 0.5,
            defense_coverage: None,
            defense_mode: DefenseMode::Both,
            baseline_n: 0,
            sweep_axis: "class_count".into(),
            sweep_values: "2,3".into(),
            sweep_repetitions: 3,
        }
    }
}

impl RunConfig {
    /// Parses a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    /// Sets one dotted key; errors on unknown keys or unparsable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "workers" => self.workers = parse(key, value)?,

            "data.classes" => self.data_classes = parse(key, value)?,
            "data.per_class" => self.data_per_class = parse(key, value)?,
            "data.image_side" => self.data_image_side = parse(key, value)?,
            "data.source_classes" => self.data_source_classes = parse(key, value)?,
            "data.target_classes" => self.data_target_classes = parse(key, value)?,
            "data.train_per_class" => self.data_train_per_class = parse(key, value)?,
            "data.holdout_per_class" => self.data_holdout_per_class = parse(key, value)?,
            "data.images" => self.data_images = opt_path(value),
            "data.labels" => self.data_labels = opt_path(value),

            "teacher.hidden" => self.teacher_hidden = parse_list(key, value)?,
            "teacher.epochs" => self.teacher_epochs = parse(key, value)?,
            "teacher.lr" => self.teacher_lr = parse(key, value)?,
            "teacher.batch_size" => self.teacher_batch_size = parse(key, value)?,
            "teacher.holdout_per_class" => self.teacher_holdout_per_class = parse(key, value)?,

            "retrain.epochs" => self.retrain_epochs = parse(key, value)?,
            "retrain.lr" => self.retrain_lr = parse(key, value)?,
            "retrain.batch_size" => self.retrain_batch_size = parse(key, value)?,
            "retrain.tune_from_layer" => self.retrain_tune_from_layer = opt_parse(key, value)?,
            "retrain.n_new_layers" => self.retrain_n_new_layers = parse(key, value)?,
            "retrain.new_layer_width" => self.retrain_new_layer_width = opt_parse(key, value)?,
            "retrain.reject_pool" => self.retrain_reject_pool = parse(key, value)?,

            "attack.k" => self.attack_k = parse(key, value)?,
            "attack.alpha" => self.attack_alpha = parse(key, value)?,
            "attack.beta" => self.attack_beta = parse(key, value)?,
            "attack.gamma" => self.attack_gamma = parse(key, value)?,
            "attack.target_value" => self.attack_target_value = parse(key, value)?,
            "attack.init_mode" => {
                self.attack_init_mode = match value {
                    "blank" => InitMode::Blank,
                    "random" => InitMode::Random,
                    "sample" => InitMode::Sample,
                    _ => return Err(format!("{key}: expected blank|random|sample, got '{value}'")),
                }
            }
            "attack.clip" => {
                self.attack_clip = match value {
                    "unit" => ClipMode::UnitRange,
                    "none" => ClipMode::None,
                    _ => return Err(format!("{key}: expected unit|none, got '{value}'")),
                }
            }
            "attack.confidence_threshold" => {
                self.attack_confidence_threshold = parse(key, value)?
            }
            "attack.neuron_order" => {
                self.attack_neuron_order = match value {
                    "sequential" => NeuronOrder::Sequential,
                    "shuffle" => NeuronOrder::SeededShuffle,
                    _ => return Err(format!("{key}: expected sequential|shuffle, got '{value}'")),
                }
            }
            "attack.stop" => {
                self.attack_stop = match value {
                    "exhaust" => StopRule::Exhaust,
                    "first_bypass" => StopRule::FirstBypass,
                    "all_classes" => StopRule::AllClasses,
                    _ => {
                        return Err(format!(
                            "{key}: expected exhaust|first_bypass|all_classes, got '{value}'"
                        ))
                    }
                }
            }
            "attack.dump_crafted" => self.attack_dump_crafted = parse_bool(key, value)?,

            "defense.safety_factor" => self.defense_safety_factor = parse(key, value)?,
            "defense.tail_size" => self.defense_tail_size = parse(key, value)?,
            "defense.delta" => self.defense_delta = parse(key, value)?,
            "defense.coverage" => self.defense_coverage = opt_parse(key, value)?,
            "defense.mode" => {
                self.defense_mode = match value {
                    "threshold" => DefenseMode::Threshold,
                    "evm" => DefenseMode::Evm,
                    "both" => DefenseMode::Both,
                    _ => return Err(format!("{key}: expected threshold|evm|both, got '{value}'")),
                }
            }

            "baseline.n" => self.baseline_n = parse(key, value)?,

            "sweep.axis" => self.sweep_axis = value.to_string(),
            "sweep.values" => self.sweep_values = value.to_string(),
            "sweep.repetitions" => self.sweep_repetitions = parse(key, value)?,

            _ => return Err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse '{value}' ({e})"))
}

fn opt_parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true|false, got '{value}'")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    let items: Result<Vec<usize>, String> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(format!("{key}: needs at least one entry"));
    }
    Ok(items)
}
