//! Target-agnostic brute-force attack on transfer-learned students.
//!
//! For each neuron `i` of the (known, frozen) feature extractor, gradient
//! descent on the input drives that neuron to a large target value while
//! penalizing positive sibling activations; the crafted input is then spent
//! on exactly one student query. Crafting touches only the extractor — the
//! student never influences the crafted bytes.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::pipeline::{argmax, StudentModel};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Instant;

/// Neurons crafted between consecutive stop-rule checks.
const QUERY_CHUNK: usize = 32;
/// Rows crafted per batched gradient-descent call; constant so transcripts
/// are identical at any worker count.
const CRAFT_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// All pixels one.
    Blank,
    /// Seeded uniform draw in `[0, 1]`.
    Random,
    /// Seeded draw from a provided dataset.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// No input-domain constraint (toy oracles).
    None,
    /// Project every pixel into `[0, 1]` after each step.
    UnitRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronOrder {
    Sequential,
    SeededShuffle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop at the first query whose confidence clears the threshold.
    FirstBypass,
    /// Stop once every student class has been triggered at the threshold.
    AllClasses,
    /// Never stop early; craft and query all `M` neurons.
    Exhaust,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FirstBypass,
    AllClasses,
    Exhausted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Extractor output width (checked against the extractor at run time).
    pub m: usize,
    /// Inner gradient-descent iterations per neuron.
    pub k_iters: usize,
    /// Step size.
    pub alpha: f64,
    /// Weight of the targeted neuron's squared error.
    pub gamma: f64,
    /// Weight of the positive sibling-activation penalty.
    pub beta: f64,
    /// Activation value the targeted neuron is driven toward.
    pub target_value: f64,
    pub init_mode: InitMode,
    pub clip: ClipMode,
    /// Confidence at or above which a query counts as a bypass.
    pub confidence_threshold: f64,
    pub neuron_order: NeuronOrder,
    pub seed: u64,
}

impl AttackConfig {
    /// Desk defaults: K = 2000, alpha 0.1, beta 0.01, gamma 1, target 1000,
    /// blank init, unit-range clip, 0.99 bypass threshold.
    pub fn desk_default(m: usize, seed: u64) -> Self {
        AttackConfig {
            m,
            k_iters: 2000,
            alpha: 0.1,
            gamma: 1.0,
            beta: 0.01,
            target_value: 1000.0,
            init_mode: InitMode::Blank,
            clip: ClipMode::UnitRange,
            confidence_threshold: 0.99,
            neuron_order: NeuronOrder::Sequential,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.target_value <= 0.0 {
            return Err(Error::InvalidArgument(
                "attack needs alpha > 0 and target_value > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.confidence_threshold) || self.confidence_threshold <= 0.0 {
            return Err(Error::InvalidArgument(
                "confidence_threshold must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One crafted input and what the attacker's extractor thinks of it.
#[derive(Clone, Debug)]
pub struct CraftedInput {
    pub neuron: usize,
    pub input: Tensor<f64>,
    /// Activation vector from the attacker's extractor (not the student's).
    pub activation: Vec<f64>,
    /// Loss trajectory subsampled every `max(1, K/100)` iterations; entry 0
    /// is the pre-update loss, the last entry the final loss.
    pub loss_trajectory: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
}

/// The student's answer to one crafted input.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QueryResult {
    pub class: usize,
    pub confidence: f64,
    /// True when the predicted class is the student's reject class.
    pub rejected: bool,
}

/// One transcript row: a crafted input, its single student query, and
/// whether that query bypassed.
#[derive(Clone, Debug)]
pub struct Attempt {
    pub crafted: CraftedInput,
    pub query: QueryResult,
    pub bypass: bool,
    pub wall_ms: f64,
}

/// Ordered record of one attack run: one student query per crafted input.
#[derive(Clone, Debug)]
pub struct AttackTranscript {
    pub attempts: Vec<Attempt>,
    pub stop: StopReason,
    /// Student output count including any reject class.
    pub n_outputs: usize,
    /// Real (non-reject) class count.
    pub n_target_classes: usize,
    pub confidence_threshold: f64,
}

/// JSON-lines record schema for transcript files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub i: usize,
    pub confidence: f64,
    pub predicted_class: usize,
    pub bypass: bool,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    pub wall_ms: f64,
}

impl AttackTranscript {
    pub fn len(&self) -> usize {
        self.attempts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attempts.is_empty()
    }

    pub fn records(&self) -> Vec<AttemptRecord> {
        self.attempts
            .iter()
            .map(|a| AttemptRecord {
                i: a.crafted.neuron,
                confidence: a.query.confidence,
                predicted_class: a.query.class,
                bypass: a.bypass,
                final_loss: Some(a.crafted.final_loss),
                iterations: a.crafted.iterations,
                wall_ms: a.wall_ms,
            })
            .collect()
    }

    /// One JSON object per attempt, newline separated.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Parses a transcript back from its JSON-lines form.
pub fn parse_jsonl(text: &str) -> Result<Vec<AttemptRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Crafting loss over an activation vector: squared error pulling neuron `i`
/// to `target_value` plus `beta`-weighted squared positive sibling
/// activations. Returns the loss and its gradient w.r.t. the activations.
pub fn attack_loss(
    f_x: &[f64],
    i: usize,
    target_value: f64,
    gamma: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if i >= f_x.len() {
        return Err(Error::IndexOutOfRange {
            context: "attack_loss neuron".into(),
            index: i,
            len: f_x.len(),
        });
    }
    let mut grad = vec![0.0; f_x.len()];
    let mut loss = 0.0;
    for (l, &a) in f_x.iter().enumerate() {
        if l == i {
            let d = a - target_value;
            loss += gamma * d * d;
            grad[l] = 2.0 * gamma * d;
        } else if a > 0.0 {
            loss += beta * a * a;
            grad[l] = 2.0 * beta * a;
        }
    }
    Ok((loss, grad))
}

/// Builds the crafting start image: blank (all ones), seeded uniform noise,
/// or a seeded draw from a dataset. Returns a `[1, ...shape]` tensor.
pub fn init_input(
    mode: InitMode,
    shape: &[usize],
    seed: u64,
    dataset: Option<&Dataset>,
) -> Result<Tensor<f64>> {
    let mut full = vec![1usize];
    full.extend_from_slice(shape);
    match mode {
        InitMode::Blank => Ok(Tensor::full(full, 1.0)),
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = full.iter().product();
            let data = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            Tensor::new(full, data)
        }
        InitMode::Sample => {
            let ds = dataset.ok_or_else(|| {
                Error::InvalidArgument("sample init mode needs a dataset".into())
            })?;
            if ds.n() == 0 {
                return Err(Error::InsufficientData("sample init pool is empty".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = rng.gen_range(0..ds.n());
            let sample = ds.sample(idx);
            if sample.shape()[1..] != shape[..] {
                return Err(Error::shape("init_input sample", shape, sample.shape()));
            }
            Ok(sample)
        }
    }
}

/// Crafts inputs for a batch of neurons simultaneously (row-independent
/// gradient descent, so results are bit-identical to one-at-a-time
/// crafting). Exactly `K` steps per row, no early stopping.
pub fn craft_batch(
    extractor: &Network<f64>,
    neurons: &[usize],
    config: &AttackConfig,
    init: &Tensor<f64>,
) -> Result<Vec<CraftedInput>> {
    config.validate()?;
    let b = neurons.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let rows: Vec<Tensor<f64>> = (0..b).map(|_| init.clone()).collect();
    let mut x = Tensor::stack_rows(&rows)?;
    let stride = (config.k_iters / 100).max(1);
    let mut trajectories: Vec<Vec<f64>> = vec![Vec::new(); b];
    let alpha = config.alpha;

    for k in 0..config.k_iters {
        let (acts, trace) = extractor
            .forward(&x, None)
            .map_err(|e| at_iteration(e, neurons, k))?;
        let mut grads = Tensor::zeros(vec![b, acts.row_len()]);
        for r in 0..b {
            let (loss, g) = attack_loss(
                acts.row(r),
                neurons[r],
                config.target_value,
                config.gamma,
                config.beta,
            )?;
            if !loss.is_finite() {
                return Err(Error::NumericOverflow(format!(
                    "crafting loss diverged for neuron {} at iteration {k}",
                    neurons[r]
                )));
            }
            if k % stride == 0 {
                trajectories[r].push(loss);
            }
            grads.row_mut(r).copy_from_slice(&g);
        }
        let grads = grads.reshape(acts.shape().to_vec())?;
        let dx = extractor
            .backward_input(&trace, &grads)
            .map_err(|e| at_iteration(e, neurons, k))?;
        x.sub_scaled(&dx, alpha)?;
        if config.clip == ClipMode::UnitRange {
            x.clamp_inplace(0.0, 1.0);
        }
        x.ensure_finite("crafted input")
            .map_err(|e| at_iteration(e, neurons, k))?;
    }

    // Final activations and losses after the last step.
    let (acts, _) = extractor.forward(&x, None)?;
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let (loss, _) = attack_loss(
            acts.row(r),
            neurons[r],
            config.target_value,
            config.gamma,
            config.beta,
        )?;
        let mut traj = std::mem::take(&mut trajectories[r]);
        traj.push(loss);
        out.push(CraftedInput {
            neuron: neurons[r],
            input: x.row_tensor(r),
            activation: acts.row(r).to_vec(),
            loss_trajectory: traj,
            final_loss: loss,
            iterations: config.k_iters,
        });
    }
    Ok(out)
}

fn at_iteration(e: Error, neurons: &[usize], k: usize) -> Error {
    match e {
        Error::NumericOverflow(msg) => Error::NumericOverflow(format!(
            "neurons {neurons:?} at iteration {k}: {msg}"
        )),
        other => other,
    }
}

/// Crafts the input for a single neuron (the batch-of-one case).
pub fn craft_for_neuron(
    extractor: &Network<f64>,
    i: usize,
    config: &AttackConfig,
    init: &Tensor<f64>,
) -> Result<CraftedInput> {
    Ok(craft_batch(extractor, &[i], config, init)?
        .pop()
        .expect("batch of one"))
}

/// Spends one student query on an input: argmax class and its confidence.
pub fn query_student(student: &StudentModel, input: &Tensor<f64>) -> Result<QueryResult> {
    let probs = student.forward(input)?;
    let row = probs.row(0);
    let class = argmax(row);
    Ok(QueryResult {
        class,
        confidence: row[class],
        rejected: student.reject_index == Some(class),
    })
}

/// Runs the full attack: iterates extractor neurons in the configured
/// order, crafts per neuron, queries the student once per crafted input and
/// records everything; stops per `stop`.
///
/// `sample_pool` is only consulted by the `Sample` init mode. The crafting
/// start image is derived once per run from the attack seed.
pub fn brute_force(
    extractor: &Network<f64>,
    student: &StudentModel,
    config: &AttackConfig,
    stop: StopRule,
    sample_pool: Option<&Dataset>,
) -> Result<AttackTranscript> {
    config.validate()?;
    let m = extractor.output_width();
    if config.m != m {
        return Err(Error::InvalidArgument(format!(
            "config.m = {} but extractor emits {m} activations",
            config.m
        )));
    }
    if student.net.input_shape() != extractor.input_shape() {
        return Err(Error::shape(
            "student/extractor input",
            extractor.input_shape(),
            student.net.input_shape(),
        ));
    }

    let mut order: Vec<usize> = (0..m).collect();
    if config.neuron_order == NeuronOrder::SeededShuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(config.seed, "attack.order"));
    }
    let init = init_input(
        config.init_mode,
        extractor.input_shape(),
        derive_seed(config.seed, "attack.init"),
        sample_pool,
    )?;

    let threshold = config.confidence_threshold;
    let mut attempts = Vec::new();
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    let mut stop_reason = StopReason::Exhausted;

    'outer: for chunk in order.chunks(QUERY_CHUNK) {
        let t0 = Instant::now();
        let crafted: Vec<CraftedInput> = chunk
            .par_chunks(CRAFT_BLOCK)
            .map(|ns| craft_batch(extractor, ns, config, &init))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let craft_ms_each = t0.elapsed().as_secs_f64() * 1000.0 / crafted.len() as f64;

        for c in crafted {
            let tq = Instant::now();
            let query = query_student(student, &c.input)?;
            let wall_ms = craft_ms_each + tq.elapsed().as_secs_f64() * 1000.0;
            let bypass = query.confidence >= threshold && !query.rejected;
            if bypass {
                covered.insert(query.class);
            }
            attempts.push(Attempt {
                crafted: c,
                query,
                bypass,
                wall_ms,
            });
            match stop {
                StopRule::FirstBypass if bypass => {
                    stop_reason = StopReason::FirstBypass;
                    break 'outer;
                }
                StopRule::AllClasses if covered.len() == student.target_class_count() => {
                    stop_reason = StopReason::AllClasses;
                    break 'outer;
                }
                _ => {}
            }
        }
    }

    Ok(AttackTranscript {
        attempts,
        stop: stop_reason,
        n_outputs: student.n_outputs(),
        n_target_classes: student.target_class_count(),
        confidence_threshold: threshold,
    })
}

/// The capped-target sweep: the same exhaustive attack at each target value
/// (the defense-side experiment where small caps collapse effectiveness).
pub fn capped_attack(
    extractor: &Network<f64>,
    student: &StudentModel,
    config: &AttackConfig,
    caps: &[f64],
    sample_pool: Option<&Dataset>,
) -> Result<Vec<(f64, AttackTranscript)>> {
    caps.iter()
        .map(|&cap| {
            let mut cfg = config.clone();
            cfg.target_value = cap;
            brute_force(extractor, student, &cfg, StopRule::Exhaust, sample_pool)
                .map(|t| (cap, t))
        })
        .collect()
}
