//! Transfer-learning pipeline: teacher training, feature-extractor
//! extraction, and student re-training variants (head-only, deeper tuning,
//! extra appended layers, reject class).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{adam_step, cross_entropy, AdamState, LayerKind, LayerSpec, Network};
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Forward-pass chunk size used when embedding whole datasets.
const EMBED_CHUNK: usize = 512;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-class holdout carved out of the training set for the epoch log.
    pub holdout_per_class: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Teacher defaults: Adam 1e-3, batch 32, 30 epochs, 5-per-class holdout.
    pub fn teacher_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            holdout_per_class: 5,
            seed,
        }
    }
}

/// One epoch of the training log; `holdout_acc` is absent when no holdout
/// was carved out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub holdout_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn final_holdout_acc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.holdout_acc)
    }

    /// Line-oriented CSV: `epoch,loss,holdout_acc`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,holdout_acc\n");
        for r in &self.rows {
            let acc = r.holdout_acc.map_or(String::new(), |a| format!("{a:.6}"));
            s.push_str(&format!("{},{:.6},{}\n", r.epoch, r.loss, acc));
        }
        s
    }
}

/// The default MLP: flatten, dense chain with relu, softmax head.
pub fn mlp_arch(input_pixels: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = vec![LayerSpec::flatten()];
    let mut prev = input_pixels;
    for &h in hidden {
        specs.push(LayerSpec::dense(prev, h));
        specs.push(LayerSpec::relu());
        prev = h;
    }
    specs.push(LayerSpec::dense(prev, classes));
    specs.push(LayerSpec::softmax_head(classes));
    specs
}

/// Default hidden widths for the desk-scale teacher.
pub const DEFAULT_HIDDEN: [usize; 2] = [512, 256];

/// Trains a teacher on the source task. The architecture's final softmax
/// width must equal the source class count; a per-class holdout is carved
/// out internally for the epoch log.
pub fn train_teacher(
    teacher_set: &Dataset,
    arch: Vec<LayerSpec>,
    cfg: &TrainConfig,
) -> Result<(Network<f64>, TrainLog)> {
    let classes = teacher_set.n_classes();
    match arch.last().map(|l| &l.kind) {
        Some(&LayerKind::SoftmaxHead { classes: k }) if k == classes => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "teacher architecture must end in softmax_head({classes}), found {other:?}"
            )))
        }
    }
    let input_shape = vec![teacher_set.image_side(), teacher_set.image_side()];
    let mut net = Network::new(input_shape, arch, rng_seed_for(cfg.seed, "teacher.init"))?;

    // Carve the holdout per class under the training seed.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in teacher_set.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_for(cfg.seed, "teacher.split");
    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for idxs in &mut by_class {
        idxs.shuffle(&mut rng);
        if idxs.len() <= cfg.holdout_per_class {
            return Err(Error::InsufficientData(format!(
                "teacher class with {} samples cannot spare {} holdout",
                idxs.len(),
                cfg.holdout_per_class
            )));
        }
        hold_idx.extend_from_slice(&idxs[..cfg.holdout_per_class]);
        train_idx.extend_from_slice(&idxs[cfg.holdout_per_class..]);
    }
    let (train_x, train_y) = teacher_set.batch_of(&train_idx);
    let holdout = if cfg.holdout_per_class > 0 {
        Some(teacher_set.batch_of(&hold_idx))
    } else {
        None
    };

    let log = fit(
        &mut net,
        &train_x,
        &train_y,
        holdout.as_ref(),
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        "teacher.train",
    )?;
    Ok((net, log))
}

/// Clones the leading `cut` layers of a trained network as a frozen feature
/// extractor; the softmax head (and anything after `cut`) is excluded.
pub fn make_extractor(teacher: &Network<f64>, cut: usize) -> Result<Network<f64>> {
    let mut ex = teacher.prefix(cut)?;
    if ex
        .layers()
        .iter()
        .any(|l| matches!(l.spec.kind, LayerKind::SoftmaxHead { .. }))
    {
        return Err(Error::InvalidArgument(
            "extractor cut must exclude the softmax head".into(),
        ));
    }
    for i in 0..ex.n_layers() {
        ex.set_frozen(i, true);
    }
    Ok(ex)
}

/// Default extractor cut: everything up to and including the last hidden
/// dense layer, so the extractor emits that layer's output before its relu.
/// Keeping the coordinates sign-capable matters downstream: the crafting
/// loss's one-sided sibling penalty only makes sense when off-target
/// coordinates can sit at or below zero, and a trailing relu would zero the
/// input gradient for every coordinate that starts dark, leaving those
/// neurons permanently unreachable by gradient descent from a blank image.
/// Architectures with fewer than two dense layers fall back to cutting
/// just before the final dense layer.
pub fn default_cut(teacher: &Network<f64>) -> usize {
    let dense_idxs: Vec<usize> = teacher
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.spec.kind, LayerKind::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    match dense_idxs.as_slice() {
        [] => teacher.n_layers(),
        [only] => *only,
        [.., prev, _last] => prev + 1,
    }
}

/// Out-of-task samples folded into re-training under an extra reject label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectSpec {
    pub pool_size: usize,
}

/// Student re-training recipe.
#[derive(Clone, Debug)]
pub struct RetrainSpec {
    /// Extractor layers with index >= this are unfrozen and re-trained;
    /// `None` keeps the whole extractor frozen (head-only re-training).
    pub tune_from_layer: Option<usize>,
    /// Appended `(dense + relu)` pairs between extractor and head.
    pub n_new_layers: usize,
    /// Width of appended dense layers; `None` uses the extractor width.
    pub new_layer_width: Option<usize>,
    pub reject: Option<RejectSpec>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl RetrainSpec {
    /// Head-only defaults: Adam 1e-3, batch 32, 100 epochs.
    pub fn head_only(seed: u64) -> Self {
        RetrainSpec {
            tune_from_layer: None,
            n_new_layers: 0,
            new_layer_width: None,
            reject: None,
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            seed,
        }
    }
}

/// A re-trained student: the (possibly partially tuned) extractor and the
/// appended head, composed into one network.
#[derive(Clone, Debug)]
pub struct StudentModel {
    pub net: Network<f64>,
    /// Number of leading layers that came from the extractor.
    pub extractor_len: usize,
    /// Output class names; includes the reject class when present.
    pub class_names: Vec<String>,
    pub reject_index: Option<usize>,
}

impl StudentModel {
    /// Output count including any reject class.
    pub fn n_outputs(&self) -> usize {
        self.class_names.len()
    }

    /// Real (non-reject) class count.
    pub fn target_class_count(&self) -> usize {
        self.n_outputs() - usize::from(self.reject_index.is_some())
    }

    /// The student's own (deployed) extractor slice.
    pub fn extractor(&self) -> Result<Network<f64>> {
        self.net.prefix(self.extractor_len)
    }

    /// Softmax probabilities for a `[batch, ...]` input.
    pub fn forward(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.net.forward(input, None)?.0)
    }
}

/// Re-trains a student on the target task given the transferred extractor.
///
/// The attacker-facing extractor stays untouched; the student gets its own
/// copy, frozen below `tune_from_layer`. With a reject spec, `pool_size`
/// out-of-task samples are drawn (seeded, without replacement) from
/// `reject_pool` and trained under an extra reject label. `holdout` only
/// feeds the epoch log.
pub fn retrain(
    extractor: &Network<f64>,
    student_train: &Dataset,
    spec: &RetrainSpec,
    reject_pool: Option<&Dataset>,
    holdout: Option<&Dataset>,
) -> Result<(StudentModel, TrainLog)> {
    if student_train.n() == 0 {
        return Err(Error::InsufficientData(
            "student training set is empty".into(),
        ));
    }
    let ex_len = extractor.n_layers();
    let tune_from = spec.tune_from_layer.unwrap_or(ex_len);
    if tune_from > ex_len {
        return Err(Error::IndexOutOfRange {
            context: "tune_from_layer".into(),
            index: tune_from,
            len: ex_len,
        });
    }
    let m = extractor.output_width();
    let width = spec.new_layer_width.unwrap_or(m);
    let k_target = student_train.n_classes();
    let k_out = k_target + usize::from(spec.reject.is_some());

    // Compose the student: extractor copy (frozen below tune_from) + head.
    let mut net = extractor.prefix(ex_len)?;
    for i in 0..ex_len {
        net.set_frozen(i, i < tune_from);
    }
    let mut head_specs = Vec::new();
    let mut prev = m;
    for _ in 0..spec.n_new_layers {
        head_specs.push(LayerSpec::dense(prev, width));
        head_specs.push(LayerSpec::relu());
        prev = width;
    }
    head_specs.push(LayerSpec::dense(prev, k_out));
    head_specs.push(LayerSpec::softmax_head(k_out));
    net.append_layers(head_specs.clone(), rng_seed_for(spec.seed, "retrain.init"))?;

    // Assemble the training set (plus reject draws when configured).
    let (mut train_x, mut train_y) = (student_train.inputs.clone(), student_train.labels.clone());
    let mut class_names = student_train.class_names.clone();
    let mut reject_index = None;
    if let Some(r) = &spec.reject {
        let pool = reject_pool.ok_or_else(|| {
            Error::InvalidArgument("reject re-training needs a reject pool".into())
        })?;
        if r.pool_size > pool.n() {
            return Err(Error::InsufficientData(format!(
                "reject pool has {} samples, requested {}",
                pool.n(),
                r.pool_size
            )));
        }
        let mut idxs: Vec<usize> = (0..pool.n()).collect();
        idxs.shuffle(&mut rng_for(spec.seed, "retrain.reject"));
        let (rx, _) = pool.batch_of(&idxs[..r.pool_size]);
        train_x = concat_rows(&train_x, &rx)?;
        train_y.extend(std::iter::repeat(k_target).take(r.pool_size));
        reject_index = Some(k_target);
        class_names.push("reject".into());
    }

    let holdout_pair = holdout.map(|h| (h.inputs.clone(), h.labels.clone()));

    let log = if tune_from == ex_len {
        // Head-only fast path: the frozen extractor's activations never
        // change, so embed the data once and train the head on features.
        // Bit-identical to the composed run (same init, same batch order).
        let feats_x = embed(extractor, &train_x)?;
        let feats_h = holdout_pair
            .as_ref()
            .map(|(hx, hy)| Ok::<_, Error>((embed(extractor, hx)?, hy.clone())))
            .transpose()?;
        let head_params = net.layers()[ex_len..]
            .iter()
            .map(|l| l.params.clone())
            .collect();
        let mut head = Network::from_parts(
            vec![m],
            head_specs,
            rng_seed_for(spec.seed, "retrain.init"),
            head_params,
        )?;
        let log = fit(
            &mut head,
            &feats_x,
            &train_y,
            feats_h.as_ref(),
            spec.epochs,
            spec.lr,
            spec.batch_size,
            spec.seed,
            "retrain.train",
        )?;
        for (i, layer) in head.layers().iter().enumerate() {
            if let Some((w, b)) = &layer.params {
                net.set_params(ex_len + i, w.clone(), b.clone())?;
            }
        }
        log
    } else {
        fit(
            &mut net,
            &train_x,
            &train_y,
            holdout_pair.as_ref(),
            spec.epochs,
            spec.lr,
            spec.batch_size,
            spec.seed,
            "retrain.train",
        )?
    };

    Ok((
        StudentModel {
            net,
            extractor_len: ex_len,
            class_names,
            reject_index,
        },
        log,
    ))
}

/// Fraction of argmax-correct predictions on a labeled set.
pub fn accuracy(student: &StudentModel, ds: &Dataset) -> Result<f64> {
    if ds.n() == 0 {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    if ds.n_classes() > student.target_class_count() {
        return Err(Error::InvalidArgument(format!(
            "evaluation set has {} classes, student predicts {}",
            ds.n_classes(),
            student.target_class_count()
        )));
    }
    let mut correct = 0usize;
    for chunk in index_chunks(ds.n(), EMBED_CHUNK) {
        let (x, y) = ds.batch_of(&chunk);
        let probs = student.forward(&x)?;
        for (r, &label) in y.iter().enumerate() {
            if argmax(probs.row(r)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.n() as f64)
}

/// Fraction of samples the student maps to its reject class (0.0 for
/// students without one).
pub fn reject_rate(student: &StudentModel, ds: &Dataset) -> Result<f64> {
    let Some(reject) = student.reject_index else {
        return Ok(0.0);
    };
    if ds.n() == 0 {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for chunk in index_chunks(ds.n(), EMBED_CHUNK) {
        let (x, _) = ds.batch_of(&chunk);
        let probs = student.forward(&x)?;
        for r in 0..probs.batch() {
            if argmax(probs.row(r)) == reject {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / ds.n() as f64)
}

/// Runs `net` over a whole input set in chunks, returning `[n, width]`
/// feature rows.
pub fn embed(net: &Network<f64>, inputs: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = inputs.batch();
    let width = net.output_width();
    let mut data = Vec::with_capacity(n * width);
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let mut shape = inputs.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(
            shape,
            inputs.data()[start * inputs.row_len()..end * inputs.row_len()].to_vec(),
        )?;
        let (out, _) = net.forward(&chunk, None)?;
        let flat = out.reshape(vec![end - start, width])?;
        data.extend_from_slice(flat.data());
        start = end;
    }
    Tensor::new(vec![n, width], data)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shared Adam + cross-entropy loop with per-epoch shuffling and an
/// optional holdout accuracy column.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut Network<f64>,
    train_x: &Tensor<f64>,
    train_y: &[usize],
    holdout: Option<&(Tensor<f64>, Vec<usize>)>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    purpose: &str,
) -> Result<TrainLog> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let n = train_x.batch();
    let mut state = AdamState::new(net, lr);
    let mut rng = rng_for(seed, purpose);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let (bx, by) = gather_rows(train_x, train_y, chunk);
            let (probs, trace) = net.forward(&bx, None)?;
            let loss = cross_entropy(&probs, &by)?;
            if !loss.is_finite() {
                return Err(Error::NumericOverflow(format!(
                    "training diverged at epoch {epoch} (non-finite loss)"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = net.backward_params(&trace, &by)?;
            adam_step(net, &grads, &mut state)?;
        }
        let holdout_acc = holdout
            .map(|(hx, hy)| -> Result<f64> {
                let probs = net.forward(hx, None)?.0;
                let mut correct = 0usize;
                for (r, &label) in hy.iter().enumerate() {
                    if argmax(probs.row(r)) == label {
                        correct += 1;
                    }
                }
                Ok(correct as f64 / hy.len() as f64)
            })
            .transpose()?;
        log.rows.push(EpochRow {
            epoch,
            loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
            holdout_acc,
        });
    }
    Ok(log)
}

fn gather_rows(x: &Tensor<f64>, y: &[usize], idxs: &[usize]) -> (Tensor<f64>, Vec<usize>) {
    let w = x.row_len();
    let mut data = Vec::with_capacity(idxs.len() * w);
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend_from_slice(x.row(i));
        labels.push(y[i]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idxs.len();
    (
        Tensor::new(shape, data).expect("gathered rows keep row width"),
        labels,
    )
}

fn concat_rows(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("concat_rows", a.shape(), b.shape()));
    }
    let mut shape = a.shape().to_vec();
    shape[0] = a.batch() + b.batch();
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn index_chunks(n: usize, chunk: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(chunk)).map(move |c| ((c * chunk)..((c + 1) * chunk).min(n)).collect())
}

fn rng_seed_for(seed: u64, purpose: &str) -> u64 {
    crate::seed::derive_seed(seed, purpose)
}
