//! Dataset handling: IDX ingestion, synthetic corpora, source/target class
//! partitioning and seeded subsampling.

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled image set. `inputs` is `[n, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_side(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Samples per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// One sample as a `[1, H, W]` batch.
    pub fn sample(&self, i: usize) -> Tensor<f64> {
        self.inputs.row_tensor(i)
    }

    /// Gathers the given rows into a batch tensor plus labels.
    pub fn batch_of(&self, indices: &[usize]) -> (Tensor<f64>, Vec<usize>) {
        let w = self.inputs.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        (
            Tensor::new(shape, data).expect("gathered rows keep row width"),
            labels,
        )
    }
}

/// How to split one corpus into the transfer-learning roles.
///
/// `per_class_counts` fixes the student training-set size per target class
/// (the imbalance control); every target class must have an entry.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub source_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    pub per_class_counts: BTreeMap<usize, usize>,
    pub holdout_per_class: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Balanced split: the same training count for every target class.
    pub fn balanced(
        source_classes: Vec<usize>,
        target_classes: Vec<usize>,
        per_class: usize,
        holdout_per_class: usize,
        seed: u64,
    ) -> Self {
        let per_class_counts = target_classes.iter().map(|&c| (c, per_class)).collect();
        SplitSpec {
            source_classes,
            target_classes,
            per_class_counts,
            holdout_per_class,
            seed,
        }
    }
}

/// Reads an images-only IDX file into a `[n, H, W]` tensor (big-endian,
/// magic `0x803`, pixel bytes scaled by 1/255).
pub fn load_idx_images(image_path: &Path) -> Result<Tensor<f64>> {
    let img = std::fs::read(image_path)?;
    let magic = read_be(&img, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_be(&img, 4, "image count")? as usize;
    let h = read_be(&img, 8, "image height")? as usize;
    let w = read_be(&img, 12, "image width")? as usize;
    let need = 16 + n * h * w;
    if img.len() < need {
        return Err(Error::Truncated(format!(
            "image payload ({} bytes, need {need})",
            img.len()
        )));
    }
    let data = img[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, h, w], data)
}

/// Reads an IDX image/label file pair (big-endian, magic `0x803`/`0x801`,
/// pixel bytes scaled by 1/255).
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let inputs = load_idx_images(image_path)?;
    let n = inputs.shape()[0];
    let lbl = std::fs::read(label_path)?;

    let lmagic = read_be(&lbl, 0, "label magic")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABEL_MAGIC,
            got: lmagic,
        });
    }
    let ln = read_be(&lbl, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::InvalidArgument(format!(
            "image file has {n} samples but label file has {ln}"
        )));
    }
    if lbl.len() < 8 + ln {
        return Err(Error::Truncated(format!(
            "label payload ({} bytes, need {})",
            lbl.len(),
            8 + ln
        )));
    }

    let labels: Vec<usize> = lbl[8..8 + ln].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        inputs,
        labels,
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
    })
}

/// Writes a dataset as an IDX image/label file pair (the inverse of
/// [`load_idx`] up to the byte quantization of pixel values).
pub fn save_idx(ds: &Dataset, image_path: &Path, label_path: &Path) -> Result<()> {
    save_idx_images(&ds.inputs, image_path)?;
    let mut lbl = Vec::with_capacity(8 + ds.n());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.n() as u32).to_be_bytes());
    for &l in &ds.labels {
        if l > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "label {l} does not fit the IDX byte label format"
            )));
        }
        lbl.push(l as u8);
    }
    std::fs::write(label_path, lbl)?;
    Ok(())
}

/// Writes a `[n, H, W]` tensor as an IDX image file, quantizing to bytes.
pub fn save_idx_images(images: &Tensor<f64>, path: &Path) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 3 {
        return Err(Error::shape("save_idx_images", &[0, 0, 0], shape));
    }
    let mut buf = Vec::with_capacity(16 + images.len());
    buf.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in images.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Procedurally generated corpus: each class is a distinct pattern — an
/// oriented bar, a placed disk, or a phase-shifted checkerboard — plus
/// seeded Gaussian noise (sigma 0.05), clipped to `[0, 1]`. Classes are
/// separable by construction so small teachers converge quickly.
pub fn synth_dataset(
    n_classes: usize,
    per_class: usize,
    image_side: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least 2 classes, got {n_classes}"
        )));
    }
    if image_side < 6 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs image_side >= 6, got {image_side}"
        )));
    }
    let mut rng = rng_for(seed, "data.synth");
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let side = image_side;
    let n = n_classes * per_class;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let mut class_names = Vec::with_capacity(n_classes);

    for c in 0..n_classes {
        class_names.push(pattern_name(c));
        for _ in 0..per_class {
            for y in 0..side {
                for x in 0..side {
                    let base = pattern_value(c, n_classes, side, x, y);
                    let v: f64 = base + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, side, side], data)?,
        labels,
        class_names,
    })
}

fn pattern_name(c: usize) -> String {
    match c % 3 {
        0 => format!("bar-{c}"),
        1 => format!("disk-{c}"),
        _ => format!("checker-{c}"),
    }
}

/// Noise-free intensity of class `c` at pixel `(x, y)`.
///
/// The patterns are deliberately sparse and dim — black background, thin
/// offset bars, small disks, low-contrast checkers — so natural images keep
/// feature activations well inside the envelope that threshold detectors fit
/// on training data, while still being trivially separable.
fn pattern_value(c: usize, n_classes: usize, side: usize, x: usize, y: usize) -> f64 {
    const BG: f64 = 0.0;
    const FG: f64 = 0.95;
    const CHECKER_FG: f64 = 0.25;
    let variant = c / 3;
    let s = side as f64;
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    match c % 3 {
        0 => {
            // Thin bar, one orientation per class, shifted off-center along
            // its normal per variant so repeats don't overlap.
            let theta = std::f64::consts::PI * c as f64 / n_classes as f64;
            let off = (variant as f64 - 1.0) * 0.22 * s;
            let (cx, cy) = (s / 2.0 + off * theta.cos(), s / 2.0 + off * theta.sin());
            let d = (-(theta.sin()) * (px - cx) + theta.cos() * (py - cy)).abs();
            if d <= s / 12.0 {
                FG
            } else {
                BG
            }
        }
        1 => {
            // Small disk at a per-variant corner position.
            let centers = [(0.3, 0.3), (0.7, 0.3), (0.3, 0.7), (0.7, 0.7)];
            let (fx, fy) = centers[variant % centers.len()];
            let (cx, cy) = (fx * s, fy * s);
            let d2 = (px - cx).powi(2) + (py - cy).powi(2);
            if d2 <= (0.14 * s).powi(2) {
                FG
            } else {
                BG
            }
        }
        _ => {
            // Low-contrast checkerboard; cell size and phase vary per class.
            let cell = (side / (2 + variant)).max(2);
            let phase = variant % 2;
            if (x / cell + y / cell + phase) % 2 == 0 {
                CHECKER_FG
            } else {
                BG
            }
        }
    }
}

/// Splits a corpus into `(teacher_set, student_train, student_holdout,
/// reject_pool)`:
///
/// * teacher set: every sample of the source classes;
/// * student train/holdout: target classes, sized by `per_class_counts` and
///   `holdout_per_class` (seeded draw, disjoint);
/// * reject pool: every sample of classes outside both sets.
///
/// Labels are re-indexed densely within each output, in the order the spec
/// lists the classes.
pub fn partition(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset, Dataset)> {
    for &c in spec.source_classes.iter().chain(&spec.target_classes) {
        if c >= ds.n_classes() {
            return Err(Error::IndexOutOfRange {
                context: "partition class".into(),
                index: c,
                len: ds.n_classes(),
            });
        }
    }
    if spec
        .source_classes
        .iter()
        .any(|c| spec.target_classes.contains(c))
    {
        return Err(Error::InvalidArgument(
            "source and target class sets overlap".into(),
        ));
    }

    // Per-class index lists, shuffled once under the split seed.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_for(spec.seed, "data.partition");
    for idxs in &mut by_class {
        idxs.shuffle(&mut rng);
    }

    let teacher_idx: Vec<(usize, usize)> = spec
        .source_classes
        .iter()
        .enumerate()
        .flat_map(|(new, &c)| by_class[c].iter().map(move |&i| (i, new)))
        .collect();

    let mut train_idx = Vec::new();
    let mut holdout_idx = Vec::new();
    for (new, &c) in spec.target_classes.iter().enumerate() {
        let want = *spec.per_class_counts.get(&c).ok_or_else(|| {
            Error::InvalidArgument(format!("per_class_counts has no entry for target class {c}"))
        })?;
        let avail = by_class[c].len();
        if want + spec.holdout_per_class > avail {
            return Err(Error::InsufficientData(format!(
                "class {c} has {avail} samples, need {want} train + {} holdout",
                spec.holdout_per_class
            )));
        }
        train_idx.extend(by_class[c][..want].iter().map(|&i| (i, new)));
        holdout_idx.extend(
            by_class[c][want..want + spec.holdout_per_class]
                .iter()
                .map(|&i| (i, new)),
        );
    }

    let rest: Vec<usize> = (0..ds.n_classes())
        .filter(|c| !spec.source_classes.contains(c) && !spec.target_classes.contains(c))
        .collect();
    let reject_idx: Vec<(usize, usize)> = rest
        .iter()
        .enumerate()
        .flat_map(|(new, &c)| by_class[c].iter().map(move |&i| (i, new)))
        .collect();

    Ok((
        gather(ds, &teacher_idx, &spec.source_classes),
        gather(ds, &train_idx, &spec.target_classes),
        gather(ds, &holdout_idx, &spec.target_classes),
        gather(ds, &reject_idx, &rest),
    ))
}

/// Seeded subsampling without replacement. Only classes listed in
/// `per_class` are kept (labels re-indexed densely over the listed classes,
/// in ascending class order); the output sample order is shuffled
/// deterministically.
pub fn subsample(ds: &Dataset, per_class: &BTreeMap<usize, usize>, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_for(seed, "data.subsample");
    let classes: Vec<usize> = per_class.keys().copied().collect();
    let mut picked = Vec::new();
    for (new, &c) in classes.iter().enumerate() {
        if c >= ds.n_classes() {
            return Err(Error::IndexOutOfRange {
                context: "subsample class".into(),
                index: c,
                len: ds.n_classes(),
            });
        }
        let want = per_class[&c];
        let avail = by_class[c].len();
        if want > avail {
            return Err(Error::InsufficientData(format!(
                "class {c} has {avail} samples, requested {want}"
            )));
        }
        let mut idxs = by_class[c].clone();
        idxs.shuffle(&mut rng);
        picked.extend(idxs[..want].iter().map(|&i| (i, new)));
    }
    picked.shuffle(&mut rng);
    Ok(gather(ds, &picked, &classes))
}

/// Copies `(original_index, new_label)` rows into a fresh dataset whose
/// class names follow `class_order`.
fn gather(ds: &Dataset, rows: &[(usize, usize)], class_order: &[usize]) -> Dataset {
    let w = ds.inputs.row_len();
    let mut data = Vec::with_capacity(rows.len() * w);
    let mut labels = Vec::with_capacity(rows.len());
    for &(i, new) in rows {
        data.extend_from_slice(ds.inputs.row(i));
        labels.push(new);
    }
    let mut shape = ds.inputs.shape().to_vec();
    shape[0] = rows.len();
    Dataset {
        inputs: Tensor::new(shape, data).expect("gathered rows keep row width"),
        labels,
        class_names: class_order
            .iter()
            .map(|&c| ds.class_names[c].clone())
            .collect(),
    }
}

fn read_be(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(what.into()))
}
