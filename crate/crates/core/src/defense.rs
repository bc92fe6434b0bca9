//! Defenses against crafted inputs: an activation-magnitude threshold
//! detector and an extreme-value-machine (EVM) open-set classifier fitting
//! Weibull models to cross-class margin distances in activation space.

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Flags inputs whose largest activation exceeds a threshold calibrated on
/// clean training data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdDetector {
    pub threshold: f64,
    pub safety_factor: f64,
    /// Mean of the per-sample activation maxima seen while fitting.
    pub mean_max: f64,
    /// Largest activation coordinate seen while fitting.
    pub max_max: f64,
}

/// Calibrates the detector: `threshold = safety_factor × max` over the
/// training samples of the largest activation coordinate.
pub fn fit_threshold(
    extractor: &Network<f64>,
    train_inputs: &Tensor<f64>,
    safety_factor: f64,
) -> Result<ThresholdDetector> {
    if train_inputs.batch() == 0 {
        return Err(Error::InsufficientData(
            "threshold detector needs at least one training sample".into(),
        ));
    }
    if safety_factor <= 0.0 {
        return Err(Error::InvalidArgument("safety_factor must be positive".into()));
    }
    let (acts, _) = extractor.forward(train_inputs, None)?;
    let mut maxima = Vec::with_capacity(acts.batch());
    for r in 0..acts.batch() {
        let m = acts.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        maxima.push(m);
    }
    let max_max = maxima.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_max = maxima.iter().sum::<f64>() / maxima.len() as f64;
    Ok(ThresholdDetector {
        threshold: safety_factor * max_max,
        safety_factor,
        mean_max,
        max_max,
    })
}

/// True (flagged) iff the largest activation coordinate strictly exceeds
/// the threshold; a value exactly at the threshold passes as clean.
pub fn detect_features(detector: &ThresholdDetector, activation: &[f64]) -> bool {
    activation
        .iter()
        .any(|&a| a > detector.threshold)
}

/// Runs the extractor and applies [`detect_features`] to a single input.
pub fn detect(
    detector: &ThresholdDetector,
    extractor: &Network<f64>,
    input: &Tensor<f64>,
) -> Result<bool> {
    let (acts, _) = extractor.forward(input, None)?;
    Ok(detect_features(detector, acts.row(0)))
}

/// Maximum-likelihood Weibull fit `(shape κ, scale λ)` by damped
/// fixed-point iteration on the shape equation (tolerance 1e-9, at most 200
/// iterations). Samples are internally rescaled by their mean — the fit is
/// scale-equivariant, so this only improves conditioning.
pub fn weibull_fit(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "weibull_fit needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument(
            "weibull_fit samples must be positive and finite".into(),
        ));
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi {
        return Err(Error::Degenerate(
            "weibull_fit samples are all (numerically) equal".into(),
        ));
    }

    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let s: Vec<f64> = samples.iter().map(|&t| t / mean).collect();
    let logs: Vec<f64> = s.iter().map(|&v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / s.len() as f64;

    let mut kappa = 1.0_f64;
    for _ in 0..200 {
        let mut sum_pow = 0.0;
        let mut sum_pow_log = 0.0;
        for (&v, &lv) in s.iter().zip(&logs) {
            let p = v.powf(kappa);
            sum_pow += p;
            sum_pow_log += p * lv;
        }
        let denom = sum_pow_log / sum_pow - mean_log;
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::Degenerate(
                "weibull_fit shape equation degenerated".into(),
            ));
        }
        let g = 1.0 / denom;
        let next = kappa + 0.5 * (g - kappa);
        if (next - kappa).abs() < 1e-9 {
            kappa = next;
            let sum_pow: f64 = s.iter().map(|&v| v.powf(kappa)).sum();
            let lambda = (sum_pow / s.len() as f64).powf(1.0 / kappa) * mean;
            return Ok((kappa, lambda));
        }
        kappa = next;
    }
    Err(Error::NonConvergence(format!(
        "weibull_fit did not converge within 200 iterations (kappa ≈ {kappa:.6})"
    )))
}

/// Inclusion probability `Ψ(d) = exp(−(d/λ)^κ)`; exactly 1 at distance 0.
pub fn evm_inclusion(d: f64, kappa: f64, lambda: f64) -> f64 {
    if d <= 0.0 {
        1.0
    } else {
        (-(d / lambda).powf(kappa)).exp()
    }
}

/// One stored activation vector with its fitted margin distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtremeVector {
    pub class: usize,
    pub features: Vec<f64>,
    pub kappa: f64,
    pub lambda: f64,
}

/// EVM open-set classifier: per-class collections of extreme vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvmModel {
    pub vectors: Vec<ExtremeVector>,
    pub tail_size: usize,
    /// Default reject threshold.
    pub delta: f64,
    pub classes: Vec<usize>,
}

/// Outcome of one EVM classification.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvmDecision {
    /// `None` means reject.
    pub class: Option<usize>,
    /// Class with the highest inclusion score regardless of the threshold.
    pub best_class: usize,
    pub score: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Fits an EVM over labeled activation vectors. For each stored vector the
/// τ smallest positive distances to other-class vectors are halved (margin
/// radii) and Weibull-fitted. `coverage` switches on greedy model
/// reduction: per class, keep a minimal vector subset whose inclusion
/// functions cover every classmate at the given probability.
pub fn fit_evm(
    features: &Tensor<f64>,
    labels: &[usize],
    tail_size: usize,
    delta: f64,
    coverage: Option<f64>,
) -> Result<EvmModel> {
    let n = features.batch();
    if labels.len() != n {
        return Err(Error::shape("fit_evm labels", &[n], &[labels.len()]));
    }
    if tail_size == 0 {
        return Err(Error::InvalidArgument("tail_size must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(r);
    }
    if by_class.len() < 2 {
        return Err(Error::InsufficientData(
            "EVM needs at least two classes".into(),
        ));
    }
    for (&c, rows) in &by_class {
        let cross = n - rows.len();
        if cross <= tail_size {
            return Err(Error::InsufficientData(format!(
                "class {c} has only {cross} cross-class vectors, need more than {tail_size}"
            )));
        }
    }

    let mut vectors = Vec::new();
    for (&c, rows) in &by_class {
        for &r in rows {
            let x = features.row(r);
            let mut dists: Vec<f64> = labels
                .iter()
                .enumerate()
                .filter(|&(_, &lc)| lc != c)
                .map(|(o, _)| euclidean(x, features.row(o)))
                .filter(|&d| d > 0.0)
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            dists.truncate(tail_size);
            let margins: Vec<f64> = dists.iter().map(|&d| 0.5 * d).collect();
            if margins.len() < 3 {
                return Err(Error::InsufficientData(format!(
                    "vector in class {c} has only {} positive cross-class distances",
                    margins.len()
                )));
            }
            let (kappa, lambda) = weibull_fit(&margins)?;
            vectors.push(ExtremeVector {
                class: c,
                features: x.to_vec(),
                kappa,
                lambda,
            });
        }
    }

    if let Some(cov) = coverage {
        vectors = reduce_by_coverage(vectors, &by_class, features, cov);
    }

    Ok(EvmModel {
        vectors,
        tail_size,
        delta,
        classes: by_class.keys().cloned().collect(),
    })
}

/// Greedy set cover per class: repeatedly keep the vector covering the most
/// still-uncovered classmates (inclusion ≥ `coverage`), until all are
/// covered. Ties break toward the earliest stored vector.
fn reduce_by_coverage(
    vectors: Vec<ExtremeVector>,
    by_class: &BTreeMap<usize, Vec<usize>>,
    features: &Tensor<f64>,
    coverage: f64,
) -> Vec<ExtremeVector> {
    let mut kept = Vec::new();
    for (&c, rows) in by_class {
        let cand: Vec<&ExtremeVector> = vectors.iter().filter(|v| v.class == c).collect();
        // covers[j][p] — candidate j covers classmate p.
        let covers: Vec<Vec<bool>> = cand
            .iter()
            .map(|v| {
                rows.iter()
                    .map(|&p| {
                        let d = euclidean(&v.features, features.row(p));
                        evm_inclusion(d, v.kappa, v.lambda) >= coverage
                    })
                    .collect()
            })
            .collect();
        let mut uncovered: Vec<bool> = vec![true; rows.len()];
        let mut chosen = vec![false; cand.len()];
        while uncovered.iter().any(|&u| u) {
            let mut best = None;
            let mut best_gain = 0usize;
            for (j, cv) in covers.iter().enumerate() {
                if chosen[j] {
                    continue;
                }
                let gain = cv
                    .iter()
                    .zip(&uncovered)
                    .filter(|&(&cvr, &unc)| cvr && unc)
                    .count();
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(j);
                }
            }
            let Some(j) = best else {
                // Remaining classmates are not coverable at this threshold;
                // every candidate is already kept or useless. Keep each
                // uncovered point's own vector so the class stays represented.
                for (p, unc) in uncovered.iter_mut().enumerate() {
                    if *unc {
                        chosen[p] = true;
                        *unc = false;
                    }
                }
                break;
            };
            chosen[j] = true;
            for (u, &cvr) in uncovered.iter_mut().zip(&covers[j]) {
                if cvr {
                    *u = false;
                }
            }
        }
        for (j, keep) in chosen.iter().enumerate() {
            if *keep {
                kept.push(cand[j].clone());
            }
        }
    }
    kept
}

/// Classifies an activation vector: per-class score is the best inclusion
/// probability over that class's stored vectors; the argmax class wins if
/// its score reaches `delta`, otherwise the sample is rejected.
pub fn evm_classify_features(model: &EvmModel, activation: &[f64], delta: f64) -> EvmDecision {
    let mut best_score = f64::NEG_INFINITY;
    let mut best_class = model.classes.first().copied().unwrap_or(0);
    for &c in &model.classes {
        let score = model
            .vectors
            .iter()
            .filter(|v| v.class == c)
            .map(|v| evm_inclusion(euclidean(&v.features, activation), v.kappa, v.lambda))
            .fold(f64::NEG_INFINITY, f64::max);
        if score > best_score {
            best_score = score;
            best_class = c;
        }
    }
    EvmDecision {
        class: (best_score >= delta).then_some(best_class),
        best_class,
        score: best_score,
    }
}

/// Runs the extractor, then classifies the resulting activation vector.
pub fn evm_classify(
    model: &EvmModel,
    extractor: &Network<f64>,
    input: &Tensor<f64>,
    delta: f64,
) -> Result<EvmDecision> {
    let (acts, _) = extractor.forward(input, None)?;
    Ok(evm_classify_features(model, acts.row(0), delta))
}

/// Fraction of rows the EVM accepts (does not reject) at threshold `delta`;
/// the false-positive probe when fed held-out non-member samples.
pub fn evm_accept_rate(model: &EvmModel, features: &Tensor<f64>, delta: f64) -> f64 {
    if features.batch() == 0 {
        return 0.0;
    }
    let accepted = (0..features.batch())
        .filter(|&r| evm_classify_features(model, features.row(r), delta).class.is_some())
        .count();
    accepted as f64 / features.batch() as f64
}
