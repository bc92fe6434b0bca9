//! Attack evaluation metrics: NABAC, effectiveness, class-trigger
//! histograms, Jensen-Shannon distance analysis, and the baseline random
//! attack. The experiment sweep runner lives in [`sweep`].

pub mod sweep;

use crate::attack::{AttackTranscript, AttemptRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::StudentModel;
use crate::seed::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// The minimal attempt projection every metric consumes: one query's
/// confidence, predicted class, and whether the student rejected it.
#[derive(Clone, Copy, Debug)]
pub struct AttemptView {
    pub confidence: f64,
    pub class: usize,
    pub rejected: bool,
}

impl AttackTranscript {
    pub fn views(&self) -> Vec<AttemptView> {
        self.attempts
            .iter()
            .map(|a| AttemptView {
                confidence: a.query.confidence,
                class: a.query.class,
                rejected: a.query.rejected,
            })
            .collect()
    }
}

/// Rebuilds attempt views from serialized records. Rejection is not stored
/// in the record schema, so it is inferred from `reject_index` when the
/// student had a reject class.
pub fn views_from_records(records: &[AttemptRecord], reject_index: Option<usize>) -> Vec<AttemptView> {
    records
        .iter()
        .map(|r| AttemptView {
            confidence: r.confidence,
            class: r.predicted_class,
            rejected: reject_index == Some(r.predicted_class),
        })
        .collect()
}

/// Number of attempts to break all classes: the 1-based index of the
/// attempt at which the last not-yet-triggered target class first reached
/// the confidence threshold; `None` if coverage never completes.
pub fn nabac(attempts: &[AttemptView], n_classes: usize, threshold: f64) -> Result<Option<usize>> {
    if n_classes == 0 {
        return Err(Error::InvalidArgument("nabac needs n_classes >= 1".into()));
    }
    let mut seen = vec![false; n_classes];
    let mut remaining = n_classes;
    for (idx, a) in attempts.iter().enumerate() {
        if a.confidence >= threshold && !a.rejected && a.class < n_classes && !seen[a.class] {
            seen[a.class] = true;
            remaining -= 1;
            if remaining == 0 {
                return Ok(Some(idx + 1));
            }
        }
    }
    Ok(None)
}

/// Fraction of attempts with confidence at least `x` that were not
/// rejected. The transcript must be exhaustive (the denominator is every
/// crafted input).
pub fn effectiveness(attempts: &[AttemptView], x: f64) -> Result<f64> {
    if attempts.is_empty() {
        return Err(Error::InsufficientData(
            "effectiveness over an empty transcript".into(),
        ));
    }
    let hits = attempts
        .iter()
        .filter(|a| a.confidence >= x && !a.rejected)
        .count();
    Ok(hits as f64 / attempts.len() as f64)
}

/// Trigger counts per target class among attempts at or above the
/// threshold. Every class in `0..n_classes` appears as a key, so an
/// all-below-threshold transcript yields an all-zero map.
pub fn class_histogram(
    attempts: &[AttemptView],
    threshold: f64,
    n_classes: usize,
) -> BTreeMap<usize, usize> {
    let mut hist: BTreeMap<usize, usize> = (0..n_classes).map(|c| (c, 0)).collect();
    for a in attempts {
        if a.confidence >= threshold && !a.rejected && a.class < n_classes {
            *hist.get_mut(&a.class).expect("key prepopulated") += 1;
        }
    }
    hist
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{name} sums to {total}, not 1 (tolerance 1e-9)"
        )));
    }
    Ok(())
}

/// Jensen-Shannon distance: the square root of
/// `JSD(P‖Q) = ½ KL(P‖M) + ½ KL(Q‖M)` with `M = ½(P+Q)`, base-2
/// logarithms (so the result lies in `[0, 1]`), and `0·log 0 = 0`.
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("js_distance", &[p.len()], &[q.len()]));
    }
    check_distribution("P", p)?;
    check_distribution("Q", q)?;
    let mut jsd = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            jsd += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            jsd += 0.5 * b * (b / m).log2();
        }
    }
    // Rounding can leave a tiny negative residue when P == Q.
    Ok(jsd.max(0.0).sqrt())
}

/// Uniform distribution over `k` outcomes.
pub fn uniform_dist(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Normalizes a class histogram into a distribution; `None` if empty.
pub fn normalize_counts(hist: &BTreeMap<usize, usize>) -> Option<Vec<f64>> {
    let total: usize = hist.values().sum();
    if total == 0 {
        return None;
    }
    Some(hist.values().map(|&c| c as f64 / total as f64).collect())
}

/// Empirical class distribution of a label list over classes `0..k`.
pub fn label_distribution(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l < k {
            counts[l] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return uniform_dist(k);
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Least-squares line and Pearson correlation over paired observations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Correlation {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

/// Fits `y = slope·x + intercept` and Pearson r over
/// `(x, y) = (js_distance(train, uniform), js_distance(targets, uniform))`
/// pairs — or any other paired floats.
pub fn jsd_correlation(pairs: &[(f64, f64)]) -> Result<Correlation> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 runs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Degenerate(
            "correlation x values have zero variance".into(),
        ));
    }
    let slope = sxy / sxx;
    let r = if syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    Ok(Correlation {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

/// Per-run wall-clock summary carried inside a [`MetricsReport`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub attempts: usize,
    pub total_wall_ms: f64,
    pub mean_wall_ms: f64,
}

/// Everything the evaluation pipeline reports about one attack run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Attempts until all classes were triggered; `None` when coverage
    /// never completed.
    pub nabac: Option<usize>,
    /// Effectiveness at each requested confidence threshold, keyed by the
    /// threshold rendered as text (e.g. "0.95").
    pub effectiveness: BTreeMap<String, f64>,
    pub class_histogram: BTreeMap<usize, usize>,
    /// JS distance of the training-label distribution to uniform.
    pub js_distance_train: Option<f64>,
    /// JS distance of the trigger distribution to uniform.
    pub js_distance_targets: Option<f64>,
    pub runtime: RuntimeStats,
}

/// Inputs for [`metrics_report`].
#[derive(Clone, Debug)]
pub struct ReportSpec {
    /// Target (non-reject) class count.
    pub n_classes: usize,
    /// Bypass threshold for NABAC and the histogram.
    pub bypass_threshold: f64,
    /// Effectiveness thresholds to evaluate (e.g. 0.95 and 0.99).
    pub eff_thresholds: Vec<f64>,
    /// Training-label distribution over the target classes, if known.
    pub train_dist: Option<Vec<f64>>,
}

impl ReportSpec {
    pub fn new(n_classes: usize) -> Self {
        ReportSpec {
            n_classes,
            bypass_threshold: 0.99,
            eff_thresholds: vec![0.95, 0.99],
            train_dist: None,
        }
    }
}

fn threshold_key(x: f64) -> String {
    let mut s = format!("{x}");
    if !s.contains('.') {
        s.push_str(".0");
    }
    s
}

/// Computes the full metrics bundle for one transcript.
pub fn metrics_report(
    attempts: &[AttemptView],
    spec: &ReportSpec,
    total_wall_ms: f64,
) -> Result<MetricsReport> {
    let hist = class_histogram(attempts, spec.bypass_threshold, spec.n_classes);
    let mut eff = BTreeMap::new();
    for &x in &spec.eff_thresholds {
        eff.insert(threshold_key(x), effectiveness(attempts, x)?);
    }
    let uniform = uniform_dist(spec.n_classes);
    let js_targets = match normalize_counts(&hist) {
        Some(d) => Some(js_distance(&d, &uniform)?),
        None => None,
    };
    let js_train = match &spec.train_dist {
        Some(d) => Some(js_distance(d, &uniform)?),
        None => None,
    };
    Ok(MetricsReport {
        nabac: nabac(attempts, spec.n_classes, spec.bypass_threshold)?,
        effectiveness: eff,
        class_histogram: hist,
        js_distance_train: js_train,
        js_distance_targets: js_targets,
        runtime: RuntimeStats {
            attempts: attempts.len(),
            total_wall_ms,
            mean_wall_ms: if attempts.is_empty() {
                0.0
            } else {
                total_wall_ms / attempts.len() as f64
            },
        },
    })
}

/// The control experiment: query the student with `n` natural images drawn
/// (with replacement) from a pool disjoint from its training data. Returns
/// the transcript records plus effectiveness at `threshold`.
pub fn baseline_random(
    student: &StudentModel,
    pool: &Dataset,
    n: usize,
    threshold: f64,
    seed: u64,
) -> Result<(Vec<AttemptRecord>, f64)> {
    if pool.n() == 0 {
        return Err(Error::InsufficientData("baseline pool is empty".into()));
    }
    let mut rng = rng_for(seed, "baseline.random");
    let mut records = Vec::with_capacity(n);
    let mut hits = 0usize;
    for i in 0..n {
        let idx = rng.gen_range(0..pool.n());
        let t0 = Instant::now();
        let r = crate::attack::query_student(student, &pool.sample(idx))?;
        let bypass = r.confidence >= threshold && !r.rejected;
        if bypass {
            hits += 1;
        }
        records.push(AttemptRecord {
            i,
            confidence: r.confidence,
            predicted_class: r.class,
            bypass,
            final_loss: None,
            iterations: 0,
            wall_ms: t0.elapsed().as_secs_f64() * 1000.0,
        });
    }
    let eff = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    Ok((records, eff))
}

/// Serializes baseline/defense records as JSON lines.
pub fn records_to_jsonl(records: &[AttemptRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}
