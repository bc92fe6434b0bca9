//! Experiment sweep runner: trains one teacher, then re-trains and attacks
//! a student per cell along one experiment axis, aggregating metrics across
//! seeded repetitions into CSV/JSON report files.

use crate::attack::{brute_force, AttackConfig, InitMode, StopRule};
use crate::data::{partition, subsample, synth_dataset, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{jsd_correlation, label_distribution, metrics_report, ReportSpec};
use crate::net::{LayerKind, Network};
use crate::pipeline::{
    accuracy, default_cut, make_extractor, mlp_arch, retrain, train_teacher, RejectSpec,
    RetrainSpec, TrainConfig,
};
use crate::seed::derive_seed;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// One experiment axis and the values it takes, one cell per value.
#[derive(Clone, Debug)]
pub enum SweepAxis {
    /// Student target-class count.
    ClassCount(Vec<usize>),
    /// Trailing parameterized extractor layers unfrozen during re-training.
    LayersTuned(Vec<usize>),
    /// Extra `(dense + relu)` pairs appended before the student head.
    NewLayers(Vec<usize>),
    /// Reject-class training-pool size (0 = no reject class).
    RejectPool(Vec<usize>),
    /// Attack target activation value.
    TargetCap(Vec<f64>),
    /// Attack start-image mode.
    InitMode(Vec<InitMode>),
    /// Student training samples per class.
    TrainSize(Vec<usize>),
    /// Class-imbalance ramp factor in `[0, 1)`: per-class training counts
    /// slope linearly from `(1 − f)` to `(1 + f)` times the base count.
    Imbalance(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ClassCount(_) => "class_count",
            SweepAxis::LayersTuned(_) => "layers_tuned",
            SweepAxis::NewLayers(_) => "new_layers",
            SweepAxis::RejectPool(_) => "reject_pool",
            SweepAxis::TargetCap(_) => "target_cap",
            SweepAxis::InitMode(_) => "init_mode",
            SweepAxis::TrainSize(_) => "train_size",
            SweepAxis::Imbalance(_) => "imbalance",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::ClassCount(v) | SweepAxis::LayersTuned(v) | SweepAxis::NewLayers(v)
            | SweepAxis::RejectPool(v) | SweepAxis::TrainSize(v) => v.len(),
            SweepAxis::TargetCap(v) | SweepAxis::Imbalance(v) => v.len(),
            SweepAxis::InitMode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human/CSV label of the cell value at `idx`.
    pub fn label(&self, idx: usize) -> String {
        match self {
            SweepAxis::ClassCount(v) | SweepAxis::LayersTuned(v) | SweepAxis::NewLayers(v)
            | SweepAxis::RejectPool(v) | SweepAxis::TrainSize(v) => v[idx].to_string(),
            SweepAxis::TargetCap(v) | SweepAxis::Imbalance(v) => format!("{}", v[idx]),
            SweepAxis::InitMode(v) => match v[idx] {
                InitMode::Blank => "blank".into(),
                InitMode::Random => "random".into(),
                InitMode::Sample => "sample".into(),
            },
        }
    }
}

/// Axis plus repetition count and master seed.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub axis: SweepAxis,
    pub repetitions: usize,
    pub seed: u64,
}

/// Everything a sweep holds fixed: corpus geometry, teacher recipe, and the
/// default student/attack settings each cell starts from.
#[derive(Clone, Debug)]
pub struct SweepBase {
    pub corpus_classes: usize,
    pub corpus_per_class: usize,
    pub image_side: usize,
    /// Leading corpus classes used to train the teacher.
    pub source_classes: usize,
    /// Next corpus classes forming the student task (the maximum a
    /// class-count cell may request).
    pub target_classes: usize,
    /// Default training samples per target class.
    pub train_per_class: usize,
    pub holdout_per_class: usize,
    pub hidden: Vec<usize>,
    pub teacher: TrainConfig,
    pub retrain: RetrainSpec,
    pub attack: AttackConfig,
}

impl SweepBase {
    /// Small desk-scale defaults; callers override fields as needed.
    pub fn desk(seed: u64) -> Self {
        let mut teacher = TrainConfig::teacher_default(seed);
        teacher.epochs = 12;
        let mut retrain = RetrainSpec::head_only(seed);
        retrain.epochs = 40;
        let mut attack = AttackConfig::desk_default(0, seed);
        attack.k_iters = 250;
        SweepBase {
            corpus_classes: 12,
            corpus_per_class: 30,
            image_side: 10,
            source_classes: 4,
            target_classes: 5,
            train_per_class: 15,
            holdout_per_class: 6,
            hidden: vec![48, 24],
            teacher,
            retrain,
            attack,
        }
    }
}

/// Aggregated metrics of one sweep cell across its repetitions.
#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    pub cell_id: usize,
    pub axis: String,
    pub value: String,
    pub reps: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// Mean/std over repetitions that achieved full coverage.
    pub nabac_mean: Option<f64>,
    pub nabac_std: Option<f64>,
    /// Fraction of repetitions whose attack never covered every class.
    pub coverage_fail_rate: f64,
    pub eff95_mean: f64,
    pub eff95_std: f64,
    pub eff99_mean: f64,
    pub eff99_std: f64,
    pub wall_s: f64,
}

/// Scatter points and linear fit of train-vs-trigger distances to uniform.
#[derive(Clone, Debug, Serialize)]
pub struct ImbalanceFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub axis: String,
    pub repetitions: usize,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    /// Present only for the imbalance axis.
    pub imbalance: Option<ImbalanceFit>,
}

/// One repetition's raw outcome, kept until aggregation.
struct RepOutcome {
    cell: usize,
    rep: usize,
    acc: f64,
    nabac: Option<usize>,
    eff95: f64,
    eff99: f64,
    js_train: Option<f64>,
    js_targets: Option<f64>,
    wall_s: f64,
    jsonl: String,
}

/// Per-cell overrides resolved from the axis value.
struct CellPlan {
    counts: BTreeMap<usize, usize>,
    n_classes: usize,
    retrain: RetrainSpec,
    attack: AttackConfig,
}

/// Runs the sweep and writes the report bundle under `out_dir`:
/// `cells.csv` (one aggregated row per cell), per-repetition transcripts in
/// `transcripts/`, `sweep.json`, and plot-ready CSVs for the figure axes
/// (`layers_tuned.csv`, `reject_pool.csv`, `imbalance_points.csv` +
/// `imbalance_fit.csv`).
pub fn sweep(plan: &SweepPlan, base: &SweepBase, out_dir: &Path) -> Result<SweepReport> {
    if plan.axis.is_empty() || plan.repetitions == 0 {
        return Err(Error::InvalidArgument(
            "sweep needs at least one axis value and one repetition".into(),
        ));
    }
    validate_base(base)?;

    // Shared fixture: corpus, class partition, teacher, extractor.
    let corpus = synth_dataset(
        base.corpus_classes,
        base.corpus_per_class,
        base.image_side,
        plan.seed,
    )?;
    let source: Vec<usize> = (0..base.source_classes).collect();
    let target: Vec<usize> =
        (base.source_classes..base.source_classes + base.target_classes).collect();
    let split = SplitSpec::balanced(
        source,
        target,
        base.corpus_per_class - base.holdout_per_class,
        base.holdout_per_class,
        plan.seed,
    );
    let (teacher_set, student_full, holdout_full, reject_pool) = partition(&corpus, &split)?;

    let mut teacher_cfg = base.teacher.clone();
    teacher_cfg.seed = plan.seed;
    let arch = mlp_arch(
        base.image_side * base.image_side,
        &base.hidden,
        base.source_classes,
    );
    let (teacher, _) = train_teacher(&teacher_set, arch, &teacher_cfg)?;
    let extractor = make_extractor(&teacher, default_cut(&teacher))?;

    let axis_name = plan.axis.name();
    let jobs: Vec<(usize, usize)> = (0..plan.axis.len())
        .flat_map(|c| (0..plan.repetitions).map(move |r| (c, r)))
        .collect();

    let outcomes: Vec<RepOutcome> = jobs
        .par_iter()
        .map(|&(cell, rep)| {
            let cell_seed = derive_seed(
                plan.seed,
                &format!("sweep.{axis_name}.{}.rep{rep}", plan.axis.label(cell)),
            );
            run_rep(
                base, &plan.axis, cell, rep, cell_seed, &extractor, &student_full, &holdout_full,
                &reject_pool,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // Aggregate and write the bundle.
    std::fs::create_dir_all(out_dir.join("transcripts"))?;
    for o in &outcomes {
        std::fs::write(
            out_dir.join(format!("transcripts/cell{}_rep{}.jsonl", o.cell, o.rep)),
            &o.jsonl,
        )?;
    }

    let mut cells = Vec::new();
    for c in 0..plan.axis.len() {
        let of_cell: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.cell == c).collect();
        let accs: Vec<f64> = of_cell.iter().map(|o| o.acc).collect();
        let eff95: Vec<f64> = of_cell.iter().map(|o| o.eff95).collect();
        let eff99: Vec<f64> = of_cell.iter().map(|o| o.eff99).collect();
        let nabacs: Vec<f64> = of_cell
            .iter()
            .filter_map(|o| o.nabac.map(|n| n as f64))
            .collect();
        let (nm, ns) = if nabacs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&nabacs);
            (Some(m), Some(s))
        };
        let (am, astd) = mean_std(&accs);
        let (e95m, e95s) = mean_std(&eff95);
        let (e99m, e99s) = mean_std(&eff99);
        cells.push(CellSummary {
            cell_id: c,
            axis: axis_name.into(),
            value: plan.axis.label(c),
            reps: of_cell.len(),
            acc_mean: am,
            acc_std: astd,
            nabac_mean: nm,
            nabac_std: ns,
            coverage_fail_rate: 1.0 - nabacs.len() as f64 / of_cell.len() as f64,
            eff95_mean: e95m,
            eff95_std: e95s,
            eff99_mean: e99m,
            eff99_std: e99s,
            wall_s: of_cell.iter().map(|o| o.wall_s).sum(),
        });
    }

    let imbalance = if matches!(plan.axis, SweepAxis::Imbalance(_)) {
        let points: Vec<(f64, f64)> = outcomes
            .iter()
            .filter_map(|o| Some((o.js_train?, o.js_targets?)))
            .collect();
        let fit = jsd_correlation(&points)?;
        Some(ImbalanceFit {
            points,
            slope: fit.slope,
            intercept: fit.intercept,
            r: fit.r,
        })
    } else {
        None
    };

    let report = SweepReport {
        axis: axis_name.into(),
        repetitions: plan.repetitions,
        seed: plan.seed,
        cells,
        imbalance,
    };
    std::fs::write(out_dir.join("cells.csv"), cells_csv(&report.cells))?;
    std::fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_plot_files(&report, out_dir)?;
    Ok(report)
}

fn validate_base(base: &SweepBase) -> Result<()> {
    if base.source_classes + base.target_classes > base.corpus_classes {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} classes, need {} source + {} target",
            base.corpus_classes, base.source_classes, base.target_classes
        )));
    }
    if base.holdout_per_class >= base.corpus_per_class {
        return Err(Error::InvalidArgument(
            "holdout_per_class must leave training samples".into(),
        ));
    }
    if base.target_classes < 2 {
        return Err(Error::InvalidArgument(
            "sweeps need at least 2 target classes".into(),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_rep(
    base: &SweepBase,
    axis: &SweepAxis,
    cell: usize,
    rep: usize,
    cell_seed: u64,
    extractor: &Network<f64>,
    student_full: &Dataset,
    holdout_full: &Dataset,
    reject_pool: &Dataset,
) -> Result<RepOutcome> {
    let t0 = Instant::now();
    let cp = cell_plan(base, axis, cell, cell_seed, extractor)?;

    let student_train = subsample(student_full, &cp.counts, cell_seed)?;
    let holdout_counts: BTreeMap<usize, usize> = cp
        .counts
        .keys()
        .map(|&c| (c, base.holdout_per_class))
        .collect();
    let holdout = subsample(holdout_full, &holdout_counts, cell_seed)?;

    let (student, _) = retrain(
        extractor,
        &student_train,
        &cp.retrain,
        Some(reject_pool),
        Some(&holdout),
    )?;
    let acc = accuracy(&student, &holdout)?;
    let transcript = brute_force(extractor, &student, &cp.attack, StopRule::Exhaust, Some(reject_pool))?;

    let spec = ReportSpec {
        n_classes: cp.n_classes,
        bypass_threshold: 0.99,
        eff_thresholds: vec![0.95, 0.99],
        train_dist: Some(label_distribution(&student_train.labels, cp.n_classes)),
    };
    let wall_s = t0.elapsed().as_secs_f64();
    let report = metrics_report(&transcript.views(), &spec, wall_s * 1000.0)?;

    Ok(RepOutcome {
        cell,
        rep,
        acc,
        nabac: report.nabac,
        eff95: report.effectiveness["0.95"],
        eff99: report.effectiveness["0.99"],
        js_train: report.js_distance_train,
        js_targets: report.js_distance_targets,
        wall_s,
        jsonl: transcript.to_jsonl(),
    })
}

/// Resolves the axis value at `cell` into concrete per-cell settings.
fn cell_plan(
    base: &SweepBase,
    axis: &SweepAxis,
    cell: usize,
    cell_seed: u64,
    extractor: &Network<f64>,
) -> Result<CellPlan> {
    let mut retrain = base.retrain.clone();
    retrain.seed = cell_seed;
    let mut attack = base.attack.clone();
    attack.seed = cell_seed;
    attack.m = extractor.output_width();
    let mut n_classes = base.target_classes;
    let balanced =
        |k: usize, per: usize| -> BTreeMap<usize, usize> { (0..k).map(|c| (c, per)).collect() };
    let mut counts = balanced(n_classes, base.train_per_class);

    match axis {
        SweepAxis::ClassCount(v) => {
            let k = v[cell];
            if !(2..=base.target_classes).contains(&k) {
                return Err(Error::InvalidArgument(format!(
                    "class-count value {k} outside 2..={}",
                    base.target_classes
                )));
            }
            n_classes = k;
            counts = balanced(k, base.train_per_class);
        }
        SweepAxis::LayersTuned(v) => {
            retrain.tune_from_layer = Some(tune_from_for(extractor, v[cell])?);
        }
        SweepAxis::NewLayers(v) => {
            retrain.n_new_layers = v[cell];
        }
        SweepAxis::RejectPool(v) => {
            retrain.reject = if v[cell] == 0 {
                None
            } else {
                Some(RejectSpec { pool_size: v[cell] })
            };
        }
        SweepAxis::TargetCap(v) => {
            attack.target_value = v[cell];
        }
        SweepAxis::InitMode(v) => {
            attack.init_mode = v[cell];
        }
        SweepAxis::TrainSize(v) => {
            counts = balanced(n_classes, v[cell]);
        }
        SweepAxis::Imbalance(v) => {
            let f = v[cell];
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "imbalance factor {f} outside [0, 1)"
                )));
            }
            let k = n_classes;
            counts = (0..k)
                .map(|c| {
                    let ramp = if k > 1 {
                        1.0 - f + 2.0 * f * c as f64 / (k - 1) as f64
                    } else {
                        1.0
                    };
                    let n = (base.train_per_class as f64 * ramp).round().max(1.0) as usize;
                    (c, n)
                })
                .collect();
        }
    }
    Ok(CellPlan {
        counts,
        n_classes,
        retrain,
        attack,
    })
}

/// Maps "unfreeze the trailing `t` parameterized extractor layers" onto a
/// `tune_from_layer` index; `t = 0` keeps everything frozen.
pub fn tune_from_for(extractor: &Network<f64>, layers_tuned: usize) -> Result<usize> {
    let param_idxs: Vec<usize> = extractor
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            matches!(
                l.spec.kind,
                LayerKind::Dense { .. } | LayerKind::ConvLite { .. }
            )
        })
        .map(|(i, _)| i)
        .collect();
    if layers_tuned > param_idxs.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot tune {layers_tuned} layers, extractor has {}",
            param_idxs.len()
        )));
    }
    Ok(if layers_tuned == 0 {
        extractor.n_layers()
    } else {
        param_idxs[param_idxs.len() - layers_tuned]
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Fixed-schema aggregate CSV, one row per cell.
pub fn cells_csv(cells: &[CellSummary]) -> String {
    let mut s = String::from(
        "cell_id,axis,value,acc_mean,acc_std,nabac_mean,nabac_std,\
         coverage_fail_rate,eff95_mean,eff95_std,eff99_mean,eff99_std,wall_s\n",
    );
    for c in cells {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            c.cell_id,
            c.axis,
            c.value,
            c.acc_mean,
            c.acc_std,
            fmt_opt(c.nabac_mean),
            fmt_opt(c.nabac_std),
            c.coverage_fail_rate,
            c.eff95_mean,
            c.eff95_std,
            c.eff99_mean,
            c.eff99_std,
            c.wall_s,
        ));
    }
    s
}

/// Two/three-column plot data for the axes that back figures.
fn write_plot_files(report: &SweepReport, out_dir: &Path) -> Result<()> {
    match report.axis.as_str() {
        "layers_tuned" => {
            let mut s = String::from("layers_tuned,eff99_mean,eff99_std\n");
            for c in &report.cells {
                s.push_str(&format!(
                    "{},{:.6},{:.6}\n",
                    c.value, c.eff99_mean, c.eff99_std
                ));
            }
            std::fs::write(out_dir.join("layers_tuned.csv"), s)?;
        }
        "reject_pool" => {
            let mut s = String::from("pool_size,eff99_mean,acc_mean\n");
            for c in &report.cells {
                s.push_str(&format!("{},{:.6},{:.6}\n", c.value, c.eff99_mean, c.acc_mean));
            }
            std::fs::write(out_dir.join("reject_pool.csv"), s)?;
        }
        "imbalance" => {
            if let Some(fit) = &report.imbalance {
                let mut s = String::from("js_train,js_targets\n");
                for &(x, y) in &fit.points {
                    s.push_str(&format!("{x:.6},{y:.6}\n"));
                }
                std::fs::write(out_dir.join("imbalance_points.csv"), s)?;
                std::fs::write(
                    out_dir.join("imbalance_fit.csv"),
                    format!(
                        "slope,intercept,r\n{:.6},{:.6},{:.6}\n",
                        fit.slope, fit.intercept, fit.r
                    ),
                )?;
            }
        }
        _ => {}
    }
    Ok(())
}
