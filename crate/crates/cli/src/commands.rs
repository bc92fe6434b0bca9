//! Subcommand implementations. Each command reads artifacts + config,
//! drives the library, and persists its outputs atomically under the
//! resolved output directory.

use crate::artifacts::{lib_err, require_file, write_atomic, write_atomic_str, CliError};
use crate::config::{DefenseMode, RunConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use ssg_core::attack::{
    brute_force, parse_jsonl, query_student, AttackConfig, AttemptRecord, InitMode,
};
use ssg_core::data::{
    load_idx, load_idx_images, partition, save_idx_images, synth_dataset, Dataset, SplitSpec,
};
use ssg_core::defense::{
    detect_features, evm_accept_rate, evm_classify_features, fit_evm, fit_threshold, EvmModel,
    ThresholdDetector,
};
use ssg_core::metrics::sweep::{sweep, SweepAxis, SweepBase, SweepPlan};
use ssg_core::metrics::{
    baseline_random, label_distribution, metrics_report, records_to_jsonl, views_from_records,
    ReportSpec,
};
use ssg_core::net::{load_model_file, save_model};
use ssg_core::pipeline::{
    accuracy, default_cut, embed, make_extractor, mlp_arch, reject_rate, retrain, train_teacher,
    RejectSpec, RetrainSpec, StudentModel, TrainConfig,
};
use ssg_core::tensor::Tensor;
use std::path::{Path, PathBuf};

type CmdResult = Result<(), CliError>;

/// The class partition every command derives from the config: teacher set,
/// student train/holdout, and the out-of-task reject pool.
struct DataBundle {
    teacher_set: Dataset,
    student_train: Dataset,
    student_holdout: Dataset,
    reject_pool: Dataset,
}

fn build_data(cfg: &RunConfig) -> Result<DataBundle, CliError> {
    let corpus = match (&cfg.data_images, &cfg.data_labels) {
        (Some(im), Some(lb)) => {
            require_file(im, "IDX image file")?;
            require_file(lb, "IDX label file")?;
            load_idx(im, lb).map_err(lib_err)?
        }
        (None, None) => synth_dataset(
            cfg.data_classes,
            cfg.data_per_class,
            cfg.data_image_side,
            cfg.seed,
        )
        .map_err(lib_err)?,
        _ => {
            return Err(CliError::new(
                2,
                "data.images and data.labels must be set together",
            ))
        }
    };
    let source: Vec<usize> = (0..cfg.data_source_classes).collect();
    let target: Vec<usize> = (cfg.data_source_classes
        ..cfg.data_source_classes + cfg.data_target_classes)
        .collect();
    let split = SplitSpec::balanced(
        source,
        target,
        cfg.data_train_per_class,
        cfg.data_holdout_per_class,
        cfg.seed,
    );
    let (teacher_set, student_train, student_holdout, reject_pool) =
        partition(&corpus, &split).map_err(lib_err)?;
    Ok(DataBundle {
        teacher_set,
        student_train,
        student_holdout,
        reject_pool,
    })
}

/// Sidecar metadata persisted next to `student.ssg`.
#[derive(Serialize, Deserialize)]
struct StudentMeta {
    extractor_len: usize,
    class_names: Vec<String>,
    reject_index: Option<usize>,
    seed: u64,
}

fn save_student(student: &StudentModel, out: &Path, seed: u64) -> CmdResult {
    write_atomic(&out.join("student.ssg"), &save_model(&student.net))?;
    let meta = StudentMeta {
        extractor_len: student.extractor_len,
        class_names: student.class_names.clone(),
        reject_index: student.reject_index,
        seed,
    };
    write_atomic_str(
        &out.join("student.meta.json"),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
}

fn load_student(path: &Path) -> Result<StudentModel, CliError> {
    require_file(path, "student model")?;
    let meta_path = path.with_extension("meta.json");
    require_file(&meta_path, "student metadata")?;
    let net = load_model_file(path).map_err(lib_err)?;
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| CliError::new(1, format!("read {}: {e}", meta_path.display())))?;
    let meta: StudentMeta = serde_json::from_str(&text)
        .map_err(|e| CliError::new(1, format!("parse {}: {e}", meta_path.display())))?;
    Ok(StudentModel {
        net,
        extractor_len: meta.extractor_len,
        class_names: meta.class_names,
        reject_index: meta.reject_index,
    })
}

fn teacher_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.teacher_epochs,
        lr: cfg.teacher_lr,
        batch_size: cfg.teacher_batch_size,
        holdout_per_class: cfg.teacher_holdout_per_class,
        seed: cfg.seed,
    }
}

fn retrain_spec(cfg: &RunConfig) -> RetrainSpec {
    RetrainSpec {
        tune_from_layer: cfg.retrain_tune_from_layer,
        n_new_layers: cfg.retrain_n_new_layers,
        new_layer_width: cfg.retrain_new_layer_width,
        reject: (cfg.retrain_reject_pool > 0).then_some(RejectSpec {
            pool_size: cfg.retrain_reject_pool,
        }),
        epochs: cfg.retrain_epochs,
        lr: cfg.retrain_lr,
        batch_size: cfg.retrain_batch_size,
        seed: cfg.seed,
    }
}

fn attack_config(cfg: &RunConfig, m: usize) -> AttackConfig {
    AttackConfig {
        m,
        k_iters: cfg.attack_k,
        alpha: cfg.attack_alpha,
        gamma: cfg.attack_gamma,
        beta: cfg.attack_beta,
        target_value: cfg.attack_target_value,
        init_mode: cfg.attack_init_mode,
        clip: cfg.attack_clip,
        confidence_threshold: cfg.attack_confidence_threshold,
        neuron_order: cfg.attack_neuron_order,
        seed: cfg.seed,
    }
}

pub fn cmd_train_teacher(cfg: &RunConfig) -> CmdResult {
    let data = build_data(cfg)?;
    let side = data.teacher_set.image_side();
    let arch = mlp_arch(side * side, &cfg.teacher_hidden, data.teacher_set.n_classes());
    let (teacher, log) =
        train_teacher(&data.teacher_set, arch, &teacher_config(cfg)).map_err(lib_err)?;
    let extractor = make_extractor(&teacher, default_cut(&teacher)).map_err(lib_err)?;

    let out = &cfg.out;
    write_atomic(&out.join("teacher.ssg"), &save_model(&teacher))?;
    write_atomic(&out.join("extractor.ssg"), &save_model(&extractor))?;
    write_atomic_str(&out.join("teacher_log.csv"), &log.to_csv())?;
    let meta = json!({
        "classes": data.teacher_set.class_names,
        "hidden": cfg.teacher_hidden,
        "epochs": cfg.teacher_epochs,
        "seed": cfg.seed,
        "extractor_width": extractor.output_width(),
        "holdout_acc": log.final_holdout_acc(),
    });
    write_atomic_str(
        &out.join("teacher_meta.json"),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    eprintln!(
        "teacher: {} classes, extractor width {}, holdout acc {:?}",
        data.teacher_set.n_classes(),
        extractor.output_width(),
        log.final_holdout_acc()
    );
    Ok(())
}

pub fn cmd_retrain(cfg: &RunConfig, teacher: Option<PathBuf>) -> CmdResult {
    let teacher_path = teacher.unwrap_or_else(|| cfg.out.join("teacher.ssg"));
    require_file(&teacher_path, "teacher model")?;
    let teacher = load_model_file(&teacher_path).map_err(lib_err)?;
    let extractor = make_extractor(&teacher, default_cut(&teacher)).map_err(lib_err)?;

    let data = build_data(cfg)?;
    let (student, log) = retrain(
        &extractor,
        &data.student_train,
        &retrain_spec(cfg),
        Some(&data.reject_pool),
        Some(&data.student_holdout),
    )
    .map_err(lib_err)?;
    let acc = accuracy(&student, &data.student_holdout).map_err(lib_err)?;
    let rej = reject_rate(&student, &data.student_holdout).map_err(lib_err)?;

    save_student(&student, &cfg.out, cfg.seed)?;
    write_atomic_str(&cfg.out.join("retrain_log.csv"), &log.to_csv())?;
    eprintln!(
        "student: {} outputs ({} target classes), holdout acc {acc:.4}, holdout reject rate {rej:.4}",
        student.n_outputs(),
        student.target_class_count()
    );
    Ok(())
}

pub fn cmd_attack(
    cfg: &RunConfig,
    extractor: Option<PathBuf>,
    student: Option<PathBuf>,
) -> CmdResult {
    let ex_path = extractor.unwrap_or_else(|| cfg.out.join("extractor.ssg"));
    let st_path = student.unwrap_or_else(|| cfg.out.join("student.ssg"));
    require_file(&ex_path, "extractor model")?;
    let extractor = load_model_file(&ex_path).map_err(lib_err)?;
    let student = load_student(&st_path)?;
    let data = build_data(cfg)?;

    let acfg = attack_config(cfg, extractor.output_width());
    let transcript = brute_force(
        &extractor,
        &student,
        &acfg,
        cfg.attack_stop,
        Some(&data.reject_pool),
    )
    .map_err(lib_err)?;

    let spec = ReportSpec {
        n_classes: student.target_class_count(),
        bypass_threshold: cfg.attack_confidence_threshold,
        eff_thresholds: vec![0.95, 0.99],
        train_dist: Some(label_distribution(
            &data.student_train.labels,
            student.target_class_count(),
        )),
    };
    let wall_ms: f64 = transcript.attempts.iter().map(|a| a.wall_ms).sum();
    let report = metrics_report(&transcript.views(), &spec, wall_ms).map_err(lib_err)?;

    let out = &cfg.out;
    write_atomic_str(&out.join("transcript.jsonl"), &transcript.to_jsonl())?;
    write_atomic_str(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let summary = json!({
        "config": acfg,
        "stop": transcript.stop,
        "attempts": transcript.len(),
        "n_outputs": transcript.n_outputs,
        "n_target_classes": transcript.n_target_classes,
    });
    write_atomic_str(
        &out.join("attack_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;

    if cfg.attack_dump_crafted {
        let rows: Vec<Tensor<f64>> = transcript
            .attempts
            .iter()
            .map(|a| a.crafted.input.clone())
            .collect();
        let stacked = Tensor::stack_rows(&rows).map_err(lib_err)?;
        let path = out.join("crafted_inputs.idx");
        save_idx_images(&stacked, &path).map_err(lib_err)?;
    }

    if cfg.baseline_n > 0 {
        let (records, eff) = baseline_random(
            &student,
            &data.reject_pool,
            cfg.baseline_n,
            cfg.attack_confidence_threshold,
            cfg.seed,
        )
        .map_err(lib_err)?;
        write_atomic_str(&out.join("baseline.jsonl"), &records_to_jsonl(&records))?;
        eprintln!("baseline effectiveness over {} natural images: {eff:.4}", cfg.baseline_n);
    }

    eprintln!(
        "attack: {} attempts, stop {:?}, nabac {:?}, eff99 {:.4}",
        transcript.len(),
        transcript.stop,
        report.nabac,
        report.effectiveness["0.99"],
    );
    Ok(())
}

/// One transcript line of the defense evaluation: the attack record plus
/// the defense verdict for that input.
#[derive(Serialize)]
struct DefendedRecord {
    #[serde(flatten)]
    record: AttemptRecord,
    defense_verdict: String,
}

fn verdict(
    mode: DefenseMode,
    detector: &ThresholdDetector,
    evm: &EvmModel,
    delta: f64,
    activation: &[f64],
) -> String {
    let det = || {
        if detect_features(detector, activation) {
            "flagged".to_string()
        } else {
            "clean".to_string()
        }
    };
    let ev = || match evm_classify_features(evm, activation, delta).class {
        Some(c) => format!("accept:{c}"),
        None => "reject".to_string(),
    };
    match mode {
        DefenseMode::Threshold => det(),
        DefenseMode::Evm => ev(),
        DefenseMode::Both => format!("{},{}", det(), ev()),
    }
}

pub fn cmd_defend(
    cfg: &RunConfig,
    extractor: Option<PathBuf>,
    student: Option<PathBuf>,
    crafted: Option<PathBuf>,
) -> CmdResult {
    let ex_path = extractor.unwrap_or_else(|| cfg.out.join("extractor.ssg"));
    let st_path = student.unwrap_or_else(|| cfg.out.join("student.ssg"));
    require_file(&ex_path, "extractor model")?;
    let attacker_extractor = load_model_file(&ex_path).map_err(lib_err)?;
    let student = load_student(&st_path)?;
    let data = build_data(cfg)?;

    // Defenses run in the deployed model's own feature space.
    let defender = student.extractor().map_err(lib_err)?;
    let detector = fit_threshold(&defender, &data.student_train.inputs, cfg.defense_safety_factor)
        .map_err(lib_err)?;
    let train_feats = embed(&defender, &data.student_train.inputs).map_err(lib_err)?;
    let evm = fit_evm(
        &train_feats,
        &data.student_train.labels,
        cfg.defense_tail_size,
        cfg.defense_delta,
        cfg.defense_coverage,
    )
    .map_err(lib_err)?;

    // Crafted inputs: replay a dump, or run the attack live.
    let (crafted_inputs, mut records): (Tensor<f64>, Vec<AttemptRecord>) = match crafted {
        Some(path) => {
            require_file(&path, "crafted-input dump")?;
            let images = load_idx_images(&path).map_err(lib_err)?;
            let mut records = Vec::with_capacity(images.batch());
            for i in 0..images.batch() {
                let q = query_student(&student, &images.row_tensor(i)).map_err(lib_err)?;
                records.push(AttemptRecord {
                    i,
                    confidence: q.confidence,
                    predicted_class: q.class,
                    bypass: q.confidence >= cfg.attack_confidence_threshold && !q.rejected,
                    final_loss: None,
                    iterations: 0,
                    wall_ms: 0.0,
                });
            }
            (images, records)
        }
        None => {
            let acfg = attack_config(cfg, attacker_extractor.output_width());
            let transcript = brute_force(
                &attacker_extractor,
                &student,
                &acfg,
                ssg_core::attack::StopRule::Exhaust,
                Some(&data.reject_pool),
            )
            .map_err(lib_err)?;
            let rows: Vec<Tensor<f64>> = transcript
                .attempts
                .iter()
                .map(|a| a.crafted.input.clone())
                .collect();
            (
                Tensor::stack_rows(&rows).map_err(lib_err)?,
                transcript.records(),
            )
        }
    };

    // Verdicts over the defender's activations of each crafted input.
    let crafted_feats = embed(&defender, &crafted_inputs).map_err(lib_err)?;
    let mut flagged = 0usize;
    let mut rejected = 0usize;
    let mut lines = Vec::with_capacity(records.len());
    for (r, record) in records.drain(..).enumerate() {
        let act = crafted_feats.row(r);
        if detect_features(&detector, act) {
            flagged += 1;
        }
        if evm_classify_features(&evm, act, cfg.defense_delta).class.is_none() {
            rejected += 1;
        }
        lines.push(DefendedRecord {
            record,
            defense_verdict: verdict(cfg.defense_mode, &detector, &evm, cfg.defense_delta, act),
        });
    }
    let n_crafted = crafted_feats.batch();

    // Clean-data rates: the detector must pass its own fitting samples; the
    // EVM is probed with in-task holdout and out-of-task (foreign) images.
    let fit_flag_rate = (0..train_feats.batch())
        .filter(|&r| detect_features(&detector, train_feats.row(r)))
        .count() as f64
        / train_feats.batch() as f64;
    let holdout_feats = embed(&defender, &data.student_holdout.inputs).map_err(lib_err)?;
    let foreign_feats = embed(&defender, &data.reject_pool.inputs).map_err(lib_err)?;
    let holdout_accept = evm_accept_rate(&evm, &holdout_feats, cfg.defense_delta);
    let foreign_accept = evm_accept_rate(&evm, &foreign_feats, cfg.defense_delta);

    let out = &cfg.out;
    let mut jsonl = String::new();
    for l in &lines {
        jsonl.push_str(&serde_json::to_string(l).expect("record serializes"));
        jsonl.push('\n');
    }
    write_atomic_str(&out.join("defense_transcript.jsonl"), &jsonl)?;

    let report = json!({
        "detector": {
            "threshold": detector.threshold,
            "safety_factor": detector.safety_factor,
            "mean_max": detector.mean_max,
            "max_max": detector.max_max,
            "crafted_flag_rate": flagged as f64 / n_crafted.max(1) as f64,
            "fit_sample_flag_rate": fit_flag_rate,
        },
        "evm": {
            "stored_vectors": evm.vectors.len(),
            "tail_size": evm.tail_size,
            "delta": cfg.defense_delta,
            "crafted_reject_rate": rejected as f64 / n_crafted.max(1) as f64,
            "holdout_accept_rate": holdout_accept,
            "foreign_accept_rate": foreign_accept,
        },
        "crafted_inputs": n_crafted,
    });
    write_atomic_str(
        &out.join("defense_report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    eprintln!(
        "defend: {n_crafted} crafted inputs — detector flags {:.4}, EVM rejects {:.4}",
        flagged as f64 / n_crafted.max(1) as f64,
        rejected as f64 / n_crafted.max(1) as f64,
    );
    Ok(())
}

fn parse_axis(cfg: &RunConfig) -> Result<SweepAxis, CliError> {
    let vals = &cfg.sweep_values;
    let usizes = || -> Result<Vec<usize>, CliError> {
        vals.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::new(2, format!("sweep.values: '{s}' ({e})")))
            })
            .collect()
    };
    let floats = || -> Result<Vec<f64>, CliError> {
        vals.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::new(2, format!("sweep.values: '{s}' ({e})")))
            })
            .collect()
    };
    Ok(match cfg.sweep_axis.as_str() {
        "class_count" => SweepAxis::ClassCount(usizes()?),
        "layers_tuned" => SweepAxis::LayersTuned(usizes()?),
        "new_layers" => SweepAxis::NewLayers(usizes()?),
        "reject_pool" => SweepAxis::RejectPool(usizes()?),
        "train_size" => SweepAxis::TrainSize(usizes()?),
        "target_cap" => SweepAxis::TargetCap(floats()?),
        "imbalance" => SweepAxis::Imbalance(floats()?),
        "init_mode" => {
            let modes: Result<Vec<InitMode>, CliError> = vals
                .split(',')
                .map(|s| match s.trim() {
                    "blank" => Ok(InitMode::Blank),
                    "random" => Ok(InitMode::Random),
                    "sample" => Ok(InitMode::Sample),
                    other => Err(CliError::new(2, format!("sweep.values: '{other}'"))),
                })
                .collect();
            SweepAxis::InitMode(modes?)
        }
        other => return Err(CliError::new(2, format!("unknown sweep axis '{other}'"))),
    })
}

pub fn cmd_sweep(cfg: &RunConfig, plan: Option<PathBuf>) -> CmdResult {
    let mut cfg = cfg.clone();
    if let Some(p) = plan {
        require_file(&p, "sweep plan")?;
        let text = std::fs::read_to_string(&p)
            .map_err(|e| CliError::new(1, format!("read {}: {e}", p.display())))?;
        cfg.apply_text(&text).map_err(|m| CliError::new(2, m))?;
    }
    let axis = parse_axis(&cfg)?;
    let plan = SweepPlan {
        axis,
        repetitions: cfg.sweep_repetitions,
        seed: cfg.seed,
    };
    let base = SweepBase {
        corpus_classes: cfg.data_classes,
        corpus_per_class: cfg.data_per_class,
        image_side: cfg.data_image_side,
        source_classes: cfg.data_source_classes,
        target_classes: cfg.data_target_classes,
        train_per_class: cfg.data_train_per_class,
        holdout_per_class: cfg.data_holdout_per_class,
        hidden: cfg.teacher_hidden.clone(),
        teacher: teacher_config(&cfg),
        retrain: retrain_spec(&cfg),
        attack: attack_config(&cfg, 0),
    };

    // Build the bundle in a scratch directory, then swap it in whole so an
    // interrupted sweep never leaves a partial bundle at the final path.
    let final_dir = cfg.out.join("sweep");
    let tmp_dir = cfg.out.join("sweep.tmp");
    if tmp_dir.exists() {
        std::fs::remove_dir_all(&tmp_dir)
            .map_err(|e| CliError::new(1, format!("clear {}: {e}", tmp_dir.display())))?;
    }
    std::fs::create_dir_all(&tmp_dir)
        .map_err(|e| CliError::new(1, format!("mkdir {}: {e}", tmp_dir.display())))?;
    let report = sweep(&plan, &base, &tmp_dir).map_err(lib_err)?;
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir)
            .map_err(|e| CliError::new(1, format!("clear {}: {e}", final_dir.display())))?;
    }
    std::fs::rename(&tmp_dir, &final_dir)
        .map_err(|e| CliError::new(1, format!("rename to {}: {e}", final_dir.display())))?;

    eprintln!(
        "sweep: axis {} with {} cells x {} reps -> {}",
        report.axis,
        report.cells.len(),
        report.repetitions,
        final_dir.join("cells.csv").display()
    );
    Ok(())
}

pub fn cmd_report(
    cfg: &RunConfig,
    transcript: PathBuf,
    classes: Option<usize>,
    reject_index: Option<usize>,
) -> CmdResult {
    require_file(&transcript, "transcript")?;
    let text = std::fs::read_to_string(&transcript)
        .map_err(|e| CliError::new(1, format!("read {}: {e}", transcript.display())))?;
    let records = parse_jsonl(&text).map_err(lib_err)?;
    if records.is_empty() {
        return Err(CliError::new(1, "transcript has no attempt records"));
    }

    let inferred = records
        .iter()
        .map(|r| r.predicted_class)
        .filter(|c| reject_index != Some(*c))
        .max()
        .map_or(1, |m| m + 1);
    let n_classes = classes.unwrap_or(inferred);
    let views = views_from_records(&records, reject_index);
    let wall_ms: f64 = records.iter().map(|r| r.wall_ms).sum();
    let spec = ReportSpec::new(n_classes);
    let report = metrics_report(&views, &spec, wall_ms).map_err(lib_err)?;

    let out = &cfg.out;
    write_atomic_str(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut hist_csv = String::from("class,count\n");
    for (c, n) in &report.class_histogram {
        hist_csv.push_str(&format!("{c},{n}\n"));
    }
    write_atomic_str(&out.join("class_histogram.csv"), &hist_csv)?;
    eprintln!(
        "report: {} attempts, nabac {:?}, eff95 {:.4}, eff99 {:.4}",
        records.len(),
        report.nabac,
        report.effectiveness["0.95"],
        report.effectiveness["0.99"],
    );
    Ok(())
}
