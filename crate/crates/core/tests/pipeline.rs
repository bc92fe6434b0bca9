//! Transfer-pipeline verification: teacher convergence, extractor slicing,
//! student re-training variants (head-only, deeper tuning, added layers,
//! reject class) and the freeze / attacker-view invariants, all on small
//! synthetic corpora.

use ssg_core::data::{partition, synth_dataset, Dataset, SplitSpec};
use ssg_core::net::{save_model, LayerKind, LayerSpec};
use ssg_core::pipeline::{
    accuracy, default_cut, embed, make_extractor, mlp_arch, reject_rate, retrain, train_teacher,
    RejectSpec, RetrainSpec, StudentModel, TrainConfig,
};
use ssg_core::{Network, Tensor};

/// Small corpus split for fast tests: returns (teacher_set, student_train,
/// student_holdout, reject_pool) over an 8x8, `n_classes`-class corpus.
fn small_split(n_classes: usize, seed: u64) -> (Dataset, Dataset, Dataset, Dataset) {
    let ds = synth_dataset(n_classes, 26, 8, seed).unwrap();
    let n_source = n_classes / 2;
    let n_target = (n_classes - n_source).min(3);
    let spec = SplitSpec::balanced(
        (0..n_source).collect(),
        (n_source..n_source + n_target).collect(),
        16,
        6,
        seed,
    );
    partition(&ds, &spec).unwrap()
}

fn small_teacher_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 25,
        lr: 1e-3,
        batch_size: 16,
        holdout_per_class: 4,
        seed,
    }
}

fn small_teacher(seed: u64) -> (Network, Dataset, Dataset, Dataset) {
    let (teacher_set, train, holdout, reject) = small_split(8, seed);
    let arch = mlp_arch(64, &[40, 20], teacher_set.n_classes());
    let (net, _) = train_teacher(&teacher_set, arch, &small_teacher_cfg(seed)).unwrap();
    (net, train, holdout, reject)
}

// ---------------------------------------------------------------------------
// teacher training
// ---------------------------------------------------------------------------

#[test]
fn teacher_converges_on_separable_source_task() {
    let (teacher_set, ..) = small_split(8, 1);
    let arch = mlp_arch(64, &[40, 20], teacher_set.n_classes());
    let (_, log) = train_teacher(&teacher_set, arch, &small_teacher_cfg(1)).unwrap();
    let acc = log.final_holdout_acc().expect("holdout creates epoch rows");
    assert!(acc >= 0.95, "teacher holdout accuracy {acc} below 0.95");
    assert_eq!(log.rows.len(), 25, "one log row per epoch");
    assert!(log.to_csv().starts_with("epoch,loss,holdout_acc\n"));
}

#[test]
fn untrained_teacher_predicts_at_chance() {
    let (teacher_set, ..) = small_split(8, 2);
    let k = teacher_set.n_classes();
    let arch = mlp_arch(64, &[40, 20], k);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_teacher_cfg(2)
    };
    let (net, log) = train_teacher(&teacher_set, arch, &cfg).unwrap();
    assert!(log.rows.is_empty(), "zero epochs log nothing");
    // Chance level on the balanced source set is 1/k; allow a wide margin
    // since a random net may collapse onto one class (still 1/k here).
    let (probs, _) = net.forward(&teacher_set.inputs, None).unwrap();
    let hits = teacher_set
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| ssg_core::pipeline::argmax(probs.row(i)) == l)
        .count();
    let acc = hits as f64 / teacher_set.n() as f64;
    assert!(
        acc <= 2.0 / k as f64,
        "untrained accuracy {acc} not at chance (1/{k})"
    );
}

#[test]
fn teacher_training_is_seed_deterministic() {
    let (teacher_set, ..) = small_split(6, 3);
    let arch = || mlp_arch(64, &[24, 12], teacher_set.n_classes());
    let (a, _) = train_teacher(&teacher_set, arch(), &small_teacher_cfg(3)).unwrap();
    let (b, _) = train_teacher(&teacher_set, arch(), &small_teacher_cfg(3)).unwrap();
    let (c, _) = train_teacher(&teacher_set, arch(), &small_teacher_cfg(4)).unwrap();
    assert_eq!(save_model(&a), save_model(&b), "same seed, same teacher");
    assert_ne!(save_model(&a), save_model(&c), "seed changes the teacher");
}

// ---------------------------------------------------------------------------
// extractor slicing
// ---------------------------------------------------------------------------

#[test]
fn default_cut_ends_at_the_last_hidden_dense_output() {
    let teacher = Network::new(vec![8, 8], mlp_arch(64, &[40, 20], 4), 5).unwrap();
    let cut = default_cut(&teacher);
    // Layer order: flatten, dense40, relu, dense20, relu, dense4, softmax.
    // The extractor ends at dense20's output (pre-relu), so every feature
    // coordinate keeps a live input gradient and can take either sign.
    assert_eq!(cut, 4, "cut sits right after the last hidden dense layer");
    let ex = make_extractor(&teacher, cut).unwrap();
    assert_eq!(ex.n_layers(), 4);
    assert_eq!(ex.output_width(), 20, "feature width is the last hidden size");
    assert!(
        ex.layers().iter().all(|l| l.spec.frozen),
        "extractor ships fully frozen"
    );
}

#[test]
fn extractor_reproduces_teacher_activations_bit_exactly() {
    let (teacher, train, ..) = small_teacher(7);
    let cut = default_cut(&teacher);
    let ex = make_extractor(&teacher, cut).unwrap();
    let x = train.inputs.clone();
    let (direct, _) = teacher.forward(&x, Some(cut - 1)).unwrap();
    let (sliced, _) = ex.forward(&x, None).unwrap();
    assert!(sliced.bits_eq(&direct), "prefix forward must match the teacher");
    let emb = embed(&ex, &x).unwrap();
    assert!(emb.bits_eq(&direct), "embed must match the plain forward");
}

#[test]
fn embed_is_consistent_across_chunk_boundaries() {
    // More rows than one embedding chunk, to cross the internal boundary.
    let ds = synth_dataset(2, 300, 8, 9).unwrap();
    let ex = {
        let mut net = Network::new(vec![8, 8], vec![LayerSpec::flatten(), LayerSpec::dense(64, 6)], 3)
            .unwrap();
        net.set_frozen(0, true);
        net.set_frozen(1, true);
        net
    };
    let emb = embed(&ex, &ds.inputs).unwrap();
    let (all, _) = ex.forward(&ds.inputs, None).unwrap();
    assert!(emb.bits_eq(&all), "chunked embedding must equal one-shot forward");
}

#[test]
fn extractor_cut_may_not_cross_the_softmax_head() {
    let teacher = Network::new(vec![8, 8], mlp_arch(64, &[16], 4), 0).unwrap();
    assert!(make_extractor(&teacher, teacher.n_layers()).is_err());
}

// ---------------------------------------------------------------------------
// student re-training
// ---------------------------------------------------------------------------

#[test]
fn head_only_student_learns_the_target_task() {
    let (teacher, train, holdout, _) = small_teacher(11);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    // 20-d features give the linear head few coordinates to work with, so
    // it needs a hotter schedule than the wide desk-scale default.
    let spec = RetrainSpec {
        epochs: 300,
        lr: 1e-2,
        ..RetrainSpec::head_only(11)
    };
    let (student, log) = retrain(&ex, &train, &spec, None, Some(&holdout)).unwrap();
    let acc = accuracy(&student, &holdout).unwrap();
    assert!(acc >= 0.90, "student holdout accuracy {acc} below 0.90");
    assert_eq!(log.rows.len(), 300);
    assert_eq!(student.n_outputs(), train.n_classes());
    assert_eq!(student.target_class_count(), train.n_classes());
    assert!(student.reject_index.is_none());
}

#[test]
fn retraining_never_touches_the_attacker_view_extractor() {
    let (teacher, train, _, _) = small_teacher(13);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let before = save_model(&ex);

    // Even a retrain that tunes every extractor layer only mutates the
    // student's private copy.
    let spec = RetrainSpec {
        tune_from_layer: Some(0),
        epochs: 8,
        ..RetrainSpec::head_only(13)
    };
    let (student, _) = retrain(&ex, &train, &spec, None, None).unwrap();
    assert_eq!(save_model(&ex), before, "attacker-view extractor changed");

    // And the student's copy did move (it was unfrozen and trained).
    let tuned = student.extractor().unwrap();
    assert_ne!(save_model(&tuned), before, "unfrozen copy should have trained");
}

#[test]
fn frozen_extractor_layers_keep_exact_bits_through_retraining() {
    let (teacher, train, _, _) = small_teacher(17);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let ex_len = ex.n_layers();

    // Head-only: every extractor layer keeps its bits.
    let (student, _) = retrain(&ex, &train, &RetrainSpec::head_only(17), None, None).unwrap();
    assert_eq!(
        save_model(&student.extractor().unwrap()),
        save_model(&ex),
        "head-only retrain must keep the whole extractor frozen"
    );

    // Partial tuning from layer 3: layers below stay, layers at/above move.
    let spec = RetrainSpec {
        tune_from_layer: Some(3),
        epochs: 8,
        ..RetrainSpec::head_only(17)
    };
    let (student, _) = retrain(&ex, &train, &spec, None, None).unwrap();
    for i in 0..ex_len {
        let (orig, got) = (&ex.layers()[i].params, &student.net.layers()[i].params);
        match (orig, got) {
            (Some((ow, ob)), Some((gw, gb))) => {
                let same = gw.bits_eq(ow) && gb.bits_eq(ob);
                if i < 3 {
                    assert!(same, "layer {i} below the tune point must not move");
                } else {
                    assert!(!same, "layer {i} at/above the tune point should train");
                }
            }
            (None, None) => {}
            _ => panic!("layer {i} parameter presence changed"),
        }
    }
}

#[test]
fn added_layers_extend_the_head_structurally() {
    let (teacher, train, _, _) = small_teacher(19);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let ex_len = ex.n_layers();
    let spec = RetrainSpec {
        n_new_layers: 2,
        new_layer_width: Some(10),
        epochs: 4,
        ..RetrainSpec::head_only(19)
    };
    let (student, _) = retrain(&ex, &train, &spec, None, None).unwrap();
    // extractor + 2 x (dense, relu) + logit dense + softmax
    assert_eq!(student.net.n_layers(), ex_len + 6);
    assert_eq!(student.extractor_len, ex_len);
    let kinds: Vec<_> = student.net.layers()[ex_len..]
        .iter()
        .map(|l| l.spec.kind.clone())
        .collect();
    let k = train.n_classes();
    let m = ex.output_width();
    assert_eq!(
        kinds,
        vec![
            LayerKind::Dense { input: m, output: 10 },
            LayerKind::Relu,
            LayerKind::Dense { input: 10, output: 10 },
            LayerKind::Relu,
            LayerKind::Dense { input: 10, output: k },
            LayerKind::SoftmaxHead { classes: k },
        ]
    );
}

#[test]
fn reject_class_extends_the_output_layer() {
    let (teacher, train, holdout, reject_pool) = small_teacher(23);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let k = train.n_classes();
    let spec = RetrainSpec {
        reject: Some(RejectSpec { pool_size: 20 }),
        epochs: 300,
        lr: 1e-2,
        ..RetrainSpec::head_only(23)
    };
    let (student, _) = retrain(&ex, &train, &spec, Some(&reject_pool), Some(&holdout)).unwrap();
    assert_eq!(student.n_outputs(), k + 1);
    assert_eq!(student.target_class_count(), k);
    assert_eq!(student.reject_index, Some(k));
    assert_eq!(student.class_names.last().map(String::as_str), Some("reject"));
    assert_eq!(student.net.output_width(), k + 1);

    // The reject class must actually absorb out-of-task probes.
    let rr = reject_rate(&student, &reject_pool).unwrap();
    assert!(rr > 0.5, "reject rate on foreign samples only {rr}");
}

#[test]
fn reject_retraining_validates_its_pool() {
    let (teacher, train, _, reject_pool) = small_teacher(29);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let spec = RetrainSpec {
        reject: Some(RejectSpec { pool_size: 10 }),
        epochs: 1,
        ..RetrainSpec::head_only(29)
    };
    assert!(retrain(&ex, &train, &spec, None, None).is_err(), "pool required");

    let greedy = RetrainSpec {
        reject: Some(RejectSpec {
            pool_size: reject_pool.n() + 1,
        }),
        epochs: 1,
        ..RetrainSpec::head_only(29)
    };
    assert!(
        retrain(&ex, &train, &greedy, Some(&reject_pool), None).is_err(),
        "pool_size beyond the pool must fail"
    );
}

#[test]
fn retraining_is_seed_deterministic() {
    let (teacher, train, _, _) = small_teacher(31);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let spec = |seed| RetrainSpec {
        epochs: 10,
        ..RetrainSpec::head_only(seed)
    };
    let (a, _) = retrain(&ex, &train, &spec(31), None, None).unwrap();
    let (b, _) = retrain(&ex, &train, &spec(31), None, None).unwrap();
    let (c, _) = retrain(&ex, &train, &spec(32), None, None).unwrap();
    assert_eq!(save_model(&a.net), save_model(&b.net));
    assert_ne!(save_model(&a.net), save_model(&c.net));
}

/// The head-only fast path (features embedded once, head trained alone) must
/// be bit-identical to the composed run. The composed path is forced by
/// "tuning from" the parameter-free relu on top of the extractor, which
/// trains exactly the same weights through the full network.
#[test]
fn head_only_fast_path_matches_the_composed_run_bit_for_bit() {
    let (teacher, train, holdout, _) = small_teacher(11);
    let ex = make_extractor(&teacher, default_cut(&teacher)).unwrap();
    let fast = RetrainSpec {
        epochs: 25,
        ..RetrainSpec::head_only(11)
    };
    let slow = RetrainSpec {
        tune_from_layer: Some(ex.n_layers() - 1),
        ..fast.clone()
    };
    let (sf, lf) = retrain(&ex, &train, &fast, None, Some(&holdout)).unwrap();
    let (ss, ls) = retrain(&ex, &train, &slow, None, Some(&holdout)).unwrap();
    // The runs differ only in the (metadata) frozen flag on the top relu;
    // every parameter tensor must agree bit for bit.
    assert_eq!(sf.net.n_layers(), ss.net.n_layers());
    for (i, (lf_layer, ls_layer)) in sf.net.layers().iter().zip(ss.net.layers()).enumerate() {
        match (&lf_layer.params, &ls_layer.params) {
            (Some((fw, fb)), Some((sw, sb))) => {
                assert!(
                    fw.bits_eq(sw) && fb.bits_eq(sb),
                    "layer {i} parameters differ between fast and composed paths"
                );
            }
            (None, None) => {}
            _ => panic!("layer {i} parameter presence differs"),
        }
    }
    let last_f = lf.rows.last().unwrap();
    let last_s = ls.rows.last().unwrap();
    assert_eq!(last_f.loss.to_bits(), last_s.loss.to_bits());
    assert_eq!(last_f.holdout_acc, last_s.holdout_acc);
}

// ---------------------------------------------------------------------------
// evaluation helpers
// ---------------------------------------------------------------------------

/// Hand-built two-pixel student: flatten + identity dense + softmax, so the
/// argmax is just "which pixel is brighter".
fn toy_student(reject: bool) -> StudentModel {
    let mut net = Network::new(
        vec![1, 2],
        vec![
            LayerSpec::flatten(),
            LayerSpec::dense(2, 2),
            LayerSpec::softmax_head(2),
        ],
        0,
    )
    .unwrap();
    net.set_params(
        1,
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        Tensor::zeros(vec![2]),
    )
    .unwrap();
    let class_names = if reject {
        vec!["a".into(), "reject".into()]
    } else {
        vec!["a".into(), "b".into()]
    };
    StudentModel {
        net,
        extractor_len: 1,
        class_names,
        reject_index: reject.then_some(1),
    }
}

fn toy_set(rows: &[([f64; 2], usize)]) -> Dataset {
    let data: Vec<f64> = rows.iter().flat_map(|(px, _)| px.to_vec()).collect();
    Dataset {
        inputs: Tensor::new(vec![rows.len(), 1, 2], data).unwrap(),
        labels: rows.iter().map(|&(_, l)| l).collect(),
        class_names: vec!["a".into(), "b".into()],
    }
}

#[test]
fn accuracy_is_plain_fraction_correct() {
    let student = toy_student(false);
    // Three of four rows have the brighter pixel on the labeled side.
    let ds = toy_set(&[
        ([0.9, 0.1], 0),
        ([0.2, 0.8], 1),
        ([0.7, 0.3], 0),
        ([0.6, 0.4], 1), // wrong
    ]);
    assert_eq!(accuracy(&student, &ds).unwrap(), 0.75);

    let perfect = toy_set(&[([1.0, 0.0], 0), ([0.0, 1.0], 1)]);
    assert_eq!(accuracy(&student, &perfect).unwrap(), 1.0);
}

#[test]
fn reject_predictions_count_as_errors_and_feed_the_reject_rate() {
    let student = toy_student(true);
    // Both rows argmax to output 1, the reject class; labels say class 0.
    let ds = toy_set(&[([0.1, 0.9], 0), ([0.2, 0.8], 0)]);
    let ds = Dataset {
        class_names: vec!["a".into()],
        ..ds
    };
    assert_eq!(accuracy(&student, &ds).unwrap(), 0.0, "rejects are errors");
    assert_eq!(reject_rate(&student, &ds).unwrap(), 1.0);

    let kept = toy_set(&[([0.9, 0.1], 0), ([0.8, 0.2], 0)]);
    let kept = Dataset {
        class_names: vec!["a".into()],
        ..kept
    };
    assert_eq!(accuracy(&student, &kept).unwrap(), 1.0);
    assert_eq!(reject_rate(&student, &kept).unwrap(), 0.0);
}

#[test]
fn evaluation_rejects_empty_sets() {
    let student = toy_student(false);
    let empty = Dataset {
        inputs: Tensor::zeros(vec![0, 1, 2]),
        labels: vec![],
        class_names: vec!["a".into(), "b".into()],
    };
    assert!(accuracy(&student, &empty).is_err());
}
