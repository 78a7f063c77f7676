use ecan::banks::FeatureBank;
use ecan::data::{generate_pair, Corpus, ShiftSpec};
use ecan::error::EcanError;
use ecan::eval::predict;
use ecan::grad::{normalize_row, Tensor};
use ecan::losses::HyperParams;
use ecan::model::{EcanModel, ModelSpec};
use ecan::trainer::{adapt, pretrain, Ablation, Adaptation};

fn small_task(seed: u64) -> (Corpus, Corpus) {
    let spec = ShiftSpec {
        samples_per_class: 40,
        ..ShiftSpec::canonical(seed)
    };
    generate_pair(&spec).unwrap()
}

fn small_hp(seed: u64) -> HyperParams {
    HyperParams {
        seed,
        pretrain_epochs: 30,
        epochs: 3,
        ..HyperParams::default()
    }
}

fn spec_for(c: &Corpus) -> ModelSpec {
    ModelSpec::new(c.dim(), vec![16], 8, c.class_count())
}

fn bits(model: &EcanModel) -> Vec<u64> {
    model
        .parameters()
        .iter()
        .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn pretrain_fits_separable_data() {
    let spec = ShiftSpec {
        class_count: 2,
        samples_per_class: 100,
        ..ShiftSpec::canonical(11).unshifted()
    };
    let (source, _) = generate_pair(&spec).unwrap();
    let hp = HyperParams {
        pretrain_epochs: 100,
        seed: 11,
        ..HyperParams::default()
    };
    let model = pretrain(&source, spec_for(&source), &hp).unwrap();
    let predictions = predict(&model, &source).unwrap();
    let labels = source.labels().unwrap();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    assert!(correct as f64 / labels.len() as f64 >= 0.95, "{correct} of {}", labels.len());
}

#[test]
fn pretrain_is_deterministic() {
    let (source, _) = small_task(2);
    let a = pretrain(&source, spec_for(&source), &small_hp(2)).unwrap();
    let b = pretrain(&source, spec_for(&source), &small_hp(2)).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let c = pretrain(&source, spec_for(&source), &small_hp(3)).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn zero_pretrain_epochs_returns_initial_model() {
    let (source, _) = small_task(4);
    let hp = HyperParams {
        pretrain_epochs: 0,
        ..small_hp(4)
    };
    let model = pretrain(&source, spec_for(&source), &hp).unwrap();
    assert_eq!(model, EcanModel::init(spec_for(&source), 4).unwrap());
}

#[test]
fn pretrain_rejects_unlabeled_or_mismatched_source() {
    let (source, _) = small_task(5);
    let hp = small_hp(5);
    assert!(pretrain(&source.without_labels(), spec_for(&source), &hp).is_err());
    let wrong = ModelSpec::new(source.dim(), vec![16], 8, 3);
    assert!(matches!(pretrain(&source, wrong, &hp), Err(EcanError::Config(_))));
}

#[test]
fn zero_adaptation_epochs_leave_model_unchanged() {
    let (source, target) = small_task(6);
    let model = pretrain(&source, spec_for(&source), &small_hp(6)).unwrap();
    let hp = HyperParams {
        epochs: 0,
        ..small_hp(6)
    };
    let (adapted, log) = adapt(model.clone(), &target, &hp, Ablation::FULL).unwrap();
    assert_eq!(adapted, model);
    assert!(log.records.is_empty());
}

#[test]
fn adapt_rejects_class_count_mismatch() {
    let (source, _) = small_task(7);
    let model = pretrain(&source, spec_for(&source), &small_hp(7)).unwrap();
    let three = ShiftSpec {
        class_count: 3,
        samples_per_class: 20,
        ..ShiftSpec::canonical(7)
    };
    let (_, target) = generate_pair(&three).unwrap();
    let err = adapt(model, &target, &small_hp(7), Ablation::FULL).unwrap_err();
    assert!(matches!(err, EcanError::Config(_)), "{err:?}");
}

#[test]
fn adaptation_never_reads_target_labels() {
    let (source, target) = small_task(8);
    let model = pretrain(&source, spec_for(&source), &small_hp(8)).unwrap();
    let mut permuted = target.labels().unwrap().to_vec();
    permuted.reverse();
    permuted.rotate_left(7);
    let shuffled = target.with_labels(permuted).unwrap();
    let hp = small_hp(8);
    let (a, log_a) = adapt(model.clone(), &target, &hp, Ablation::FULL).unwrap();
    let (b, log_b) = adapt(model.clone(), &shuffled, &hp, Ablation::FULL).unwrap();
    let (c, _) = adapt(model, &target.without_labels(), &hp, Ablation::FULL).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
    assert_eq!(log_a.to_jsonl(), log_b.to_jsonl());
}

#[test]
fn banks_hold_current_outputs_after_every_step() {
    let (source, target) = small_task(9);
    let model = pretrain(&source, spec_for(&source), &small_hp(9)).unwrap();
    let mut run = Adaptation::new(model, &target, &small_hp(9), Ablation::FULL).unwrap();
    for epoch in 0..2 {
        for batch in run.epoch_batches(epoch) {
            let before = run.banks().clone();
            let expected = run.model().forward(&target.gather(&batch).unwrap()).unwrap();
            run.step(&batch).unwrap();
            let after = run.banks();
            let d = after.features.dim();
            for i in 0..target.len() {
                match batch.iter().position(|&b| b == i) {
                    Some(r) => {
                        let mut z = vec![0.0; d];
                        normalize_row(expected.0.row(r), &mut z);
                        assert_eq!(after.features.row(i), &z[..], "feature row {i}");
                        assert_eq!(after.scores.row(i), expected.1.row(r), "score row {i}");
                    }
                    None => {
                        assert_eq!(after.features.row(i), before.features.row(i));
                        assert_eq!(after.scores.row(i), before.scores.row(i));
                    }
                }
            }
        }
        // Every row was refreshed during the epoch, including the partial batch.
        assert!(run.epoch_batches(epoch).iter().map(Vec::len).sum::<usize>() == target.len());
    }
}

#[test]
fn first_step_bank_matches_fresh_model_bank() {
    let (source, target) = small_task(10);
    let model = pretrain(&source, spec_for(&source), &small_hp(10)).unwrap();
    let run = Adaptation::new(model.clone(), &target, &small_hp(10), Ablation::FULL).unwrap();
    let (features, _) = model.forward(&target.features()).unwrap();
    assert_eq!(run.banks().features, FeatureBank::from_raw(&features).unwrap());
}

fn collapsed_model(target: &Corpus, seed: u64) -> EcanModel {
    let mut model = EcanModel::init(spec_for(target), seed).unwrap();
    let c = model.class_count();
    let head = model.classifier_mut();
    head.weight = Tensor::matrix(head.fan_in(), c, vec![0.0; head.fan_in() * c]).unwrap();
    let mut bias = vec![0.0; c];
    bias[0] = 4.0;
    head.bias = Tensor::vector(bias);
    model
}

#[test]
fn diversity_alone_spreads_a_collapsed_model() {
    let (_, target) = small_task(12);
    let hp = HyperParams {
        lambda: 0.0,
        beta: 0.0,
        lr_adapt: 1e-3,
        epochs: 10,
        ..small_hp(12)
    };
    let model = collapsed_model(&target, 12);
    assert!(predict(&model, &target).unwrap().iter().all(|&p| p == 0));
    let (_, log) = adapt(model, &target.without_labels(), &hp, Ablation::FULL).unwrap();
    let div: Vec<f64> = log.records.iter().map(|r| r.div).collect();
    for w in div.windows(2) {
        assert!(w[1] < w[0], "div did not strictly decrease: {div:?}");
    }
    assert!(log.records.iter().all(|r| r.ncl == 0.0 && r.scl == 0.0));
}

#[test]
fn diversity_is_non_increasing_with_small_steps() {
    for seed in 0..3 {
        let (source, target) = small_task(seed);
        let model = pretrain(&source, spec_for(&source), &small_hp(seed)).unwrap();
        let hp = HyperParams {
            lambda: 0.0,
            beta: 0.0,
            lr_adapt: 1e-3,
            epochs: 8,
            ..small_hp(seed)
        };
        let (_, log) = adapt(model, &target.without_labels(), &hp, Ablation::FULL).unwrap();
        for w in log.records.windows(2) {
            assert!(w[1].div <= w[0].div + 1e-3, "seed {seed}: {} then {}", w[0].div, w[1].div);
        }
    }
}

#[test]
fn run_log_is_deterministic_and_gapless() {
    let (source, target) = small_task(13);
    let model = pretrain(&source, spec_for(&source), &small_hp(13)).unwrap();
    let hp = small_hp(13);
    let (a, log_a) = adapt(model.clone(), &target, &hp, Ablation::FULL).unwrap();
    let (b, log_b) = adapt(model, &target, &hp, Ablation::FULL).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(log_a.to_jsonl(), log_b.to_jsonl());
    let epochs: Vec<usize> = log_a.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (1..=hp.epochs).collect::<Vec<_>>());
    for r in &log_a.records {
        let expected = r.div + hp.lambda * r.ncl + hp.beta * r.scl;
        assert!((r.total - expected).abs() < 1e-9);
    }
}

#[test]
fn disabled_terms_are_logged_as_zero() {
    let (source, target) = small_task(14);
    let model = pretrain(&source, spec_for(&source), &small_hp(14)).unwrap();
    let ablation = Ablation {
        disable_ncl: true,
        disable_scl: true,
        disable_div: false,
    };
    let (_, log) = adapt(model, &target, &small_hp(14), ablation).unwrap();
    for r in &log.records {
        assert_eq!((r.ncl, r.scl), (0.0, 0.0));
        assert!((r.total - r.div).abs() < 1e-12);
    }
}
