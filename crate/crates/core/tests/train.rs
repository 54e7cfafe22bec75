mod common;

use atdkt_core::data::{kfold_split, InteractionSequence, Split, Step};
use atdkt_core::model::{ModelConfig, Variant};
use atdkt_core::train::{
    hyperparam_search, run_cv, split_digest, train_fold, HyperGrid, Phase, TrainConfig,
};
use common::rng;
use rand::Rng;

/// KC 0 is always answered correctly and KC 1 never is.
fn separable(students: usize, seed: u64) -> Vec<InteractionSequence> {
    let mut r = rng(seed);
    (0..students)
        .map(|i| InteractionSequence {
            student_id: format!("t{i:03}"),
            chunk: 0,
            steps: (0..r.random_range(8..20))
                .map(|_| {
                    let kc = r.random_range(0..2);
                    Step {
                        question: kc,
                        kc,
                        kc_set: vec![kc],
                        correct: kc == 0,
                    }
                })
                .collect(),
        })
        .collect()
}

fn toy_model(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(16, 2, 2);
    c.heads = 2;
    c.ik_delay = 2;
    c.variant = variant;
    c
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 8,
        max_epochs: epochs,
        patience: epochs - 1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_is_learned() {
    let seqs = separable(60, 1);
    let folds = kfold_split(&seqs, 5, 2).unwrap();
    let data = folds.fold_data(0, &seqs).unwrap();
    for variant in [Variant::Full, Variant::NoQtNoIk] {
        let (res, _) = train_fold(&data, &toy_model(variant), &quick(3, 8), 0).unwrap();
        let first5 = &res.train_loss[..5];
        assert!(
            first5.windows(2).all(|w| w[1] < w[0]),
            "{variant}: {first5:?}"
        );
        assert!(res.test_auc > 0.95, "{variant}: {}", res.test_auc);
    }
}

#[test]
fn training_is_reproducible() {
    let seqs = separable(30, 4);
    let folds = kfold_split(&seqs, 3, 5).unwrap();
    let data = folds.fold_data(1, &seqs).unwrap();
    let a = train_fold(&data, &toy_model(Variant::Full), &quick(6, 3), 1).unwrap();
    let b = train_fold(&data, &toy_model(Variant::Full), &quick(6, 3), 1).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn test_split_is_read_once_after_selection() {
    let seqs = separable(30, 7);
    let folds = kfold_split(&seqs, 3, 8).unwrap();
    let data = folds.fold_data(2, &seqs).unwrap();
    let (res, _) = train_fold(&data, &toy_model(Variant::Full), &quick(9, 4), 2).unwrap();
    let test_digest = split_digest(&data.test);
    let test_reads: Vec<_> = res
        .reads
        .iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    assert_eq!(test_reads.len(), 1);
    assert_eq!(test_reads[0].phase, Phase::Test);
    assert_eq!(test_reads[0].digest, test_digest);
    assert_eq!(res.reads.last().unwrap().split, Split::Test);
    for r in &res.reads[..res.reads.len() - 1] {
        assert_ne!(r.digest, test_digest);
        let expected = if r.phase == Phase::Fit {
            &data.train
        } else {
            &data.valid
        };
        assert_eq!(r.digest, split_digest(expected));
    }
    // The kept checkpoint is the validation argmax.
    let best =
        res.valid_auc.iter().enumerate().fold(
            (0, f64::MIN),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
    assert_eq!(res.best_epoch, best.0 + 1);
    assert_eq!(res.best_valid_auc, best.1);
}

#[test]
fn cross_validation_report() {
    let seqs = separable(30, 10);
    let folds = kfold_split(&seqs, 3, 11).unwrap();
    let report = run_cv(&seqs, &folds, &toy_model(Variant::NoQtNoIk), &quick(12, 2)).unwrap();
    assert!(report.complete);
    assert_eq!(report.folds.len(), 3);
    let aucs: Vec<f64> = report.folds.iter().map(|f| f.test_auc).collect();
    let mean = aucs.iter().sum::<f64>() / 3.0;
    let std = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let s = report.auc.unwrap();
    assert!((s.mean - mean).abs() < 1e-12 && (s.std - std).abs() < 1e-12);
    assert_eq!(report.auc_text.unwrap(), format!("{mean:.4}±{std:.4}"));
}

#[test]
fn search_over_a_small_grid() {
    let seqs = separable(20, 13);
    let folds = kfold_split(&seqs, 4, 14).unwrap();
    let data = folds.fold_data(0, &seqs).unwrap();
    let grid = HyperGrid {
        dims: vec![64],
        enc_layers: vec![1],
        heads: vec![4],
        lrs: vec![1e-3],
        ik_delays: vec![0, 10],
        qt_weights: vec![0.5],
        ik_weights: vec![0.1, 0.5],
    };
    let cfg = TrainConfig {
        grid,
        ..quick(15, 2)
    };
    let base = ModelConfig::new(64, 2, 2);
    let out = hyperparam_search(&data, &base, &cfg, 9, 0).unwrap();
    assert_eq!(out.clipped_budget, Some(9));
    assert_eq!(out.trials.len(), 4);
    let mut idx: Vec<usize> = out.trials.iter().map(|t| t.grid_index).collect();
    idx.sort_unstable();
    assert_eq!(idx, vec![0, 1, 2, 3]);
    let argmax = out.trials.iter().enumerate().fold(0, |b, (i, t)| {
        if t.valid_auc > out.trials[b].valid_auc {
            i
        } else {
            b
        }
    });
    assert_eq!(out.best, argmax);
    assert_eq!(out.result.hyperparams, out.trials[argmax].params);

    let one = hyperparam_search(&data, &base, &cfg, 1, 0).unwrap();
    assert_eq!(one.trials.len(), 1);
    assert_eq!(one.best, 0);
    assert!(one.clipped_budget.is_none());
}

#[test]
fn rejects_bad_protocols() {
    let seqs = separable(12, 16);
    let folds = kfold_split(&seqs, 3, 17).unwrap();
    let data = folds.fold_data(0, &seqs).unwrap();
    let mut cfg = quick(1, 3);
    cfg.patience = 3;
    assert!(train_fold(&data, &toy_model(Variant::Full), &cfg, 0).is_err());
    let mut cfg = quick(1, 3);
    cfg.max_epochs = 201;
    assert!(train_fold(&data, &toy_model(Variant::Full), &cfg, 0).is_err());
}
