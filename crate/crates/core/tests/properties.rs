mod common;

use atdkt_core::data::{
    compute_scoring_rates, expand_kc_level, filter_and_truncate, group_by_student, kfold_split,
    Batch, InteractionSequence, RawInteraction,
};
use atdkt_core::metrics::auc;
use atdkt_core::model::{AtDkt, ForwardOptions, ModelConfig, StepOutputs, Variant};
use atdkt_core::tape::Tape;
use atdkt_core::Tensor;
use common::{brute_auc, random_sequence, rng, uniform};
use proptest::prelude::*;
use rand::Rng;

const N: usize = 5;
const M: usize = 7;

fn small_model(variant: Variant, seed: u64) -> AtDkt {
    let mut c = ModelConfig::new(8, N, M);
    c.heads = 2;
    c.ik_delay = 2;
    c.variant = variant;
    c.init.embed_std = 0.5;
    AtDkt::new(c, seed).unwrap()
}

fn outputs(model: &AtDkt, seqs: &[&InteractionSequence]) -> Vec<Vec<StepOutputs>> {
    let batch = Batch::new(seqs, N).unwrap();
    let mut tape = Tape::no_grad();
    let (_, g) = model
        .forward(&mut tape, &batch, ForwardOptions::default())
        .unwrap();
    (0..seqs.len())
        .map(|b| g.step_outputs(&tape, &batch, b))
        .collect()
}

fn variant_of(i: u8) -> Variant {
    [
        Variant::Full,
        Variant::NoIk,
        Variant::NoQt,
        Variant::NoQtNoIk,
    ][i as usize % 4]
}

fn raw_log(seed: u64, students: usize) -> Vec<RawInteraction> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for s in 0..students {
        let len = r.random_range(1..12);
        for t in 0..len {
            let size = r.random_range(1..=3);
            let mut kcs: Vec<usize> = (0..size).map(|_| r.random_range(0..N)).collect();
            kcs.sort_unstable();
            kcs.dedup();
            out.push(
                RawInteraction::new(
                    format!("s{s}"),
                    r.random_range(0..M),
                    kcs,
                    r.random(),
                    t as i64 * 10,
                )
                .unwrap(),
            );
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[rows, cols], -20.0, 20.0);
        let valid: Vec<usize> = (0..rows).map(|_| r.random_range(1..=cols)).collect();
        let mut tape = Tape::no_grad();
        let v = tape.constant(x);
        let s = tape.masked_softmax_rows(v, &valid).unwrap();
        for (i, &len) in valid.iter().enumerate() {
            let row = tape.value(s).row(i);
            let total: f64 = row[..len].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(row[len..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn auc_matches_pairs_and_ignores_monotone_maps(
        scores in prop::collection::vec(0u8..20, 2..60),
        labels in prop::collection::vec(any::<bool>(), 2..60),
    ) {
        let n = scores.len().min(labels.len());
        let s: Vec<f64> = scores[..n].iter().map(|&v| v as f64 / 20.0).collect();
        let l = &labels[..n];
        prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
        let a = auc(&s, l).unwrap();
        prop_assert!((a - brute_auc(&s, l)).abs() < 1e-12);
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(a, auc(&mapped, l).unwrap());
    }

    #[test]
    fn scoring_rates_are_running_means(seed in any::<u64>(), len in 1usize..40) {
        let mut r = rng(seed);
        let mut seq = random_sequence(&mut r, "s", len, N, M);
        seq.steps.truncate(len);
        let rates = compute_scoring_rates(&seq);
        for (t, &rate) in rates.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&rate));
            let hits = seq.steps[..=t].iter().filter(|s| s.correct).count();
            prop_assert!((rate - hits as f64 / (t + 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn expansion_conserves_kcs_and_order(seed in any::<u64>(), students in 1usize..8) {
        let raw = raw_log(seed, students);
        let total_kcs: usize = raw.iter().map(|r| r.kc_ids.len()).sum();
        let logs = group_by_student(raw).unwrap();
        let seqs = expand_kc_level(&logs);
        prop_assert_eq!(seqs.iter().map(|s| s.len()).sum::<usize>(), total_kcs);
        for (log, seq) in logs.iter().zip(&seqs) {
            let mut t = 0;
            for r in &log.interactions {
                for &k in &r.kc_ids {
                    let s = &seq.steps[t];
                    prop_assert_eq!((s.question, s.kc, s.correct), (r.question_id, k, r.correct));
                    prop_assert_eq!(&s.kc_set, &r.kc_ids);
                    t += 1;
                }
            }
        }
    }

    #[test]
    fn truncation_keeps_order(seed in any::<u64>(), max_len in 3usize..10) {
        let logs = group_by_student(raw_log(seed, 6)).unwrap();
        let seqs = expand_kc_level(&logs);
        let (chunks, stats) = filter_and_truncate(seqs.clone(), 3, max_len).unwrap();
        let kept: usize = chunks.iter().map(|c| c.len()).sum();
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        prop_assert_eq!(kept + stats.dropped_steps, total);
        for c in &chunks {
            prop_assert!(c.len() >= 3 && c.len() <= max_len);
            let whole = seqs.iter().find(|s| s.student_id == c.student_id).unwrap();
            prop_assert_eq!(&whole.steps[c.chunk * max_len..c.chunk * max_len + c.len()], &c.steps[..]);
        }
    }

    #[test]
    fn folds_partition_students(seed in any::<u64>(), students in 5usize..40, k in 3usize..6) {
        prop_assume!(students >= k);
        let seqs: Vec<InteractionSequence> = (0..students)
            .map(|i| random_sequence(&mut rng(seed ^ i as u64), &format!("u{i}"), 3, N, M))
            .collect();
        let folds = kfold_split(&seqs, k, seed).unwrap();
        let mut all: Vec<String> = folds.folds.concat();
        all.sort();
        let mut ids: Vec<String> = seqs.iter().map(|s| s.student_id.clone()).collect();
        ids.sort();
        prop_assert_eq!(all, ids);
        let sizes: Vec<usize> = folds.folds.iter().map(|f| f.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for round in 0..k {
            let d = folds.fold_data(round, &seqs).unwrap();
            prop_assert_eq!(d.train.len() + d.valid.len() + d.test.len(), students);
            for s in &d.test {
                prop_assert!(!d.train.iter().chain(&d.valid).any(|o| o.student_id == s.student_id));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn outputs_ignore_future_steps(seed in any::<u64>(), v in 0u8..4, cut in 1usize..8) {
        let model = small_model(variant_of(v), seed);
        let mut r = rng(seed);
        let seq = random_sequence(&mut r, "a", 6, N, M);
        prop_assume!(cut < seq.len());
        let mut other = seq.clone();
        for s in &mut other.steps[cut..] {
            s.correct = !s.correct;
            s.question = (s.question + 1) % M;
            s.kc = (s.kc + 1) % N;
            s.kc_set = vec![s.kc];
        }
        let a = outputs(&model, &[&seq]);
        let b = outputs(&model, &[&other]);
        prop_assert_eq!(&a[0][..cut], &b[0][..cut]);
    }

    #[test]
    fn batch_composition_is_invisible(seed in any::<u64>(), v in 0u8..4, others in 1usize..4) {
        let model = small_model(variant_of(v), seed);
        let mut r = rng(seed);
        let target = random_sequence(&mut r, "t", 4, N, M);
        let mut group = vec![random_sequence(&mut r, "x", 9, N, M)];
        for i in 0..others {
            group.push(random_sequence(&mut r, &format!("o{i}"), 1 + i * 2, N, M));
        }
        group.insert(others / 2, target.clone());
        let alone = outputs(&model, &[&target]);
        let refs: Vec<&InteractionSequence> = group.iter().collect();
        let together = outputs(&model, &refs);
        prop_assert_eq!(&alone[0], &together[others / 2]);
        // Two copies of one student get identical outputs.
        let twins = outputs(&model, &[&target, &target]);
        prop_assert_eq!(&twins[0], &twins[1]);
    }

    #[test]
    fn heads_stay_in_open_unit_interval(seed in any::<u64>(), v in 0u8..4, scale in 0.1f64..50.0) {
        let mut model = small_model(variant_of(v), seed);
        for (_, t) in model.params.entries_mut() {
            for x in t.data_mut() {
                *x *= scale;
            }
        }
        let mut r = rng(seed);
        let seq = random_sequence(&mut r, "a", 5, N, M);
        let batch = Batch::new(&[&seq], N).unwrap();
        let mut tape = Tape::no_grad();
        let (_, g) = model.forward(&mut tape, &batch, ForwardOptions::default()).unwrap();
        for out in g.step_outputs(&tape, &batch, 0) {
            let mut all: Vec<f64> = out.r_hat.clone();
            all.extend(out.c_hat.iter().flatten());
            all.extend(out.y_hat);
            prop_assert!(all.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let l = g.losses(&tape);
        prop_assert!(l.total.is_finite());
    }

    #[test]
    fn gradients_add_over_losses(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
        let grad = |which: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.constant(b.clone());
            let p = tape.matmul(va, vb).unwrap();
            let l1 = tape.sum(p);
            let s = tape.sigmoid(va);
            let l2 = tape.mean(s);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(va).unwrap().to_vec()
        };
        let (g1, g2, g12) = (grad(1), grad(2), grad(3));
        for i in 0..g12.len() {
            prop_assert!((g12[i] - g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_equals_one_hot_product(seed in any::<u64>(), rows in 1usize..12, dim in 1usize..9) {
        let mut r = rng(seed);
        let table = uniform(&mut r, &[rows, dim], -3.0, 3.0);
        let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..rows)).collect();
        let mut one_hot = vec![0.0; idx.len() * rows];
        for (i, &k) in idx.iter().enumerate() {
            one_hot[i * rows + k] = 1.0;
        }
        let mut tape = Tape::no_grad();
        let t = tape.constant(table);
        let g = tape.gather(t, &idx).unwrap();
        let oh = tape.constant(Tensor::new(&[idx.len(), rows], one_hot).unwrap());
        let p = tape.matmul(oh, t).unwrap();
        for (x, y) in tape.value(g).data().iter().zip(tape.value(p).data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
