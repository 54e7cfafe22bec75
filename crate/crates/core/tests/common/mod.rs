//! Independent oracles shared by the integration and acceptance suites:
//! central finite differences, a brute-force AUC, and a straight-line DKT.

#![allow(dead_code)]

use atdkt_core::data::{InteractionSequence, Step};
use atdkt_core::model::{AtDkt, ForwardOptions, KtHead, ModelConfig, Variant};
use atdkt_core::tape::{AttentionShape, Tape, Var};
use atdkt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Max relative error between the tape gradient of `sum(f(x) ⊙ w)` and
/// central differences, over every element of every input.
pub fn check_op(inputs: &[Tensor], f: &Build, seed: u64) -> f64 {
    let project = |tape: &mut Tape, out: Var| -> Var {
        let n: usize = tape.shape(out).iter().product();
        let shape = tape.shape(out).to_vec();
        let mut r = rng(seed ^ 0x5eed);
        let w = Tensor::new(&shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let w = tape.constant(w);
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let l = project(&mut tape, out);
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let g = tape
            .grad(vars[i])
            .map(|g| g.to_vec())
            .unwrap_or(vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[j], numeric));
        }
    }
    worst
}

/// Pushes values away from ReLU's kink.
fn off_kink(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(
        &shape,
        t.into_data()
            .into_iter()
            .map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
            .collect(),
    )
    .unwrap()
}

/// Worst finite-difference error of every tape operation for one seed.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, -1.0, 1.0);
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &Build| {
        out.push((name, check_op(&inputs, f, seed)));
    };

    run("matmul", vec![u(&[3, 4]), u(&[4, 2])], &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    run("matmul_nt", vec![u(&[3, 4]), u(&[5, 4])], &|t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    run("transpose", vec![u(&[3, 2])], &|t, v| {
        t.transpose(v[0]).unwrap()
    });
    run("add", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    run("sub", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    run("mul", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    run(
        "mul_scalar",
        vec![u(&[2, 3]), Tensor::scalar(0.7)],
        &|t, v| t.mul(v[0], v[1]).unwrap(),
    );
    run("scale", vec![u(&[2, 3])], &|t, v| t.scale(v[0], -1.7));
    run("row_scale", vec![u(&[3, 2])], &|t, v| {
        t.row_scale(v[0], vec![0.5, -1.2, 2.0]).unwrap()
    });
    run("add_bias", vec![u(&[3, 4]), u(&[4])], &|t, v| {
        t.add_bias(v[0], v[1]).unwrap()
    });
    run("sigmoid", vec![u(&[2, 3])], &|t, v| t.sigmoid(v[0]));
    run("tanh", vec![u(&[2, 3])], &|t, v| t.tanh(v[0]));
    run("relu", vec![off_kink(u(&[2, 3]))], &|t, v| t.relu(v[0]));
    run("gather", vec![u(&[4, 3])], &|t, v| {
        t.gather(v[0], &[1, 3, 1, 0]).unwrap()
    });
    run("embedding_lookup", vec![u(&[4, 3])], &|t, v| {
        let a = t.embedding_lookup(v[0], 2).unwrap();
        let b = t.embedding_lookup(v[0], 2).unwrap();
        let c = t.embedding_lookup(v[0], 0).unwrap();
        let ab = t.mul(a, b).unwrap();
        t.add(ab, c).unwrap()
    });
    run("pick", vec![u(&[3, 4])], &|t, v| {
        t.pick(v[0], &[0, 5, 11, 5]).unwrap()
    });
    run("slice_rows", vec![u(&[4, 3])], &|t, v| {
        t.slice_rows(v[0], 1, 2).unwrap()
    });
    run("slice_cols", vec![u(&[3, 4])], &|t, v| {
        t.slice_cols(v[0], 1, 2).unwrap()
    });
    run("concat_rows", vec![u(&[2, 3]), u(&[1, 3])], &|t, v| {
        t.concat_rows(&[v[0], v[1], v[0]]).unwrap()
    });
    run("masked_softmax_rows", vec![u(&[3, 4])], &|t, v| {
        t.masked_softmax_rows(v[0], &[1, 3, 4]).unwrap()
    });
    run("masked_softmax", vec![u(&[4])], &|t, v| {
        t.masked_softmax(v[0], 3).unwrap()
    });
    run("layer_norm", vec![u(&[3, 4]), u(&[4]), u(&[4])], &|t, v| {
        t.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    run(
        "causal_attention",
        vec![u(&[6, 4]), u(&[6, 4]), u(&[6, 4])],
        &|t, v| {
            let shape = AttentionShape {
                steps: 3,
                batch: 2,
                heads: 2,
                scale: 0.7,
            };
            t.causal_attention(v[0], v[1], v[2], shape).unwrap()
        },
    );
    run("sum", vec![u(&[2, 3])], &|t, v| t.sum(v[0]));
    run("mean", vec![u(&[2, 3])], &|t, v| t.mean(v[0]));
    run("bce", vec![u(&[6])], &|t, v| {
        let p = t.sigmoid(v[0]);
        t.bce(
            p,
            vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        )
        .unwrap()
    });
    run("mse", vec![u(&[5])], &|t, v| {
        t.mse(
            v[0],
            vec![0.2, 1.0, 0.5, 0.0, 0.7],
            vec![1.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap()
    });
    out
}

/// Toy corpus for the model gradient check: `T' = 3` per sequence with a
/// two-KC question.
pub fn toy_sequences(seed: u64) -> Vec<InteractionSequence> {
    let mut r = rng(seed ^ 0x70);
    let mut mk = |id: &str| {
        let a = r.random::<bool>();
        let b = r.random::<bool>();
        InteractionSequence {
            student_id: id.into(),
            chunk: 0,
            steps: vec![
                Step {
                    question: 0,
                    kc: 0,
                    kc_set: vec![0, 2],
                    correct: a,
                },
                Step {
                    question: 0,
                    kc: 2,
                    kc_set: vec![0, 2],
                    correct: a,
                },
                Step {
                    question: 1,
                    kc: 1,
                    kc_set: vec![1],
                    correct: b,
                },
            ],
        }
    };
    vec![mk("a"), mk("b")]
}

pub fn toy_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(4, 3, 2);
    c.heads = 2;
    c.ik_delay = 1;
    c.qt_weight = 0.5;
    c.ik_weight = 0.3;
    c.variant = variant;
    c.init.embed_std = 0.5;
    c
}

/// Worst finite-difference error over every parameter element of the toy
/// model's total loss.
pub fn model_gradient_error(seed: u64, variant: Variant) -> f64 {
    let seqs = toy_sequences(seed);
    let refs: Vec<&InteractionSequence> = seqs.iter().collect();
    let model = AtDkt::new(toy_config(variant), seed).unwrap();
    let batch = atdkt_core::data::Batch::new(&refs, 3).unwrap();
    let loss_of = |m: &AtDkt| -> f64 {
        let mut tape = Tape::no_grad();
        let (_, g) = m
            .forward(&mut tape, &batch, ForwardOptions::default())
            .unwrap();
        tape.value(g.loss).data()[0]
    };
    let mut tape = Tape::new();
    let (vars, graph) = model
        .forward(&mut tape, &batch, ForwardOptions::default())
        .unwrap();
    tape.backward(graph.loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .entries()
        .iter()
        .map(|(_, v)| tape.grad(**v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    let mut worst: f64 = 0.0;
    let count = model.params.entries().len();
    for p in 0..count {
        let len = model.params.entries()[p].1.len();
        for j in 0..len {
            let analytic = grads[p].get(j).copied().unwrap_or(0.0);
            // A stencil straddling a ReLU kink measures neither one-sided
            // slope, so a narrower one is tried before reporting an error.
            let mut best = f64::INFINITY;
            for h in [FD_STEP, FD_STEP / 10.0] {
                let mut m = model.clone();
                m.params.entries_mut()[p].1.data_mut()[j] += h;
                let up = loss_of(&m);
                m.params.entries_mut()[p].1.data_mut()[j] -= 2.0 * h;
                let down = loss_of(&m);
                best = best.min(rel_err(analytic, (up - down) / (2.0 * h)));
                if best <= FD_TOL {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    worst
}

/// Pairwise AUC: share of (positive, negative) pairs ranked correctly,
/// ties counted one half.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-30.0, 30.0)).exp())
}

/// Plain DKT written gate by gate: `x_t = X[k + r·N]`,
/// `h_t = LSTM(h_{t-1}, x_t)`, `r̂_t = σ(W h_t + b)`. Returns `r̂_t` per step.
pub fn reference_dkt(model: &AtDkt, seq: &InteractionSequence) -> Vec<Vec<f64>> {
    let c = &model.config;
    assert_eq!(c.variant, Variant::NoQtNoIk);
    let (d, n) = (c.dim, c.num_kcs);
    let w = &model.params;
    let x_table = &w.interaction_embed;
    let (wih, whh, bias) = (&w.lstm.w_ih, &w.lstm.w_hh, &w.lstm.bias);
    let KtHead::Linear(head) = &w.kt_head else {
        panic!("vanilla DKT has a linear head")
    };
    let mut h = vec![0.0; d];
    let mut cell = vec![0.0; d];
    let mut out = Vec::new();
    for s in &seq.steps {
        let x = x_table.row(s.kc + if s.correct { n } else { 0 });
        let mut gates = vec![0.0; 4 * d];
        for (g, gate) in gates.iter_mut().enumerate() {
            let mut acc = bias.data()[g];
            for j in 0..d {
                acc += wih.get2(g, j) * x[j];
            }
            for j in 0..d {
                acc += whh.get2(g, j) * h[j];
            }
            *gate = acc;
        }
        for j in 0..d {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[d + j]);
            let gg = gates[2 * d + j].tanh();
            let o = sigmoid(gates[3 * d + j]);
            cell[j] = f * cell[j] + i * gg;
            h[j] = o * cell[j].tanh();
        }
        let r: Vec<f64> = (0..n)
            .map(|k| {
                let mut z = head.bias.data()[k];
                for j in 0..d {
                    z += head.weight.get2(k, j) * h[j];
                }
                sigmoid(z)
            })
            .collect();
        out.push(r);
    }
    out
}

/// Random KC-expanded sequence over `m` questions and `n` KCs.
pub fn random_sequence(
    r: &mut ChaCha8Rng,
    id: &str,
    questions: usize,
    n: usize,
    m: usize,
) -> InteractionSequence {
    let mut steps = Vec::new();
    for _ in 0..questions {
        let q = r.random_range(0..m);
        let size = r.random_range(1..=n.min(3));
        let mut set: Vec<usize> = (0..n).collect();
        for i in 0..size {
            let j = r.random_range(i..n);
            set.swap(i, j);
        }
        let mut set = set[..size].to_vec();
        set.sort_unstable();
        let correct = r.random::<bool>();
        for &k in &set {
            steps.push(Step {
                question: q,
                kc: k,
                kc_set: set.clone(),
                correct,
            });
        }
    }
    InteractionSequence {
        student_id: id.into(),
        chunk: 0,
        steps,
    }
}
