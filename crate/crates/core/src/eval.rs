//! One-step and accumulative multi-step prediction, knowledge-state and
//! fused-embedding export.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, InteractionSequence};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{AtDkt, Feedback, FeedbackMode, ForwardOptions};
use crate::tape::Tape;

/// One predicted response.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionRecord {
    pub student_id: String,
    pub chunk: usize,
    /// 1-based position of the predicted step; always at least 2.
    pub step: usize,
    pub kc: usize,
    pub probability: f64,
    pub response: bool,
}

/// AUC and accuracy at threshold 0.5.
pub fn score(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    let p: Vec<f64> = records.iter().map(|r| r.probability).collect();
    let y: Vec<bool> = records.iter().map(|r| r.response).collect();
    Ok((metrics::auc(&p, &y)?, metrics::accuracy(&p, &y, 0.5)?))
}

/// Observed fractions of the accumulative protocol: 0.2 to 0.9 in steps of
/// 0.1.
pub const OBSERVED_FRACTIONS: [f64; 8] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiStepConfig {
    pub observed_fraction: f64,
    pub mode: FeedbackMode,
}

impl MultiStepConfig {
    /// Accepts only members of [`OBSERVED_FRACTIONS`].
    pub fn new(observed_fraction: f64, mode: FeedbackMode) -> Result<Self> {
        if !(observed_fraction > 0.0 && observed_fraction < 1.0) {
            return Err(Error::Config(format!(
                "observed fraction {observed_fraction} is outside (0, 1)"
            )));
        }
        match OBSERVED_FRACTIONS
            .iter()
            .find(|&&f| (f - observed_fraction).abs() < 1e-9)
        {
            Some(&f) => Ok(MultiStepConfig {
                observed_fraction: f,
                mode,
            }),
            None => Err(Error::Config(format!(
                "observed fraction {observed_fraction} is not one of 0.2, 0.3, ..., 0.9"
            ))),
        }
    }
}

/// Number of leading steps fed with ground truth: `⌈fraction · T⌉`, moved
/// back to the start of a question block it would split, or forward to the
/// block's end when that block starts the sequence.
pub fn observed_prefix(seq: &InteractionSequence, fraction: f64) -> usize {
    let len = seq.len();
    // Nudge down so 0.3·10 style products land on the integer.
    let raw = crate::math::ceil(fraction * len as f64 - 1e-9) as usize;
    let o = raw.clamp(1, len);
    if o >= len {
        return len;
    }
    let start = seq.block_start(o);
    if start == o {
        o
    } else if start > 0 {
        start
    } else {
        seq.block_end(o)
    }
}

fn batches(
    seqs: &[InteractionSequence],
    batch_size: usize,
) -> impl Iterator<Item = &[InteractionSequence]> {
    seqs.chunks(batch_size.max(1))
}

/// Teacher-forced next-step prediction: one record per step with a
/// predecessor, `p = r̂_{t-1}[kc_t]`.
pub fn one_step_eval(
    model: &AtDkt,
    seqs: &[InteractionSequence],
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    let n = model.config.num_kcs;
    let mut out = Vec::new();
    for chunk in batches(seqs, batch_size) {
        let refs: Vec<&InteractionSequence> = chunk.iter().collect();
        let batch = Batch::new(&refs, n)?;
        let mut tape = Tape::no_grad();
        let (_, graph) = model.forward(&mut tape, &batch, ForwardOptions::default())?;
        let r_hat = tape.value(graph.r_hat).data();
        for (b, seq) in chunk.iter().enumerate() {
            for t in 1..seq.len() {
                let row = (t - 1) * batch.batch + b;
                let step = &seq.steps[t];
                out.push(PredictionRecord {
                    student_id: seq.student_id.clone(),
                    chunk: seq.chunk,
                    step: t + 1,
                    kc: step.kc,
                    probability: r_hat[row * n + step.kc],
                    response: step.correct,
                });
            }
        }
    }
    Ok(out)
}

/// Result of one accumulative pass, with the interaction ids the model
/// consumed at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepOutput {
    pub records: Vec<PredictionRecord>,
    /// Per sequence: the observed prefix length and the fed interaction
    /// index at every step.
    pub fed: Vec<(usize, Vec<usize>)>,
}

/// Accumulative prediction: ground truth is fed for the observed prefix and
/// the model's own estimates afterwards. Records cover the unobserved span
/// only.
pub fn multistep_eval(
    model: &AtDkt,
    seqs: &[InteractionSequence],
    cfg: &MultiStepConfig,
    batch_size: usize,
) -> Result<MultiStepOutput> {
    let n = model.config.num_kcs;
    let mut out = MultiStepOutput {
        records: Vec::new(),
        fed: Vec::new(),
    };
    for chunk in batches(seqs, batch_size) {
        if let Some(short) = chunk.iter().find(|s| s.len() < 3) {
            return Err(Error::Precondition(format!(
                "multi-step evaluation needs at least 3 steps, {} has {}",
                short.student_id,
                short.len()
            )));
        }
        let observed: Vec<usize> = chunk
            .iter()
            .map(|s| observed_prefix(s, cfg.observed_fraction))
            .collect();
        let refs: Vec<&InteractionSequence> = chunk.iter().collect();
        let batch = Batch::new(&refs, n)?;
        let mut tape = Tape::no_grad();
        let opts = ForwardOptions {
            feedback: Feedback::Accumulative {
                observed: observed.clone(),
                mode: cfg.mode,
            },
            dropout_rng: None,
        };
        let (_, graph) = model.forward(&mut tape, &batch, opts)?;
        let r_hat = tape.value(graph.r_hat).data();
        for (b, seq) in chunk.iter().enumerate() {
            for t in observed[b].max(1)..seq.len() {
                let row = (t - 1) * batch.batch + b;
                let step = &seq.steps[t];
                out.records.push(PredictionRecord {
                    student_id: seq.student_id.clone(),
                    chunk: seq.chunk,
                    step: t + 1,
                    kc: step.kc,
                    probability: r_hat[row * n + step.kc],
                    response: step.correct,
                });
            }
            let fed = (0..seq.len())
                .map(|t| graph.fed_interactions[t * batch.batch + b])
                .collect();
            out.fed.push((observed[b], fed));
        }
    }
    Ok(out)
}

/// `r̂_t` restricted to some KCs, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    /// 1-based.
    pub step: usize,
    pub kc: usize,
    pub response: bool,
    pub probabilities: Vec<f64>,
}

pub fn export_states(
    model: &AtDkt,
    seq: &InteractionSequence,
    kc_subset: &[usize],
) -> Result<Vec<StateRow>> {
    let n = model.config.num_kcs;
    if let Some(&k) = kc_subset.iter().find(|&&k| k >= n) {
        return Err(Error::Index {
            context: "exported kc",
            index: k,
            size: n,
        });
    }
    let batch = Batch::new(&[seq], n)?;
    let mut tape = Tape::no_grad();
    let (_, graph) = model.forward(&mut tape, &batch, ForwardOptions::default())?;
    let r_hat = tape.value(graph.r_hat);
    Ok(seq
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| StateRow {
            step: t + 1,
            kc: s.kc,
            response: s.correct,
            probabilities: kc_subset.iter().map(|&k| r_hat.get2(t, k)).collect(),
        })
        .collect())
}

pub fn states_csv(kc_subset: &[usize], rows: &[StateRow]) -> String {
    let mut s = String::from("step,kc,response");
    for k in kc_subset {
        s.push_str(&format!(",kc_{k}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{}", r.step, r.kc, r.response as u8));
        for p in &r.probabilities {
            s.push_str(&format!(",{p}"));
        }
        s.push('\n');
    }
    s
}

/// A labelled LSTM input vector `m_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub student_id: String,
    pub chunk: usize,
    pub step: usize,
    pub kc: usize,
    pub response: bool,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingExport {
    pub rows: Vec<EmbeddingRow>,
    /// `(kc, response)` classes with fewer than the requested samples.
    pub short_classes: Vec<(usize, bool, usize)>,
}

/// Samples up to `per_class` fused vectors for each response class of the
/// `top_k` most frequent KCs.
pub fn export_fused_embeddings(
    model: &AtDkt,
    seqs: &[InteractionSequence],
    top_k: usize,
    per_class: usize,
    seed: u64,
) -> Result<EmbeddingExport> {
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for s in seqs {
        for st in &s.steps {
            *freq.entry(st.kc).or_default() += 1;
        }
    }
    let mut kcs: Vec<(usize, usize)> = freq.into_iter().collect();
    kcs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    kcs.truncate(top_k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut export = EmbeddingExport::default();
    for &(kc, _) in &kcs {
        for response in [false, true] {
            let mut pool: Vec<(usize, usize)> = seqs
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    s.steps
                        .iter()
                        .enumerate()
                        .filter(move |(_, st)| st.kc == kc && st.correct == response)
                        .map(move |(t, _)| (i, t))
                })
                .collect();
            if pool.len() < per_class {
                export.short_classes.push((kc, response, pool.len()));
            } else {
                pool.shuffle(&mut rng);
                pool.truncate(per_class);
                pool.sort_unstable();
            }
            chosen.extend(pool);
        }
    }

    // Forward each needed sequence once.
    let mut needed: Vec<usize> = chosen.iter().map(|c| c.0).collect();
    needed.sort_unstable();
    needed.dedup();
    let mut vectors: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &i in &needed {
        let batch = Batch::new(&[&seqs[i]], model.config.num_kcs)?;
        let mut tape = Tape::no_grad();
        let (_, graph) = model.forward(&mut tape, &batch, ForwardOptions::default())?;
        let m = tape.value(graph.m);
        vectors.insert(i, (0..seqs[i].len()).map(|t| m.row(t).to_vec()).collect());
    }
    for (i, t) in chosen {
        let s = &seqs[i];
        export.rows.push(EmbeddingRow {
            student_id: s.student_id.clone(),
            chunk: s.chunk,
            step: t + 1,
            kc: s.steps[t].kc,
            response: s.steps[t].correct,
            vector: vectors[&i][t].clone(),
        });
    }
    Ok(export)
}

pub fn embeddings_csv(rows: &[EmbeddingRow], dim: usize) -> String {
    let mut s = String::from("student_id,chunk,step,kc,response");
    for j in 0..dim {
        s.push_str(&format!(",m{j}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}",
            r.student_id, r.chunk, r.step, r.kc, r.response as u8
        ));
        for v in &r.vector {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn records_csv(records: &[PredictionRecord]) -> String {
    let mut s = String::from("student_id,chunk,step,kc,probability,response\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.student_id, r.chunk, r.step, r.kc, r.probability, r.response as u8
        ));
    }
    s
}
