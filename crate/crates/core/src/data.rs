//! Interaction logs, KC-level expansion, length filtering, fold splits and
//! padded training batches.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MIN_LEN: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 200;

/// One question-level interaction `<q, {c}, r, t>`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RawInteraction {
    pub student_id: String,
    pub question_id: usize,
    /// Sorted, duplicate-free, nonempty.
    pub kc_ids: Vec<usize>,
    pub correct: bool,
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn new(
        student_id: impl Into<String>,
        question_id: usize,
        kc_ids: impl IntoIterator<Item = usize>,
        correct: bool,
        timestamp: i64,
    ) -> Result<Self> {
        let kc_ids: Vec<usize> = kc_ids
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if kc_ids.is_empty() {
            return Err(Error::Data(format!(
                "question {question_id} has an empty KC set"
            )));
        }
        Ok(RawInteraction {
            student_id: student_id.into(),
            question_id,
            kc_ids,
            correct,
            timestamp,
        })
    }
}

/// A student's interactions in timestamp order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentLog {
    pub student_id: String,
    pub interactions: Vec<RawInteraction>,
}

/// One KC-level step of an expanded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Step {
    pub question: usize,
    pub kc: usize,
    /// Every KC of the step's question, sorted.
    pub kc_set: Vec<usize>,
    pub correct: bool,
}

impl Step {
    /// Row of the interaction table: `kc` for a wrong answer, `kc + N` for a
    /// correct one.
    pub fn interaction_index(&self, num_kcs: usize) -> usize {
        self.kc + if self.correct { num_kcs } else { 0 }
    }
}

/// A KC-expanded, chronologically ordered interaction sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InteractionSequence {
    pub student_id: String,
    /// Position of this chunk among the student's chunks.
    pub chunk: usize,
    pub steps: Vec<Step>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Start index of the question block containing step `t`.
    pub fn block_start(&self, t: usize) -> usize {
        let mut s = t;
        while s > 0 && self.same_block(s - 1, s) {
            s -= 1;
        }
        s
    }

    /// One past the last index of the question block containing step `t`.
    pub fn block_end(&self, t: usize) -> usize {
        let mut e = t + 1;
        while e < self.steps.len() && self.same_block(e - 1, e) {
            e += 1;
        }
        e
    }

    /// Whether steps `a` and `a + 1 == b` expand the same question attempt.
    /// Responses are ignored so the block structure does not depend on them.
    fn same_block(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.steps[a], &self.steps[b]);
        x.question == y.question && x.kc_set == y.kc_set && x.kc < y.kc
    }
}

/// Size of the question and KC vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    pub questions: usize,
    pub kcs: usize,
}

impl Vocab {
    /// Smallest vocabulary covering every id in `seqs`.
    pub fn covering(seqs: &[InteractionSequence]) -> Self {
        let mut v = Vocab {
            questions: 0,
            kcs: 0,
        };
        for s in seqs.iter().flat_map(|s| &s.steps) {
            v.questions = v.questions.max(s.question + 1);
            for &k in &s.kc_set {
                v.kcs = v.kcs.max(k + 1);
            }
        }
        v
    }

    pub fn validate(&self, seqs: &[InteractionSequence]) -> Result<()> {
        for s in seqs.iter().flat_map(|s| &s.steps) {
            if s.question >= self.questions {
                return Err(Error::Index {
                    context: "question id",
                    index: s.question,
                    size: self.questions,
                });
            }
            if let Some(&k) = s.kc_set.iter().find(|&&k| k >= self.kcs) {
                return Err(Error::Index {
                    context: "kc id",
                    index: k,
                    size: self.kcs,
                });
            }
        }
        Ok(())
    }
}

/// Groups interactions by student (ordered by student id) and sorts each
/// student's interactions by timestamp.
pub fn group_by_student(raw: Vec<RawInteraction>) -> Result<Vec<StudentLog>> {
    let mut by_student: BTreeMap<String, Vec<RawInteraction>> = BTreeMap::new();
    for r in raw {
        by_student.entry(r.student_id.clone()).or_default().push(r);
    }
    by_student
        .into_iter()
        .map(|(student_id, mut interactions)| {
            interactions.sort_by_key(|r| r.timestamp);
            if let Some(w) = interactions
                .windows(2)
                .find(|w| w[0].timestamp == w[1].timestamp)
            {
                return Err(Error::Data(format!(
                    "student {student_id} has two interactions at timestamp {}",
                    w[0].timestamp
                )));
            }
            Ok(StudentLog {
                student_id,
                interactions,
            })
        })
        .collect()
}

/// Rewrites each question-level interaction with `k` KCs as `k` consecutive
/// KC-level steps in ascending KC order, each keeping the question's response
/// and full KC set.
pub fn expand_kc_level(logs: &[StudentLog]) -> Vec<InteractionSequence> {
    logs.iter()
        .map(|log| {
            let steps = log
                .interactions
                .iter()
                .flat_map(|r| {
                    r.kc_ids.iter().map(move |&kc| Step {
                        question: r.question_id,
                        kc,
                        kc_set: r.kc_ids.clone(),
                        correct: r.correct,
                    })
                })
                .collect();
            InteractionSequence {
                student_id: log.student_id.clone(),
                chunk: 0,
                steps,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FilterStats {
    /// Input sequences shorter than the minimum length.
    pub dropped_sequences: usize,
    /// Trailing chunks shorter than the minimum length.
    pub dropped_tail_chunks: usize,
    /// Steps lost with dropped sequences or chunks.
    pub dropped_steps: usize,
    pub output_sequences: usize,
}

/// Drops sequences shorter than `min_len` and splits the rest into
/// consecutive chunks of at most `max_len` steps. A trailing chunk shorter
/// than `min_len` is dropped as well.
pub fn filter_and_truncate(
    seqs: Vec<InteractionSequence>,
    min_len: usize,
    max_len: usize,
) -> Result<(Vec<InteractionSequence>, FilterStats)> {
    if max_len == 0 || min_len > max_len {
        return Err(Error::Config(format!(
            "length bounds min {min_len} / max {max_len} are inconsistent"
        )));
    }
    let mut stats = FilterStats::default();
    let mut out = Vec::new();
    for seq in seqs {
        if seq.len() < min_len {
            stats.dropped_sequences += 1;
            stats.dropped_steps += seq.len();
            continue;
        }
        for (i, chunk) in seq.steps.chunks(max_len).enumerate() {
            if chunk.len() < min_len {
                stats.dropped_tail_chunks += 1;
                stats.dropped_steps += chunk.len();
                continue;
            }
            out.push(InteractionSequence {
                student_id: seq.student_id.clone(),
                chunk: i,
                steps: chunk.to_vec(),
            });
        }
    }
    stats.output_sequences = out.len();
    Ok((out, stats))
}

/// Running fraction of correct responses through each step (1-based mean).
pub fn compute_scoring_rates(seq: &InteractionSequence) -> Vec<f64> {
    let mut correct = 0usize;
    seq.steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            correct += s.correct as usize;
            correct as f64 / (t + 1) as f64
        })
        .collect()
}

/// Multi-hot `[T′ × N]` KC membership of each step's question.
pub fn build_qt_targets(seq: &InteractionSequence, num_kcs: usize) -> Result<Tensor> {
    let mut out = vec![0.0; seq.len() * num_kcs];
    for (t, s) in seq.steps.iter().enumerate() {
        for &k in &s.kc_set {
            if k >= num_kcs {
                return Err(Error::Index {
                    context: "qt target kc",
                    index: k,
                    size: num_kcs,
                });
            }
            out[t * num_kcs + k] = 1.0;
        }
    }
    Tensor::new(&[seq.len(), num_kcs], out)
}

/// Mean number of KCs per distinct question.
pub fn avg_kcs_per_question(raw: &[RawInteraction]) -> Option<f64> {
    let mut sets: BTreeMap<usize, &[usize]> = BTreeMap::new();
    for r in raw {
        sets.entry(r.question_id).or_insert(&r.kc_ids);
    }
    if sets.is_empty() {
        return None;
    }
    let total: usize = sets.values().map(|s| s.len()).sum();
    Some(total as f64 / sets.len() as f64)
}

/// Student-level k-fold assignment. Fold `i` is the test split of round
/// `i`, fold `(i + 1) mod k` its validation split, the rest training.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldAssignment {
    pub folds: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Sequences of one cross-validation round.
#[derive(Debug, Clone, Default)]
pub struct FoldData {
    pub train: Vec<InteractionSequence>,
    pub valid: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

impl FoldData {
    pub fn split(&self, split: Split) -> &[InteractionSequence] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn split_of(&self, round: usize, student: &str) -> Option<Split> {
        let k = self.k();
        let fold = self
            .folds
            .iter()
            .position(|f| f.iter().any(|s| s == student))?;
        Some(if fold == round {
            Split::Test
        } else if fold == (round + 1) % k {
            Split::Valid
        } else {
            Split::Train
        })
    }

    /// Partitions `seqs` for round `round`.
    pub fn fold_data(&self, round: usize, seqs: &[InteractionSequence]) -> Result<FoldData> {
        let k = self.k();
        if round >= k {
            return Err(Error::Index {
                context: "fold round",
                index: round,
                size: k,
            });
        }
        let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, f) in self.folds.iter().enumerate() {
            for s in f {
                fold_of.insert(s.as_str(), i);
            }
        }
        let mut data = FoldData::default();
        for seq in seqs {
            let fold = *fold_of.get(seq.student_id.as_str()).ok_or_else(|| {
                Error::Data(format!(
                    "student {} is not in the fold assignment",
                    seq.student_id
                ))
            })?;
            let bucket = if fold == round {
                &mut data.test
            } else if fold == (round + 1) % k {
                &mut data.valid
            } else {
                &mut data.train
            };
            bucket.push(seq.clone());
        }
        Ok(data)
    }
}

/// Shuffles the distinct students of `seqs` under `seed` and deals them
/// into `k` contiguous folds whose sizes differ by at most one.
pub fn kfold_split(seqs: &[InteractionSequence], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 3 {
        return Err(Error::Config(format!("k-fold split needs k >= 3, got {k}")));
    }
    let students: BTreeSet<&str> = seqs.iter().map(|s| s.student_id.as_str()).collect();
    if students.len() < k {
        return Err(Error::Config(format!(
            "{} students cannot fill {k} folds",
            students.len()
        )));
    }
    let mut students: Vec<String> = students.into_iter().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);
    let n = students.len();
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        folds.push(students[start..start + size].to_vec());
        start += size;
    }
    Ok(FoldAssignment { folds })
}

/// Padded, time-major batch of sequences: row `t * batch + b` holds step
/// `t` of sequence `b`. Padded rows carry id 0 and are masked out of every
/// loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub steps: usize,
    pub batch: usize,
    pub num_kcs: usize,
    pub lengths: Vec<usize>,
    pub questions: Vec<usize>,
    pub kcs: Vec<usize>,
    /// `kc + correct · N`.
    pub interactions: Vec<usize>,
    pub responses: Vec<f64>,
    pub mask: Vec<f64>,
    /// Position `t` (0-based) of each row.
    pub positions: Vec<usize>,
    /// `[rows × N]` multi-hot question KC sets.
    pub qt_targets: Vec<f64>,
    pub scoring_rates: Vec<f64>,
    /// Flat index `row * N + kc_{t+1}` into the KT head output for every
    /// step with a successor.
    pub kt_index: Vec<usize>,
    pub kt_rows: Vec<usize>,
    pub kt_targets: Vec<f64>,
}

impl Batch {
    pub fn new(seqs: &[&InteractionSequence], num_kcs: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::Precondition("batch of empty sequences".into()));
        }
        let rows = steps * batch;
        let mut b = Batch {
            steps,
            batch,
            num_kcs,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            questions: vec![0; rows],
            kcs: vec![0; rows],
            interactions: vec![0; rows],
            responses: vec![0.0; rows],
            mask: vec![0.0; rows],
            positions: (0..rows).map(|r| r / batch).collect(),
            qt_targets: vec![0.0; rows * num_kcs],
            scoring_rates: vec![0.0; rows],
            kt_index: Vec::new(),
            kt_rows: Vec::new(),
            kt_targets: Vec::new(),
        };
        for (j, seq) in seqs.iter().enumerate() {
            let rates = compute_scoring_rates(seq);
            for (t, s) in seq.steps.iter().enumerate() {
                let row = t * batch + j;
                if s.kc >= num_kcs {
                    return Err(Error::Index {
                        context: "kc id",
                        index: s.kc,
                        size: num_kcs,
                    });
                }
                b.questions[row] = s.question;
                b.kcs[row] = s.kc;
                b.interactions[row] = s.interaction_index(num_kcs);
                b.responses[row] = s.correct as u8 as f64;
                b.mask[row] = 1.0;
                b.scoring_rates[row] = rates[t];
                for &k in &s.kc_set {
                    if k >= num_kcs {
                        return Err(Error::Index {
                            context: "qt target kc",
                            index: k,
                            size: num_kcs,
                        });
                    }
                    b.qt_targets[row * num_kcs + k] = 1.0;
                }
            }
        }
        // KT targets in row order so losses are independent of batch layout
        // within each time step.
        for t in 0..steps.saturating_sub(1) {
            for (j, seq) in seqs.iter().enumerate() {
                if t + 1 < seq.len() {
                    let row = t * batch + j;
                    let next = &seq.steps[t + 1];
                    b.kt_index.push(row * num_kcs + next.kc);
                    b.kt_rows.push(row);
                    b.kt_targets.push(next.correct as u8 as f64);
                }
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }
}
