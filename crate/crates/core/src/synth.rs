//! Synthetic student populations with known response probabilities.
//!
//! Each student has a mastery level in `[0, 1]` for every KC. A question is
//! known with probability `σ(logit(m̄) + shift_q)`, where `m̄` is the mean
//! mastery over the question's KCs; responses then follow
//! `guess + (1 - slip - guess) · known`. Every correct practice moves the mastery of
//! the question's KCs towards 1 by `learn_rate`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::RawInteraction;
use crate::error::{Error, Result};
use crate::eval::PredictionRecord;
use crate::math;
use crate::metrics;

/// Distribution of a student's initial mastery of a KC.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum MasteryDist {
    /// `σ(mean + ability_s + offset_k + noise_sk)` with zero-mean normal
    /// student, KC and residual terms.
    Logistic {
        mean: f64,
        ability_std: f64,
        kc_std: f64,
        noise_std: f64,
    },
    /// Mastered (1) with probability `p`, else 0.
    Bernoulli {
        p: f64,
    },
    Constant {
        value: f64,
    },
}

/// How students move through the question bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum QuestionOrder {
    /// Every attempt draws a question uniformly.
    Uniform,
    /// The bank is laid out by topic: question `q` always covers KC
    /// `q·N/M`. Students start at a random question and advance by
    /// `0..=max_stride` positions per attempt, wrapping around.
    Curriculum { max_stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthSpec {
    pub students: usize,
    pub num_kcs: usize,
    pub num_questions: usize,
    /// Target mean of KCs per question; counts are `1 + Binomial(max - 1, p)`
    /// with `p` chosen to hit the mean.
    pub kcs_per_question: f64,
    pub max_kcs_per_question: usize,
    pub initial_mastery: MasteryDist,
    /// Std of the per-question logit shift.
    pub question_std: f64,
    pub learn_rate: f64,
    pub guess: f64,
    pub slip: f64,
    /// Question attempts per student, uniform in `min..=max`.
    pub min_questions: usize,
    pub max_questions: usize,
    pub order: QuestionOrder,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            students: 500,
            num_kcs: 20,
            num_questions: 200,
            kcs_per_question: 1.36,
            max_kcs_per_question: 3,
            initial_mastery: MasteryDist::Logistic {
                mean: -0.5,
                ability_std: 1.5,
                kc_std: 1.0,
                noise_std: 0.5,
            },
            question_std: 1.0,
            learn_rate: 0.05,
            guess: 0.1,
            slip: 0.1,
            min_questions: 10,
            max_questions: 78,
            order: QuestionOrder::Curriculum { max_stride: 2 },
            seed: 7,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} is not a probability")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} = {v} must be finite and >= 0"
        )))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.students == 0 || self.num_kcs == 0 || self.num_questions == 0 {
            return Err(Error::Config(
                "students, KCs and questions must be positive".into(),
            ));
        }
        unit("guess", self.guess)?;
        unit("slip", self.slip)?;
        unit("learn_rate", self.learn_rate)?;
        if self.guess + self.slip >= 1.0 {
            return Err(Error::Config(format!(
                "guess + slip = {} leaves responses uninformative",
                self.guess + self.slip
            )));
        }
        if self.max_kcs_per_question == 0 || self.max_kcs_per_question > self.num_kcs {
            return Err(Error::Config(format!(
                "max_kcs_per_question {} must be in 1..={}",
                self.max_kcs_per_question, self.num_kcs
            )));
        }
        let m = self.kcs_per_question;
        if !(m >= 1.0 && m <= self.max_kcs_per_question as f64) {
            return Err(Error::Config(format!(
                "kcs_per_question {m} must be in [1, {}]",
                self.max_kcs_per_question
            )));
        }
        if self.min_questions == 0 || self.min_questions > self.max_questions {
            return Err(Error::Config(format!(
                "question count range {}..={} is empty",
                self.min_questions, self.max_questions
            )));
        }
        non_negative("question_std", self.question_std)?;
        if let QuestionOrder::Curriculum { max_stride } = self.order {
            if max_stride == 0 || max_stride >= self.num_questions {
                return Err(Error::Config(format!(
                    "curriculum stride {max_stride} must be in 1..{}",
                    self.num_questions
                )));
            }
        }
        match self.initial_mastery {
            MasteryDist::Logistic {
                mean,
                ability_std,
                kc_std,
                noise_std,
            } => {
                if !mean.is_finite() {
                    return Err(Error::Config("mastery mean must be finite".into()));
                }
                non_negative("ability_std", ability_std)?;
                non_negative("kc_std", kc_std)?;
                non_negative("noise_std", noise_std)?;
            }
            MasteryDist::Bernoulli { p } => unit("mastery p", p)?,
            MasteryDist::Constant { value } => unit("mastery value", value)?,
        }
        Ok(())
    }
}

/// A generated question.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TruthQuestion {
    pub question_id: usize,
    pub kc_ids: Vec<usize>,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TruthStep {
    pub question_id: usize,
    pub timestamp: i64,
    /// Probability of a correct response given the latent state.
    pub probability: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TruthStudent {
    pub student_id: String,
    pub ability: f64,
    pub steps: Vec<TruthStep>,
}

/// Latent quantities behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub questions: Vec<TruthQuestion>,
    pub students: Vec<TruthStudent>,
}

/// Integer counts proportional to `weights` summing to `total`, by largest
/// remainder (ties to the lower index).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| math::floor(*e) as usize).collect();
    let mut short = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    counts
}

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(n + 1);
    let mut c = 1.0;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        pmf.push(c * math::powi(p, k as i32) * math::powi(1.0 - p, (n - k) as i32));
    }
    pmf
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// Generates interactions in the dataset schema plus the latent truth.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<RawInteraction>, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, m) = (spec.num_kcs, spec.num_questions);

    // Question KC counts with an exact empirical mean where possible.
    let extra = spec.max_kcs_per_question - 1;
    let counts_per_size = if extra == 0 {
        vec![m]
    } else {
        apportion(
            &binomial_pmf(extra, (spec.kcs_per_question - 1.0) / extra as f64),
            m,
        )
    };
    let mut sizes: Vec<usize> = counts_per_size
        .iter()
        .enumerate()
        .flat_map(|(extra, &c)| core::iter::repeat_n(extra + 1, c))
        .collect();
    sizes.shuffle(&mut rng);
    let all_kcs: Vec<usize> = (0..n).collect();
    let questions: Vec<TruthQuestion> = sizes
        .iter()
        .enumerate()
        .map(|(q, &size)| {
            let mut kc_ids: Vec<usize> = match spec.order {
                QuestionOrder::Uniform => {
                    all_kcs.choose_multiple(&mut rng, size).copied().collect()
                }
                QuestionOrder::Curriculum { .. } => {
                    let topic = q * n / m;
                    let others: Vec<usize> =
                        all_kcs.iter().copied().filter(|&k| k != topic).collect();
                    let mut ids = vec![topic];
                    ids.extend(others.choose_multiple(&mut rng, size - 1));
                    ids
                }
            };
            kc_ids.sort_unstable();
            TruthQuestion {
                question_id: q,
                kc_ids,
                shift: normal(&mut rng, spec.question_std),
            }
        })
        .collect();

    let kc_offsets: Vec<f64> = match spec.initial_mastery {
        MasteryDist::Logistic { kc_std, .. } => (0..n).map(|_| normal(&mut rng, kc_std)).collect(),
        _ => vec![0.0; n],
    };

    let width = format!("{}", spec.students - 1).len();
    let mut raws = Vec::new();
    let mut students = Vec::with_capacity(spec.students);
    for s in 0..spec.students {
        let student_id = format!("s{s:0width$}");
        let (ability, mut mastery): (f64, Vec<f64>) = match spec.initial_mastery {
            MasteryDist::Logistic {
                mean,
                ability_std,
                noise_std,
                ..
            } => {
                let a = normal(&mut rng, ability_std);
                let mastery = kc_offsets
                    .iter()
                    .map(|o| math::sigmoid(mean + a + o + normal(&mut rng, noise_std)))
                    .collect();
                (a, mastery)
            }
            MasteryDist::Bernoulli { p } => (
                0.0,
                (0..n)
                    .map(|_| (rng.random::<f64>() < p) as u8 as f64)
                    .collect(),
            ),
            MasteryDist::Constant { value } => (0.0, vec![value; n]),
        };
        let attempts = rng.random_range(spec.min_questions..=spec.max_questions);
        let mut steps = Vec::with_capacity(attempts);
        let mut position = rng.random_range(0..m);
        for t in 0..attempts {
            let q = match spec.order {
                QuestionOrder::Uniform => &questions[rng.random_range(0..m)],
                QuestionOrder::Curriculum { max_stride } => {
                    if t > 0 {
                        position = (position + rng.random_range(0..=max_stride)) % m;
                    }
                    &questions[position]
                }
            };
            let mean = q.kc_ids.iter().map(|&k| mastery[k]).sum::<f64>() / q.kc_ids.len() as f64;
            let known = if mean <= 0.0 || mean >= 1.0 {
                mean.clamp(0.0, 1.0)
            } else {
                math::sigmoid(math::ln(mean / (1.0 - mean)) + q.shift)
            };
            let p = spec.guess + (1.0 - spec.slip - spec.guess) * known;
            let correct = rng.random::<f64>() < p;
            if correct {
                for &k in &q.kc_ids {
                    mastery[k] += spec.learn_rate * (1.0 - mastery[k]);
                }
            }
            raws.push(RawInteraction::new(
                student_id.clone(),
                q.question_id,
                q.kc_ids.iter().copied(),
                correct,
                t as i64,
            )?);
            steps.push(TruthStep {
                question_id: q.question_id,
                timestamp: t as i64,
                probability: p,
                correct,
            });
        }
        students.push(TruthStudent {
            student_id,
            ability,
            steps,
        });
    }
    Ok((
        raws,
        SynthTruth {
            spec: spec.clone(),
            questions,
            students,
        },
    ))
}

impl SynthTruth {
    /// Best achievable probability for every KC-level step of a student,
    /// in expansion order. The first step of a question uses the latent
    /// probability; later steps of the same attempt repeat a response the
    /// history already contains, so their value is that response.
    pub fn expanded_probabilities(&self) -> BTreeMap<&str, Vec<f64>> {
        self.students
            .iter()
            .map(|s| {
                let mut v = Vec::new();
                for st in &s.steps {
                    let size = self.questions[st.question_id].kc_ids.len();
                    v.push(st.probability);
                    v.extend(core::iter::repeat_n(st.correct as u8 as f64, size - 1));
                }
                (s.student_id.as_str(), v)
            })
            .collect()
    }
}

/// AUC the optimal predictor reaches on the same records. Records address
/// steps within chunks of `max_len` expanded steps.
pub fn oracle_auc_bound(
    truth: &SynthTruth,
    records: &[PredictionRecord],
    max_len: usize,
) -> Result<f64> {
    let table = truth.expanded_probabilities();
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        let seq = table
            .get(r.student_id.as_str())
            .ok_or_else(|| Error::Data(format!("no truth for student {}", r.student_id)))?;
        let idx = r.chunk * max_len + r.step - 1;
        let p = *seq.get(idx).ok_or(Error::Index {
            context: "truth step",
            index: idx,
            size: seq.len(),
        })?;
        scores.push(p);
    }
    let labels: Vec<bool> = records.iter().map(|r| r.response).collect();
    metrics::auc(&scores, &labels)
}
