//! Forward computation of AT-DKT over a padded time-major batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_ik, loss_kt, loss_qt, total_loss, LossValues};
use super::params::{EncoderLayer, KtHead, Mlp, Weights};
use super::{AtDkt, ModelConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tape::{AttentionShape, Tape, Var};
use crate::tensor::Tensor;

/// How responses beyond the observed prefix are encoded when fed back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FeedbackMode {
    /// Feed `r = 1` when the model's estimate is at least 0.5.
    #[default]
    Binarize,
    /// Feed `p·X[k + N] + (1 − p)·X[k]`.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    /// Every step consumes its ground-truth response.
    Teacher,
    /// Sequence `b` consumes ground truth for its first `observed[b]` steps
    /// and the model's own estimates afterwards.
    Accumulative {
        observed: Vec<usize>,
        mode: FeedbackMode,
    },
}

pub struct ForwardOptions<'r> {
    pub feedback: Feedback,
    /// Enables dropout when the configured rate is positive.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            feedback: Feedback::Teacher,
            dropout_rng: None,
        }
    }
}

/// Tape variables of one forward pass. Every per-row matrix uses the
/// batch's time-major layout.
#[derive(Debug, Clone)]
pub struct Graph {
    /// `a_t = q_t + c_t`.
    pub a: Option<Var>,
    pub z: Option<Var>,
    /// KC embeddings `c_t`.
    pub c: Option<Var>,
    pub x: Var,
    /// LSTM input: `z_t ⊕ c_t ⊕ x_t`, or `x_t` for vanilla DKT.
    pub m: Var,
    pub h: Var,
    pub c_hat: Option<Var>,
    pub y_hat: Option<Var>,
    pub r_hat: Var,
    pub loss_kt: Var,
    pub loss_qt: Option<Var>,
    pub loss_ik: Option<Var>,
    pub loss: Var,
    /// Interaction index consumed at each row.
    pub fed_interactions: Vec<usize>,
}

/// Per-step outputs of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutputs {
    pub a: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
    pub m: Vec<f64>,
    pub h: Vec<f64>,
    pub c_hat: Option<Vec<f64>>,
    pub y_hat: Option<f64>,
    pub r_hat: Vec<f64>,
}

impl Graph {
    pub fn losses(&self, tape: &Tape) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).data()[0]);
        LossValues {
            kt: v(Some(self.loss_kt)),
            qt: v(self.loss_qt),
            ik: v(self.loss_ik),
            total: v(Some(self.loss)),
        }
    }

    /// Outputs of sequence `b` for each of its valid steps.
    pub fn step_outputs(&self, tape: &Tape, batch: &Batch, b: usize) -> Vec<StepOutputs> {
        let row = |v: Var, r: usize| tape.value(v).row(r).to_vec();
        (0..batch.lengths[b])
            .map(|t| {
                let r = t * batch.batch + b;
                StepOutputs {
                    a: self.a.map(|v| row(v, r)),
                    z: self.z.map(|v| row(v, r)),
                    m: row(self.m, r),
                    h: row(self.h, r),
                    c_hat: self.c_hat.map(|v| row(v, r)),
                    y_hat: self.y_hat.map(|v| tape.value(v).data()[r]),
                    r_hat: row(self.r_hat, r),
                }
            })
            .collect()
    }
}

impl AtDkt {
    /// Registers the parameters as leaves and runs [`forward`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: ForwardOptions<'_>,
    ) -> Result<(Weights<Var>, Graph)> {
        let vars = self.register(tape);
        let graph = forward(tape, &vars, &self.config, batch, opts)?;
        Ok((vars, graph))
    }
}

/// `σ(W₂·ReLU(W₁·x + b₁) + b₂)` row-wise.
fn mlp_sigmoid(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul_nt(x, mlp.hidden.weight)?;
    let h = tape.add_bias(h, mlp.hidden.bias)?;
    let h = tape.relu(h);
    let o = tape.matmul_nt(h, mlp.output.weight)?;
    let o = tape.add_bias(o, mlp.output.bias)?;
    Ok(tape.sigmoid(o))
}

fn kt_head(tape: &mut Tape, head: &KtHead<Var>, h: Var) -> Result<Var> {
    match head {
        KtHead::Linear(l) => {
            let o = tape.matmul_nt(h, l.weight)?;
            let o = tape.add_bias(o, l.bias)?;
            Ok(tape.sigmoid(o))
        }
        KtHead::TwoLayer(m) => mlp_sigmoid(tape, m, h),
    }
}

fn affine(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, weight)?;
    tape.add_bias(y, bias)
}

/// Post-norm encoder block: causal attention and a ReLU feed-forward, each
/// followed by a residual connection and layer normalisation.
fn encoder_layer(
    tape: &mut Tape,
    layer: &EncoderLayer<Var>,
    x: Var,
    shape: AttentionShape,
) -> Result<Var> {
    let q = affine(tape, x, layer.query.weight, layer.query.bias)?;
    let k = affine(tape, x, layer.key.weight, layer.key.bias)?;
    let v = affine(tape, x, layer.value.weight, layer.value.bias)?;
    let att = tape.causal_attention(q, k, v, shape)?;
    let o = affine(tape, att, layer.output.weight, layer.output.bias)?;
    let r1 = tape.add(x, o)?;
    let h1 = tape.layer_norm(r1, layer.norm1_gain, layer.norm1_bias)?;
    let f = affine(tape, h1, layer.ff_in.weight, layer.ff_in.bias)?;
    let f = tape.relu(f);
    let f = affine(tape, f, layer.ff_out.weight, layer.ff_out.bias)?;
    let r2 = tape.add(h1, f)?;
    tape.layer_norm(r2, layer.norm2_gain, layer.norm2_bias)
}

/// One LSTM step from pre-activation gates `[i | f | g | o]`.
fn lstm_cell(tape: &mut Tape, gates: Var, cell: Var, d: usize) -> Result<(Var, Var)> {
    let i = tape.slice_cols(gates, 0, d)?;
    let f = tape.slice_cols(gates, d, d)?;
    let g = tape.slice_cols(gates, 2 * d, d)?;
    let o = tape.slice_cols(gates, 3 * d, d)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let tc = tape.tanh(cell);
    let h = tape.mul(o, tc)?;
    Ok((h, cell))
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

/// Runs the encoder, the recurrence and all heads over `batch`, and builds
/// the losses.
pub fn forward(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    batch: &Batch,
    opts: ForwardOptions<'_>,
) -> Result<Graph> {
    let ForwardOptions {
        feedback,
        mut dropout_rng,
    } = opts;
    let (steps, bsz, n, d) = (batch.steps, batch.batch, cfg.num_kcs, cfg.dim);
    if batch.num_kcs != n {
        return Err(Error::Config(format!(
            "batch built for {} KCs, model has {n}",
            batch.num_kcs
        )));
    }
    if let Feedback::Accumulative { observed, .. } = &feedback {
        if observed.len() != bsz || observed.contains(&0) {
            return Err(Error::Precondition(
                "accumulative feedback needs one observed count >= 1 per sequence".into(),
            ));
        }
    }

    // Question path: a_t = q_t + c_t, contextualised into z_t.
    let (a, z, c) = match &w.question {
        Some(qp) => {
            if qp.position_embed.is_some() && steps > cfg.max_len {
                return Err(Error::Precondition(format!(
                    "sequence of {steps} steps exceeds max_len {}",
                    cfg.max_len
                )));
            }
            let q = tape.gather(qp.question_embed, &batch.questions)?;
            let c = tape.gather(qp.kc_embed, &batch.kcs)?;
            let a = tape.add(q, c)?;
            let mut h = match qp.position_embed {
                Some(p) => {
                    let pos = tape.gather(p, &batch.positions)?;
                    tape.add(a, pos)?
                }
                None => a,
            };
            let shape = AttentionShape {
                steps,
                batch: bsz,
                heads: cfg.heads,
                scale: cfg.attention_scale(),
            };
            for layer in &qp.layers {
                h = encoder_layer(tape, layer, h, shape)?;
            }
            (Some(a), Some(h), Some(c))
        }
        None => (None, None, None),
    };
    let c_hat = match (&w.qt_head, z) {
        (Some(head), Some(z)) => Some(mlp_sigmoid(tape, head, z)?),
        _ => None,
    };
    let context = match (z, c) {
        (Some(z), Some(c)) => Some(tape.add(z, c)?),
        _ => None,
    };

    let zeros = tape.constant(Tensor::zeros(&[bsz, d]));
    let mut h_prev = zeros;
    let mut c_prev = zeros;
    let mut hs = Vec::with_capacity(steps);

    let (x, m, h, r_hat, fed) = match feedback {
        Feedback::Teacher => {
            let x = tape.gather(w.interaction_embed, &batch.interactions)?;
            let m = match context {
                Some(ctx) => tape.add(ctx, x)?,
                None => x,
            };
            let m_in = dropout(tape, m, cfg.dropout, dropout_rng.as_deref_mut())?;
            let proj = affine(tape, m_in, w.lstm.w_ih, w.lstm.bias)?;
            for t in 0..steps {
                let pt = tape.slice_rows(proj, t * bsz, bsz)?;
                let rec = tape.matmul_nt(h_prev, w.lstm.w_hh)?;
                let gates = tape.add(pt, rec)?;
                let (h, cell) = lstm_cell(tape, gates, c_prev, d)?;
                hs.push(h);
                h_prev = h;
                c_prev = cell;
            }
            let h = tape.concat_rows(&hs)?;
            let h_out = dropout(tape, h, cfg.dropout, dropout_rng)?;
            let r_hat = kt_head(tape, &w.kt_head, h_out)?;
            (x, m, h, r_hat, batch.interactions.clone())
        }
        Feedback::Accumulative { observed, mode } => {
            let mut xs = Vec::with_capacity(steps);
            let mut ms = Vec::with_capacity(steps);
            let mut rs: Vec<Var> = Vec::with_capacity(steps);
            let mut fed = batch.interactions.clone();
            for t in 0..steps {
                let rows = t * bsz..(t + 1) * bsz;
                // Estimated probability of a correct answer for rows past
                // their observed prefix.
                let mut estimate: Vec<Option<f64>> = vec![None; bsz];
                if t > 0 {
                    let prev = tape.value(rs[t - 1]);
                    for b in 0..bsz {
                        if t >= observed[b] && t < batch.lengths[b] {
                            estimate[b] = Some(prev.get2(b, batch.kcs[t * bsz + b]));
                        }
                    }
                }
                let x_t = match mode {
                    FeedbackMode::Binarize => {
                        let idx: Vec<usize> = rows
                            .clone()
                            .zip(&estimate)
                            .map(|(r, e)| match e {
                                Some(p) => batch.kcs[r] + if *p >= 0.5 { n } else { 0 },
                                None => batch.interactions[r],
                            })
                            .collect();
                        fed[rows.clone()].copy_from_slice(&idx);
                        tape.gather(w.interaction_embed, &idx)?
                    }
                    FeedbackMode::Probability => {
                        let kc: Vec<usize> = batch.kcs[rows.clone()].to_vec();
                        let right: Vec<usize> = kc.iter().map(|k| k + n).collect();
                        let p: Vec<f64> = rows
                            .clone()
                            .zip(&estimate)
                            .map(|(r, e)| e.unwrap_or(batch.responses[r]))
                            .collect();
                        let xr = tape.gather(w.interaction_embed, &right)?;
                        let xw = tape.gather(w.interaction_embed, &kc)?;
                        let xr = tape.row_scale(xr, p.clone())?;
                        let xw = tape.row_scale(xw, p.iter().map(|v| 1.0 - v).collect())?;
                        tape.add(xr, xw)?
                    }
                };
                let m_t = match context {
                    Some(ctx) => {
                        let ctx_t = tape.slice_rows(ctx, t * bsz, bsz)?;
                        tape.add(ctx_t, x_t)?
                    }
                    None => x_t,
                };
                let pt = affine(tape, m_t, w.lstm.w_ih, w.lstm.bias)?;
                let rec = tape.matmul_nt(h_prev, w.lstm.w_hh)?;
                let gates = tape.add(pt, rec)?;
                let (h, cell) = lstm_cell(tape, gates, c_prev, d)?;
                let r_t = kt_head(tape, &w.kt_head, h)?;
                xs.push(x_t);
                ms.push(m_t);
                hs.push(h);
                rs.push(r_t);
                h_prev = h;
                c_prev = cell;
            }
            let x = tape.concat_rows(&xs)?;
            let m = tape.concat_rows(&ms)?;
            let h = tape.concat_rows(&hs)?;
            let r_hat = tape.concat_rows(&rs)?;
            (x, m, h, r_hat, fed)
        }
    };

    let y_hat = match &w.ik_head {
        Some(head) => Some(mlp_sigmoid(tape, head, h)?),
        None => None,
    };

    let kt = loss_kt(tape, r_hat, batch)?;
    let qt = match c_hat {
        Some(c_hat) => Some(loss_qt(tape, c_hat, batch)?),
        None => None,
    };
    let ik = match y_hat {
        Some(y_hat) => Some(loss_ik(tape, y_hat, batch, cfg.ik_delay)?),
        None => None,
    };
    let loss = total_loss(tape, kt, qt, ik, cfg.qt_weight, cfg.ik_weight, cfg.variant)?;

    Ok(Graph {
        a,
        z,
        c,
        x,
        m,
        h,
        c_hat,
        y_hat,
        r_hat,
        loss_kt: kt,
        loss_qt: qt,
        loss_ik: ik,
        loss,
        fed_interactions: fed,
    })
}
