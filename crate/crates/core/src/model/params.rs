use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map with the weight stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// `W₂·ReLU(W₁·x + b₁) + b₂`, fed through a sigmoid by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

/// Gate order along the `4d` axis: input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<T> {
    pub w_ih: T,
    pub w_hh: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub norm2_gain: T,
    pub norm2_bias: T,
}

/// Question and KC embeddings plus the contextual question encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionPath<T> {
    pub question_embed: T,
    pub kc_embed: T,
    pub position_embed: Option<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KtHead<T> {
    /// `σ(W·h + b)`, the vanilla DKT read-out.
    Linear(Linear<T>),
    TwoLayer(Mlp<T>),
}

/// Every trainable array of the model, generic over the carrier so the same
/// tree holds tensors, tape variables, gradients or shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub interaction_embed: T,
    pub lstm: LstmWeights<T>,
    pub question: Option<QuestionPath<T>>,
    pub qt_head: Option<Mlp<T>>,
    pub ik_head: Option<Mlp<T>>,
    pub kt_head: KtHead<T>,
}

type MapFn<'f, T, U> = dyn FnMut(&str, &T) -> U + 'f;

impl<T> Linear<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{p}.weight"), &self.weight),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn entries<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.weight"), &self.weight));
        out.push((format!("{p}.bias"), &self.bias));
    }

    fn entries_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.weight"), &mut self.weight));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

impl<T> Mlp<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map(&format!("{p}.hidden"), f),
            output: self.output.map(&format!("{p}.output"), f),
        }
    }

    fn entries<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        self.hidden.entries(&format!("{p}.hidden"), out);
        self.output.entries(&format!("{p}.output"), out);
    }

    fn entries_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.hidden.entries_mut(&format!("{p}.hidden"), out);
        self.output.entries_mut(&format!("{p}.output"), out);
    }
}

impl<T> EncoderLayer<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> EncoderLayer<U> {
        EncoderLayer {
            query: self.query.map(&format!("{p}.query"), f),
            key: self.key.map(&format!("{p}.key"), f),
            value: self.value.map(&format!("{p}.value"), f),
            output: self.output.map(&format!("{p}.output"), f),
            norm1_gain: f(&format!("{p}.norm1.gain"), &self.norm1_gain),
            norm1_bias: f(&format!("{p}.norm1.bias"), &self.norm1_bias),
            ff_in: self.ff_in.map(&format!("{p}.ff_in"), f),
            ff_out: self.ff_out.map(&format!("{p}.ff_out"), f),
            norm2_gain: f(&format!("{p}.norm2.gain"), &self.norm2_gain),
            norm2_bias: f(&format!("{p}.norm2.bias"), &self.norm2_bias),
        }
    }

    fn entries<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        self.query.entries(&format!("{p}.query"), out);
        self.key.entries(&format!("{p}.key"), out);
        self.value.entries(&format!("{p}.value"), out);
        self.output.entries(&format!("{p}.output"), out);
        out.push((format!("{p}.norm1.gain"), &self.norm1_gain));
        out.push((format!("{p}.norm1.bias"), &self.norm1_bias));
        self.ff_in.entries(&format!("{p}.ff_in"), out);
        self.ff_out.entries(&format!("{p}.ff_out"), out);
        out.push((format!("{p}.norm2.gain"), &self.norm2_gain));
        out.push((format!("{p}.norm2.bias"), &self.norm2_bias));
    }

    fn entries_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.query.entries_mut(&format!("{p}.query"), out);
        self.key.entries_mut(&format!("{p}.key"), out);
        self.value.entries_mut(&format!("{p}.value"), out);
        self.output.entries_mut(&format!("{p}.output"), out);
        out.push((format!("{p}.norm1.gain"), &mut self.norm1_gain));
        out.push((format!("{p}.norm1.bias"), &mut self.norm1_bias));
        self.ff_in.entries_mut(&format!("{p}.ff_in"), out);
        self.ff_out.entries_mut(&format!("{p}.ff_out"), out);
        out.push((format!("{p}.norm2.gain"), &mut self.norm2_gain));
        out.push((format!("{p}.norm2.bias"), &mut self.norm2_bias));
    }
}

impl<T> Weights<T> {
    /// Rebuilds the tree with `f(name, leaf)` applied to every leaf, in the
    /// same order as [`Weights::entries`].
    pub fn map<U>(&self, f: &mut MapFn<'_, T, U>) -> Weights<U> {
        let interaction_embed = f("interaction_embed", &self.interaction_embed);
        let lstm = LstmWeights {
            w_ih: f("lstm.w_ih", &self.lstm.w_ih),
            w_hh: f("lstm.w_hh", &self.lstm.w_hh),
            bias: f("lstm.bias", &self.lstm.bias),
        };
        let question = self.question.as_ref().map(|q| QuestionPath {
            question_embed: f("question_embed", &q.question_embed),
            kc_embed: f("kc_embed", &q.kc_embed),
            position_embed: q.position_embed.as_ref().map(|p| f("position_embed", p)),
            layers: q
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("encoder.{i}"), f))
                .collect(),
        });
        let qt_head = self.qt_head.as_ref().map(|h| h.map("qt_head", f));
        let ik_head = self.ik_head.as_ref().map(|h| h.map("ik_head", f));
        let kt_head = match &self.kt_head {
            KtHead::Linear(l) => KtHead::Linear(l.map("kt_head", f)),
            KtHead::TwoLayer(m) => KtHead::TwoLayer(m.map("kt_head", f)),
        };
        Weights {
            interaction_embed,
            lstm,
            question,
            qt_head,
            ik_head,
            kt_head,
        }
    }

    /// Named leaves in a fixed order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        out.push(("interaction_embed".into(), &self.interaction_embed));
        out.push(("lstm.w_ih".into(), &self.lstm.w_ih));
        out.push(("lstm.w_hh".into(), &self.lstm.w_hh));
        out.push(("lstm.bias".into(), &self.lstm.bias));
        if let Some(q) = &self.question {
            out.push(("question_embed".into(), &q.question_embed));
            out.push(("kc_embed".into(), &q.kc_embed));
            if let Some(p) = &q.position_embed {
                out.push(("position_embed".into(), p));
            }
            for (i, l) in q.layers.iter().enumerate() {
                l.entries(&format!("encoder.{i}"), &mut out);
            }
        }
        if let Some(h) = &self.qt_head {
            h.entries("qt_head", &mut out);
        }
        if let Some(h) = &self.ik_head {
            h.entries("ik_head", &mut out);
        }
        match &self.kt_head {
            KtHead::Linear(l) => l.entries("kt_head", &mut out),
            KtHead::TwoLayer(m) => m.entries("kt_head", &mut out),
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        out.push(("interaction_embed".into(), &mut self.interaction_embed));
        out.push(("lstm.w_ih".into(), &mut self.lstm.w_ih));
        out.push(("lstm.w_hh".into(), &mut self.lstm.w_hh));
        out.push(("lstm.bias".into(), &mut self.lstm.bias));
        if let Some(q) = &mut self.question {
            out.push(("question_embed".into(), &mut q.question_embed));
            out.push(("kc_embed".into(), &mut q.kc_embed));
            if let Some(p) = &mut q.position_embed {
                out.push(("position_embed".into(), p));
            }
            for (i, l) in q.layers.iter_mut().enumerate() {
                l.entries_mut(&format!("encoder.{i}"), &mut out);
            }
        }
        if let Some(h) = &mut self.qt_head {
            h.entries_mut("qt_head", &mut out);
        }
        if let Some(h) = &mut self.ik_head {
            h.entries_mut("ik_head", &mut out);
        }
        match &mut self.kt_head {
            KtHead::Linear(l) => l.entries_mut("kt_head", &mut out),
            KtHead::TwoLayer(m) => m.entries_mut("kt_head", &mut out),
        }
        out
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        for (name, t) in self.entries() {
            f(&name, t);
        }
    }
}

fn linear_shape(out: usize, inp: usize) -> Linear<Vec<usize>> {
    Linear {
        weight: vec![out, inp],
        bias: vec![out],
    }
}

fn mlp_shape(inp: usize, hidden: usize, out: usize) -> Mlp<Vec<usize>> {
    Mlp {
        hidden: linear_shape(hidden, inp),
        output: linear_shape(out, hidden),
    }
}

impl Weights<Vec<usize>> {
    /// Shape of every parameter implied by `config`.
    pub fn layout(config: &ModelConfig) -> Self {
        let d = config.dim;
        let n = config.num_kcs;
        let half = d / 2;
        let variant = config.variant;
        let question = (!variant.is_vanilla()).then(|| QuestionPath {
            question_embed: vec![config.num_questions, d],
            kc_embed: vec![n, d],
            position_embed: config.positional.then(|| vec![config.max_len, d]),
            layers: (0..config.enc_layers)
                .map(|_| EncoderLayer {
                    query: linear_shape(d, d),
                    key: linear_shape(d, d),
                    value: linear_shape(d, d),
                    output: linear_shape(d, d),
                    norm1_gain: vec![d],
                    norm1_bias: vec![d],
                    ff_in: linear_shape(config.ffn_mult * d, d),
                    ff_out: linear_shape(d, config.ffn_mult * d),
                    norm2_gain: vec![d],
                    norm2_bias: vec![d],
                })
                .collect(),
        });
        Weights {
            interaction_embed: vec![2 * n, d],
            lstm: LstmWeights {
                w_ih: vec![4 * d, d],
                w_hh: vec![4 * d, d],
                bias: vec![4 * d],
            },
            question,
            qt_head: variant.uses_qt().then(|| mlp_shape(d, half, n)),
            ik_head: variant.uses_ik().then(|| mlp_shape(d, half, 1)),
            kt_head: if variant.is_vanilla() {
                KtHead::Linear(linear_shape(n, d))
            } else {
                KtHead::TwoLayer(mlp_shape(d, half, n))
            },
        }
    }
}

impl Weights<Tensor> {
    /// Uniform `±1/sqrt(fan_in)` matrices, zero biases, unit layer-norm
    /// gains, `N(0, embed_std)` embedding tables and a constant forget-gate
    /// bias.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init.embed_std).expect("finite std");
        let d = config.dim;
        let forget_bias = config.init.forget_bias;
        Weights::layout(config).map(&mut |name, shape| {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("embed") {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with("gain") {
                vec![1.0; len]
            } else if name == "lstm.bias" {
                (0..len)
                    .map(|i| {
                        if (d..2 * d).contains(&i) {
                            forget_bias
                        } else {
                            0.0
                        }
                    })
                    .collect()
            } else if shape.len() == 1 {
                vec![0.0; len]
            } else {
                let bound = 1.0 / crate::math::sqrt(shape[1] as f64);
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            Tensor::new(shape, data).expect("layout shapes are consistent")
        })
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let layout = Weights::layout(config);
        let want = layout.entries();
        let got = self.entries();
        if want.len() != got.len() {
            return Err(Error::Config(format!(
                "parameter set has {} arrays, configuration implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((wn, ws), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || ws.as_slice() != gt.shape() {
                return Err(Error::Config(format!(
                    "parameter `{gn}` has shape {:?}, expected `{wn}` with {:?}",
                    gt.shape(),
                    ws
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a tree from named tensors, e.g. a loaded checkpoint.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = Weights::layout(config);
        let mut missing = None;
        let w = layout.map(
            &mut |name, shape| match named.iter().position(|(n, _)| n == name) {
                Some(i) => named.swap_remove(i).1,
                None => {
                    missing.get_or_insert_with(|| String::from(name));
                    Tensor::zeros(shape)
                }
            },
        );
        if let Some(name) = missing {
            return Err(Error::Config(format!(
                "checkpoint lacks parameter `{name}`"
            )));
        }
        if let Some((name, _)) = named.first() {
            return Err(Error::Config(format!(
                "checkpoint has unknown parameter `{name}`"
            )));
        }
        w.check_shapes(config)?;
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn head_shapes_follow_the_model_definition() {
        let mut cfg = ModelConfig::new(8, 5, 7);
        cfg.enc_layers = 2;
        let w = Weights::init(&cfg, 1);
        let qt = w.qt_head.as_ref().unwrap();
        assert_eq!(qt.hidden.weight.shape(), &[4, 8]);
        assert_eq!(qt.output.weight.shape(), &[5, 4]);
        let ik = w.ik_head.as_ref().unwrap();
        assert_eq!(ik.output.weight.shape(), &[1, 4]);
        let KtHead::TwoLayer(kt) = &w.kt_head else {
            panic!("full model has a two-layer predictor")
        };
        assert_eq!(kt.output.weight.shape(), &[5, 4]);
        assert_eq!(w.interaction_embed.shape(), &[10, 8]);
        assert_eq!(w.question.as_ref().unwrap().layers.len(), 2);
        assert_eq!(&w.lstm.bias.data()[8..16], &[1.0; 8]);
    }

    #[test]
    fn names_are_unique_and_stable() {
        let cfg = ModelConfig::new(4, 3, 2);
        let w = Weights::init(&cfg, 3);
        let names: Vec<_> = w.entries().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut mapped = Vec::new();
        w.map(&mut |n, _| mapped.push(String::from(n)));
        assert_eq!(mapped, names);
        let n_mut = {
            let mut w2 = w.clone();
            w2.entries_mut()
                .into_iter()
                .map(|(n, _)| n)
                .collect::<Vec<_>>()
        };
        assert_eq!(n_mut, names);
    }

    #[test]
    fn vanilla_layout_is_plain_dkt() {
        let mut cfg = ModelConfig::new(4, 3, 2);
        cfg.variant = Variant::NoQtNoIk;
        let w = Weights::init(&cfg, 0);
        assert!(w.question.is_none() && w.qt_head.is_none() && w.ik_head.is_none());
        assert!(matches!(&w.kt_head, KtHead::Linear(l) if l.weight.shape() == [3, 4]));
    }

    #[test]
    fn from_named_round_trips_and_rejects_mismatch() {
        let cfg = ModelConfig::new(4, 3, 2);
        let w = Weights::init(&cfg, 5);
        let named: Vec<_> = w
            .entries()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(Weights::from_named(&cfg, named.clone()).unwrap(), w);

        let mut bad = named.clone();
        bad[0].1 = Tensor::zeros(&[1, 1]);
        assert!(Weights::from_named(&cfg, bad).is_err());
        let mut short = named;
        short.pop();
        assert!(Weights::from_named(&cfg, short).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::new(4, 3, 2);
        assert_eq!(Weights::init(&cfg, 9), Weights::init(&cfg, 9));
        assert_ne!(Weights::init(&cfg, 9), Weights::init(&cfg, 10));
    }
}
