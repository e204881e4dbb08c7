//! Named parameter tensors and their initialization.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{ModelConfig, SubsampleMode};
use crate::error::{Error, Result};

/// All trainable tensors, keyed by name in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

pub(crate) fn lstm_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_ih"),
        format!("{prefix}.w_hh"),
        format!("{prefix}.b"),
    ]
}

pub(crate) fn encoder_prefix(layer: usize, backward: bool) -> String {
    format!("enc.{layer}.{}", if backward { "bwd" } else { "fwd" })
}

/// Parameter shapes implied by a configuration.
pub fn shapes(cfg: &ModelConfig, input_dim: usize, vocab: usize) -> BTreeMap<String, Vec<usize>> {
    let enc = &cfg.encoder;
    let feat = &cfg.features;
    let h = enc.hidden;
    let mut out = BTreeMap::new();
    let mut in_dim = input_dim;
    for layer in 1..=enc.num_layers {
        for backward in [false, true] {
            let [w_ih, w_hh, b] = lstm_names(&encoder_prefix(layer, backward));
            out.insert(w_ih, vec![in_dim, 4 * h]);
            out.insert(w_hh, vec![4 * h, h]);
            out.insert(b, vec![4 * h]);
        }
        in_dim = 2 * h;
        if enc.subsample_after.contains(&layer) && enc.subsample_mode == SubsampleMode::Concat {
            in_dim *= enc.window;
        }
    }
    out.insert("enc.proj.w".into(), vec![in_dim, feat.d_h]);
    out.insert("enc.proj.b".into(), vec![feat.d_h]);

    let [w_ih, w_hh, b] = lstm_names("seg");
    out.insert(w_ih, vec![feat.d_h, 4 * feat.d_h]);
    out.insert(w_hh, vec![4 * feat.d_h, feat.d_h]);
    out.insert(b, vec![4 * feat.d_h]);

    out.insert("crf.embed".into(), vec![vocab, feat.embed_dim]);
    out.insert("crf.hid.w_u".into(), vec![feat.embed_dim, feat.d_w]);
    out.insert("crf.hid.w_h".into(), vec![feat.d_w, feat.d_h]);
    out.insert("crf.hid.b".into(), vec![feat.d_w]);
    if feat.use_duration {
        out.insert("crf.dur".into(), vec![cfg.clamp_len() + 1, feat.d_dur]);
        out.insert("crf.hid.w_d".into(), vec![feat.d_w, feat.d_dur]);
    }
    out.insert("crf.out.w".into(), vec![feat.d_w, feat.d_w]);
    out.insert("crf.out.b".into(), vec![feat.d_w]);
    out.insert("crf.w".into(), vec![feat.d_w]);
    out
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig, input_dim: usize, vocab: usize) -> Self {
        let tensors = shapes(cfg, input_dim, vocab)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Self { tensors }
    }

    /// Uniform in `[-scale, scale]` from a seeded generator, except LSTM
    /// forget-gate biases, which start at 1.
    pub fn init(cfg: &ModelConfig, input_dim: usize, vocab: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(cfg, input_dim, vocab);
        for t in params.tensors.values_mut() {
            for v in t.data_mut() {
                *v = if scale > 0.0 {
                    rng.random_range(-scale..=scale)
                } else {
                    0.0
                };
            }
        }
        let mut lstm_biases: Vec<(String, usize)> = Vec::new();
        for layer in 1..=cfg.encoder.num_layers {
            for backward in [false, true] {
                let [_, _, b] = lstm_names(&encoder_prefix(layer, backward));
                lstm_biases.push((b, cfg.encoder.hidden));
            }
        }
        lstm_biases.push(("seg.b".into(), cfg.features.d_h));
        for (name, h) in lstm_biases {
            let b = params.tensors.get_mut(&name).expect("bias exists");
            b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        }
        params
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a named parameter leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.param(name.clone(), t.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Checks names and shapes against a configuration.
    pub fn check_shapes(&self, cfg: &ModelConfig, input_dim: usize, vocab: usize) -> Result<()> {
        let expected = shapes(cfg, input_dim, vocab);
        if expected.len() != self.tensors.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Mismatch(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Mismatch(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}
