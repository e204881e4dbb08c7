//! Central finite-difference check of every parameter gradient of the
//! end-to-end loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SubsampleMode};
use crate::error::{Error, Result};
use crate::lattice::{FrameSequence, LabelSequence, Vocabulary};
use crate::model::Model;
use crate::segcrf::feasible;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero gradients
/// are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSize {
    /// `T' = 5`, two labels.
    Small,
    /// `T' = 8`, three labels, with dropout and add-subsampling.
    Medium,
}

impl fmt::Display for CheckSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckSize::Small => "small",
            CheckSize::Medium => "medium",
        })
    }
}

impl FromStr for CheckSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(CheckSize::Small),
            "medium" => Ok(CheckSize::Medium),
            other => Err(Error::Config(format!("unknown gradcheck size {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub values: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub size: CheckSize,
    pub seed: u64,
    pub t_out: usize,
    pub vocab: usize,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A random model and utterance of the requested size.
pub fn instance(size: CheckSize, seed: u64) -> Result<(Model, FrameSequence, LabelSequence, Option<u64>)> {
    let mut cfg = ModelConfig::small();
    cfg.encoder.num_layers = 2;
    cfg.encoder.hidden = 3;
    cfg.features.embed_dim = 3;
    cfg.features.d_w = 4;
    cfg.features.d_h = 3;
    cfg.features.d_dur = 2;
    let (t_out, vocab, dropout) = match size {
        CheckSize::Small => {
            cfg.encoder.dropout_rate = 0.0;
            cfg.clamp.frames = 6;
            (5, 2, None)
        }
        CheckSize::Medium => {
            cfg.encoder.subsample_mode = SubsampleMode::Add;
            cfg.encoder.dropout_rate = 0.2;
            cfg.clamp.frames = 10;
            (8, 3, Some(seed ^ 0x5eed))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = 3;
    let t_in = t_out * cfg.encoder.factor() - rng.random_range(0..cfg.encoder.factor());
    debug_assert_eq!(cfg.encoder.output_len(t_in), t_out);
    let tokens = Vocabulary::new((0..vocab).map(|i| format!("y{i}")))?;
    let model = Model::new(cfg, input_dim, tokens, 0.5, rng.random())?;
    let frames = FrameSequence::new(
        (0..t_in * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        t_in,
        input_dim,
    )?;
    let l = model.clamp_len();
    let j = loop {
        let j = rng.random_range(1..=t_out);
        if feasible(t_out, j, l) {
            break j;
        }
    };
    let labels = LabelSequence::new((0..j).map(|_| rng.random_range(0..vocab)).collect(), vocab)?;
    Ok((model, frames, labels, dropout))
}

/// Compares `backward()` against central differences on every parameter
/// value. `fault` scales the tanh pullback to prove the check can fail.
pub fn gradcheck(size: CheckSize, seed: u64, fault: Option<f64>) -> Result<GradcheckReport> {
    let (model, frames, labels, dropout) = instance(size, seed)?;
    let (loss, grads) = model.loss_and_gradients_with(&frames, &labels, dropout, |tape| {
        if let Some(s) = fault {
            tape.inject_tanh_pullback_fault(s);
        }
    })?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (name, tensor) in model.params.iter() {
        let analytic = grads
            .param(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for {name}")))?;
        let mut worst: f64 = 0.0;
        for i in 0..tensor.len() {
            let x = tensor.data()[i];
            let at = |probe: &mut Model, v: f64| -> Result<f64> {
                probe.params.get_mut(name).expect("same names").data_mut()[i] = v;
                probe.loss(&frames, &labels, dropout)
            };
            let plus = at(&mut probe, x + STEP)?;
            let minus = at(&mut probe, x - STEP)?;
            at(&mut probe, x)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            values: tensor.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport {
        size,
        seed,
        t_out: model.output_len(frames.len()),
        vocab: model.vocab.len(),
        loss,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_have_requested_sizes() {
        for seed in 0..5 {
            let (m, f, y, _) = instance(CheckSize::Small, seed).unwrap();
            assert_eq!((m.output_len(f.len()), m.vocab.len()), (5, 2));
            assert!(m.is_feasible(f.len(), &y));
            let (m, f, _, d) = instance(CheckSize::Medium, seed).unwrap();
            assert_eq!((m.output_len(f.len()), m.vocab.len()), (8, 3));
            assert!(d.is_some());
        }
    }

    #[test]
    fn small_passes_and_fault_is_caught() {
        let r = gradcheck(CheckSize::Small, 3, None).unwrap();
        assert!(r.passed(), "max rel err {}", r.max_rel_err());
        assert_eq!(r.tensors.len(), instance(CheckSize::Small, 3).unwrap().0.params.len());
        let bad = gradcheck(CheckSize::Small, 3, Some(1.05)).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn size_parsing() {
        assert_eq!("medium".parse::<CheckSize>().unwrap(), CheckSize::Medium);
        assert!("large".parse::<CheckSize>().is_err());
    }
}
