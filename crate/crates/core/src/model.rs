//! A complete model: configuration, vocabulary and parameters, with the
//! end-to-end loss and decoding entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::config::ModelConfig;
use crate::decoder::{decode, DecodeMode, DecodeResult};
use crate::encoder::encode_on_tape;
use crate::error::{Error, Result};
use crate::lattice::{FrameSequence, LabelSequence, ScoreLattice, Segmentation, Vocabulary};
use crate::params::ModelParams;
use crate::segcrf::{feasible, lattice_on_tape, nll_on_tape};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, input_dim: usize, vocab: Vocabulary, init_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, input_dim, vocab.len(), init_scale, seed);
        Ok(Self {
            config,
            input_dim,
            vocab,
            params,
        })
    }

    pub fn zeros(config: ModelConfig, input_dim: usize, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::zeros(&config, input_dim, vocab.len());
        Ok(Self {
            config,
            input_dim,
            vocab,
            params,
        })
    }

    pub fn clamp_len(&self) -> usize {
        self.config.clamp_len()
    }

    pub fn factor(&self) -> usize {
        self.config.encoder.factor()
    }

    /// Encoder output length for `t_len` input frames.
    pub fn output_len(&self, t_len: usize) -> usize {
        self.config.encoder.output_len(t_len)
    }

    /// Whether `labels` can be aligned to an utterance of `t_len` frames.
    pub fn is_feasible(&self, t_len: usize, labels: &LabelSequence) -> bool {
        feasible(self.output_len(t_len), labels.len(), self.clamp_len())
    }

    fn check_frames(&self, frames: &FrameSequence) -> Result<()> {
        if frames.dim() != self.input_dim {
            return Err(Error::Invalid(format!(
                "frames have dimension {}, model expects {}",
                frames.dim(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Negative marginal log-likelihood and its parameter gradients.
    /// `dropout_seed = None` evaluates without dropout.
    pub fn loss_and_gradients(
        &self,
        frames: &FrameSequence,
        labels: &LabelSequence,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Gradients)> {
        self.loss_and_gradients_with(frames, labels, dropout_seed, |_| {})
    }

    /// Like [`Model::loss_and_gradients`], with a hook to adjust the tape
    /// before anything is recorded.
    #[doc(hidden)]
    pub fn loss_and_gradients_with(
        &self,
        frames: &FrameSequence,
        labels: &LabelSequence,
        dropout_seed: Option<u64>,
        prepare: impl FnOnce(&mut Tape),
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        prepare(&mut tape);
        let loss = self.record_loss(&mut tape, frames, labels, dropout_seed)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    pub fn loss(&self, frames: &FrameSequence, labels: &LabelSequence, dropout_seed: Option<u64>) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.record_loss(&mut tape, frames, labels, dropout_seed)?;
        Ok(tape.scalar(loss))
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        frames: &FrameSequence,
        labels: &LabelSequence,
        dropout_seed: Option<u64>,
    ) -> Result<crate::autodiff::Var> {
        self.check_frames(frames)?;
        let bound = self.params.bind(tape)?;
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let enc = encode_on_tape(tape, &bound, &self.config.encoder, frames, rng.as_mut())?;
        let lattice = lattice_on_tape(tape, &bound, enc.states, self.clamp_len())?;
        nll_on_tape(tape, &lattice, labels)
    }

    /// Evaluation-mode score lattice over encoder-output frames.
    pub fn lattice(&self, frames: &FrameSequence) -> Result<ScoreLattice> {
        self.check_frames(frames)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let enc = encode_on_tape(&mut tape, &bound, &self.config.encoder, frames, None)?;
        let lattice = lattice_on_tape(&mut tape, &bound, enc.states, self.clamp_len())?;
        lattice.values(&tape)
    }

    pub fn decode(&self, frames: &FrameSequence, mode: DecodeMode) -> Result<DecodeResult> {
        Ok(decode(&self.lattice(frames)?, mode))
    }

    /// Maps encoder-output boundaries back to input frames.
    pub fn to_input_frames(&self, seg: &Segmentation, t_len: usize) -> Segmentation {
        let factor = self.factor();
        Segmentation::from_boundaries(
            seg.boundaries()
                .iter()
                .map(|&b| (b * factor).min(t_len))
                .collect(),
        )
    }
}
