//! Stacked bidirectional LSTM encoder with hierarchical subsampling.
//!
//! Gate layout inside every `4H` block is input, forget, output, cell
//! candidate. Weights are stored input-major (`w_ih: [in, 4H]`) so a whole
//! sequence is projected with one matrix product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{EncoderConfig, SubsampleMode};
use crate::error::{Error, Result};
use crate::lattice::FrameSequence;
use crate::params::{encoder_prefix, lstm_names, Bound, ModelParams};

/// Weights of one unidirectional LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentLayerParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl RecurrentLayerParams {
    pub fn new(w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Result<Self> {
        let h = w_hh.shape().get(1).copied().unwrap_or(0);
        let ok = w_ih.shape().len() == 2
            && w_hh.shape() == [4 * h, h]
            && w_ih.shape()[1] == 4 * h
            && bias.shape() == [4 * h];
        if !ok || h == 0 {
            return Err(Error::shape(
                "lstm",
                format!(
                    "w_ih {:?}, w_hh {:?}, bias {:?}",
                    w_ih.shape(),
                    w_hh.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(Self { w_ih, w_hh, bias })
    }

    /// All-zero weights with forget bias 1.
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_ih: Tensor::zeros(&[input_dim, 4 * hidden]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias,
        }
    }

    pub fn from_params(params: &ModelParams, prefix: &str) -> Result<Self> {
        let [w_ih, w_hh, b] = lstm_names(prefix);
        let get = |n: &str| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("missing parameter {n}")))
        };
        Self::new(get(&w_ih)?, get(&w_hh)?, get(&b)?)
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[0]
    }

    fn bind(&self, tape: &mut Tape) -> Result<LstmVars> {
        Ok(LstmVars {
            w_ih: tape.constant(self.w_ih.clone())?,
            w_hh: tape.constant(self.w_hh.clone())?,
            bias: tape.constant(self.bias.clone())?,
            hidden: self.hidden(),
        })
    }
}

/// Tape handles of one LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn from_bound(tape: &Tape, bound: &Bound, prefix: &str) -> Result<Self> {
        let [w_ih, w_hh, b] = lstm_names(prefix);
        let w_hh = bound.get(&w_hh)?;
        Ok(Self {
            w_ih: bound.get(&w_ih)?,
            hidden: tape.shape(w_hh)[1],
            w_hh,
            bias: bound.get(&b)?,
        })
    }

    /// Input projection `x W_ih + b` for every row of `inputs` (`[T, in]`).
    pub fn project(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let xw = tape.matmul(inputs, self.w_ih)?;
        tape.add_row(xw, self.bias)
    }

    /// One gated step from a projected input row; `state = None` means a
    /// zero hidden and cell state.
    pub fn step(&self, tape: &mut Tape, xw_row: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let h = self.hidden;
        let z = match state {
            Some((h_prev, _)) => {
                let rec = tape.matvec(self.w_hh, h_prev)?;
                tape.add(xw_row, rec)?
            }
            None => xw_row,
        };
        let gates = tape.slice(z, 0, 3 * h)?;
        let gates = tape.sigmoid(gates)?;
        let cand = tape.slice(z, 3 * h, h)?;
        let cand = tape.tanh(cand)?;
        let i = tape.slice(gates, 0, h)?;
        let o = tape.slice(gates, 2 * h, h)?;
        let written = tape.mul(i, cand)?;
        let c = match state {
            Some((_, c_prev)) => {
                let f = tape.slice(gates, h, h)?;
                let kept = tape.mul(f, c_prev)?;
                tape.add(kept, written)?
            }
            None => written,
        };
        let squashed = tape.tanh(c)?;
        let h_new = tape.mul(o, squashed)?;
        Ok((h_new, c))
    }

    /// Runs the recurrence over `inputs` (`[T, in]`), optionally right to
    /// left. Outputs are returned in time order either way.
    pub fn run(
        &self,
        tape: &mut Tape,
        inputs: Var,
        reverse: bool,
        initial: Option<(Var, Var)>,
    ) -> Result<Vec<Var>> {
        let shape = tape.shape(inputs).to_vec();
        let t_len = shape[0];
        let xw = self.project(tape, inputs)?;
        let width = 4 * self.hidden;
        let mut out = vec![None; t_len];
        let mut state = initial;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let row = tape.slice(xw, t * width, width)?;
            let next = self.step(tape, row, state)?;
            out[t] = Some(next.0);
            state = Some(next);
        }
        Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
    }
}

fn rows_to_matrix(tape: &mut Tape, rows: &[Vec<f64>]) -> Result<Var> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("encoder", "inputs must be a non-empty list of equal-length vectors"));
    }
    tape.constant(Tensor::matrix(rows.len(), dim, rows.concat())?)
}

fn stack(tape: &mut Tape, steps: &[Var]) -> Result<Var> {
    let dim = tape.value(steps[0]).len();
    let flat = tape.concat(steps)?;
    tape.reshape(flat, &[steps.len(), dim])
}

/// Plain single-layer recurrence over a sequence of vectors.
pub fn recurrent_forward(
    params: &RecurrentLayerParams,
    inputs: &[Vec<f64>],
    initial: Option<(&[f64], &[f64])>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = rows_to_matrix(&mut tape, inputs)?;
    if tape.shape(x)[1] != params.input_dim() {
        return Err(Error::shape(
            "recurrent_forward",
            format!("input dim {} vs layer {}", tape.shape(x)[1], params.input_dim()),
        ));
    }
    let vars = params.bind(&mut tape)?;
    let init = match initial {
        Some((h, c)) => {
            if h.len() != params.hidden() || c.len() != params.hidden() {
                return Err(Error::shape("recurrent_forward", "initial state size"));
            }
            let h = tape.constant(Tensor::vector(h.to_vec()))?;
            let c = tape.constant(Tensor::vector(c.to_vec()))?;
            Some((h, c))
        }
        None => None,
    };
    let out = vars.run(&mut tape, x, false, init)?;
    Ok(out.iter().map(|&v| tape.value(v).data().to_vec()).collect())
}

fn bidirectional_on_tape(
    tape: &mut Tape,
    fwd: &LstmVars,
    bwd: &LstmVars,
    inputs: Var,
) -> Result<Vec<Var>> {
    let f = fwd.run(tape, inputs, false, None)?;
    let b = bwd.run(tape, inputs, true, None)?;
    f.into_iter()
        .zip(b)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect()
}

/// Runs a forward and a backward layer over the same inputs; position `t`
/// holds `[forward_t; backward_t]`.
pub fn bidirectional(
    fwd: &RecurrentLayerParams,
    bwd: &RecurrentLayerParams,
    inputs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if fwd.input_dim() != bwd.input_dim() {
        return Err(Error::shape("bidirectional", "directions disagree on input dim"));
    }
    let mut tape = Tape::new();
    let x = rows_to_matrix(&mut tape, inputs)?;
    if tape.shape(x)[1] != fwd.input_dim() {
        return Err(Error::shape("bidirectional", "input dim mismatch"));
    }
    let f = fwd.bind(&mut tape)?;
    let b = bwd.bind(&mut tape)?;
    let out = bidirectional_on_tape(&mut tape, &f, &b, x)?;
    Ok(out.iter().map(|&v| tape.value(v).data().to_vec()).collect())
}

/// Merges non-overlapping windows of states. The last, possibly partial,
/// window is right-padded by repeating its final state.
pub fn subsample_on_tape(
    tape: &mut Tape,
    states: &[Var],
    window: usize,
    mode: SubsampleMode,
) -> Result<Vec<Var>> {
    if states.is_empty() {
        return Err(Error::Invalid("cannot subsample an empty sequence".into()));
    }
    if window < 2 {
        return Err(Error::Invalid(format!("subsampling window {window} < 2")));
    }
    states
        .chunks(window)
        .map(|chunk| {
            let last = *chunk.last().expect("chunks are non-empty");
            match mode {
                SubsampleMode::Skip => Ok(last),
                SubsampleMode::Add => {
                    let mut acc = chunk[0];
                    for i in 1..window {
                        let next = chunk.get(i).copied().unwrap_or(last);
                        acc = tape.add(acc, next)?;
                    }
                    Ok(acc)
                }
                SubsampleMode::Concat => {
                    let padded: Vec<Var> = (0..window)
                        .map(|i| chunk.get(i).copied().unwrap_or(last))
                        .collect();
                    tape.concat(&padded)
                }
            }
        })
        .collect()
}

pub fn subsample(states: &[Vec<f64>], window: usize, mode: SubsampleMode) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars = states
        .iter()
        .map(|s| tape.constant(Tensor::vector(s.clone())))
        .collect::<Result<Vec<_>>>()?;
    let out = subsample_on_tape(&mut tape, &vars, window, mode)?;
    Ok(out.iter().map(|&v| tape.value(v).data().to_vec()).collect())
}

/// Encoder output on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[T', d_h]` projected top-layer states.
    pub states: Var,
    pub len: usize,
    pub factor: usize,
}

/// Stacked bidirectional layers, subsampling after the configured layers,
/// then a linear projection to `d_h`. Dropout is applied to the inputs of
/// layers above the first when `dropout_rng` is supplied.
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    frames: &FrameSequence,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    let mut input = tape.constant(Tensor::matrix(
        frames.len(),
        frames.dim(),
        frames.data().to_vec(),
    )?)?;
    let expected = tape.shape(bound.get(&format!("{}.w_ih", encoder_prefix(1, false)))?)[0];
    if expected != frames.dim() {
        return Err(Error::shape(
            "encode",
            format!("frames have dim {}, model expects {expected}", frames.dim()),
        ));
    }
    for layer in 1..=cfg.num_layers {
        if layer > 1 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                input = tape.dropout(input, cfg.dropout_rate, rng)?;
            }
        }
        let fwd = LstmVars::from_bound(tape, bound, &encoder_prefix(layer, false))?;
        let bwd = LstmVars::from_bound(tape, bound, &encoder_prefix(layer, true))?;
        let mut states = bidirectional_on_tape(tape, &fwd, &bwd, input)?;
        if cfg.subsample_after.contains(&layer) {
            states = subsample_on_tape(tape, &states, cfg.window, cfg.subsample_mode)?;
        }
        input = stack(tape, &states)?;
    }
    let proj = tape.matmul(input, bound.get("enc.proj.w")?)?;
    let states = tape.add_row(proj, bound.get("enc.proj.b")?)?;
    Ok(Encoded {
        len: tape.shape(states)[0],
        states,
        factor: cfg.factor(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the given seed.
    Train { seed: u64 },
    Eval,
}

/// Plain encoder pass: `(H' rows, subsampling factor)`.
pub fn encode(
    frames: &FrameSequence,
    cfg: &EncoderConfig,
    params: &ModelParams,
    mode: Mode,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let enc = encode_on_tape(&mut tape, &bound, cfg, frames, rng.as_mut())?;
    let value = tape.value(enc.states);
    let rows = (0..enc.len).map(|r| value.row(r).to_vec()).collect();
    Ok((rows, enc.factor))
}
