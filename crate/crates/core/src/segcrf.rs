//! Segmental (semi-Markov) CRF: segment embeddings, joint feature scores,
//! score lattices, and the log-domain partition and clamped-sum recursions.
//!
//! The recursions are written with tape primitives, so the gradient of the
//! marginal negative log-likelihood comes straight out of reverse-mode
//! differentiation of the forward DP.

use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::LstmVars;
use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, ScoreLattice, SegmentLayout};
use crate::params::{Bound, ModelParams};

/// Segment scores held on a tape: one `[V]` vector per admissible segment,
/// indexed by [`SegmentLayout::segment_index`].
#[derive(Debug, Clone)]
pub struct TapeLattice {
    pub layout: SegmentLayout,
    pub vocab: usize,
    pub segments: Vec<Var>,
}

impl TapeLattice {
    pub fn segment(&self, k: usize, t: usize) -> Var {
        self.segments[self.layout.segment_index(k, t)]
    }

    /// Copies the lattice into a constant table.
    pub fn values(&self, tape: &Tape) -> Result<ScoreLattice> {
        let mut scores = Vec::with_capacity(self.segments.len() * self.vocab);
        for &s in &self.segments {
            scores.extend_from_slice(tape.value(s).data());
        }
        ScoreLattice::from_parts(self.layout.clone(), self.vocab, scores)
    }

    /// Puts a constant lattice on a tape.
    pub fn from_scores(tape: &mut Tape, lattice: &ScoreLattice) -> Result<Self> {
        let layout = lattice.layout().clone();
        let mut segments = Vec::with_capacity(layout.num_segments());
        for t in 1..=layout.t_len() {
            for k in layout.starts(t) {
                segments.push(tape.constant(Tensor::vector(lattice.segment(k, t).to_vec()))?);
            }
        }
        Ok(Self {
            layout,
            vocab: lattice.vocab(),
            segments,
        })
    }
}

/// Final hidden states of the segment recurrence for every admissible
/// segment of `hprime` (`[T', d_h]`). One left-to-right pass per start tag
/// serves all of its end tags.
pub fn segment_embeddings_on_tape(
    tape: &mut Tape,
    seg_lstm: &LstmVars,
    hprime: Var,
    layout: &SegmentLayout,
) -> Result<Vec<Var>> {
    let t_len = layout.t_len();
    if tape.shape(hprime)[0] != t_len {
        return Err(Error::shape("segment_embeddings", "layout length differs from encoder output"));
    }
    let xw = seg_lstm.project(tape, hprime)?;
    let width = 4 * seg_lstm.hidden;
    let mut out: Vec<Option<Var>> = vec![None; layout.num_segments()];
    for k in 0..t_len {
        let mut state = None;
        for t in k + 1..=(k + layout.clamp()).min(t_len) {
            let row = tape.slice(xw, (t - 1) * width, width)?;
            let next = seg_lstm.step(tape, row, state)?;
            out[layout.segment_index(k, t)] = Some(next.0);
            state = Some(next);
        }
    }
    Ok(out.into_iter().map(|v| v.expect("all segments filled")).collect())
}

/// Handles for the joint feature function
/// `f(y, ⟨k,t⟩) = w · (W_out · tanh(W_u M_y + W_h h_kt + W_d D_{t-k} + b) + b_out)`.
#[derive(Debug, Clone)]
pub struct SegmentScorer {
    label_part: Var,
    duration_part: Vec<Var>,
    w_h: Var,
    out_w: Var,
    out_b: Var,
    w: Var,
    vocab: usize,
}

impl SegmentScorer {
    pub fn new(tape: &mut Tape, bound: &Bound, clamp: usize) -> Result<Self> {
        let embed = bound.get("crf.embed")?;
        let vocab = tape.shape(embed)[0];
        let label_part = tape.matmul(embed, bound.get("crf.hid.w_u")?)?;
        let bias = bound.get("crf.hid.b")?;
        let duration_part = if bound.has("crf.dur") {
            let table = bound.get("crf.dur")?;
            let w_d = bound.get("crf.hid.w_d")?;
            let (rows, d_dur) = (tape.shape(table)[0], tape.shape(table)[1]);
            if rows < clamp + 1 {
                return Err(Error::shape(
                    "score_segment",
                    format!("duration table has {rows} rows, clamp {clamp} needs {}", clamp + 1),
                ));
            }
            let mut parts = vec![bias];
            for d in 1..=clamp {
                let row = tape.slice(table, d * d_dur, d_dur)?;
                let proj = tape.matvec(w_d, row)?;
                parts.push(tape.add(proj, bias)?);
            }
            parts
        } else {
            vec![bias; clamp + 1]
        };
        Ok(Self {
            label_part,
            duration_part,
            w_h: bound.get("crf.hid.w_h")?,
            out_w: bound.get("crf.out.w")?,
            out_b: bound.get("crf.out.b")?,
            w: bound.get("crf.w")?,
            vocab,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Scores of every label for one segment embedding of `duration` frames.
    pub fn score(&self, tape: &mut Tape, embedding: Var, duration: usize) -> Result<Var> {
        let seg = tape.matvec(self.w_h, embedding)?;
        let seg = tape.add(seg, self.duration_part[duration])?;
        let pre = tape.add_row(self.label_part, seg)?;
        let hidden = tape.tanh(pre)?;
        let g = tape.matmul(hidden, self.out_w)?;
        let g = tape.add_row(g, self.out_b)?;
        tape.matvec(g, self.w)
    }
}

/// Builds every admissible segment score for encoder output `hprime`.
pub fn lattice_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    hprime: Var,
    clamp: usize,
) -> Result<TapeLattice> {
    let layout = SegmentLayout::new(tape.shape(hprime)[0], clamp)?;
    let seg_lstm = LstmVars::from_bound(tape, bound, "seg")?;
    let embeddings = segment_embeddings_on_tape(tape, &seg_lstm, hprime, &layout)?;
    let scorer = SegmentScorer::new(tape, bound, clamp)?;
    let mut segments = Vec::with_capacity(embeddings.len());
    for t in 1..=layout.t_len() {
        for k in layout.starts(t) {
            let emb = embeddings[layout.segment_index(k, t)];
            segments.push(scorer.score(tape, emb, t - k)?);
        }
    }
    Ok(TapeLattice {
        layout,
        vocab: scorer.vocab(),
        segments,
    })
}

/// `log Z(X)`: `α_0 = 0`, `α_t = logsumexp_{k, y} (α_k + f(y, ⟨k,t⟩))`
/// with `max(0, t-L) <= k < t`.
pub fn log_partition_on_tape(tape: &mut Tape, lattice: &TapeLattice) -> Result<Var> {
    let t_len = lattice.layout.t_len();
    let mut alpha = Vec::with_capacity(t_len + 1);
    alpha.push(tape.constant(Tensor::scalar(0.0))?);
    for t in 1..=t_len {
        let mut terms = Vec::new();
        for k in lattice.layout.starts(t) {
            let prefix = tape.broadcast(alpha[k], lattice.vocab)?;
            terms.push(tape.add(prefix, lattice.segment(k, t))?);
        }
        let all = tape.concat(&terms)?;
        alpha.push(tape.log_sum_exp(all)?);
    }
    Ok(alpha[t_len])
}

/// Whether `J` labels can tile `T` frames with segments of `1..=L` frames.
pub fn feasible(t_len: usize, num_labels: usize, clamp: usize) -> bool {
    num_labels >= 1 && num_labels <= t_len && num_labels.saturating_mul(clamp) >= t_len
}

/// `log Z(X, y)`: `β_{0,0} = 0`,
/// `β_{t,j} = logsumexp_k (β_{k,j-1} + f(y_j, ⟨k,t⟩))`. Only states that
/// can start and finish a valid tiling are materialized.
pub fn log_clamped_on_tape(
    tape: &mut Tape,
    lattice: &TapeLattice,
    labels: &LabelSequence,
) -> Result<Var> {
    let t_len = lattice.layout.t_len();
    let clamp = lattice.layout.clamp();
    let ys = labels.as_slice();
    let j_len = ys.len();
    if !feasible(t_len, j_len, clamp) {
        return Err(Error::Infeasible(format!(
            "{j_len} labels cannot tile {t_len} frames with segments of at most {clamp}"
        )));
    }
    if let Some(&bad) = ys.iter().find(|&&y| y >= lattice.vocab) {
        return Err(Error::Invalid(format!("label {bad} outside vocabulary of {}", lattice.vocab)));
    }
    let reachable = |t: usize, j: usize| {
        j <= t && t <= j * clamp && t_len - t >= j_len - j && t_len - t <= (j_len - j) * clamp
    };
    let mut picked: HashMap<(usize, usize), Var> = HashMap::new();
    let mut beta: HashMap<(usize, usize), Var> = HashMap::new();
    beta.insert((0, 0), tape.constant(Tensor::scalar(0.0))?);
    for j in 1..=j_len {
        let y = ys[j - 1];
        for t in j..=t_len {
            if !reachable(t, j) {
                continue;
            }
            let mut terms = Vec::new();
            for k in lattice.layout.starts(t) {
                let Some(&prev) = beta.get(&(k, j - 1)) else { continue };
                let seg = lattice.layout.segment_index(k, t);
                let score = match picked.get(&(seg, y)) {
                    Some(&v) => v,
                    None => {
                        let v = tape.slice(lattice.segments[seg], y, 1)?;
                        picked.insert((seg, y), v);
                        v
                    }
                };
                terms.push(tape.add(prev, score)?);
            }
            let all = tape.concat(&terms)?;
            beta.insert((t, j), tape.log_sum_exp(all)?);
        }
    }
    Ok(beta[&(t_len, j_len)])
}

/// Marginal negative log-likelihood `log Z(X) - log Z(X, y)`.
pub fn nll_on_tape(tape: &mut Tape, lattice: &TapeLattice, labels: &LabelSequence) -> Result<Var> {
    let log_z = log_partition_on_tape(tape, lattice)?;
    let log_zy = log_clamped_on_tape(tape, lattice, labels)?;
    tape.sub(log_z, log_zy)
}

pub fn log_partition(lattice: &ScoreLattice) -> f64 {
    let mut tape = Tape::new();
    let lat = TapeLattice::from_scores(&mut tape, lattice).expect("finite lattice");
    let z = log_partition_on_tape(&mut tape, &lat).expect("finite lattice");
    tape.scalar(z)
}

pub fn log_clamped(lattice: &ScoreLattice, labels: &LabelSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let lat = TapeLattice::from_scores(&mut tape, lattice)?;
    let z = log_clamped_on_tape(&mut tape, &lat, labels)?;
    Ok(tape.scalar(z))
}

fn hprime_matrix(tape: &mut Tape, hprime: &[Vec<f64>]) -> Result<Var> {
    let dim = hprime.first().map_or(0, Vec::len);
    if hprime.is_empty() || hprime.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("segcrf", "encoder output must be non-empty and rectangular"));
    }
    tape.constant(Tensor::matrix(hprime.len(), dim, hprime.concat())?)
}

/// Plain segment embedding of `hprime[k..t]`.
pub fn segment_embedding(
    hprime: &[Vec<f64>],
    k: usize,
    t: usize,
    params: &ModelParams,
    clamp: usize,
) -> Result<Vec<f64>> {
    let layout = SegmentLayout::new(hprime.len(), clamp)?;
    if !layout.admissible(k, t) {
        return Err(Error::Invalid(format!(
            "segment <{k}, {t}> not admissible for T'={}, L={clamp}",
            hprime.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let h = hprime_matrix(&mut tape, hprime)?;
    let seg_lstm = LstmVars::from_bound(&tape, &bound, "seg")?;
    let all = segment_embeddings_on_tape(&mut tape, &seg_lstm, h, &layout)?;
    Ok(tape.value(all[layout.segment_index(k, t)]).data().to_vec())
}

/// Plain `f(y, ⟨k,t⟩)`.
pub fn score_segment(
    y: usize,
    k: usize,
    t: usize,
    hprime: &[Vec<f64>],
    params: &ModelParams,
    clamp: usize,
) -> Result<f64> {
    let lattice = build_score_lattice(hprime, params, clamp)?;
    if y >= lattice.vocab() || !lattice.layout().admissible(k, t) {
        return Err(Error::Invalid(format!("cell ({k}, {t}, {y}) not admissible")));
    }
    Ok(lattice.score(k, t, y))
}

pub fn build_score_lattice(hprime: &[Vec<f64>], params: &ModelParams, clamp: usize) -> Result<ScoreLattice> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let h = hprime_matrix(&mut tape, hprime)?;
    let lat = lattice_on_tape(&mut tape, &bound, h, clamp)?;
    lat.values(&tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::lattice::lattice_entry_count;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(use_duration: bool) -> ModelConfig {
        let mut cfg = ModelConfig::small();
        cfg.encoder.num_layers = 1;
        cfg.encoder.hidden = 2;
        cfg.encoder.subsample_after.clear();
        cfg.features.embed_dim = 2;
        cfg.features.d_w = 3;
        cfg.features.d_h = 2;
        cfg.features.d_dur = 2;
        cfg.features.use_duration = use_duration;
        cfg.clamp.frames = 3;
        cfg
    }

    fn rand_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn rand_lattice(rng: &mut ChaCha8Rng, t: usize, l: usize, v: usize) -> ScoreLattice {
        ScoreLattice::from_fn(t, l, v, |_, _, _| rng.random_range(-2.0..2.0)).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Independent straight-line feature function for a tiny model.
    fn reference_score(p: &ModelParams, h: &[Vec<f64>], k: usize, t: usize, y: usize) -> f64 {
        let d = |n: &str| p.get(n).unwrap();
        let dh = d("seg.w_hh").shape()[1];
        let (w_ih, w_hh, b) = (d("seg.w_ih").data(), d("seg.w_hh").data(), d("seg.b").data());
        let mut hs = vec![0.0; dh];
        let mut cs = vec![0.0; dh];
        for x in &h[k..t] {
            let mut z = b.to_vec();
            for j in 0..4 * dh {
                for (i, xi) in x.iter().enumerate() {
                    z[j] += xi * w_ih[i * 4 * dh + j];
                }
                for i in 0..dh {
                    z[j] += w_hh[j * dh + i] * hs[i];
                }
            }
            for u in 0..dh {
                cs[u] = sig(z[dh + u]) * cs[u] + sig(z[u]) * z[3 * dh + u].tanh();
                hs[u] = sig(z[2 * dh + u]) * cs[u].tanh();
            }
        }
        let dw = d("crf.w").len();
        let e = d("crf.embed").shape()[1];
        let mut pre = d("crf.hid.b").data().to_vec();
        for (o, pre_o) in pre.iter_mut().enumerate() {
            for i in 0..e {
                *pre_o += d("crf.embed").data()[y * e + i] * d("crf.hid.w_u").data()[i * dw + o];
            }
            for i in 0..dh {
                *pre_o += d("crf.hid.w_h").data()[o * dh + i] * hs[i];
            }
            if let Some(table) = p.get("crf.dur") {
                let dd = table.shape()[1];
                for i in 0..dd {
                    *pre_o += d("crf.hid.w_d").data()[o * dd + i] * table.data()[(t - k) * dd + i];
                }
            }
        }
        let hid: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut f = 0.0;
        for o in 0..dw {
            let mut g = d("crf.out.b").data()[o];
            for i in 0..dw {
                g += hid[i] * d("crf.out.w").data()[i * dw + o];
            }
            f += d("crf.w").data()[o] * g;
        }
        f
    }

    #[test]
    fn scores_match_straight_line_reference() {
        for use_duration in [true, false] {
            let cfg = tiny_cfg(use_duration);
            let p = ModelParams::init(&cfg, 2, 2, 0.7, 21);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let h = rand_rows(&mut rng, 3, 2);
            let lat = build_score_lattice(&h, &p, 3).unwrap();
            for t in 1..=3 {
                for k in 0..t {
                    for y in 0..2 {
                        let want = reference_score(&p, &h, k, t, y);
                        assert!((lat.score(k, t, y) - want).abs() < 1e-12);
                    }
                }
            }
            assert_eq!(score_segment(1, 0, 2, &h, &p, 3).unwrap(), lat.score(0, 2, 1));
        }
    }

    #[test]
    fn zero_params_zero_scores_and_embeddings() {
        let cfg = tiny_cfg(true);
        let p = ModelParams::zeros(&cfg, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_rows(&mut rng, 4, 2);
        let lat = build_score_lattice(&h, &p, 3).unwrap();
        assert!(lat.raw().iter().all(|&s| s == 0.0));
        assert_eq!(segment_embedding(&h, 1, 3, &p, 3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn embedding_prefix_sharing() {
        let cfg = tiny_cfg(true);
        let p = ModelParams::init(&cfg, 2, 2, 0.7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = rand_rows(&mut rng, 5, 2);
        // Embedding of <1, 4> from the shared pass equals a fresh run on h[1..4].
        let shared = segment_embedding(&h, 1, 4, &p, 3).unwrap();
        let alone = segment_embedding(&h[1..4], 0, 3, &p, 3).unwrap();
        assert_eq!(shared, alone);
        // Single-frame segment is one step on h[k].
        let one = segment_embedding(&h, 2, 3, &p, 3).unwrap();
        assert_eq!(one, segment_embedding(&h[2..3], 0, 1, &p, 3).unwrap());
        assert!(segment_embedding(&h, 0, 4, &p, 3).is_err());
    }

    #[test]
    fn label_degeneracy() {
        let mut cfg = tiny_cfg(false);
        cfg.features.use_duration = false;
        let mut p = ModelParams::init(&cfg, 2, 3, 0.7, 8);
        let row: Vec<f64> = p.get("crf.embed").unwrap().row(0).to_vec();
        let embed = p.get_mut("crf.embed").unwrap();
        let e = row.len();
        for y in 0..3 {
            embed.data_mut()[y * e..(y + 1) * e].copy_from_slice(&row);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_rows(&mut rng, 4, 2);
        let lat = build_score_lattice(&h, &p, 3).unwrap();
        for t in 1..=4 {
            for k in lat.starts(t) {
                let s = lat.segment(k, t);
                assert!(s.iter().all(|&v| v == s[0]));
            }
        }
    }

    #[test]
    fn lattice_sizes() {
        let cfg = tiny_cfg(true);
        let p = ModelParams::init(&cfg, 2, 2, 0.5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = build_score_lattice(&rand_rows(&mut rng, 4, 2), &p, 2).unwrap();
        assert_eq!(lat.len(), 14);
        assert_eq!(lat.len(), lattice_entry_count(4, 2, 2));
        let lat = build_score_lattice(&rand_rows(&mut rng, 1, 2), &p, 3).unwrap();
        assert_eq!(lat.len(), 2);
    }

    #[test]
    fn partition_small_cases() {
        let lat = ScoreLattice::from_fn(1, 1, 3, |_, _, _| 0.0).unwrap();
        assert!((log_partition(&lat) - 3f64.ln()).abs() < 1e-15);
        let lat = ScoreLattice::from_fn(2, 2, 1, |_, _, _| 0.0).unwrap();
        assert!((log_partition(&lat) - 2f64.ln()).abs() < 1e-15);
        let lat = ScoreLattice::from_fn(2, 2, 2, |_, _, _| 0.0).unwrap();
        assert!((log_partition(&lat) - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clamped_forced_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lat = rand_lattice(&mut rng, 5, 5, 3);
        let ys = LabelSequence::new(vec![2, 0, 1, 1, 0], 3).unwrap();
        let want: f64 = ys.as_slice().iter().enumerate().map(|(j, &y)| lat.score(j, j + 1, y)).sum();
        assert!((log_clamped(&lat, &ys).unwrap() - want).abs() < 1e-12);
        let one = LabelSequence::new(vec![1], 3).unwrap();
        assert_eq!(log_clamped(&lat, &one).unwrap(), lat.score(0, 5, 1));
    }

    #[test]
    fn infeasible_labels() {
        let lat = ScoreLattice::from_fn(3, 3, 2, |_, _, _| 0.0).unwrap();
        let long = LabelSequence::new(vec![0, 1, 0, 1], 2).unwrap();
        assert!(matches!(log_clamped(&lat, &long), Err(Error::Infeasible(_))));
        let lat = ScoreLattice::from_fn(5, 2, 2, |_, _, _| 0.0).unwrap();
        let short = LabelSequence::new(vec![0, 1], 2).unwrap();
        assert!(matches!(log_clamped(&lat, &short), Err(Error::Infeasible(_))));
    }

    #[test]
    fn loss_with_zero_scores() {
        let lat = ScoreLattice::from_fn(2, 2, 2, |_, _, _| 0.0).unwrap();
        let y = LabelSequence::new(vec![0], 2).unwrap();
        let loss = log_partition(&lat) - log_clamped(&lat, &y).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_label_vocabulary_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = rand_lattice(&mut rng, 4, 4, 1);
        let y = LabelSequence::new(vec![0; 4], 1).unwrap();
        let forced: f64 = (0..4).map(|j| lat.score(j, j + 1, 0)).sum();
        let loss = log_partition(&lat) - log_clamped(&lat, &y).unwrap();
        assert!((loss - (log_partition(&lat) - forced)).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn clamp_noop_and_subset_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let t = rng.random_range(1..7);
            let v = rng.random_range(1..4);
            let wide = rand_lattice(&mut rng, t, t + 3, v);
            let exact = wide.map(|_, _, _, s| s).unwrap();
            let trimmed = ScoreLattice::from_fn(t, t, v, |k, tt, y| wide.score(k, tt, y)).unwrap();
            assert_eq!(log_partition(&exact).to_bits(), log_partition(&trimmed).to_bits());
            let j = rng.random_range(1..=t);
            let ys = LabelSequence::new((0..j).map(|_| rng.random_range(0..v)).collect(), v).unwrap();
            assert!(log_partition(&wide) >= log_clamped(&wide, &ys).unwrap());
        }
    }
}
