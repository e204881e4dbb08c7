//! Search over label sequences and segmentations of a score lattice.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, ScoreLattice, Segmentation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Exact joint maximization over `(y, E)`.
    Joint,
    /// Sums over segmentations while maximizing the label of each segment;
    /// the returned labels come from a heuristic backtrace.
    MarginalHybrid,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Joint => "joint",
            DecodeMode::MarginalHybrid => "marginal-hybrid",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(DecodeMode::Joint),
            "marginal-hybrid" => Ok(DecodeMode::MarginalHybrid),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub labels: LabelSequence,
    pub segmentation: Option<Segmentation>,
    /// Log-domain score of the search objective.
    pub score: f64,
    pub mode: DecodeMode,
}

/// Index of the largest value; ties resolve to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn backtrace(back: &[(usize, usize)], t_len: usize, vocab: usize) -> (LabelSequence, Segmentation) {
    let mut bounds = vec![t_len];
    let mut labels = Vec::new();
    let mut t = t_len;
    while t > 0 {
        let (k, y) = back[t];
        labels.push(y);
        bounds.push(k);
        t = k;
    }
    labels.reverse();
    bounds.reverse();
    let labels = LabelSequence::new(labels, vocab).expect("backtrace yields at least one label");
    (labels, Segmentation::from_boundaries(bounds))
}

/// Max-tropical recursion `α*_t = max_{k, y} (α*_k + f(y, ⟨k,t⟩))` with
/// backpointers. Ties go to the smaller start tag, then the smaller label.
pub fn decode_joint(lattice: &ScoreLattice) -> DecodeResult {
    let t_len = lattice.t_len();
    let mut alpha = vec![0.0; t_len + 1];
    let mut back = vec![(0, 0); t_len + 1];
    for t in 1..=t_len {
        let mut best = f64::NEG_INFINITY;
        let mut arg = (0, 0);
        for k in lattice.starts(t) {
            for (y, &f) in lattice.segment(k, t).iter().enumerate() {
                let cand = alpha[k] + f;
                if cand > best {
                    best = cand;
                    arg = (k, y);
                }
            }
        }
        alpha[t] = best;
        back[t] = arg;
    }
    let (labels, seg) = backtrace(&back, t_len, lattice.vocab());
    DecodeResult {
        labels,
        segmentation: Some(seg),
        score: alpha[t_len],
        mode: DecodeMode::Joint,
    }
}

/// `α*_t = logsumexp_k (α*_k + max_y f(y, ⟨k,t⟩))`. Labels are recovered by
/// following, from `T'`, the predecessor with the largest summand and the
/// best label on that segment.
pub fn decode_marginal_hybrid(lattice: &ScoreLattice) -> DecodeResult {
    let t_len = lattice.t_len();
    let mut alpha = vec![0.0; t_len + 1];
    let mut back = vec![(0, 0); t_len + 1];
    let mut terms = Vec::with_capacity(lattice.clamp());
    for t in 1..=t_len {
        terms.clear();
        let mut best = f64::NEG_INFINITY;
        let mut arg = (0, 0);
        for k in lattice.starts(t) {
            let seg = lattice.segment(k, t);
            let y = argmax(seg);
            let summand = alpha[k] + seg[y];
            terms.push(summand);
            if summand > best {
                best = summand;
                arg = (k, y);
            }
        }
        alpha[t] = log_sum_exp(&terms);
        back[t] = arg;
    }
    let (labels, seg) = backtrace(&back, t_len, lattice.vocab());
    DecodeResult {
        labels,
        segmentation: Some(seg),
        score: alpha[t_len],
        mode: DecodeMode::MarginalHybrid,
    }
}

pub fn decode(lattice: &ScoreLattice, mode: DecodeMode) -> DecodeResult {
    match mode {
        DecodeMode::Joint => decode_joint(lattice),
        DecodeMode::MarginalHybrid => decode_marginal_hybrid(lattice),
    }
}
