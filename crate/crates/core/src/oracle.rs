//! Exponential-time reference implementations: enumerate every
//! segmentation and labeling and sum or maximize directly.
//!
//! Nothing here calls into the dynamic programs it is used to check.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, ScoreLattice, Segmentation};

/// Hard cap on enumerated `(y, E)` pairs.
pub const MAX_PAIRS: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_t: usize,
    pub max_v: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_t: 8, max_v: 4 }
    }
}

impl EnumerationBudget {
    fn admit(&self, t_len: usize, clamp: usize, vocab: usize) -> Result<()> {
        if t_len > self.max_t || vocab > self.max_v {
            return Err(Error::Budget(format!(
                "T={t_len}, V={vocab} exceeds max_T={}, max_V={}",
                self.max_t, self.max_v
            )));
        }
        let pairs = count_labeled_segmentations(t_len, vocab, clamp);
        if pairs > MAX_PAIRS {
            return Err(Error::Budget(format!("{pairs} labeled segmentations exceed {MAX_PAIRS}")));
        }
        Ok(())
    }
}

/// `N(T) = Σ_{d=1..min(T,L)} N(T-d)`, `N(0) = 1`.
pub fn count_segmentations(t_len: usize, clamp: usize) -> f64 {
    count_labeled_segmentations(t_len, 1, clamp)
}

/// Number of `(y, E)` pairs: `N(T) = Σ_{d=1..min(T,L)} V · N(T-d)`.
pub fn count_labeled_segmentations(t_len: usize, vocab: usize, clamp: usize) -> f64 {
    let mut n = vec![0.0; t_len + 1];
    n[0] = 1.0;
    for t in 1..=t_len {
        n[t] = (1..=t.min(clamp)).map(|d| vocab as f64 * n[t - d]).sum();
    }
    n[t_len]
}

/// Segmentations of `T` frames into exactly `J` segments of `1..=L` frames.
pub fn count_segmentations_with_segments(t_len: usize, segments: usize, clamp: usize) -> f64 {
    // n[j][t]
    let mut n = vec![vec![0.0; t_len + 1]; segments + 1];
    n[0][0] = 1.0;
    for j in 1..=segments {
        for t in 1..=t_len {
            n[j][t] = (1..=t.min(clamp)).map(|d| n[j - 1][t - d]).sum();
        }
    }
    n[segments][t_len]
}

fn extend(prefix: &mut Vec<usize>, t_len: usize, clamp: usize, out: &mut Vec<Segmentation>) {
    let last = *prefix.last().expect("prefix starts at 0");
    if last == t_len {
        out.push(Segmentation::from_boundaries(prefix.clone()));
        return;
    }
    for d in 1..=clamp.min(t_len - last) {
        prefix.push(last + d);
        extend(prefix, t_len, clamp, out);
        prefix.pop();
    }
}

/// Every boundary list with all durations in `1..=L`, each exactly once.
pub fn enumerate_segmentations(
    t_len: usize,
    clamp: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<Segmentation>> {
    budget.admit(t_len, clamp, 1)?;
    if t_len == 0 || clamp == 0 {
        return Err(Error::Invalid("enumeration needs T >= 1 and L >= 1".into()));
    }
    let mut out = Vec::new();
    extend(&mut vec![0], t_len, clamp, &mut out);
    Ok(out)
}

/// Calls `visit(segmentation, labels, score)` for every labeled segmentation.
/// Scores are summed left to right starting from `0.0`.
fn for_each_pair(
    lattice: &ScoreLattice,
    budget: &EnumerationBudget,
    mut visit: impl FnMut(&Segmentation, &[usize], f64),
) -> Result<()> {
    budget.admit(lattice.t_len(), lattice.clamp(), lattice.vocab())?;
    let v = lattice.vocab();
    for seg in enumerate_segmentations(lattice.t_len(), lattice.clamp(), budget)? {
        let spans: Vec<(usize, usize)> = seg.segments().collect();
        let mut labels = vec![0usize; spans.len()];
        loop {
            let mut score = 0.0;
            for (&(k, t), &y) in spans.iter().zip(&labels) {
                score += lattice.score(k, t, y);
            }
            visit(&seg, &labels, score);
            // odometer increment; wraps to all zeros after the last labeling
            let mut wrapped = true;
            for pos in (0..labels.len()).rev() {
                labels[pos] += 1;
                if labels[pos] < v {
                    wrapped = false;
                    break;
                }
                labels[pos] = 0;
            }
            if wrapped {
                break;
            }
        }
    }
    Ok(())
}

fn log_sum(scores: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &s in scores {
        if s > m {
            m = s;
        }
    }
    let mut acc = 0.0;
    for &s in scores {
        acc += (s - m).exp();
    }
    m + acc.ln()
}

pub fn brute_log_partition(lattice: &ScoreLattice, budget: &EnumerationBudget) -> Result<f64> {
    let mut scores = Vec::new();
    for_each_pair(lattice, budget, |_, _, s| scores.push(s))?;
    Ok(log_sum(&scores))
}

/// Log-sum over segmentations whose labels equal `labels`; `-inf` when
/// there are none.
pub fn brute_log_clamped(
    lattice: &ScoreLattice,
    labels: &LabelSequence,
    budget: &EnumerationBudget,
) -> Result<f64> {
    budget.admit(lattice.t_len(), lattice.clamp(), lattice.vocab())?;
    let ys = labels.as_slice();
    let mut scores = Vec::new();
    for seg in enumerate_segmentations(lattice.t_len(), lattice.clamp(), budget)? {
        if seg.num_segments() != ys.len() {
            continue;
        }
        let mut score = 0.0;
        for ((k, t), &y) in seg.segments().zip(ys) {
            score += lattice.score(k, t, y);
        }
        scores.push(score);
    }
    if scores.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_sum(&scores))
}

/// Best `(y, E)` pair. Among equal scores the winner has the
/// lexicographically smallest `(start, label)` list read from the last
/// segment backwards.
pub fn brute_argmax(
    lattice: &ScoreLattice,
    budget: &EnumerationBudget,
) -> Result<(LabelSequence, Segmentation, f64)> {
    let mut best: Option<(Vec<(usize, usize)>, Vec<usize>, Segmentation, f64)> = None;
    for_each_pair(lattice, budget, |seg, labels, score| {
        let mut key: Vec<(usize, usize)> = seg.segments().zip(labels).map(|((k, _), &y)| (k, y)).collect();
        key.reverse();
        let better = match &best {
            None => true,
            Some((bkey, _, _, bscore)) => score > *bscore || (score == *bscore && key < *bkey),
        };
        if better {
            best = Some((key, labels.to_vec(), seg.clone(), score));
        }
    })?;
    let (_, labels, seg, score) = best.expect("at least one segmentation");
    Ok((LabelSequence::new(labels, lattice.vocab())?, seg, score))
}

/// Posterior probability of each labeled segment `(k, t, y)`, optionally
/// conditioned on the label sequence. Values sum to the expected number of
/// segments.
pub fn brute_segment_posteriors(
    lattice: &ScoreLattice,
    labels: Option<&LabelSequence>,
    budget: &EnumerationBudget,
) -> Result<HashMap<(usize, usize, usize), f64>> {
    let mut pairs: Vec<(Vec<(usize, usize, usize)>, f64)> = Vec::new();
    for_each_pair(lattice, budget, |seg, ys, score| {
        if let Some(want) = labels {
            if want.as_slice() != ys {
                return;
            }
        }
        let cells = seg.segments().zip(ys).map(|((k, t), &y)| (k, t, y)).collect();
        pairs.push((cells, score));
    })?;
    if pairs.is_empty() {
        return Err(Error::Infeasible("no segmentation matches the labels".into()));
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let log_z = log_sum(&scores);
    let mut post = HashMap::new();
    for (cells, score) in pairs {
        let p = (score - log_z).exp();
        for c in cells {
            *post.entry(c).or_insert(0.0) += p;
        }
    }
    Ok(post)
}
