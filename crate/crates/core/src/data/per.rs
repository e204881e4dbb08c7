//! Label error rate: Levenshtein distance over reference length.

use crate::error::{Error, Result};

/// Unit-cost edit distance (substitution, insertion, deletion).
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Error rate of one hypothesis. Not symmetric: the denominator is the
/// reference length.
pub fn per<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level accumulator: total edits over total reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusPer {
    pub edits: usize,
    pub reference_len: usize,
}

impl CorpusPer {
    pub fn add<T: PartialEq>(&mut self, hyp: &[T], reference: &[T]) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::Invalid("error rate needs a non-empty reference".into()));
        }
        self.edits += edit_distance(hyp, reference);
        self.reference_len += reference.len();
        Ok(())
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            edits: self.edits + other.edits,
            reference_len: self.reference_len + other.reference_len,
        }
    }

    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference_len as f64
        }
    }
}
