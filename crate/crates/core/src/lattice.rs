//! Sequences, segmentations, vocabularies and score lattices.
//!
//! Segments use half-open boundary tags: segment `⟨k, t⟩` covers frames
//! `k..t` (exclusive end), so its duration is `t - k >= 1` and a
//! segmentation of `T` frames is a strictly increasing boundary list
//! `0 = b_0 < b_1 < ... < b_J = T`.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Invalid("vocabulary must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!(
                    "vocabulary token {i} is empty or contains whitespace: {tok:?}"
                )));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps whitespace-separated tokens to a label sequence.
    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        let labels = text
            .split_whitespace()
            .map(|tok| {
                self.index_of(tok)
                    .ok_or_else(|| Error::UnknownToken(tok.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(labels, self.len())
    }

    pub fn decode(&self, labels: &LabelSequence) -> Vec<&str> {
        labels
            .as_slice()
            .iter()
            .map(|&y| self.tokens[y].as_str())
            .collect()
    }
}

/// A `T x D` matrix of input frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<f64>,
    len: usize,
    dim: usize,
    pub frame_period_ms: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "frame sequence must have T >= 1 and D >= 1, got T={len}, D={dim}"
            )));
        }
        if frames.len() != len * dim {
            return Err(Error::Invalid(format!(
                "frame buffer holds {} values, expected {len}x{dim}",
                frames.len()
            )));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite frame value at frame {}, dim {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            frames,
            len,
            dim,
            frame_period_ms: 10.0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("ragged frame rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("label sequence must contain at least one label".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= vocab_size) {
            return Err(Error::Invalid(format!(
                "label index {bad} out of range for vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segmentation {
    boundaries: Vec<usize>,
}

impl Segmentation {
    /// Wraps a boundary list without checking it; see [`validate_segmentation`].
    pub fn from_boundaries(boundaries: Vec<usize>) -> Self {
        Self { boundaries }
    }

    /// Builds a segmentation from segment durations.
    pub fn from_durations(durations: &[usize]) -> Self {
        let mut boundaries = Vec::with_capacity(durations.len() + 1);
        boundaries.push(0);
        let mut acc = 0;
        for &d in durations {
            acc += d;
            boundaries.push(acc);
        }
        Self { boundaries }
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    /// `(start, end)` tags of every segment, in order.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.boundaries.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn durations(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments().map(|(k, t)| t.wrapping_sub(k))
    }
}

/// Checks every segmentation invariant, naming the first one violated.
pub fn validate_segmentation(
    seg: &Segmentation,
    t_len: usize,
    clamp: Option<usize>,
) -> Result<(), String> {
    let b = seg.boundaries();
    if b.len() < 2 {
        return Err("a segmentation needs at least two boundaries".into());
    }
    if b[0] != 0 {
        return Err(format!("first boundary is {} but must be 0", b[0]));
    }
    for (j, w) in b.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(format!(
                "not strictly increasing at boundary {}: {} after {}",
                j + 1,
                w[1],
                w[0]
            ));
        }
    }
    let last = b[b.len() - 1];
    if last != t_len {
        return Err(format!("last boundary is {last} but T={t_len}"));
    }
    if let Some(l) = clamp {
        for (j, d) in seg.durations().enumerate() {
            if d > l {
                return Err(format!("segment {} has duration {d} > L={l}", j + 1));
            }
        }
    }
    Ok(())
}

/// Replaces every label by its image under `mapping`, optionally merging
/// runs of identical output labels.
pub fn collapse_labels(
    seq: &LabelSequence,
    mapping: &[Option<usize>],
    merge_adjacent: bool,
) -> Result<LabelSequence> {
    let mut out: Vec<usize> = Vec::with_capacity(seq.len());
    for &y in seq.as_slice() {
        let image = mapping
            .get(y)
            .copied()
            .flatten()
            .ok_or(Error::Unmapped(y))?;
        if merge_adjacent && out.last() == Some(&image) {
            continue;
        }
        out.push(image);
    }
    Ok(LabelSequence(out))
}

/// Number of `(k, t, y)` cells in a lattice over `t_len` frames with
/// segments of at most `clamp` frames and `vocab` labels.
pub fn lattice_entry_count(t_len: usize, clamp: usize, vocab: usize) -> usize {
    vocab * (1..=t_len).map(|t| t.min(clamp)).sum::<usize>()
}

/// Index arithmetic for the admissible segments of a clamped lattice,
/// grouped by end tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    t_len: usize,
    clamp: usize,
    /// `block_start[t]` = index of the first segment ending at `t`.
    block_start: Vec<usize>,
}

impl SegmentLayout {
    pub fn new(t_len: usize, clamp: usize) -> Result<Self> {
        if t_len == 0 || clamp == 0 {
            return Err(Error::Invalid(format!(
                "lattice needs T >= 1 and L >= 1, got T={t_len}, L={clamp}"
            )));
        }
        let mut block_start = Vec::with_capacity(t_len + 2);
        block_start.push(0);
        let mut acc = 0;
        for t in 1..=t_len {
            block_start.push(acc);
            acc += t.min(clamp);
        }
        block_start.push(acc);
        Ok(Self {
            t_len,
            clamp,
            block_start,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn clamp(&self) -> usize {
        self.clamp
    }

    pub fn num_segments(&self) -> usize {
        self.block_start[self.t_len + 1]
    }

    /// Admissible start tags for segments ending at `t`.
    pub fn starts(&self, t: usize) -> Range<usize> {
        t.saturating_sub(self.clamp)..t
    }

    pub fn admissible(&self, k: usize, t: usize) -> bool {
        k < t && t <= self.t_len && t - k <= self.clamp
    }

    pub fn segment_index(&self, k: usize, t: usize) -> usize {
        debug_assert!(self.admissible(k, t), "segment <{k}, {t}> not admissible");
        self.block_start[t] + (k - t.saturating_sub(self.clamp))
    }
}

/// Log-domain segment scores `f(y, ⟨k, t⟩)` for every admissible cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLattice {
    layout: SegmentLayout,
    vocab: usize,
    scores: Vec<f64>,
}

impl ScoreLattice {
    pub fn from_fn(
        t_len: usize,
        clamp: usize,
        vocab: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let layout = SegmentLayout::new(t_len, clamp)?;
        if vocab == 0 {
            return Err(Error::Invalid("lattice vocabulary must be non-empty".into()));
        }
        let mut scores = Vec::with_capacity(layout.num_segments() * vocab);
        for t in 1..=t_len {
            for k in layout.starts(t) {
                for y in 0..vocab {
                    scores.push(f(k, t, y));
                }
            }
        }
        Self::from_parts(layout, vocab, scores)
    }

    /// `scores` must follow the layout order: end tag ascending, then
    /// start tag ascending, then label.
    pub fn from_parts(layout: SegmentLayout, vocab: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != layout.num_segments() * vocab {
            return Err(Error::Invalid(format!(
                "lattice has {} scores, expected {}",
                scores.len(),
                layout.num_segments() * vocab
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("lattice scores must be finite".into()));
        }
        Ok(Self {
            layout,
            vocab,
            scores,
        })
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn t_len(&self) -> usize {
        self.layout.t_len
    }

    pub fn clamp(&self) -> usize {
        self.layout.clamp
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score(&self, k: usize, t: usize, y: usize) -> f64 {
        self.segment(k, t)[y]
    }

    /// Scores of all labels on segment `⟨k, t⟩`.
    pub fn segment(&self, k: usize, t: usize) -> &[f64] {
        let base = self.layout.segment_index(k, t) * self.vocab;
        &self.scores[base..base + self.vocab]
    }

    pub fn starts(&self, t: usize) -> Range<usize> {
        self.layout.starts(t)
    }

    pub fn raw(&self) -> &[f64] {
        &self.scores
    }

    /// Returns a new lattice with every score rewritten by `f(k, t, y, score)`.
    pub fn map(&self, mut f: impl FnMut(usize, usize, usize, f64) -> f64) -> Result<Self> {
        Self::from_fn(self.t_len(), self.clamp(), self.vocab, |k, t, y| {
            f(k, t, y, self.score(k, t, y))
        })
    }
}
