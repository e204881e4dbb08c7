//! Synthetic segmental corpus: each label owns a Gaussian mean vector and
//! emits a run of noisy frames around it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{write_frames, write_labels, write_manifest, write_vocab, write_file, Manifest, ManifestEntry, Utterance};
use crate::error::{Error, Result};
use crate::lattice::{FrameSequence, LabelSequence, Segmentation, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub sigma: f64,
    pub labels_min: usize,
    pub labels_max: usize,
    pub num_utterances: usize,
    /// The last `num_valid` utterances form the validation split.
    pub num_valid: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5,
            dim: 8,
            dur_min: 2,
            dur_max: 6,
            sigma: 0.3,
            labels_min: 3,
            labels_max: 10,
            num_utterances: 250,
            num_valid: 50,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.vocab_size == 0 || self.dim == 0 {
            return bad("vocab_size and dim must be positive");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("need 1 <= dur_min <= dur_max");
        }
        if self.labels_min == 0 || self.labels_min > self.labels_max {
            return bad("need 1 <= labels_min <= labels_max");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be finite and non-negative");
        }
        if self.num_valid > self.num_utterances {
            return bad("num_valid exceeds num_utterances");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utterance: Utterance,
    /// Ground truth, for diagnostics only.
    pub segmentation: Segmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub vocab: Vocabulary,
    pub means: Vec<Vec<f64>>,
    pub train: Vec<SynthUtterance>,
    pub valid: Vec<SynthUtterance>,
}

impl SynthCorpus {
    pub fn train_utterances(&self) -> Vec<Utterance> {
        self.train.iter().map(|u| u.utterance.clone()).collect()
    }

    pub fn valid_utterances(&self) -> Vec<Utterance> {
        self.valid.iter().map(|u| u.utterance.clone()).collect()
    }
}

/// Generates the corpus in memory. Frame values are rounded to `f32`, the
/// precision of the on-disk format.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = Vocabulary::new((0..cfg.vocab_size).map(|i| format!("s{i}")))?;
    let means: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let width = cfg.num_utterances.saturating_sub(1).to_string().len().max(4);
    let mut all = Vec::with_capacity(cfg.num_utterances);
    for n in 0..cfg.num_utterances {
        let j = rng.random_range(cfg.labels_min..=cfg.labels_max);
        let labels: Vec<usize> = (0..j).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let durations: Vec<usize> = (0..j).map(|_| rng.random_range(cfg.dur_min..=cfg.dur_max)).collect();
        let mut frames = Vec::new();
        for (&y, &d) in labels.iter().zip(&durations) {
            for _ in 0..d {
                for &m in &means[y] {
                    let v: f64 = m + noise.sample(&mut rng);
                    frames.push(v as f32 as f64);
                }
            }
        }
        let t = durations.iter().sum();
        all.push(SynthUtterance {
            utterance: Utterance {
                id: format!("utt{n:0width$}"),
                frames: FrameSequence::new(frames, t, cfg.dim)?,
                labels: LabelSequence::new(labels, cfg.vocab_size)?,
            },
            segmentation: Segmentation::from_durations(&durations),
        });
    }
    let valid = all.split_off(cfg.num_utterances - cfg.num_valid);
    Ok(SynthCorpus {
        vocab,
        means,
        train: all,
        valid,
    })
}

/// Writes `vocab.txt`, `train.tsv`, `valid.tsv`, `frames/`, `labels/` and
/// `segmentations.tsv` under `dir`.
pub fn gen_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<SynthCorpus> {
    let corpus = synthesize(cfg)?;
    write_vocab(&dir.join("vocab.txt"), &corpus.vocab)?;
    let mut segs = String::new();
    for (split, utts) in [("train", &corpus.train), ("valid", &corpus.valid)] {
        let mut manifest = Manifest::default();
        for u in utts {
            let id = &u.utterance.id;
            let entry = ManifestEntry {
                id: id.clone(),
                frames: dir.join("frames").join(format!("{id}.srnf")),
                labels: dir.join("labels").join(format!("{id}.txt")),
            };
            write_frames(&entry.frames, &u.utterance.frames)?;
            write_labels(&entry.labels, &u.utterance.labels, &corpus.vocab)?;
            let bounds: Vec<String> = u.segmentation.boundaries().iter().map(usize::to_string).collect();
            segs.push_str(&format!("{id}\t{}\n", bounds.join(" ")));
            manifest.entries.push(entry);
        }
        write_manifest(&dir.join(format!("{split}.tsv")), &manifest)?;
    }
    write_file(&dir.join("segmentations.tsv"), segs.as_bytes())?;
    Ok(corpus)
}
