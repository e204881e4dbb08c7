//! Dynamic programs and decoders checked against brute-force enumeration
//! on a grid of small random lattices.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::decoder::{decode_joint, decode_marginal_hybrid};
use crate::error::Result;
use crate::lattice::{LabelSequence, ScoreLattice};
use crate::oracle::{brute_argmax, brute_log_clamped, brute_log_partition, brute_segment_posteriors, EnumerationBudget};
use crate::segcrf::{feasible, log_clamped, log_partition, nll_on_tape, TapeLattice};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest discrepancy observed, in the suite's own measure.
    pub max_err: f64,
    pub tolerance: f64,
    pub failures: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_lattice(rng: &mut impl Rng, t_len: usize, clamp: usize, vocab: usize) -> ScoreLattice {
    ScoreLattice::from_fn(t_len, clamp, vocab, |_, _, _| rng.random_range(-2.0..2.0)).expect("valid lattice shape")
}

/// A random label sequence that fits `t_len` frames with clamp `clamp`.
pub fn random_feasible_labels(rng: &mut impl Rng, t_len: usize, clamp: usize, vocab: usize) -> LabelSequence {
    let j = loop {
        let j = rng.random_range(1..=t_len);
        if feasible(t_len, j, clamp) {
            break j;
        }
    };
    LabelSequence::new((0..j).map(|_| rng.random_range(0..vocab)).collect(), vocab).expect("labels in range")
}

/// Every `(T', |Y|, L)` with `T' <= max_t`, `|Y| <= max_v`, `L <= T'`,
/// repeated `reps` times.
pub fn grid(max_t: usize, max_v: usize, reps: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for _ in 0..reps {
        for t in 1..=max_t {
            for v in 1..=max_v {
                for l in 1..=t {
                    out.push((t, v, l));
                }
            }
        }
    }
    out
}

struct Acc {
    result: SuiteResult,
}

impl Acc {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            result: SuiteResult {
                name,
                cases: 0,
                max_err: 0.0,
                tolerance,
                failures: 0,
            },
        }
    }

    fn record(&mut self, err: f64, ok: bool) {
        self.result.cases += 1;
        self.result.max_err = self.result.max_err.max(err);
        if !ok {
            self.result.failures += 1;
        }
    }

    fn within(&mut self, err: f64) {
        let tol = self.result.tolerance;
        self.record(err, err < tol);
    }
}

pub fn partition_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = EnumerationBudget::default();
    let mut acc = Acc::new("log_partition vs enumeration", 1e-9);
    for (t, v, l) in grid(6, 3, 2) {
        let lat = random_lattice(&mut rng, t, l, v);
        acc.within(rel_diff(log_partition(&lat), brute_log_partition(&lat, &budget)?));
    }
    Ok(acc.result)
}

pub fn clamped_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = EnumerationBudget::default();
    let mut acc = Acc::new("log_clamped vs enumeration", 1e-9);
    for (t, v, l) in grid(6, 3, 2) {
        let lat = random_lattice(&mut rng, t, l, v);
        let y = random_feasible_labels(&mut rng, t, l, v);
        acc.within(rel_diff(log_clamped(&lat, &y)?, brute_log_clamped(&lat, &y, &budget)?));
    }
    Ok(acc.result)
}

/// Scores must agree exactly and the `(y, E)` pairs must be identical.
pub fn joint_decode_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = EnumerationBudget::default();
    let mut acc = Acc::new("decode_joint vs exhaustive argmax", 0.0);
    for (t, v, l) in grid(6, 3, 2) {
        // Coarse scores make exact ties common, exercising the tie-break.
        let coarse = rng.random_bool(0.5);
        let lat = ScoreLattice::from_fn(t, l, v, |_, _, _| {
            if coarse {
                rng.random_range(0..3) as f64
            } else {
                rng.random_range(-2.0..2.0)
            }
        })?;
        let got = decode_joint(&lat);
        let (y, e, score) = brute_argmax(&lat, &budget)?;
        let same = got.score == score && got.labels == y && got.segmentation.as_ref() == Some(&e);
        acc.record((got.score - score).abs(), same);
    }
    Ok(acc.result)
}

/// `∂ℒ/∂f(y, ⟨k,t⟩) = P(k,t,y | X) − P(k,t,y | X, y)`.
pub fn posterior_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = EnumerationBudget::default();
    let mut acc = Acc::new("loss gradient vs enumerated posteriors", 1e-9);
    for (t, v, l) in grid(5, 3, 2) {
        let lat = random_lattice(&mut rng, t, l, v);
        let y = random_feasible_labels(&mut rng, t, l, v);
        let mut tape = Tape::new();
        let tl = TapeLattice::from_scores(&mut tape, &lat)?;
        let loss = nll_on_tape(&mut tape, &tl, &y)?;
        let grads = tape.backward(loss)?;
        let free = brute_segment_posteriors(&lat, None, &budget)?;
        let clamped = brute_segment_posteriors(&lat, Some(&y), &budget)?;
        let mut worst: f64 = 0.0;
        let mut in_range = true;
        for tt in 1..=t {
            for k in lat.starts(tt) {
                let g = grads.wrt(tl.segment(k, tt));
                for yy in 0..v {
                    let p = free.get(&(k, tt, yy)).copied().unwrap_or(0.0);
                    let q = clamped.get(&(k, tt, yy)).copied().unwrap_or(0.0);
                    in_range &= (0.0..=1.0 + 1e-12).contains(&p) && (0.0..=1.0 + 1e-12).contains(&q);
                    let d = g.map_or(0.0, |g| g.data()[yy]);
                    worst = worst.max((d - (p - q)).abs());
                }
            }
        }
        acc.record(worst, worst < acc.result.tolerance && in_range);
    }
    Ok(acc.result)
}

/// `L >= T'` must reproduce the unclamped partition bit for bit.
pub fn clamp_noop_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("clamp no-op (bitwise)", 0.0);
    for i in 0..100 {
        let t = 1 + i % 12;
        let v = 1 + i % 3;
        let extra = rng.random_range(0..4);
        let full = random_lattice(&mut rng, t, t, v);
        let wide = ScoreLattice::from_fn(t, t + extra, v, |k, tt, y| full.score(k, tt, y))?;
        let (a, b) = (log_partition(&full), log_partition(&wide));
        acc.record((a - b).abs(), a.to_bits() == b.to_bits());
    }
    Ok(acc.result)
}

/// Adding `c·(t−k)` shifts `log Z` by `c·T'` and leaves decodes unchanged.
pub fn duration_shift_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("duration-shift invariance", 1e-9);
    for c in [-1.0, 0.5, 3.0] {
        for (t, v, l) in grid(6, 3, 1) {
            let lat = random_lattice(&mut rng, t, l, v);
            let shifted = lat.map(|k, tt, _, s| s + c * (tt - k) as f64)?;
            let expected = log_partition(&lat) + c * t as f64;
            let err = rel_diff(log_partition(&shifted), expected);
            let y = random_feasible_labels(&mut rng, t, l, v);
            let err = err.max(rel_diff(log_clamped(&shifted, &y)?, log_clamped(&lat, &y)? + c * t as f64));
            let (j0, j1) = (decode_joint(&lat), decode_joint(&shifted));
            let (h0, h1) = (decode_marginal_hybrid(&lat), decode_marginal_hybrid(&shifted));
            let same = j0.labels == j1.labels
                && j0.segmentation == j1.segmentation
                && h0.labels == h1.labels
                && h0.segmentation == h1.segmentation;
            acc.record(err, err < acc.result.tolerance && same);
        }
    }
    Ok(acc.result)
}

/// `ℒ > 0` for random continuous scores.
pub fn loss_positive_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("loss strictly positive", 0.0);
    for _ in 0..1000 {
        let t = rng.random_range(1..=8);
        let l = rng.random_range(1..=t);
        let v = rng.random_range(1..=4);
        let lat = random_lattice(&mut rng, t, l, v);
        let y = random_feasible_labels(&mut rng, t, l, v);
        let loss = log_partition(&lat) - log_clamped(&lat, &y)?;
        // Only |Y| = 1 with a single admissible segmentation can reach zero.
        let forced = v == 1 && crate::oracle::count_segmentations(t, l) == 1.0;
        let ok = if forced { loss.abs() < 1e-12 } else { loss > 0.0 };
        acc.record(if loss < 0.0 { -loss } else { 0.0 }, ok);
    }
    Ok(acc.result)
}

pub fn hybrid_bound_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Acc::new("hybrid >= joint, joint <= log Z", 0.0);
    for (t, v, l) in grid(6, 3, 2) {
        let lat = random_lattice(&mut rng, t, l, v);
        let j = decode_joint(&lat).score;
        let h = decode_marginal_hybrid(&lat).score;
        let z = log_partition(&lat);
        acc.record((j - h).max(j - z).max(0.0), h >= j && j <= z);
    }
    Ok(acc.result)
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        partition_suite(seed)?,
        clamped_suite(seed.wrapping_add(1))?,
        joint_decode_suite(seed.wrapping_add(2))?,
        posterior_suite(seed.wrapping_add(3))?,
        clamp_noop_suite(seed.wrapping_add(4))?,
        duration_shift_suite(seed.wrapping_add(5))?,
        loss_positive_suite(seed.wrapping_add(6))?,
        hybrid_bound_suite(seed.wrapping_add(7))?,
    ])
}

pub fn format_table(results: &[SuiteResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>6}  {:>10}  {:>9}  result\n", "suite", "cases", "max err", "tolerance");
    for r in results {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>10.3e}  {:>9.0e}  {}",
            r.name,
            r.cases,
            r.max_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}
