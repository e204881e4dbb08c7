//! Cost of lattice construction plus the partition recursion with 0, 1 and
//! 2 subsampling stages at a fixed clamp in original frames.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lattice::lattice_entry_count;
use crate::params::ModelParams;
use crate::segcrf::{build_score_lattice, log_partition};

/// Speedups observed for the same comparison in the original setting.
pub const REFERENCE: [&str; 3] = ["1x", "~3x", "~10x"];

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub stages: usize,
    pub t_out: usize,
    pub clamp: usize,
    pub cells: usize,
    /// Cells of the unsubsampled lattice over cells of this one.
    pub cell_ratio: f64,
    pub secs: f64,
    pub speedup: f64,
    pub reference: &'static str,
}

/// `base` with its subsampling stages replaced by the first `stages`
/// layer boundaries.
pub fn with_stages(base: &ModelConfig, stages: usize) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    if stages >= cfg.encoder.num_layers {
        cfg.encoder.num_layers = stages + 1;
    }
    cfg.encoder.subsample_after = (1..=stages).collect();
    cfg.validate()?;
    Ok(cfg)
}

/// Best-of-`reps` wall time of building the lattice and running the
/// partition recursion on random encoder outputs for `t_len` input frames.
pub fn speedup_report(base: &ModelConfig, t_len: usize, vocab: usize, reps: usize, seed: u64) -> Result<Vec<SpeedupRow>> {
    if t_len == 0 || reps == 0 || vocab == 0 {
        return Err(Error::Invalid("speedup report needs T, reps and vocab >= 1".into()));
    }
    let mut rows: Vec<SpeedupRow> = Vec::new();
    for (stages, reference) in REFERENCE.iter().enumerate() {
        let cfg = with_stages(base, stages)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&cfg, 1, vocab, 0.1, rng.random());
        let t_out = cfg.encoder.output_len(t_len);
        let clamp = cfg.clamp_len();
        let hprime: Vec<Vec<f64>> = (0..t_out)
            .map(|_| (0..cfg.features.d_h).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let start = Instant::now();
            let lattice = build_score_lattice(&hprime, &params, clamp)?;
            let z = log_partition(&lattice);
            best = best.min(start.elapsed().as_secs_f64());
            if !z.is_finite() {
                return Err(Error::NonFinite { op: "log_partition" });
            }
        }
        let cells = lattice_entry_count(t_out, clamp, vocab);
        let (base_cells, base_secs) = rows.first().map_or((cells, best), |r| (r.cells, r.secs));
        rows.push(SpeedupRow {
            stages,
            t_out,
            clamp,
            cells,
            cell_ratio: base_cells as f64 / cells as f64,
            secs: best,
            speedup: base_secs / best,
            reference,
        });
    }
    Ok(rows)
}

pub fn format_report(rows: &[SpeedupRow]) -> String {
    let mut out = String::from("stages\tT'\tL\tcells\tcell_ratio\tsecs\tspeedup\treference\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.3}\t{:.4}\t{:.2}x\t{}",
            r.stages, r.t_out, r.clamp, r.cells, r.cell_ratio, r.secs, r.speedup, r.reference
        );
    }
    out
}
