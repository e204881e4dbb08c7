//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 12`.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segrnn_core::config::{ModelConfig, SubsampleMode, TrainConfig};
use segrnn_core::data::{edit_distance, per, synthesize, SynthConfig, SynthCorpus};
use segrnn_core::gradcheck::{gradcheck, CheckSize};
use segrnn_core::lattice::{lattice_entry_count, ScoreLattice};
use segrnn_core::oracle::{
    brute_argmax, brute_log_clamped, brute_log_partition, count_labeled_segmentations,
    count_segmentations_with_segments, EnumerationBudget,
};
use segrnn_core::selftest::{grid, random_feasible_labels, random_lattice, rel_diff};
use segrnn_core::speedup::speedup_report;
use segrnn_core::trainer::{train, TrainOutcome};
use segrnn_core::{decode_joint, decode_marginal_hybrid, log_clamped, log_partition, Model};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn oracle_grid() -> Vec<(usize, usize, usize)> {
    grid(6, 3, 2)
}

fn partition_matches_enumeration() -> Verdict {
    let start = Instant::now();
    let mut r = rng(101);
    let budget = EnumerationBudget::default();
    let mut worst: f64 = 0.0;
    let cases = oracle_grid();
    for &(t, v, l) in &cases {
        let lat = random_lattice(&mut r, t, l, v);
        worst = worst.max(rel_diff(log_partition(&lat), brute_log_partition(&lat, &budget).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        cases.len() >= 100 && worst < 1e-9 && secs < 10.0,
        format!("{} instances, max rel err {worst:.2e} (< 1e-9), {secs:.2}s (< 10s)", cases.len()),
    )
}

fn clamped_matches_enumeration() -> Verdict {
    let mut r = rng(202);
    let budget = EnumerationBudget::default();
    let mut worst: f64 = 0.0;
    let cases = oracle_grid();
    for &(t, v, l) in &cases {
        let lat = random_lattice(&mut r, t, l, v);
        let y = random_feasible_labels(&mut r, t, l, v);
        let got = log_clamped(&lat, &y).unwrap();
        worst = worst.max(rel_diff(got, brute_log_clamped(&lat, &y, &budget).unwrap()));
    }
    check(
        cases.len() >= 100 && worst < 1e-9,
        format!("{} instances, max rel err {worst:.2e} (< 1e-9)", cases.len()),
    )
}

fn joint_decode_matches_enumeration() -> Verdict {
    let mut r = rng(303);
    let budget = EnumerationBudget::default();
    let mut score_mismatch = 0;
    let mut pair_mismatch = 0;
    let mut ties = 0;
    let cases = oracle_grid();
    for (i, &(t, v, l)) in cases.iter().enumerate() {
        // Every third lattice uses integer scores so exact ties occur.
        let coarse = i % 3 == 0;
        let lat = ScoreLattice::from_fn(t, l, v, |_, _, _| {
            if coarse {
                r.random_range(0..3) as f64
            } else {
                r.random_range(-2.0..2.0)
            }
        })
        .unwrap();
        ties += usize::from(coarse);
        let got = decode_joint(&lat);
        let (y, e, score) = brute_argmax(&lat, &budget).unwrap();
        if got.score != score {
            score_mismatch += 1;
        }
        if got.labels != y || got.segmentation.as_ref() != Some(&e) {
            pair_mismatch += 1;
        }
    }
    check(
        score_mismatch == 0 && pair_mismatch == 0,
        format!(
            "{} instances ({ties} with tied integer scores): {score_mismatch} score mismatches, {pair_mismatch} (y, E) mismatches",
            cases.len()
        ),
    )
}

fn gradients_match_finite_differences() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for size in [CheckSize::Small, CheckSize::Medium] {
        for seed in 1..=5 {
            let report = gradcheck(size, seed, None).unwrap();
            worst = worst.max(report.max_rel_err());
            runs += 1;
        }
    }
    let caught = !gradcheck(CheckSize::Small, 1, Some(1.05)).unwrap().passed();
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 120.0 && caught,
        format!(
            "{runs} runs (small+medium x 5 seeds), max rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 120s), injected fault detected: {caught}"
        ),
    )
}

fn loss_is_positive() -> Verdict {
    let mut r = rng(505);
    let mut min_loss = f64::INFINITY;
    for _ in 0..1000 {
        let t = r.random_range(1..=8);
        let l = r.random_range(1..=t);
        let v = r.random_range(2..=4);
        let lat = random_lattice(&mut r, t, l, v);
        let y = random_feasible_labels(&mut r, t, l, v);
        let loss = log_partition(&lat) - log_clamped(&lat, &y).unwrap();
        min_loss = min_loss.min(loss);
    }
    check(min_loss > 0.0, format!("1000 instances, min loss {min_loss:.3e} (> 0)"))
}

fn clamp_noop_is_bitwise() -> Verdict {
    let mut r = rng(606);
    let mut differ = 0;
    for i in 0..100 {
        let t = 1 + i % 16;
        let v = 1 + i % 4;
        let full = random_lattice(&mut r, t, t, v);
        let wider = ScoreLattice::from_fn(t, t + r.random_range(0..5), v, |k, tt, y| full.score(k, tt, y)).unwrap();
        if log_partition(&full).to_bits() != log_partition(&wider).to_bits() {
            differ += 1;
        }
    }
    check(differ == 0, format!("100 instances, {differ} not bit-identical"))
}

fn duration_shift_invariance() -> Verdict {
    let mut r = rng(707);
    let mut worst: f64 = 0.0;
    let mut changed = 0;
    let mut cases = 0;
    for c in [-1.0, 0.5, 3.0] {
        for &(t, v, l) in &oracle_grid() {
            let lat = random_lattice(&mut r, t, l, v);
            let shifted = lat.map(|k, tt, _, s| s + c * (tt - k) as f64).unwrap();
            let dz = log_partition(&shifted) - log_partition(&lat);
            worst = worst.max((dz - c * t as f64).abs());
            let outputs = |x: &ScoreLattice| {
                let (j, h) = (decode_joint(x), decode_marginal_hybrid(x));
                (j.labels, j.segmentation, h.labels, h.segmentation)
            };
            if outputs(&lat) != outputs(&shifted) {
                changed += 1;
            }
            cases += 1;
        }
    }
    check(
        worst < 1e-9 && changed == 0,
        format!("{cases} instances over c in {{-1, 0.5, 3}}: max |Δlog Z − c·T'| {worst:.2e} (< 1e-9), {changed} decodes changed"),
    )
}

fn cold_start_loss_is_analytic() -> Verdict {
    let corpus = synthesize(&SynthConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut configs = vec![ModelConfig::small()];
    let mut no_dur = ModelConfig::small();
    no_dur.features.use_duration = false;
    no_dur.encoder.subsample_mode = SubsampleMode::Concat;
    configs.push(no_dur);
    let mut unsubsampled = ModelConfig::small();
    unsubsampled.encoder.subsample_after.clear();
    unsubsampled.clamp.frames = 4;
    configs.push(unsubsampled);
    for cfg in configs {
        let model = Model::zeros(cfg, 8, corpus.vocab.clone()).unwrap();
        for u in corpus.train.iter().take(20).map(|s| &s.utterance) {
            if !model.is_feasible(u.frames.len(), &u.labels) {
                continue;
            }
            let t_out = model.output_len(u.frames.len());
            let l = model.clamp_len();
            let expected = count_labeled_segmentations(t_out, model.vocab.len(), l).ln()
                - count_segmentations_with_segments(t_out, u.labels.len(), l).ln();
            let got = model.loss(&u.frames, &u.labels, None).unwrap();
            worst = worst.max((got - expected).abs());
            cases += 1;
        }
    }
    check(
        cases >= 50 && worst < 1e-6,
        format!("{cases} utterances over 3 configurations, max |ℒ − (log N_full − log N_clamped)| {worst:.2e} (< 1e-6)"),
    )
}

fn train_variant(corpus: &SynthCorpus, mode: SubsampleMode) -> (TrainOutcome, Duration) {
    let mut cfg = ModelConfig::small();
    cfg.encoder.subsample_mode = mode;
    let start = Instant::now();
    let out = train(
        &cfg,
        &TrainConfig::default(),
        &corpus.vocab,
        &corpus.train_utterances(),
        &corpus.valid_utterances(),
    )
    .unwrap();
    (out, start.elapsed())
}

fn best_per(out: &TrainOutcome) -> f64 {
    out.report.best().map_or(f64::INFINITY, |e| e.valid_per)
}

struct TrainingRuns {
    corpus: SynthCorpus,
    skip: Option<(TrainOutcome, Duration)>,
}

impl TrainingRuns {
    fn skip(&mut self) -> &(TrainOutcome, Duration) {
        if self.skip.is_none() {
            self.skip = Some(train_variant(&self.corpus, SubsampleMode::Skip));
        }
        self.skip.as_ref().expect("just trained")
    }
}

fn end_to_end_learning(runs: &mut TrainingRuns) -> Verdict {
    let (first, elapsed) = runs.skip().clone();
    println!("{}", indent(&first.report.loss_table()));
    let (second, _) = train_variant(&runs.corpus, SubsampleMode::Skip);
    let reproducible = first.report.loss_table() == second.report.loss_table();
    let best = first.report.best().expect("at least one epoch").clone();
    let epochs = first.report.epochs.len();
    check(
        best.valid_per < 0.05 && epochs <= 30 && elapsed.as_secs_f64() < 1800.0 && reproducible,
        format!(
            "best validation PER {:.2}% at epoch {} of {epochs} (< 5% within 30), {:.0}s (< 1800s), rerun loss table identical: {reproducible}",
            100.0 * best.valid_per,
            best.epoch,
            elapsed.as_secs_f64()
        ),
    )
}

fn subsampling_speedup() -> Verdict {
    let rows = speedup_report(&ModelConfig::small(), 512, 5, 3, 10).unwrap();
    println!("{}", indent(&segrnn_core::speedup::format_report(&rows)));
    let exact = rows
        .iter()
        .all(|r| r.cell_ratio == lattice_entry_count(512, 30, 5) as f64 / lattice_entry_count(r.t_out, r.clamp, 5) as f64);
    let shape: Vec<(usize, usize)> = rows.iter().map(|r| (r.t_out, r.clamp)).collect();
    check(
        shape == [(512, 30), (256, 15), (128, 8)] && rows[1].speedup >= 2.0 && rows[2].speedup >= 6.0 && exact,
        format!(
            "1 stage {:.2}x (>= 2x, reference ~3x), 2 stages {:.2}x (>= 6x, reference ~10x); cell ratios {:.3} / {:.3} exact: {exact}",
            rows[1].speedup, rows[2].speedup, rows[1].cell_ratio, rows[2].cell_ratio
        ),
    )
}

fn subsampling_variants(runs: &mut TrainingRuns) -> Verdict {
    let skip = best_per(&runs.skip().0);
    let concat = best_per(&train_variant(&runs.corpus, SubsampleMode::Concat).0);
    let add = best_per(&train_variant(&runs.corpus, SubsampleMode::Add).0);
    let mut order = [("skip", skip), ("concat", concat), ("add", add)];
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let ordering: Vec<String> = order.iter().map(|(n, p)| format!("{n} {:.2}%", 100.0 * p)).collect();
    check(
        skip < 0.10 && concat < 0.10 && add < 0.10,
        format!("best validation PER, best first: {} (each < 10%)", ordering.join(" <= ")),
    )
}

/// Breadth-first search over single-token edits among all strings of
/// length <= `max_len`; returns the distance from `source` to every string.
fn edit_graph_distances(source: &[u8], alphabet: u8, max_len: usize) -> HashMap<Vec<u8>, usize> {
    let mut dist = HashMap::from([(source.to_vec(), 0)]);
    let mut queue = VecDeque::from([source.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut del = s.clone();
            del.remove(i);
            next.push(del);
            for a in 0..alphabet {
                if a != s[i] {
                    let mut sub = s.clone();
                    sub[i] = a;
                    next.push(sub);
                }
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for a in 0..alphabet {
                    let mut ins = s.clone();
                    ins.insert(i, a);
                    next.push(ins);
                }
            }
        }
        for n in next {
            dist.entry(n.clone()).or_insert_with(|| {
                queue.push_back(n);
                d + 1
            });
        }
    }
    dist
}

fn all_strings(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut grown = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(a);
                grown.push(t);
            }
        }
        out.extend(grown.iter().cloned());
        frontier = grown;
    }
    out
}

fn per_matches_edit_search() -> Verdict {
    let strings = all_strings(3, 6);
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    for h in &strings {
        let dist = edit_graph_distances(h, 3, 6);
        for r in strings.iter().filter(|r| !r.is_empty()) {
            pairs += 1;
            let d = dist[r];
            if edit_distance(h, r) != d || per(h, r).unwrap() != d as f64 / r.len() as f64 {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0 && pairs == 1093 * 1092,
        format!("{pairs} pairs over 3 tokens, lengths <= 6: {mismatches} mismatches"),
    )
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut runs = TrainingRuns {
        corpus: synthesize(&SynthConfig::default()).expect("default corpus"),
        skip: None,
    };

    type Criterion<'a> = (u32, &'static str, Box<dyn FnMut() -> Verdict + 'a>);
    let runs = std::cell::RefCell::new(&mut runs);
    let criteria: Vec<Criterion> = vec![
        (1, "oracle equivalence: partition", Box::new(partition_matches_enumeration)),
        (2, "oracle equivalence: clamped sum", Box::new(clamped_matches_enumeration)),
        (3, "oracle equivalence: joint decoding", Box::new(joint_decode_matches_enumeration)),
        (4, "gradient check", Box::new(gradients_match_finite_differences)),
        (5, "loss law", Box::new(loss_is_positive)),
        (6, "clamp no-op", Box::new(clamp_noop_is_bitwise)),
        (7, "duration-shift invariance", Box::new(duration_shift_invariance)),
        (8, "analytic cold-start loss", Box::new(cold_start_loss_is_analytic)),
        (9, "end-to-end learning", Box::new(|| end_to_end_learning(&mut runs.borrow_mut()))),
        (10, "subsampling speedup", Box::new(subsampling_speedup)),
        (11, "subsampling-variant parity", Box::new(|| subsampling_variants(&mut runs.borrow_mut()))),
        (12, "error-rate scorer", Box::new(per_matches_edit_search)),
    ];

    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, mut run) in criteria {
        if !wanted(n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(&mut run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    println!(
        "acceptance: {} of {ran} criteria passed{}",
        ran - failed.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
