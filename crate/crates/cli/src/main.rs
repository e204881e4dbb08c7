use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use segrnn_core::config::RunConfig;
use segrnn_core::data::{
    check_compatible, gen_synthetic, load_checkpoint, load_dataset, read_collapse_map, read_frames,
    read_manifest, read_vocab, save_checkpoint, CorpusPer, SynthConfig,
};
use segrnn_core::gradcheck::{gradcheck, CheckSize, TOLERANCE};
use segrnn_core::lattice::collapse_labels;
use segrnn_core::selftest::{format_table, run_all};
use segrnn_core::speedup::{format_report, speedup_report};
use segrnn_core::trainer::train_with;
use segrnn_core::{DecodeMode, Error as CoreError, ModelConfig};

#[derive(Parser)]
#[command(name = "segrnn", version, about = "Segmental RNN training, decoding and verification")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a per-epoch report.
    Train(TrainArgs),
    /// Decode every utterance of a manifest.
    Decode(DecodeArgs),
    /// Score a hypothesis file against reference labels.
    Eval(EvalArgs),
    /// Compare gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Check the dynamic programs and decoders against brute-force enumeration.
    Selftest(SelftestArgs),
    /// Time lattice construction and the partition recursion with 0, 1 and 2 subsampling stages.
    SpeedupReport(SpeedupArgs),
    /// Write a synthetic corpus.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset applied before the configuration file: small or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Vocabulary file; defaults to vocab.txt beside the training manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "joint")]
    mode: String,
    /// Map from model tokens to output tokens, one `source target` pair per line.
    #[arg(long)]
    collapse: Option<PathBuf>,
    /// Merge adjacent identical tokens after collapsing.
    #[arg(long, requires = "collapse")]
    merge_adjacent: bool,
    /// Configuration the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accept a checkpoint whose hyperparameters differ from --config.
    #[arg(long)]
    allow_mismatch: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Decoder output: `id<TAB>tokens[<TAB>...]` per line.
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "small")]
    size: String,
    /// Scale the tanh pullback by this factor to confirm the check fails.
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SpeedupArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Utterance length in input frames.
    #[arg(long = "T", default_value_t = 512)]
    t_len: usize,
    #[arg(long, default_value_t = 5)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    utterances: usize,
    #[arg(long, default_value_t = 50)]
    valid: usize,
    #[arg(long, default_value_t = 5)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    dur_min: usize,
    #[arg(long, default_value_t = 6)]
    dur_max: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 3)]
    labels_min: usize,
    #[arg(long, default_value_t = 10)]
    labels_max: usize,
}

/// Errors caused by bad flags, configuration or input files.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_)
                | CoreError::Io { .. }
                | CoreError::Format { .. }
                | CoreError::Mismatch(_)
                | CoreError::UnknownToken(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &args.preset {
        if args.config.is_some() {
            bail!(usage("--preset and --config are mutually exclusive"));
        }
        cfg.model = ModelConfig::preset(name)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let train_path = args
        .train
        .or(cfg.data.train.clone())
        .ok_or_else(|| usage("no training manifest: pass --train or set data.train"))?;
    let valid_path = args
        .valid
        .or(cfg.data.valid.clone())
        .ok_or_else(|| usage("no validation manifest: pass --valid or set data.valid"))?;
    let vocab_path = args
        .vocab
        .or(cfg.data.vocab.clone())
        .unwrap_or_else(|| train_path.parent().unwrap_or(Path::new("")).join("vocab.txt"));
    let vocab = read_vocab(&vocab_path)?;
    let train_set = load_dataset(&train_path, &vocab)?;
    let valid_set = load_dataset(&valid_path, &vocab)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_output(&args.out.join("config.toml"), &cfg.to_toml())?;
    let mut lines = String::new();
    let out = train_with(&cfg.model, &cfg.train, &vocab, &train_set, &valid_set, |record, model, is_best| {
        let line = record.to_line();
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        write_output(&args.out.join("epochs.log"), &lines).map_err(|e| CoreError::Invalid(e.to_string()))?;
        if is_best {
            save_checkpoint(&args.out.join("best.ckpt"), model)?;
        }
        Ok(())
    })?;
    save_checkpoint(&args.out.join("last.ckpt"), &out.last)?;
    write_output(&args.out.join("report.tsv"), &out.report.loss_table())?;
    let best = out.report.best().ok_or_else(|| anyhow!("no epoch completed"))?;
    println!(
        "best_epoch={} valid_per={:.6} skipped_infeasible={} clipped_steps={}",
        best.epoch, best.valid_per, out.report.skipped_infeasible, out.report.clipped_steps
    );
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let mode: DecodeMode = args.mode.parse()?;
    let model = load_checkpoint(&args.model)?;
    if let Some(p) = &args.config {
        check_compatible(&model, &RunConfig::load(p)?.model, None, args.allow_mismatch)?;
    }
    let collapse = args.collapse.as_deref().map(|p| read_collapse_map(p, &model.vocab)).transpose()?;
    let manifest = read_manifest(&args.data)?;
    let lines = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<String> {
            let frames = read_frames(&entry.frames)?;
            let result = model.decode(&frames, mode).with_context(|| format!("decoding {}", entry.id))?;
            let tokens = match &collapse {
                Some(map) => {
                    let out = collapse_labels(&result.labels, &map.mapping, args.merge_adjacent)?;
                    out.as_slice()
                        .iter()
                        .map(|&i| map.target.tokens()[i].clone())
                        .collect::<Vec<_>>()
                }
                None => model.vocab.decode(&result.labels).into_iter().map(str::to_string).collect(),
            };
            let boundaries = result
                .segmentation
                .map(|seg| {
                    model
                        .to_input_frames(&seg, frames.len())
                        .boundaries()
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default();
            Ok(format!("{}\t{}\t{:.6}\t{}\n", entry.id, tokens.join(" "), result.score, boundaries))
        })
        .collect::<Result<Vec<_>>>()?;
    write_output(&args.out, &lines.concat())
}

fn read_token_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::Io { path: path.into(), source: e })?;
    Ok(text.split_whitespace().map(str::to_string).collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.hyp).map_err(|e| CoreError::Io { path: args.hyp.clone(), source: e })?;
    let mut hyps: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let tokens = fields
            .next()
            .ok_or_else(|| usage(format!("{}:{}: expected id<TAB>tokens", args.hyp.display(), n + 1)))?;
        if hyps.insert(id.clone(), tokens.split_whitespace().map(str::to_string).collect()).is_some() {
            bail!(usage(format!("duplicate hypothesis id {id:?}")));
        }
    }
    let manifest = read_manifest(&args.reference)?;
    let mut corpus = CorpusPer::default();
    for entry in &manifest.entries {
        let hyp = hyps
            .remove(&entry.id)
            .ok_or_else(|| usage(format!("no hypothesis for reference utterance {:?}", entry.id)))?;
        let reference = read_token_file(&entry.labels)?;
        corpus
            .add(&hyp, &reference)
            .map_err(|_| usage(format!("reference for {:?} is empty", entry.id)))?;
    }
    if let Some(extra) = hyps.keys().next() {
        bail!(usage(format!("hypothesis {extra:?} has no reference")));
    }
    println!(
        "PER {:.3}% ({} edits / {} reference tokens, {} utterances)",
        100.0 * corpus.rate(),
        corpus.edits,
        corpus.reference_len,
        manifest.entries.len()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let size: CheckSize = args.size.parse()?;
    let report = gradcheck(size, args.seed, args.inject_fault)?;
    let mut out = format!(
        "gradcheck size={} seed={} T'={} |Y|={} loss={:.6}\n",
        report.size, report.seed, report.t_out, report.vocab, report.loss
    );
    for t in &report.tensors {
        let _ = writeln!(out, "  {:<20} {:>5} values  max rel err {:.3e}", t.name, t.values, t.max_rel_err);
    }
    let passed = report.passed();
    let _ = writeln!(
        out,
        "max relative error {:.3e} (tolerance {TOLERANCE:.0e}): {}",
        report.max_rel_err(),
        if passed { "pass" } else { "FAIL" }
    );
    print!("{out}");
    Ok(passed)
}

fn cmd_selftest(args: SelftestArgs) -> Result<bool> {
    let results = run_all(args.seed)?;
    print!("{}", format_table(&results));
    Ok(results.iter().all(|r| r.passed()))
}

fn cmd_speedup(args: SpeedupArgs) -> Result<()> {
    let model = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::small(),
    };
    let rows = speedup_report(&model, args.t_len, args.vocab, args.reps, args.seed)?;
    println!("T={} clamp={} original frames", args.t_len, model.clamp.original_frames());
    print!("{}", format_report(&rows));
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        vocab_size: args.vocab_size,
        dim: args.dim,
        dur_min: args.dur_min,
        dur_max: args.dur_max,
        sigma: args.sigma,
        labels_min: args.labels_min,
        labels_max: args.labels_max,
        num_utterances: args.utterances,
        num_valid: args.valid,
        seed: args.seed,
    };
    let corpus = gen_synthetic(&cfg, &args.out)?;
    println!(
        "wrote {} training and {} validation utterances to {}",
        corpus.train.len(),
        corpus.valid.len(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Decode(a) => cmd_decode(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::SpeedupReport(a) => cmd_speedup(a).map(|_| true),
        Command::GenSynth(a) => cmd_gen_synth(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
