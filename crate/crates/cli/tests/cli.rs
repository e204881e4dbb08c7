use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segrnn_core::lattice::{validate_segmentation, Segmentation};

fn segrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segrnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"
[model.encoder]
num_layers = 2
hidden = 8
subsample_after = [1]
dropout_rate = 0.1

[model.features]
embed_dim = 4
d_w = 8
d_h = 8
d_dur = 2

[train]
max_epochs = 2
lr_init = 0.1
init_scale = 0.3
"#;

fn corpus(dir: &Path) {
    let o = segrnn(&["gen-synth", "--out", p(dir), "--utterances", "8", "--valid", "3", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();

    let train = |out: &Path| {
        segrnn(&[
            "--threads", "1", "train", "--config", p(&cfg), "--train", p(&data.join("train.tsv")),
            "--valid", p(&data.join("valid.tsv")), "--out", p(out), "--seed", "3",
        ])
    };
    let run_a = dir.path().join("a");
    let o = train(&run_a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    assert!(text.contains("best_epoch="));
    for f in ["best.ckpt", "last.ckpt", "report.tsv", "epochs.log", "config.toml"] {
        assert!(run_a.join(f).is_file(), "{f}");
    }
    let run_b = dir.path().join("b");
    assert!(train(&run_b).status.success());
    assert_eq!(
        fs::read_to_string(run_a.join("report.tsv")).unwrap(),
        fs::read_to_string(run_b.join("report.tsv")).unwrap()
    );

    let model = run_a.join("best.ckpt");
    let decode = |mode: &str, out: &Path| {
        segrnn(&["decode", "--model", p(&model), "--data", p(&data.join("valid.tsv")), "--mode", mode, "--out", p(out)])
    };
    let (h1, h2) = (dir.path().join("h1.txt"), dir.path().join("h2.txt"));
    assert!(decode("joint", &h1).status.success());
    assert!(decode("joint", &h2).status.success());
    let hyp = fs::read_to_string(&h1).unwrap();
    assert_eq!(hyp, fs::read_to_string(&h2).unwrap());
    assert!(hyp.ends_with('\n'));
    assert_eq!(hyp.lines().count(), 3);
    let manifest = fs::read_to_string(data.join("valid.tsv")).unwrap();
    for (line, entry) in hyp.lines().zip(manifest.lines()) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], entry.split('\t').next().unwrap());
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
        let bounds: Vec<usize> = fields[3].split(' ').map(|b| b.parse().unwrap()).collect();
        let frames = segrnn_core::data::read_frames(&data.join(entry.split('\t').nth(1).unwrap())).unwrap();
        assert!(validate_segmentation(&Segmentation::from_boundaries(bounds), frames.len(), None).is_ok());
        assert_eq!(fields[1].split(' ').count(), fields[3].split(' ').count() - 1);
    }

    let hybrid = dir.path().join("h3.txt");
    assert!(decode("marginal-hybrid", &hybrid).status.success());
    assert!(!decode("beam", &hybrid).status.success());

    let map = dir.path().join("map.txt");
    fs::write(&map, "s0 v\ns1 v\ns2 c\ns3 c\ns4 c\n").unwrap();
    let collapsed = dir.path().join("h4.txt");
    let o = segrnn(&[
        "decode", "--model", p(&model), "--data", p(&data.join("valid.tsv")), "--collapse", p(&map),
        "--out", p(&collapsed),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for line in fs::read_to_string(&collapsed).unwrap().lines() {
        assert!(line.split('\t').nth(1).unwrap().split(' ').all(|t| t == "v" || t == "c"));
    }

    let o = segrnn(&["eval", "--hyp", p(&h1), "--ref", p(&data.join("valid.tsv"))]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PER "));

    let other = dir.path().join("other.toml");
    fs::write(&other, TINY_CONFIG.replace("d_w = 8", "d_w = 6")).unwrap();
    let o = segrnn(&[
        "decode", "--model", p(&model), "--data", p(&data.join("valid.tsv")), "--config", p(&other),
        "--out", p(&hybrid),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_scores_hand_built_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("f"), b"").unwrap();
    fs::write(d.join("u1.txt"), "a b c d\n").unwrap();
    fs::write(d.join("u2.txt"), "a a\n").unwrap();
    fs::write(d.join("ref.tsv"), "u1\tf\tu1.txt\nu2\tf\tu2.txt\n").unwrap();

    fs::write(d.join("same.txt"), "u1\ta b c d\t0\t0 4\nu2\ta a\t0\t0 2\n").unwrap();
    let o = segrnn(&["eval", "--hyp", p(&d.join("same.txt")), "--ref", p(&d.join("ref.tsv"))]);
    assert!(stdout(&o).starts_with("PER 0.000%"), "{}", stdout(&o));

    // u1: one substitution and one deletion; u2: one insertion. 3 edits / 6 tokens.
    fs::write(d.join("hyp.txt"), "u2\ta a b\nu1\ta x c\n").unwrap();
    let o = segrnn(&["eval", "--hyp", p(&d.join("hyp.txt")), "--ref", p(&d.join("ref.tsv"))]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PER 50.000% (3 edits / 6 reference tokens"), "{}", stdout(&o));

    fs::write(d.join("bad.txt"), "u1\ta b c d\nu3\ta\n").unwrap();
    let o = segrnn(&["eval", "--hyp", p(&d.join("bad.txt")), "--ref", p(&d.join("ref.tsv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_and_data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let o = segrnn(&["train", "--train", p(&missing), "--valid", p(&missing), "--vocab", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(segrnn(&["train"]).status.code(), Some(2));
    assert_eq!(segrnn(&["frobnicate"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlr_intt = 0.1\n").unwrap();
    let o = segrnn(&["speedup-report", "--config", p(&cfg), "--T", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr_intt"));
}

#[test]
fn verification_commands() {
    let o = segrnn(&["gradcheck", "--size", "small", "--seed", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));
    let o = segrnn(&["gradcheck", "--size", "small", "--seed", "2", "--inject-fault", "1.05"]);
    assert_eq!(o.status.code(), Some(1));

    let o = segrnn(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = segrnn(&["speedup-report", "--T", "64", "--reps", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    assert!(text.ends_with('\n'));
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    corpus(&a);
    corpus(&b);
    for f in ["train.tsv", "valid.tsv", "vocab.txt", "segmentations.tsv", "frames/utt0002.srnf"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
