use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
task = copy
content_vocab = 6
min_len = 2
max_len = 4
train_size = 40
valid_size = 8
test_size = 8
d_model = 8
d_ff = 16
heads = 2
layers = 1
bert_layers = 1
bert_width = 8
bert_heads = 2
bert_ff = 16
mlm_steps = 10
phase_epochs = 2,1,2
average_window = 2
warmup = 10
peak_lr = 3e-3
batch_tokens = 40
beam = 2
";

fn bertjam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bertjam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn bertjam")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(&bertjam(&["gen", "--config", "tiny.cfg", "--out", "data"], dir.path()));
    dir
}

#[test]
fn gen_is_deterministic() {
    let dir = setup();
    ok(&bertjam(&["gen", "--config", "tiny.cfg", "--out", "again"], dir.path()));
    for f in ["train.src", "train.tgt", "valid.src", "test.tgt", "src.vocab"] {
        let a = fs::read(dir.path().join("data").join(f)).unwrap();
        let b = fs::read(dir.path().join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    ok(&bertjam(&["gen", "--config", "tiny.cfg", "--seed", "9", "--out", "other"], dir.path()));
    assert_ne!(
        fs::read(dir.path().join("data/train.src")).unwrap(),
        fs::read(dir.path().join("other/train.src")).unwrap()
    );
}

#[test]
fn invalid_spec_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = bertjam(&["gen", "--set", "min_len=5", "--set", "max_len=2", "--out", "bad"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bertjam(&["gen", "--set", "dmodel=8", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("dmodel"));
    fs::write(dir.path().join("c.cfg"), "heads = 2\nwidth = 3\n").unwrap();
    let out = bertjam(&["keys", "--config", "c.cfg", "--values"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("c.cfg:2"));
}

#[test]
fn command_line_overrides_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "heads = 2\nbeam = 3\n# comment\n").unwrap();
    let out = bertjam(&["keys", "--values", "--config", "c.cfg", "--set", "beam=7"], dir.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("heads = 2\n"));
    assert!(text.contains("beam = 7\n"));
}

#[test]
fn usage_and_data_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bertjam(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(bertjam(&["--help"], dir.path()).status.code(), Some(0));
    let out = bertjam(&["gen", "--config", "missing.cfg", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.cfg"));
    let out = bertjam(&["bleu", "nohyp.txt", "noref.txt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nohyp.txt"));
}

#[test]
fn bleu_of_identical_files_is_one() {
    let dir = setup();
    let out = bertjam(&["bleu", "data/test.tgt", "data/test.tgt", "--out", "b"], dir.path());
    ok(&out);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b/bleu.json")).unwrap()).unwrap();
    assert_eq!(json["score"].as_f64(), Some(1.0));
}

#[test]
fn train_decode_and_resume() {
    let dir = setup();
    let p = dir.path();
    ok(&bertjam(&["pretrain", "--config", "tiny.cfg", "--data", "data", "--out", "bert.ckpt"], p));
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec!["train", "--config", "tiny.cfg", "--data", "data", "--bert", "bert.ckpt", "--out", out];
        args.extend_from_slice(extra);
        bertjam(&args, p)
    };
    ok(&train("full", &[]));
    for f in ["metrics.csv", "final.ckpt", "report.json", "config.txt", "src.vocab"] {
        assert!(p.join("full").join(f).exists(), "missing {f}");
    }

    let out = train("split", &["--stop-after", "2"]);
    ok(&out);
    assert!(!p.join("split/final.ckpt").exists());
    ok(&train("split", &["--resume"]));
    assert_eq!(
        fs::read_to_string(p.join("full/metrics.csv")).unwrap(),
        fs::read_to_string(p.join("split/metrics.csv")).unwrap()
    );
    assert_eq!(fs::read(p.join("full/final.ckpt")).unwrap(), fs::read(p.join("split/final.ckpt")).unwrap());

    let model = "full/final.ckpt";
    ok(&bertjam(&["decode", "--model", model, "--input", "data/test.src", "--out", "b1.txt", "--beam", "1"], p));
    ok(&bertjam(&["decode", "--model", model, "--input", "data/test.src", "--out", "g.txt", "--greedy"], p));
    ok(&bertjam(&["decode", "--model", model, "--input", "data/test.src", "--out", "b2.txt"], p));
    let greedy = fs::read_to_string(p.join("g.txt")).unwrap();
    assert_eq!(fs::read_to_string(p.join("b1.txt")).unwrap(), greedy);
    assert_eq!(greedy.lines().count(), 8);

    // a configuration that disagrees with the checkpoint names the first parameter
    let out = bertjam(
        &["decode", "--config", "tiny.cfg", "--set", "d_model=16", "--model", model, "--input", "data/test.src", "--out", "x.txt"],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("src_embed.weight"), "{}", stderr(&out));
}

#[test]
fn variant_without_encoder_is_a_usage_error() {
    let dir = setup();
    let out = bertjam(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = bertjam(
        &["train", "--config", "tiny.cfg", "--data", "data", "--out", "b", "--variant", "baseline"],
        dir.path(),
    );
    ok(&out);
}

#[test]
fn diverging_run_exits_with_numerical_code() {
    let dir = setup();
    let out = bertjam(
        &["train", "--config", "tiny.cfg", "--data", "data", "--out", "r", "--variant", "baseline", "--set", "peak_lr=1e300"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
