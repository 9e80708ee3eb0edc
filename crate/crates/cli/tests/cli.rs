use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lvctc::config::RunConfig;
use lvctc::data::{dump, Generator, Utterance};

fn lvctc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvctc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
task.vocab = 4
task.min_tokens = 2
task.max_tokens = 4
task.d_feat = 6
model.d_att = 8
model.n_heads = 2
model.d_ff = 8
model.conv_kernel = 3
model.l_enc = 2
model.l_dec = 2
model.l_pst = 1
model.share_layer = 1
model.inter_layer = 1
model.d_lat = 4
train.batch_size = 4
train.steps = 6
train.valid_interval = 3
train.valid_size = 6
train.iterations = 2
";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.conf");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    lvctc(&args)
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.colour = blue\n");
    let o = train(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.colour"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "optim.peak_lr = -1\n");
    let o = train(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optim.peak_lr"), "{}", stderr(&o));

    let o = lvctc(&["train", "--config", "/nonexistent/run.conf"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&lvctc(&["train"])), 2);
    assert_eq!(code(&lvctc(&["frobnicate"])), 2);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&cfg, &a, &[])), 0);
    assert_eq!(code(&train(&cfg, &b, &[])), 0);
    let log_a = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, fs::read_to_string(b.join("metrics.jsonl")).unwrap());
    assert_eq!(log_a.lines().count(), 6);
    for name in ["latest.ckpt", "best.ckpt", "latest.state", "timing.jsonl"] {
        assert!(a.join(name).exists(), "{name}");
    }

    // Stop at step 3, then resume to 6: same log as the uninterrupted run.
    let c = dir.path().join("c");
    let short = dir.path().join("short.conf");
    fs::write(&short, TINY.replace("train.steps = 6", "train.steps = 3")).unwrap();
    assert_eq!(code(&train(&short, &c, &[])), 0);
    assert_eq!(code(&train(&cfg, &c, &["--resume"])), 0);
    assert_eq!(fs::read_to_string(c.join("metrics.jsonl")).unwrap(), log_a);

    let d = dir.path().join("d");
    assert_eq!(code(&train(&cfg, &d, &["--seed", "2"])), 0);
    assert_ne!(fs::read_to_string(d.join("metrics.jsonl")).unwrap(), log_a);
}

#[test]
fn decode_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    assert_eq!(code(&train(&cfg, &run, &[])), 0);
    let ckpt = run.join("latest.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let config = RunConfig::load(&cfg).unwrap();
    let utts: Vec<Utterance<f64>> = Generator::new(config.task.clone()).unwrap().dataset("x", 5, 4);
    let input = dir.path().join("input.tsv");
    dump(&utts, fs::File::create(&input).unwrap()).unwrap();
    let input = input.to_str().unwrap();

    let single = lvctc(&["decode", "--checkpoint", ckpt, "--input", input, "--iterations", "0"]);
    assert_eq!(code(&single), 0, "{}", stderr(&single));
    assert_eq!(stdout(&single).lines().count(), 4);
    assert!(stdout(&single).starts_with("x-000000\t"));

    let traced = lvctc(&["decode", "--checkpoint", ckpt, "--input", input, "--iterations", "2", "--trace"]);
    assert_eq!(code(&traced), 0);
    assert_eq!(stdout(&traced), stdout(&lvctc(&["decode", "--checkpoint", ckpt, "--input", input, "--iterations", "2", "--trace"])));
    for (line, plain) in stdout(&traced).lines().zip(stdout(&single).lines()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let first: Vec<String> = v["hypotheses"][0].as_array().unwrap().iter().map(|t| t.to_string()).collect();
        assert_eq!(plain.split('\t').nth(1).unwrap(), first.join(" "));
        assert!(v["hypotheses"].as_array().unwrap().len() <= 3);
    }

    let out = dir.path().join("decoded");
    let o = lvctc(&["decode", "--checkpoint", ckpt, "--input", input, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("hypotheses.txt")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(out.join("timing.jsonl")).unwrap().lines().count(), 4);

    let e1 = lvctc(&["eval", "--checkpoint", ckpt, "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&e1), 0, "{}", stderr(&e1));
    let report: serde_json::Value = serde_json::from_str(stdout(&e1).trim()).unwrap();
    assert_eq!(report["utterances"], 6);
    assert!(report["ter_greedy"].as_f64().unwrap() >= 0.0);
    assert_eq!(stdout(&e1), stdout(&lvctc(&["eval", "--checkpoint", ckpt, "--config", cfg.to_str().unwrap()])));

    // A config describing a different architecture is rejected.
    let other = dir.path().join("other.conf");
    fs::write(&other, TINY.replace("model.d_lat = 4", "model.d_lat = 6")).unwrap();
    let o = lvctc(&["eval", "--checkpoint", ckpt, "--config", other.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = lvctc(&["decode", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap(), "--input", input]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_and_gradcheck_commands() {
    let o = lvctc(&["oracle", "--trials", "200"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("200 trials"));

    let o = lvctc(&["gradcheck", "--coords", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().starts_with("group"));
    assert!(table.contains("decoder.out.weight"));
    assert!(table.contains("posterior."));
    assert!(!table.contains("FAIL"));
}
