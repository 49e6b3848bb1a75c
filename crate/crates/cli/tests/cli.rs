use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set", "n_classes=4",
    "--set", "d_embed=16",
    "--set", "test_per_class=10",
    "--set", "n_ood=40",
    "--set", "ood_classes=3",
    "--set", "n_background=4",
    "--set", "epochs=3",
    "--set", "ctx_len=4",
];

fn gacoop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gacoop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path) {
    let mut args = vec!["gen-data", "--out-dir", s(dir)];
    args.extend_from_slice(SMALL);
    let out = gacoop(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_on_every_subcommand() {
    assert_eq!(code(&gacoop(&["--help"])), 0);
    for sub in ["gen-data", "train", "eval", "bench", "sweep", "grad-check"] {
        let out = gacoop(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub} --help");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&gacoop(&[])), 1);
    assert_eq!(code(&gacoop(&["frobnicate"])), 1);
    assert_eq!(code(&gacoop(&["bench", "--strategies", "nope"])), 1);
}

#[test]
fn missing_input_exits_2() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent");
    let out = gacoop(&["train", "--data-dir", s(&missing), "--out", s(&tmp.path().join("ck"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn corrupt_bank_exits_3() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let train = data.join("train.fbnk");
    let mut bytes = fs::read(&train).unwrap();
    bytes[0] = b'X';
    fs::write(&train, bytes).unwrap();
    let out = gacoop(&["train", "--data-dir", s(&data), "--out", s(&tmp.path().join("ck"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bad_config_exits_4() {
    let tmp = TempDir::new().unwrap();
    let out = gacoop(&["gen-data", "--out-dir", s(tmp.path()), "--set", "lr=-1"]);
    assert_eq!(code(&out), 4);
    let out = gacoop(&["gen-data", "--out-dir", s(tmp.path()), "--set", "no_such_key=1"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn train_eval_round_trip_and_dimension_mismatch() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let ck = tmp.path().join("gacoop.ck");
    let out = gacoop(&["train", "--data-dir", s(&data), "--strategy", "gacoop", "--out", s(&ck)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ck.exists());
    assert!(tmp.path().join("gacoop.ck.log.csv").exists());

    let first = gacoop(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&data)]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let csv = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(csv.starts_with("strategy,dataset,fpr95,auroc,id_acc,conflict_ratio,seed"));
    assert!(csv.lines().any(|l| l.starts_with("gacoop,synthetic,")));
    let second = gacoop(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&data)]);
    assert_eq!(first.stdout, second.stdout);

    let cfg = tmp.path().join("wide.txt");
    fs::write(&cfg, "ctx_len = 8\n").unwrap();
    let out = gacoop(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&data), "--config", s(&cfg)]);
    assert_eq!(code(&out), 4);
}

#[test]
fn bench_runs_every_cell_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for path in [&a, &b] {
        let mut args = vec!["bench", "--seeds", "3", "--out", s(path)];
        args.extend_from_slice(SMALL);
        let out = gacoop(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let per_seed: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("synthetic") && !l.ends_with(",mean"))
        .collect();
    assert_eq!(per_seed.len(), 9);
    for st in ["coop", "locoop", "gacoop"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{st},average,")) && l.ends_with(",mean")));
    }
}

#[test]
fn sweep_writes_one_block_per_value() {
    let tmp = TempDir::new().unwrap();
    let out_path = tmp.path().join("sweep.csv");
    let mut args = vec![
        "sweep", "--param", "lambda", "--values", "0,0.5", "--seeds", "1", "--strategies", "locoop",
        "--out", s(&out_path),
    ];
    args.extend_from_slice(SMALL);
    let out = gacoop(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("param,value,strategy,"));
    assert!(text.lines().any(|l| l.starts_with("lambda,0,")));
    assert!(text.lines().any(|l| l.starts_with("lambda,0.5,")));
}

#[test]
fn grad_check_passes() {
    let out = gacoop(&["grad-check", "--trials", "20", "--pairs", "400"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
