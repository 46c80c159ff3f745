use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use unet_vos::cli::run;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("unet-vos").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn gen(out: &Path) -> i32 {
    cli(&[
        "gen-data",
        "--seed",
        "1",
        "--out",
        s(out),
        "--sequences",
        "3",
        "--val",
        "1",
        "--frames",
        "4",
        "--size",
        "32",
    ])
}

#[test]
fn gen_data_twice_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(gen(&a), 0);
    assert_eq!(gen(&b), 0);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
    assert!(ta.contains_key(Path::new("config.txt")));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(gen(&data), 0);
    let val = data.join("val");
    let out = dir.path().join("eval");
    assert_eq!(cli(&["eval", "--pred", s(&val), "--gt", s(&val), "--out", s(&out)]), 0);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    let global = report.lines().last().unwrap();
    assert!(global.contains("j_mean=1.000000 f_mean=1.000000"), "{report}");
    assert!(out.join("frames.csv").exists());
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    assert_eq!(cli(&["gradcheck", "--seed", "3", "--out", s(&out)]), 0);
    let report = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert_eq!(report.lines().count(), unet_vos::gradcheck::SUITE_CASES.len());
    assert!(!report.contains("FAIL"), "{report}");
}

#[test]
fn invalid_input_exits_one() {
    assert_eq!(cli(&["train", "--bogus"]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let missing = dir.path().join("nothing");
    assert_eq!(
        cli(&["train", "--data", s(&missing), "--out", s(&out), "--iters", "2"]),
        1
    );
    assert_eq!(
        cli(&["train", "--data", s(&missing), "--out", s(&out), "--arch", "resnet"]),
        1
    );
}

#[test]
fn predict_output_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |sub: &str| dir.path().join(sub);
    let (data, run) = (p("data"), p("train"));
    assert_eq!(gen(&data), 0);
    let train = [
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--filters",
        "2,4",
        "--iters",
        "4",
        "--batch",
        "2",
    ];
    assert_eq!(cli(&train), 0);
    for f in ["config.txt", "model.ckpt", "train_log.csv", "val_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let seq = p("data").join("val").join("seq002");
    let (pred, eval) = (p("pred"), p("eval"));
    assert_eq!(
        cli(&["predict", "--models", s(&run), "--sequence", s(&seq), "--out", s(&pred)]),
        0
    );
    assert_eq!(
        cli(&[
            "eval",
            "--pred",
            s(&pred),
            "--gt",
            s(&data.join("val")),
            "--out",
            s(&eval)
        ]),
        0
    );
    let report = fs::read_to_string(eval.join("report.txt")).unwrap();
    assert!(report.starts_with("sequence=seq002 "), "{report}");
}
