use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use osdmamba::checkpoint::Checkpoint;
use osdmamba::data::{load_directory, read_mask};

const TINY: &str = "width=4\ndepths=1,1,1,1\nstate_dim=2\nconvssm_state=2\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osdmamba"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn version_reports_build_identity() {
    let o = run(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("parallel:"), "{}", stdout(&o));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "synth",
            "--out",
            p(out),
            "--count",
            "4",
            "--seed",
            "7",
            "--size",
            "32x32",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("oil"));
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 8);
    assert_eq!(fa, files(&b));
    assert_eq!(load_directory(&a, 5).unwrap().len(), 4);
}

#[test]
fn synth_zero_count_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    let o = run(&["synth", "--out", p(&out), "--count", "0"]);
    assert!(o.status.success());
    assert!(files(&out).is_empty());
    assert!(stderr(&o).contains("nothing to write"), "{}", stderr(&o));
}

#[test]
fn train_missing_data_dir_is_a_usage_error() {
    let o = run(&["train", "--data", "/nonexistent/scenes", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("/nonexistent/scenes"));
}

#[test]
fn train_zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let ck = dir.path().join("m.osdm");
    let o = run(&[
        "train",
        "--synthetic",
        "2",
        "--size",
        "32x32",
        "--config",
        p(&cfg),
        "--epochs",
        "0",
        "--out",
        p(&ck),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("# resolved configuration"));
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.step, 0);
    assert_eq!(loaded.config.width, 4);
    loaded.to_network().unwrap();
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "width=4\nlearning_rate=0.1\n").unwrap();
    let o = run(&[
        "train",
        "--synthetic",
        "2",
        "--config",
        p(&cfg),
        "--epochs",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("learning_rate"));
    let o = run(&[
        "train",
        "--synthetic",
        "2",
        "--set",
        "colour=red",
        "--epochs",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn flags_override_file_and_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, format!("{TINY}lr=0.5\nbatch_size=3\n")).unwrap();
    let o = run(&[
        "train",
        "--synthetic",
        "2",
        "--size",
        "32x32",
        "--config",
        p(&cfg),
        "--set",
        "lr=0.2",
        "--set",
        "gamma=1",
        "--lr",
        "0.05",
        "--epochs",
        "0",
        "--out",
        p(&dir.path().join("m.osdm")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("lr=0.05\n"), "{out}");
    assert!(out.contains("batch_size=3\n"));
    assert!(out.contains("gamma=1\n"));
}

#[test]
fn train_then_eval_writes_masks_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&[
        "synth",
        "--out",
        p(&data),
        "--count",
        "3",
        "--size",
        "32x32"
    ])
    .status
    .success());
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let ck = dir.path().join("m.osdm");
    let log = dir.path().join("log.csv");
    let o = run(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--epochs",
        "1",
        "--holdout",
        "0",
        "--batch-size",
        "2",
        "--out",
        p(&ck),
        "--log",
        p(&log),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&log).unwrap();
    assert!(
        text.starts_with("epoch,loss,miou,oa,oil_iou,oil_fp\n1,"),
        "{text}"
    );

    let masks = dir.path().join("pred");
    let csv = dir.path().join("metrics.csv");
    let o = run(&[
        "eval",
        "--ckpt",
        p(&ck),
        "--data",
        p(&data),
        "--masks-out",
        p(&masks),
        "--csv",
        p(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mIoU"));
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("class,iou,f1,fp_rate\n"));
    let names: Vec<String> = files(&masks).into_iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        [
            "scene_0000_pred.pgm",
            "scene_0001_pred.pgm",
            "scene_0002_pred.pgm"
        ]
    );
    let m = read_mask(&masks.join("scene_0000_pred.pgm"), 5).unwrap();
    assert_eq!((m.height(), m.width()), (32, 32));
}

#[test]
fn eval_rejects_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let ck = dir.path().join("m.osdm");
    let o = run(&[
        "train",
        "--synthetic",
        "1",
        "--size",
        "32x32",
        "--config",
        p(&cfg),
        "--epochs",
        "0",
        "--out",
        p(&ck),
    ]);
    assert!(o.status.success());
    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] = b'Z';
    fs::write(&ck, &bytes).unwrap();
    let o = run(&[
        "eval",
        "--ckpt",
        p(&ck),
        "--synthetic",
        "1",
        "--size",
        "32x32",
    ]);
    assert_eq!(o.status.code(), Some(65), "{}", stderr(&o));

    bytes[0] = b'O';
    bytes[4] = 2;
    fs::write(&ck, &bytes).unwrap();
    let o = run(&[
        "eval",
        "--ckpt",
        p(&ck),
        "--synthetic",
        "1",
        "--size",
        "32x32",
    ]);
    assert_eq!(o.status.code(), Some(65));
}

#[test]
fn verify_all_passes() {
    let o = run(&["verify", "--suite", "all"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert_eq!(run(&["verify", "--suite", "nope"]).status.code(), Some(64));
}

#[test]
fn bench_prints_one_row_per_pair() {
    let o = run(&[
        "bench", "--op", "convssm", "--L", "4,8,16", "--P", "1,2", "--side", "4", "--U", "2",
    ]);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "L,P,sequential_s,parallel_s,predicted_flops");
    assert_eq!(lines.len(), 1 + 6);
    // L=4, P=1, U=Y=2, k=3 on 4x4: 16·4·(1 + 18 + 18 + 36)
    assert!(
        lines[1].starts_with("4,1,") && lines[1].ends_with(",4672"),
        "{}",
        lines[1]
    );
    assert_eq!(run(&["bench", "--op", "nope"]).status.code(), Some(64));
}
