use ct_harness::io::read_checkpoint;
use ct_harness::metrics::read_metrics;
use std::path::Path;
use std::process::{Command, Output};

fn harness(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ct-harness"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    harness(args).status.code().expect("exited normally")
}

const TINY: &[&str] = &[
    "--set",
    "train.batch=2",
    "--set",
    "data.points=24",
    "--set",
    "data.eval_samples=2",
    "--set",
    "train.eval_every=3",
    "--set",
    "model.g=8",
    "--set",
    "model.hidden=8",
    "--set",
    "model.heads_2d=1",
    "--set",
    "model.heads_3d=1",
    "--set",
    "model.w_2d=4",
    "--set",
    "model.w_3d=4",
    "--set",
    "model.c_2d=2",
    "--set",
    "model.c_3d=2",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["train", "--task", "seg", "--seed", "3", "--out-dir", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    harness(&args)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(
        code(&["train", "--task", "seg", "--out-dir", "/tmp/x"]),
        2,
        "missing --seed"
    );
    assert_eq!(
        code(&[
            "train",
            "--task",
            "nope",
            "--seed",
            "1",
            "--out-dir",
            "/tmp/x"
        ]),
        2
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(
        code(&[
            "train",
            "--seed",
            "1",
            "--out-dir",
            out,
            "--set",
            "model.nope=3"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--seed",
            "1",
            "--out-dir",
            out,
            "--set",
            "optim.lr"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--seed",
            "1",
            "--out-dir",
            out,
            "--set",
            "optim.lr=-1"
        ]),
        2
    );
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "task = seg\n[optim]\nlr = 0.01\nmomentum = 0.9\n").unwrap();
    let o = harness(&[
        "train",
        "--seed",
        "1",
        "--out-dir",
        out,
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
    assert!(
        !dir.path().join("run").exists(),
        "nothing is written on a usage error"
    );
}

#[test]
fn passing_checks_exit_0() {
    assert_eq!(code(&["verify-lemma", "--samples", "50"]), 0);
    assert_eq!(
        code(&["gradcheck", "--scope", "op", "--filter", "tensor."]),
        0
    );
    assert_eq!(code(&["depth-stability", "--depth", "1", "--w", "4"]), 0);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn failing_check_exits_1() {
    // two layers cannot grow by a factor of a thousand without balancing
    assert_eq!(code(&["depth-stability", "--depth", "2", "--w", "4"]), 1);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--iterations", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("test accuracy"), "{stdout}");

    let rows = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(
        rows.iter()
            .filter(|r| r.split == "train" && r.name == "loss")
            .count(),
        4
    );
    assert!(rows
        .iter()
        .any(|r| r.split == "val" && r.name == "accuracy" && r.iter == 2));
    let (echo, _) = read_checkpoint(&out.join("model.ctck")).unwrap();
    assert_eq!(
        echo,
        std::fs::read_to_string(out.join("config.txt")).unwrap()
    );

    let ckpt = out.join("model.ctck");
    let e = harness(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    // evaluation of the saved model reproduces the logged test metrics
    let logged = rows
        .iter()
        .find(|r| r.split == "test" && r.name == "accuracy")
        .unwrap()
        .value;
    let printed = String::from_utf8_lossy(&e.stdout);
    let line = printed
        .lines()
        .find(|l| l.starts_with("test accuracy "))
        .unwrap();
    let value: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!((value - logged).abs() < 1e-6, "{value} vs {logged}");

    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "train"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            dir.path().join("missing").to_str().unwrap()
        ]),
        1
    );
}

#[test]
fn lr_decay_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(
        &out,
        &[
            "--iterations",
            "5",
            "--set",
            "schedule.interval=2",
            "--set",
            "schedule.factor=0.5",
            "--set",
            "optim.lr=0.004",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lrs: Vec<f64> = read_metrics(&out.join("metrics.jsonl"))
        .unwrap()
        .into_iter()
        .filter(|r| r.split == "train" && r.name == "lr")
        .map(|r| r.value)
        .collect();
    assert_eq!(lrs, [0.004, 0.004, 0.002, 0.002, 0.001]);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(train(out, &["--iterations", "10"]).status.success());
    }
    for file in ["metrics.jsonl", "model.ctck", "config.txt"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn config_file_and_task_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "task = cls\n").unwrap();
    let out = dir.path().join("run");
    let args = [
        "train",
        "--task",
        "seg",
        "--seed",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ];
    assert_eq!(code(&args), 2);
}
