use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pulsemae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pulsemae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn aggregate(stdout: &[u8]) -> (f64, f64, f64) {
    let text = String::from_utf8_lossy(stdout);
    let line = text.lines().find(|l| l.starts_with("# aggregate")).expect("aggregate line");
    let f: Vec<f64> = line
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    (f[0], f[1], f[2])
}

const TINY: &[&str] = &[
    "--set",
    "data.train=[0, 4]",
    "--set",
    "data.val=[100, 102]",
    "--set",
    "data.finetune=[200, 203]",
    "--set",
    "data.test=[300, 302]",
    "--set",
    "train.student.embed_dim=8",
    "--set",
    "train.student.encoder_blocks=1",
    "--set",
    "train.student.decoder_blocks=1",
    "--set",
    "train.student.decoder_dim=8",
    "--set",
    "train.student.mlp_hidden=8",
    "--set",
    "train.amn.dim=8",
    "--set",
    "train.amn.blocks=1",
    "--set",
    "train.finetune.epochs=2",
    "--set",
    "train.finetune.batch_size=2",
    "--set",
    "train.pretrain.batch_size=4",
    "--set",
    "train.stages=[{stage=1, epochs=1, regime=\"clean\"}, {stage=2, epochs=1, regime=\"occluded\"}]",
];

#[test]
fn gen_data_is_deterministic_and_guards_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pulsemae(&["gen-data", "--out", p(out), "--n-clips", "3", "--set", "frames=64"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["dataset.toml", "clip-00000002.clip.ndt1", "clip-00000002.bvp.ndt1", "clip-00000002.meta"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("resolved_config.toml").exists());

    let o = pulsemae(&[
        "gen-data",
        "--out",
        p(&dir.path().join("c")),
        "--seed-range",
        "train=0..10",
        "--seed-range",
        "test=5..12",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));
}

#[test]
fn identity_eval_and_pos_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = pulsemae(&[
        "gen-data",
        "--out",
        p(&data),
        "--seed-range",
        "test=0..10",
        "--set",
        "hr_range=[60.0, 180.0]",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = pulsemae(&["eval", "--data", p(&data), "--predictions", p(&data), "--out", p(&dir.path().join("e"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (mae, rmse, r) = aggregate(&o.stdout);
    assert_eq!(mae, 0.0);
    assert_eq!(rmse, 0.0);
    assert!((r - 1.0).abs() < 1e-6);

    let o = pulsemae(&["baseline", "--method", "pos", "--data", p(&data), "--out", p(&dir.path().join("b"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (mae, _, _) = aggregate(&o.stdout);
    assert!(mae <= 3.0, "POS MAE {mae}");
    assert!(dir.path().join("b/metrics.csv").exists());
    assert!(dir.path().join("b/resolved_config.toml").exists());
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    assert_eq!(pulsemae(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(pulsemae(&["baseline", "--method", "ica", "--data", "x"]).status.code(), Some(1));
    let o = pulsemae(&["train", "--out", p(&out), "--set", "train.pretrain.mask_ration=0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = pulsemae(&["eval", "--data", p(&dir.path().join("missing")), "--predictions", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pulsemae(&["gradcheck", "--seeds", "2", "--filter", "ma", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn train_resume_finetune_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run), "--stage", "1"];
    args.extend_from_slice(TINY);
    let o = pulsemae(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("stage1/manifest.toml").exists());
    assert!(run.join("resolved_config.toml").exists());

    let ckpt = run.join("stage1");
    let mut args = vec!["train", "--out", p(&run), "--resume", p(&ckpt)];
    args.extend_from_slice(TINY);
    let o = pulsemae(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");

    // resuming gives the same history as an uninterrupted run
    let full = dir.path().join("full");
    let mut args = vec!["train", "--out", p(&full)];
    args.extend_from_slice(TINY);
    assert!(pulsemae(&args).status.success());
    assert_eq!(fs::read_to_string(full.join("history.csv")).unwrap(), history);

    let ft = dir.path().join("ft");
    let ckpt = run.join("stage2");
    let mut args = vec!["finetune", "--out", p(&ft), "--checkpoint", p(&ckpt)];
    args.extend_from_slice(TINY);
    let o = pulsemae(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ft.join("finetune.csv").exists());
    assert!(ft.join("test_metrics.csv").exists());

    let data = dir.path().join("data");
    assert!(pulsemae(&["gen-data", "--out", p(&data), "--seed-range", "test=300..302"])
        .status
        .success());
    let e = dir.path().join("e");
    let o = pulsemae(&["eval", "--data", p(&data), "--checkpoint", p(&ft.join("finetuned")), "--out", p(&e)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(e.join("predictions/clip-00000300.bvp.ndt1").exists());
}

#[test]
fn non_finite_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--out",
        p(dir.path()),
        "--set",
        "train.pretrain.lr_student=1e300",
        "--set",
        "train.pretrain.warmup_epochs=0",
    ];
    args.extend_from_slice(TINY);
    let o = pulsemae(&args);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
