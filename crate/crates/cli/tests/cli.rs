use std::path::Path;
use std::process::{Command, Output};

use motionrnn_core::checkpoint::encode_checkpoint;
use motionrnn_core::datagen::read_vseq;
use motionrnn_core::model::{Model, ModelConfig};

fn motionrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionrnn"))
        .args(args)
        .env("MOTIONRNN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = motionrnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = motionrnn(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: &[&str] = &["--layers", "2", "--channels", "8", "--lstm-kernel", "3", "--patch", "2"];
const SMALL_DATA: &[&str] = &["--frame-size", "16", "--sprite-size", "8", "--digits", "1", "--context", "3", "--horizon", "3"];

fn with(parts: &[&[&str]]) -> Vec<String> {
    parts.iter().flat_map(|p| p.iter().map(|s| s.to_string())).collect()
}

fn run(args: &[String]) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.vseq"), dir.path().join("b.vseq"));
    for p in [&a, &b] {
        ok(&["gen-data", "--seed", "1", "--count", "4", "--frame-size", "32", "--out", s(p)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let batch = read_vseq(&a).unwrap();
    assert_eq!(batch.frames.shape(), &[4, 20, 1, 32, 32]);
    assert_eq!(batch.split_index, 10);

    let c = dir.path().join("c.vseq");
    ok(&["gen-data", "--seed", "2", "--count", "4", "--frame-size", "32", "--out", s(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn train_zero_iterations_writes_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run(&with(&[
        &["train", "--seed", "7", "--iters", "0", "--train-count", "2", "--eval-count", "0", "--out", s(&out)],
        SMALL_MODEL,
        SMALL_DATA,
    ]));
    let cfg = ModelConfig {
        layers: 2,
        hidden: 8,
        lstm_kernel: 3,
        patch: 2,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    };
    let expected = encode_checkpoint(&Model::<f32>::new(cfg, 7).unwrap()).unwrap();
    assert_eq!(std::fs::read(out.join("model.mrnn")).unwrap(), expected);
    assert_eq!(std::fs::read_to_string(out.join("train_log.csv")).unwrap(), "iteration,loss,eval_mse,eval_ssim\n");
}

#[test]
fn train_eval_predict_and_trend_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    run(&with(&[
        &["train", "--seed", "3", "--iters", "4", "--batch", "2", "--train-count", "4", "--eval-count", "2"],
        &["--out", s(&run_dir)],
        SMALL_MODEL,
        SMALL_DATA,
    ]));
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(!log.lines().last().unwrap().ends_with(",,"));
    let ckpt = run_dir.join("model.mrnn");

    let report = dir.path().join("metrics.csv");
    let stdout = run(&with(&[
        &["eval", "--checkpoint", s(&ckpt), "--eval-count", "3", "--out", s(&report)],
        &["--metrics", "mse,ssim,csi@0.3"],
        SMALL_DATA,
    ]));
    assert!(stdout.contains("mse"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,metric,value");
    assert_eq!(csv.lines().count(), 1 + 3 * 3 + 3);

    let frames = dir.path().join("frames");
    run(&with(&[&["predict", "--checkpoint", s(&ckpt), "--eval-count", "2", "--index", "1", "--out", s(&frames)], SMALL_DATA]));
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 3 + 3 + 3);
    let pgm = std::fs::read(frames.join("pred_00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);

    let trend = dir.path().join("trend.csv");
    run(&with(&[&["export-trend", "--checkpoint", s(&ckpt), "--eval-count", "1", "--out", s(&trend)], SMALL_DATA]));
    let csv = std::fs::read_to_string(&trend).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0,0")));
    let svg = std::fs::read_to_string(trend.with_extension("svg")).unwrap();
    assert_eq!(svg.matches("<line ").count(), 16);

    run(&with(&[&["export-trend", "--checkpoint", s(&ckpt), "--eval-count", "1", "--step", "3", "--out", s(&trend)], SMALL_DATA]));
    assert_eq!(std::fs::read_to_string(&trend).unwrap().lines().count(), 17);
}

#[test]
fn ablate_grid_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablation.csv");
    run(&with(&[
        &["ablate", "--iters", "2", "--batch", "2", "--train-count", "2", "--eval-count", "2", "--out", s(&out)],
        SMALL_MODEL,
        SMALL_DATA,
    ]));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "mh,tv,tm,params,final_loss,mse,mae,ssim");
    assert_eq!(lines.len(), 9);
    let params = |mh: &str, tv: &str, tm: &str| -> usize {
        let prefix = format!("{mh},{tv},{tm},");
        lines.iter().find(|l| l.starts_with(&prefix)).unwrap().split(',').nth(3).unwrap().parse().unwrap()
    };
    assert_eq!(params("true", "true", "true"), params("false", "true", "true"));
    assert!(params("true", "false", "true") < params("true", "true", "true"));

    // pinned toggles shrink the grid
    run(&with(&[
        &["ablate", "--no-mh", "--iters", "1", "--batch", "2", "--train-count", "2", "--eval-count", "2", "--out", s(&out)],
        SMALL_MODEL,
        SMALL_DATA,
    ]));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 5);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 5\n[model]\nlayers = 2\nhidden = 8\nlstm_kernel = 3\npatch = 2\n[generator]\nframe_size = 16\nsprite_size = 8\ndigits = 1\n[train]\ncontext = 3\nhorizon = 3\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--iters", "0", "--train-count", "1", "--eval-count", "0", "--channels", "12", "--out", s(&out)]);
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("hidden = 12"), "{resolved}");
    assert!(resolved.contains("layers = 2"));
    assert!(resolved.contains("seed = 5"));

    std::fs::write(&cfg, "[model]\nbogus = 1\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--iters", "0", "--out", s(&out)]);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn errors_are_reported_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["eval", "--checkpoint", s(&dir.path().join("missing.mrnn"))]);
    assert!(err.contains("missing.mrnn"), "{err}");
    let err = fails(&["train", "--channels", "6", "--iters", "0", "--out", s(dir.path())]);
    assert!(err.contains("channels"), "{err}");
    let err = fails(&["gen-data", "--frobnicate", "--out", "x"]);
    assert!(err.contains("frobnicate"), "{err}");
    let err = fails(&["eval", "--checkpoint", "x", "--metrics", "fvd"]);
    assert!(err.contains("fvd"), "{err}");

    // failed commands leave no output behind
    let target = dir.path().join("never.vseq");
    fails(&["gen-data", "--count", "2", "--context", "30", "--horizon", "0", "--out", s(&target)]);
    assert!(!target.exists());

    let out = Command::new(env!("CARGO_BIN_EXE_motionrnn"))
        .args(["gen-data", "--count", "1", "--out", s(&dir.path().join("t.vseq"))])
        .env("MOTIONRNN_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MOTIONRNN_THREADS"));
}

#[test]
fn help_lists_flags_with_defaults() {
    for (sub, flags) in [
        ("train", &["--seed", "--config", "--layers", "--channels", "--k", "--alpha", "--patch", "--no-mh", "--no-tv", "--no-tm", "--iters", "--batch", "--lr", "--context", "--horizon", "--out", "--checkpoint"][..]),
        ("eval", &["--checkpoint", "--metrics", "--out", "--context", "--horizon"][..]),
        ("gen-data", &["--seed", "--count", "--out"][..]),
        ("predict", &["--checkpoint", "--index"][..]),
        ("export-trend", &["--checkpoint", "--step", "--interface"][..]),
        ("ablate", &["--no-mh", "--metrics", "--iters"][..]),
    ] {
        let help = ok(&[sub, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{sub} help lacks {f}");
        }
        assert!(help.contains("[default: "), "{sub} help shows no defaults");
    }
    let train = ok(&["train", "--help"]);
    assert!(train.contains("[default: 0.0003]") && train.contains("[default: 64]"));
}
