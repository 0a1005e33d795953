use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempretinex::metrics::{EvalReport, Protocol};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tempretinex"));
    c.env_remove("TEMPRETINEX_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
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

/// Writes a small synthetic clip under `root` and returns (low, gt) dirs.
fn synth(root: &Path, kind: &str, frames: usize, seed: u64) -> (PathBuf, PathBuf) {
    let o = run(&[
        "synth", "--kind", kind, "--frames", &frames.to_string(), "--height", "16", "--width", "16",
        "--seed", &seed.to_string(), "--out", p(root),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (root.join("low"), root.join("gt"))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn last_total(out: &Path) -> f64 {
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    log.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["train", "--out", "/tmp/never", "--steps", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--data"));
    assert_eq!(code(&run(&["enhance", "--bogus"])), 2);
    assert_eq!(code(&run(&["synth", "--out", "/tmp/never", "--kind", "spiral"])), 2);
}

#[test]
fn train_zero_steps_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth(&dir.path().join("data"), "static", 3, 1);
    let out = dir.path().join("run");
    let o = run(&["train", "--data", p(&low), "--out", p(&out), "--steps", "0", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("ckpt_0.tpx").is_file());
    assert_eq!(std::fs::read_to_string(out.join("train_log.csv")).unwrap().lines().count(), 1);
    let m = manifest(&out);
    assert_eq!(m["schema"], "manifest-v1");
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 4);
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth(&dir.path().join("data"), "pan", 3, 2);
    let mut totals = Vec::new();
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["train", "--data", p(&low), "--out", p(&out), "--steps", "4", "--seed", "9"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        totals.push(last_total(&out));
        manifests.push(manifest(&out));
    }
    assert!((totals[0] - totals[1]).abs() <= 1e-6);
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn per_video_training_writes_one_model_per_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for (name, seed) in [("one", 1), ("two", 2)] {
        let o = run(&[
            "synth", "--frames", "2", "--height", "16", "--width", "16", "--seed", &seed.to_string(),
            "--out", p(&dir.path().join(name)),
        ]);
        assert_eq!(code(&o), 0);
        std::fs::rename(dir.path().join(name).join("low"), {
            std::fs::create_dir_all(&data).unwrap();
            data.join(name)
        })
        .unwrap();
    }
    let out = dir.path().join("run");
    let o = run(&["train", "--data", p(&data), "--out", p(&out), "--steps", "2", "--per-video"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("one/ckpt_2.tpx").is_file());
    assert!(out.join("two/ckpt_2.tpx").is_file());
    assert_eq!(manifest(&out)["details"]["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn config_file_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth(&dir.path().join("data"), "static", 2, 3);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 21\nomega = 50\n").unwrap();
    let out = dir.path().join("run");
    let o = bin()
        .args(["train", "--data", p(&low), "--out", p(&out), "--steps", "0"])
        .env("TEMPRETINEX_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["seed"], 21);
    assert_eq!(m["config"]["omega"], 50.0);

    std::fs::write(&cfg, "omega = -1\n").unwrap();
    let o = run(&["train", "--data", p(&low), "--out", p(&out), "--steps", "0", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth(&dir.path().join("data"), "pan", 3, 4);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "learning_rate = 1e30\n").unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--data", p(&low), "--out", p(&out), "--steps", "6", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(std::fs::read_dir(&out).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("ckpt_")));
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let (low, _) = synth(&dir.join("train_data"), "pan", 2, 5);
    let out = dir.join("model");
    let o = run(&["train", "--data", p(&low), "--out", p(&out), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("ckpt_2.tpx")
}

#[test]
fn enhance_online_offline_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let (low, _) = synth(&dir.path().join("clip"), "occlusion", 3, 6);

    let enhance = |input: &Path, out: &Path, offline: bool| {
        let mut args = vec!["enhance", "--ckpt", p(&ckpt), "--in", p(input), "--out", p(out)];
        if offline {
            args.push("--offline");
        }
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    enhance(&low, &a, false);
    enhance(&low, &b, false);
    assert_eq!(files(&a).len(), 3);
    assert_eq!(files(&a), files(&b));
    assert_eq!(manifest(&a)["details"]["mode"], "online");

    let single = dir.path().join("single");
    std::fs::create_dir_all(&single).unwrap();
    std::fs::copy(low.join("frame_000000.png"), single.join("frame_000000.png")).unwrap();
    let on = dir.path().join("on");
    let off = dir.path().join("off");
    enhance(&single, &on, false);
    enhance(&single, &off, true);
    assert_eq!(files(&on), files(&off));
    assert_eq!(manifest(&off)["details"]["mode"], "offline");
}

#[test]
fn enhance_rejects_bad_checkpoints_and_in_place_output() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth(&dir.path().join("clip"), "static", 2, 7);
    let bad = dir.path().join("bad.tpx");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = dir.path().join("out");
    let o = run(&["enhance", "--ckpt", p(&bad), "--in", p(&low), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let ckpt = trained_checkpoint(dir.path());
    let o = run(&["enhance", "--ckpt", p(&ckpt), "--in", p(&low), "--out", p(&low)]);
    assert_eq!(code(&o), 2);
}

/// Mean-row values of one protocol from the printed grid.
fn printed_means(grid: &str, protocol: Protocol) -> Vec<f64> {
    let lines: Vec<&str> = grid.lines().collect();
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    let mean: Vec<&str> = lines.iter().find(|l| l.starts_with("mean")).unwrap().split_whitespace().collect();
    ["psnr", "ssim", "mabd"]
        .iter()
        .map(|m| {
            let col = header.iter().position(|h| *h == format!("{m}[{protocol}]")).unwrap();
            mean[col].parse().unwrap()
        })
        .collect()
}

#[test]
fn evaluate_grid_csv_and_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let (low, gt) = synth(&dir.path().join("clip"), "pan", 3, 8);

    let same = dir.path().join("same");
    let o = run(&["evaluate", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&same)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let means = printed_means(&stdout(&o), Protocol::Raw);
    assert!(means[0].is_infinite());
    assert_eq!(means[1], 1.0);

    let raw = dir.path().join("raw");
    let hm = dir.path().join("hm");
    let o_raw = run(&["evaluate", "--pred", p(&low), "--gt", p(&gt), "--out", p(&raw)]);
    let o_hm = run(&["evaluate", "--pred", p(&low), "--gt", p(&gt), "--hm", "--out", p(&hm)]);
    assert_eq!(code(&o_hm), 0, "{}", stderr(&o_hm));
    let raw_csv = std::fs::read_to_string(raw.join("eval_raw.csv")).unwrap();
    assert_eq!(raw_csv, std::fs::read_to_string(hm.join("eval_raw.csv")).unwrap());
    assert_eq!(printed_means(&stdout(&o_raw), Protocol::Raw), printed_means(&stdout(&o_hm), Protocol::Raw));

    for protocol in [Protocol::Raw, Protocol::Hm] {
        let csv = std::fs::read_to_string(hm.join(format!("eval_{protocol}.csv"))).unwrap();
        let rows = EvalReport::parse_csv(&csv).unwrap();
        let (name, proto, s) = rows.last().unwrap();
        assert_eq!((name.as_str(), *proto), ("mean", protocol));
        assert_eq!(vec![s.psnr, s.ssim, s.mabd], printed_means(&stdout(&o_hm), protocol));
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(hm.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(manifest(&hm)["command"], "evaluate");
}

#[test]
fn evaluate_pairwise_mabd_with_workers() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let gt = dir.path().join("gt");
    for (name, seed) in [("x", 1), ("y", 2), ("z", 3)] {
        let (l, g) = synth(&dir.path().join(name), "pan", 3, seed);
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&gt).unwrap();
        std::fs::rename(l, pred.join(name)).unwrap();
        std::fs::rename(g, gt.join(name)).unwrap();
    }
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    let args = |out: &Path, workers: &str| -> Output {
        run(&[
            "evaluate", "--pred", p(&pred), "--gt", p(&gt), "--mabd-pairwise", "--workers", workers, "--out", p(out),
        ])
    };
    let o1 = args(&one, "1");
    let o2 = args(&two, "2");
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    assert_eq!(stdout(&o1), stdout(&o2));
    let csv = std::fs::read_to_string(one.join("eval_raw.csv")).unwrap();
    assert_eq!(EvalReport::parse_csv(&csv).unwrap().len(), 4);
    assert_eq!(manifest(&one)["details"]["mabd"], "pairwise");
}

#[test]
fn evaluate_lists_mismatched_sets() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let gt = dir.path().join("gt");
    for (k, (root, names)) in [(&pred, ["a", "b"]), (&gt, ["b", "c"])].into_iter().enumerate() {
        for n in names {
            let (l, _) = synth(&dir.path().join(format!("src_{k}_{n}")), "static", 2, 1);
            std::fs::create_dir_all(root).unwrap();
            std::fs::rename(l, root.join(n)).unwrap();
        }
    }
    let o = run(&["evaluate", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("only in --pred: a"), "{err}");
    assert!(err.contains("only in --gt: c"), "{err}");
}

#[test]
fn aba_writes_gained_frames_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth(&dir.path().join("clip"), "static", 2, 9);
    let out = dir.path().join("aba");
    let o = run(&["aba", "--in", p(&low), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(files(&out).len(), 2);
    let hist = std::fs::read_to_string(out.join("histograms.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 2 * 256);
    assert_eq!(manifest(&out)["command"], "aba");
}
