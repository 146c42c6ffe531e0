use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dargan::data::{synth_speech, utterance_rng};
use dargan::dsp::{write_wav, Waveform};

fn dargan(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dargan"))
        .env("DARGAN_RUN_DIR", run_dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny model and corpus so training takes seconds.
const SMALL: &[&str] = &[
    "--set", "data.train_utterances=3",
    "--set", "data.val_count=1",
    "--set", "data.test_utterances=2",
    "--set", "data.duration_s=0.3",
    "--set", "generator.feature_channels=[2,2,2,2,2]",
    "--set", "generator.attention_channels=[2,2,2]",
    "--set", "generator.srnn_hidden=2",
    "--set", "discriminator.conv_channels=[2,2,2,2,2,2]",
    "--set", "training.batch=2",
];

fn small<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

fn write_corpus(dir: &Path, n: u64) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let w = synth_speech(&mut utterance_rng(40 + i, 0), 8000);
        write_wav(dir.join(format!("u{i}.wav")), &w).unwrap();
    }
}

#[test]
fn bad_config_exits_with_two_and_one_line() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        vec!["--set", "training.lr_g=-1", "mix"],
        vec!["--set", "training.nonsense=1", "mix"],
        vec!["--set", "data.train_snrs=\"loud\"", "mix"],
        vec!["evaluate", "--clean", "a", "--est", "b", "--pesq-cmd", "no placeholders"],
    ] {
        let o = dargan(d.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
    }
    let o = dargan(d.path(), &["--set", "data.train_snrs=\"loud\"", "mix"]);
    assert!(stderr(&o).contains("data.train_snrs"));
}

#[test]
fn missing_inputs_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let o = dargan(d.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("mix"));
    write_corpus(&d.path().join("in"), 1);
    let input = d.path().join("in").display().to_string();
    let o = dargan(d.path(), &["enhance", "--input", &input, "--out", "out"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn evaluate_identity_and_reaggregation() {
    let d = tempfile::tempdir().unwrap();
    let clean = d.path().join("clean");
    write_corpus(&clean, 3);
    let est = d.path().join("est");
    fs::create_dir_all(&est).unwrap();
    for i in 0..3 {
        let w = synth_speech(&mut utterance_rng(40 + i, 0), 8000);
        let noisy: Vec<f64> = w.samples().iter().enumerate().map(|(k, v)| 0.8 * v + 0.01 * ((k % 7) as f64 - 3.0) / 3.0).collect();
        write_wav(est.join(format!("u{i}.wav")), &Waveform::new(noisy).unwrap()).unwrap();
    }
    let out = d.path().join("report");
    let (c, e, r) = (clean.display().to_string(), est.display().to_string(), out.display().to_string());
    let pesq = "echo 3.25 # {clean} {est}";
    let o = dargan(d.path(), &["evaluate", "--clean", &c, "--est", &e, "--out", &r, "--pesq-cmd", pesq, "--plots"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("plots")).unwrap().count(), 3);

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "file,segsnr,llr,wss,pesq,csig,cbak,covl");
    assert_eq!(lines.len(), 5);
    let parse = |l: &str| -> Vec<f64> { l.split(',').skip(1).map(|v| v.parse().unwrap()).collect() };
    let rows: Vec<Vec<f64>> = lines[1..4].iter().map(|l| parse(l)).collect();
    let mean = parse(lines[4]);
    assert!(lines[4].starts_with("mean,"));
    for k in 0..7 {
        let m = rows.iter().map(|r| r[k]).sum::<f64>() / 3.0;
        assert!((m - mean[k]).abs() < 1e-9, "column {k}: {m} vs {}", mean[k]);
    }
    assert!(rows.iter().all(|r| r[3] == 3.25 && (1.0..=5.0).contains(&r[4])));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["files"].as_array().unwrap().len(), 3);

    // identical files
    let o = dargan(d.path(), &["evaluate", "--clean", &c, "--est", &c, "--out", &r]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').skip(1).take(3).collect::<Vec<_>>() == ["35", "0", "0"]), "{csv}");

    let log = fs::read_to_string(d.path().join("dargan.log")).unwrap();
    assert!(log.lines().filter(|l| l.starts_with("3 files scored")).count() == 2, "{log}");
}

#[test]
fn missing_estimate_is_reported_and_fails() {
    let d = tempfile::tempdir().unwrap();
    let clean = d.path().join("clean");
    write_corpus(&clean, 3);
    let est = d.path().join("est");
    write_corpus(&est, 2);
    let out = d.path().join("report");
    let o = dargan(
        d.path(),
        &["evaluate", "--clean", &clean.display().to_string(), "--est", &est.display().to_string(), "--out", &out.display().to_string()],
    );
    assert_eq!(o.status.code(), Some(1));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("u2.wav") && summary.contains("2 files scored, 1 failed"), "{summary}");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for run in [&a, &b] {
        let o = dargan(run, &small(&["mix"]));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = dargan(&a, &small(&["--set", "training.epochs=2", "train"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dargan(&b, &small(&["--set", "training.epochs=1", "train"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dargan(&b, &small(&["--set", "training.epochs=2", "train", "--resume"]));
    assert!(o.status.success(), "{}", stderr(&o));

    // the epoch-1 checkpoint headers differ in the configured epoch count
    for f in ["checkpoints/epoch-0002.ckpt", "checkpoints/BEST", "train_log.jsonl", "generator_best.ckpt"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let saved = fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(saved.contains("epochs = 2"), "{saved}");

    // enhancement keeps basenames and lengths
    let out = d.path().join("enh");
    let input = b.join("corpus/test/noisy");
    let o = dargan(&b, &small(&["enhance", "--input", &input.display().to_string(), "--out", &out.display().to_string(), "--ppp-iters", "2"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let names = |p: &Path| files(p).into_iter().map(|(n, bytes)| (n, bytes.len())).collect::<Vec<_>>();
    assert_eq!(names(&input), names(&out));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Griffin-Lim"));
}
