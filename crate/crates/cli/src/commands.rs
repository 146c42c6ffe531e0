use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dargan::data::{
    build_ppp_pairs, check_disjoint, load_spec_pairs, split_manifest, synth_corpus_at, Manifest, PppPair, Profile,
    Split,
};
use dargan::dsp::{read_wav, write_wav};
use dargan::metrics::{evaluate_corpus, PesqAdapter};
use dargan::phase::{enhance_waveform, train_ppp, PhiNet};
use dargan::training::{load_best_generator, train_gan, TrainOptions};
use dargan::{GeneratorF32, PhiNetF32};

use crate::config::RunConfig;
use crate::{plot, CliError};

pub const LOG_FILE: &str = "dargan.log";
pub const PHI_FILE: &str = "phi.ckpt";
pub const PPP_LOG: &str = "ppp_log.jsonl";

/// Prints a line and appends it to the run's text log.
struct Log {
    path: PathBuf,
}

impl Log {
    fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.run_dir).map_err(|e| CliError::io(&cfg.run_dir, e))?;
        Ok(Log {
            path: cfg.run_dir.join(LOG_FILE),
        })
    }

    fn line(&self, text: impl AsRef<str>) -> Result<(), CliError> {
        let text = text.as_ref();
        println!("{text}");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::io(&self.path, e))?;
        writeln!(f, "{text}").map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn mix(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.save_copy()?;
    let log = Log::open(cfg)?;
    let d = &cfg.data;
    let root = cfg.corpus_dir();
    let train = synth_corpus_at(
        root.join("train"),
        d.train_utterances,
        d.duration_s,
        Profile::Train,
        &d.train_snrs,
        cfg.seed,
        &d.noises,
    )?;
    let test = synth_corpus_at(
        root.join("test"),
        d.test_utterances,
        d.duration_s,
        Profile::Test,
        &d.test_snrs,
        cfg.seed.wrapping_add(1),
        &d.noises,
    )?;
    let (train_m, val_m) = split_manifest(&train.manifest, d.val_size(), cfg.seed)?;
    check_disjoint(&[&train_m, &val_m, &test.manifest])?;
    for (name, m) in [("train", &train_m), ("val", &val_m), ("test", &test.manifest)] {
        let path = cfg.manifest_path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        m.save(&path)?;
        log.line(format!("mix: wrote {} entries to {}", m.len(), path.display()))?;
    }
    let worst = train
        .manifest
        .entries
        .iter()
        .zip(&train.measured_snr)
        .chain(test.manifest.entries.iter().zip(&test.measured_snr))
        .map(|(e, m)| (e.snr_db - m).abs())
        .fold(0.0, f64::max);
    log.line(format!("mix: largest SNR deviation {worst:.3e} dB"))?;
    let clipped = train.clipped + test.clipped;
    if clipped > 0 {
        log.line(format!("mix: warning: {clipped} samples clipped to [-1, 1]"))?;
    }
    Ok(())
}

fn load_manifest(cfg: &RunConfig, name: &str) -> Result<Manifest, CliError> {
    let path = cfg.manifest_path(name);
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "manifest {} not found (run `mix` first)",
            path.display()
        )));
    }
    Ok(Manifest::load(&path)?)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let train_m = load_manifest(cfg, "train")?;
    let val_m = load_manifest(cfg, "val")?;
    cfg.save_copy()?;
    let log = Log::open(cfg)?;
    let train_set = load_spec_pairs::<f32>(&train_m, cfg.dsp)?;
    let val_set = load_spec_pairs::<f32>(&val_m, cfg.dsp)?;
    log.line(format!(
        "train: {} training and {} validation utterances",
        train_set.len(),
        val_set.len()
    ))?;
    let opts = TrainOptions {
        run_dir: Some(cfg.run_dir.clone()),
        resume,
        verbose: true,
    };
    let outcome = train_gan(
        &train_set,
        &val_set,
        &cfg.training,
        &cfg.generator,
        &cfg.discriminator,
        &opts,
    )?;
    log.line(format!(
        "train: {} epochs{}, best validation loss {:.6} at epoch {}",
        outcome.epochs_run,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.best_val,
        outcome.best_epoch
    ))?;
    let Some(ppp) = &cfg.phase else {
        return Ok(());
    };

    let test_m = cfg.manifest_path("test").exists().then(|| load_manifest(cfg, "test")).transpose()?;
    let mut manifests = vec![&train_m, &val_m];
    manifests.extend(test_m.as_ref());
    let pair_dir = cfg.ppp_dir().join("pairs");
    let entries = build_ppp_pairs(&manifests, &outcome.best, cfg.dsp, &pair_dir)?;
    log.line(format!("train: wrote {} phase training pairs to {}", entries.len(), pair_dir.display()))?;
    let load = |split: Split| -> Result<Vec<PppPair<f32>>, CliError> {
        entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| PppPair::load(&e.pair).map_err(CliError::from))
            .collect()
    };
    let (ppp_train, ppp_val) = (load(Split::Train)?, load(Split::Val)?);
    let log_path = cfg.ppp_dir().join(PPP_LOG);
    let mut lines = String::new();
    let (phi, _) = train_ppp(&ppp_train, &ppp_val, ppp, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    })?;
    fs::write(&log_path, lines).map_err(|e| CliError::io(&log_path, e))?;
    let phi_path = cfg.ppp_dir().join(PHI_FILE);
    phi.save(&phi_path)?;
    log.line(format!("train: phase denoiser saved to {}", phi_path.display()))
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn enhance(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    ppp_iters: Option<usize>,
    ppp_weights: Option<&Path>,
) -> Result<(), CliError> {
    let inputs = if input.is_dir() {
        wav_files(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::Runtime(format!("input {} does not exist", input.display())));
    };
    if inputs.is_empty() {
        return Err(CliError::Runtime(format!("no .wav files in {}", input.display())));
    }
    let generator: GeneratorF32 = load_best_generator(&cfg.run_dir)?;
    let phi: Option<PhiNetF32> = ppp_weights.map(PhiNet::load).transpose()?;
    let iterations = ppp_iters.unwrap_or_else(|| phi.as_ref().map_or(0, |p| p.config().iterations));
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let log = Log::open(cfg)?;
    for path in &inputs {
        let noisy = read_wav::<f32>(path)?;
        let enhanced = enhance_waveform(&generator, &noisy, cfg.dsp, phi.as_ref(), iterations)?;
        let dest = out.join(path.file_name().expect("file path"));
        write_wav(&dest, &enhanced)?;
        log.line(format!("enhance: {} -> {}", path.display(), dest.display()))?;
    }
    log.line(format!(
        "enhance: {} file(s), {} phase iteration(s){}",
        inputs.len(),
        iterations,
        match (&phi, iterations) {
            (_, 0) => " (noisy phase)",
            (None, _) => " (Griffin-Lim)",
            (Some(_), _) => " (trained denoiser)",
        }
    ))
}

pub struct EvaluateArgs {
    pub clean: PathBuf,
    pub est: PathBuf,
    pub noisy: Option<PathBuf>,
    pub pesq_cmd: Option<String>,
    pub plots: bool,
    pub out: Option<PathBuf>,
}

pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "metrics.json";
pub const SUMMARY: &str = "summary.txt";

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let template = args.pesq_cmd.clone().or_else(|| cfg.metrics.pesq_cmd.clone());
    let adapter = template
        .map(PesqAdapter::new)
        .transpose()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    for dir in [&args.clean, &args.est] {
        if !dir.is_dir() {
            return Err(CliError::Runtime(format!("{} is not a directory", dir.display())));
        }
    }
    let estimates = wav_files(&args.est)?;
    let pairs: Vec<(PathBuf, PathBuf)> = estimates
        .iter()
        .map(|e| (args.clean.join(e.file_name().expect("file path")), e.clone()))
        .collect();
    let report_result = evaluate_corpus(&pairs, adapter.as_ref());
    let mut report = report_result?;
    for c in wav_files(&args.clean)? {
        if !estimates.iter().any(|e| e.file_name() == c.file_name()) {
            report.failures.push((c, "no matching estimate".into()));
        }
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.run_dir.join("evaluation"));
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let write = |name: &str, text: String| -> Result<(), CliError> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    write(REPORT_CSV, report.to_csv())?;
    write(REPORT_JSON, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let summary = report.summary();
    write(SUMMARY, format!("{summary}\n"))?;
    let log = Log::open(cfg)?;
    for w in &report.warnings {
        log.line(format!("evaluate: warning: {w}"))?;
    }
    log.line(&summary)?;
    if args.plots {
        let dir = out.join("plots");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for f in &report.files {
            let name = f.file.file_name().expect("file path");
            let mut panels = vec![("clean", args.clean.join(name))];
            if let Some(n) = &args.noisy {
                panels.push(("noisy", n.join(name)));
            }
            panels.push(("enhanced", f.file.clone()));
            let dest = dir.join(Path::new(name).with_extension("png"));
            plot::spectrogram_panels(&panels, cfg.dsp, &dest)?;
        }
        log.line(format!("evaluate: {} plot(s) in {}", report.files.len(), dir.display()))?;
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} file(s) could not be scored", report.failures.len())))
    }
}
