//! Release acceptance suite. Each criterion prints one status line; the test
//! fails if any criterion that could be run did not pass.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dargan::autograd::gradcheck;
use dargan::data::{
    make_ppp_pair, measure_snr, mix_at_snr, spec_pair, synth_noise, synth_speech, utterance_rng, NoiseKind, PppPair,
    TEST_SNRS, TRAIN_SNRS,
};
use dargan::discriminator::{spectral_normalize, Discriminator, DiscriminatorConfig};
use dargan::dsp::{istft, read_wav, stft, write_wav, ComplexSpectrogram, MagnitudeSpectrogram, StftConfig, Waveform};
use dargan::generator::{Generator, GeneratorConfig};
use dargan::metrics::{composite, evaluate_corpus, llr, seg_snr, wss, LPC_ORDER};
use dargan::nn::Bound;
use dargan::phase::{
    amplitude_residual, apply_phase, dgla_step, proj_amplitude, proj_consistency, Consistency, PhiNet, PppConfig,
    PppTrainer,
};
use dargan::training::{
    d_loss, g_loss, lr_schedule_update, mask_from_lengths, pad_and_mask, GanTrainConfig, GanTrainer,
    LrScheduleState, ScheduleAction, SpecPair,
};
use dargan::EPS_MODULUS;
use dargan_oracles::{griffin_lim, metrics as oracle_metrics, stft as oracle_stft};
use ndarray::{s, Array1, Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

enum Status {
    Pass,
    Fail(String),
    /// Needs an external tool that is not configured here.
    Blocked(String),
}

struct Outcome {
    id: usize,
    status: Status,
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Result<Option<String>, String>) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let status = match result {
        Ok(Ok(None)) if took <= limit => Status::Pass,
        Ok(Ok(None)) => Status::Fail(format!("took {took:.1?}, limit {limit:?}")),
        Ok(Ok(Some(why))) => Status::Blocked(why),
        Ok(Err(why)) => Status::Fail(why),
        Err(p) => Status::Fail(
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    let line = match &status {
        Status::Pass => format!("PASS    [{id:2}] {name} ({took:.1?})"),
        Status::Fail(w) => format!("FAIL    [{id:2}] {name} ({took:.1?}): {w}"),
        Status::Blocked(w) => format!("BLOCKED [{id:2}] {name} ({took:.1?}): {w}"),
    };
    println!("{line}");
    Outcome { id, status }
}

fn done(r: Check) -> Result<Option<String>, String> {
    r.map(|()| None)
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn to32(w: &Waveform<f64>) -> Waveform<f32> {
    Waveform::new(w.samples().iter().map(|&v| v as f32).collect()).unwrap()
}

fn rows(x: &Array2<Complex64>) -> Vec<Vec<Complex64>> {
    x.outer_iter().map(|r| r.to_vec()).collect()
}

fn random_spec(rng: &mut ChaCha8Rng, len: usize) -> (ComplexSpectrogram<f64>, MagnitudeSpectrogram<f64>) {
    let cfg = StftConfig::default();
    let frames = cfg.num_frames(len);
    let x = Array2::from_shape_fn((frames, 161), |_| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let a = Array2::from_shape_fn((frames, 161), |_| rng.random_range(0.0..2.0));
    (ComplexSpectrogram::new(x, cfg).unwrap(), MagnitudeSpectrogram::new(a).unwrap())
}

fn max_abs_diff(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().fold(0.0, f64::max)
}

fn c1_stft_round_trip() -> Check {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let len = rng.random_range(4800..=32_000);
        let x = Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let y = istft(&stft(&x, cfg).unwrap(), cfg, len).unwrap();
        let err = max_abs_diff(x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()));
        ensure!(err < 1e-6, "waveform {i} ({len} samples): max error {err:e}");
    }
    Ok(())
}

fn c2_projections() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..20 {
        let len = rng.random_range(1600..6000);
        let (mut x, a) = random_spec(&mut rng, len);
        // a few exact zeros and sub-threshold bins exercise the zero-phase convention
        for k in 0..5 {
            x.data[[k, 3 * k]] = Complex64::new(0.0, 0.0);
            x.data[[k + 1, 3 * k + 1]] = Complex64::new(EPS_MODULUS / 2.0, -EPS_MODULUS / 3.0);
        }
        let r = proj_amplitude(&x, &a).unwrap();
        let modulus = max_abs_diff(r.data.iter().zip(&a.data).map(|(z, m)| (z.norm() - m).abs()));
        ensure!(modulus < 1e-12, "instance {i}: |P_A(X)| differs from A by {modulus:e}");
        let phase = max_abs_diff(r.data.iter().zip(&x.data).zip(&a.data).map(|((p, z), m)| {
            if z.norm() > EPS_MODULUS {
                (p - z / z.norm() * m).norm()
            } else {
                (p - Complex64::new(*m, 0.0)).norm()
            }
        }));
        ensure!(phase < 1e-12, "instance {i}: phase or zero-phase convention off by {phase:e}");

        let c = proj_consistency(&x).unwrap();
        let cc = proj_consistency(&c).unwrap();
        let idem = max_abs_diff(c.data.iter().zip(&cc.data).map(|(p, q)| (p - q).norm()));
        ensure!(idem < 1e-6, "instance {i}: P_C not idempotent ({idem:e})");

        let e = apply_phase(&a, &c).unwrap();
        let m = max_abs_diff(e.data.iter().zip(&a.data).map(|(z, m)| (z.norm() - m).abs()));
        ensure!(m < 1e-9, "instance {i}: extracted estimate modulus off by {m:e}");
    }
    Ok(())
}

fn c3_griffin_lim() -> Check {
    let cfg = StftConfig::default();
    let phi = PhiNet::<f64>::zero(PppConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..10 {
        let len = rng.random_range(1600..4000);
        let (x0, a) = random_spec(&mut rng, len);
        let proj = Consistency::new(cfg, len).unwrap();
        let amp: Vec<Vec<f64>> = a.data.outer_iter().map(|r| r.to_vec()).collect();
        let reference = griffin_lim(&oracle_stft::DEFAULT, &amp, &rows(&x0.data), len, 50, EPS_MODULUS);
        let mut x = x0;
        let mut prev = f64::INFINITY;
        for (m, want) in reference.iter().enumerate() {
            x = dgla_step(&x, &a, &phi, &proj).unwrap().x_next;
            let err = max_abs_diff(x.data.iter().zip(want.iter().flatten()).map(|(p, q)| (p - q).norm()));
            ensure!(err < 1e-9, "instance {i}, iteration {m}: chain differs from reference by {err:e}");
            let d = amplitude_residual(&x, &a).unwrap();
            ensure!(d <= prev + 1e-7, "instance {i}, iteration {m}: residual rose {prev} -> {d}");
            prev = d;
        }
    }
    Ok(())
}

fn c4_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Generator::<f64>::new(GeneratorConfig {
        num_stages: 2,
        feature_channels: vec![2, 2, 2, 2, 2],
        attention_channels: vec![2, 2, 2],
        srnn_hidden: 2,
        seed: 12,
    })
    .unwrap();
    let noisy = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 9]), |_| rng.random_range(0.0..2.0));
    let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 9]), |_| rng.random_range(0.0..2.0));
    let names: Vec<String> = g.params.names().map(String::from).collect();
    let inputs: Vec<ArrayD<f64>> = g.params.iter().map(|(_, v)| v.clone()).collect();
    let report = gradcheck::check(&inputs, 1e-4, |tape, v| {
        let p = Bound::from_vars(names.clone(), v);
        let out = g.forward_var(&p, tape.constant(noisy.clone())).pop().unwrap();
        out.sub(tape.constant(target.clone())).square().mean()
    });
    ensure!(report.max_rel_error < 1e-3, "generator: {report:?}");
    ensure!(report.entries_checked == g.params.num_elements(), "generator: not every parameter checked");

    let d = Discriminator::<f64>::new(
        DiscriminatorConfig {
            conv_channels: vec![2; 6],
            blstm_units: 3,
            fc_units: vec![4, 1],
            seed: 8,
            ..DiscriminatorConfig::default()
        },
        9,
    )
    .unwrap();
    let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 9]), |_| rng.random_range(0.0..2.0));
    let names: Vec<String> = d.params.names().map(String::from).collect();
    let inputs: Vec<ArrayD<f64>> = d.params.iter().map(|(_, v)| v.clone()).collect();
    let report = gradcheck::check(&inputs, 1e-4, |tape, v| {
        let p = Bound::from_vars(names.clone(), v);
        d.forward_var(&p, tape.constant(x.clone()), &[8, 7]).add_scalar(-1.0).square().mean()
    });
    ensure!(report.max_rel_error < 1e-3, "discriminator: {report:?}");
    ensure!(report.entries_checked == d.params.num_elements(), "discriminator: not every parameter checked");
    Ok(())
}

fn largest_singular_value(w: &Array2<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(w.nrows(), w.ncols(), w.as_slice().unwrap());
    m.singular_values().max()
}

fn c5_spectral_norm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let (r, c) = (rng.random_range(2..12), rng.random_range(2..12));
        let w = Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let u: Array1<f64> = Array1::from_shape_fn(r, |_| rng.random_range(-1.0..1.0));
        let u = &u / u.dot(&u).sqrt();
        let sn = spectral_normalize(&w, &u, 2000);
        let want = largest_singular_value(&w);
        ensure!((sn.sigma - want).abs() < 1e-6, "matrix {i}: sigma {} vs {want}", sn.sigma);
    }
    let mut d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
    d.power_iterate(100);
    for (k, w) in d.normalized_weights().iter().enumerate() {
        let s = largest_singular_value(w);
        ensure!((0.99..=1.01).contains(&s), "conv {k}: largest singular value {s}");
    }
    Ok(())
}

fn c6_losses_and_schedule() -> Check {
    ensure!(d_loss(&[1.0], &[0.0]).unwrap() == 0.0, "d_loss optimum");
    ensure!(d_loss(&[0.5], &[0.5]).unwrap() == 0.5, "d_loss at 0.5");
    let x = Array3::from_elem((1, 3, 4), 1.0);
    let m = Array2::ones((1, 3));
    ensure!(g_loss(&[1.0], &x, &x, &m, 1.0).unwrap().total == 0.0, "g_loss optimum");
    let l = g_loss(&[1.0], &x.mapv(|v| v + 0.5), &x, &m, 1.0).unwrap();
    ensure!((l.total, l.adv, l.l1) == (0.5, 0.0, 0.5), "g_loss arithmetic: {l:?}");
    let l = g_loss(&[0.0], &x, &x, &m, 1.0).unwrap();
    ensure!((l.total, l.adv) == (1.0, 1.0), "g_loss adversarial term: {l:?}");

    let mut s = LrScheduleState::new(5e-4, 1e-4);
    let mut actions = Vec::new();
    for v in [1.0, 1.1, 1.2, 1.3] {
        let (n, a) = lr_schedule_update(&s, v, 3, 10);
        s = n;
        actions.push(a);
    }
    ensure!(actions == [ScheduleAction::Continue, ScheduleAction::Continue, ScheduleAction::Continue, ScheduleAction::Halve], "{actions:?}");
    ensure!(s.lr_g == 5e-4 * 0.5 && s.lr_d == 1e-4 * 0.5, "halving is not exactly x0.5");
    let mut s = LrScheduleState::new(1.0, 1.0);
    let mut last = ScheduleAction::Continue;
    for i in 0..11 {
        let (n, a) = lr_schedule_update(&s, 1.0 + i as f64, 3, 10);
        s = n;
        ensure!(i == 10 || a != ScheduleAction::Stop, "stopped after {i} increments");
        last = a;
    }
    ensure!(last == ScheduleAction::Stop, "no stop after 10 increments");
    let mut s = LrScheduleState::new(1.0, 1.0);
    for v in [1.0, 1.1, 1.2, 1.2] {
        s = lr_schedule_update(&s, v, 3, 10).0;
    }
    ensure!(s.consec_increments == 0, "non-increase did not reset the counter");
    Ok(())
}

fn c7_mask_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mk = |rng: &mut ChaCha8Rng, t: usize| SpecPair {
        noisy: MagnitudeSpectrogram::new(Array2::from_shape_fn((t, 17), |_| rng.random_range(0.0..3.0))).unwrap(),
        clean: MagnitudeSpectrogram::new(Array2::from_shape_fn((t, 17), |_| rng.random_range(0.0..3.0))).unwrap(),
    };
    let batch = pad_and_mask(&[mk(&mut rng, 12), mk(&mut rng, 7)]).unwrap();
    let mut other = batch.clone();
    other.mags.slice_mut(s![1, 7.., ..]).fill(50.0);
    other.targets.slice_mut(s![1, 7.., ..]).fill(-3.0);
    let tiny = GeneratorConfig {
        num_stages: 3,
        feature_channels: vec![2, 2, 2, 2, 2],
        attention_channels: vec![2, 2, 2],
        srnn_hidden: 2,
        seed: 1,
    };
    let disc = DiscriminatorConfig {
        conv_channels: vec![2; 6],
        blstm_units: 3,
        fc_units: vec![4, 1],
        seed: 2,
        ..DiscriminatorConfig::default()
    };
    let mut a = GanTrainer::<f64>::new(&GanTrainConfig::default(), tiny, disc, 17).unwrap();
    let mut b = a.clone();
    for step in 0..2 {
        let (ra, rb) = (a.step(&batch).unwrap(), b.step(&other).unwrap());
        ensure!(ra == rb, "step {step}: {ra:?} vs {rb:?}");
    }
    ensure!(a.l1_on(&batch).unwrap() == b.l1_on(&other).unwrap(), "masked L1 differs");

    let est = Array3::from_shape_fn((2, 6, 5), |_| rng.random_range(0.0..1.0));
    let tgt = Array3::from_shape_fn((2, 6, 5), |_| rng.random_range(0.0..1.0));
    let mask = mask_from_lengths::<f64>(&[6, 3], 6);
    let (mut e2, mut t2) = (est.clone(), tgt.clone());
    e2.slice_mut(s![1, 3.., ..]).fill(123.0);
    t2.slice_mut(s![1, 3.., ..]).fill(-7.0);
    ensure!(
        g_loss(&[0.3, 0.8], &est, &tgt, &mask, 0.1).unwrap() == g_loss(&[0.3, 0.8], &e2, &t2, &mask, 0.1).unwrap(),
        "g_loss sees padded frames"
    );
    Ok(())
}

fn gan_pair(seed: u64, samples: usize) -> SpecPair<f32> {
    let mut rng = utterance_rng(seed, 0);
    let speech = synth_speech(&mut rng, samples);
    let noise = synth_noise(&mut rng, NoiseKind::White, samples);
    let mix = mix_at_snr(&speech, &noise, 5.0, 0).unwrap();
    spec_pair(&to32(&mix.noisy), &to32(&speech), StftConfig::default()).unwrap()
}

fn c8_gan_overfit() -> Check {
    let batch = pad_and_mask(&[gan_pair(2, 4800), gan_pair(3, 4320)]).unwrap();
    let mut trainer = GanTrainer::<f32>::new(
        &GanTrainConfig::default(),
        GeneratorConfig::default(),
        DiscriminatorConfig::default(),
        161,
    )
    .unwrap();
    ensure!(trainer.generator.config().num_stages == 3, "expected Q = 3");
    let mut at10 = f64::NAN;
    for step in 1..=200 {
        let r = trainer.step(&batch).map_err(|e| e.to_string())?;
        ensure!(
            r.d_loss.is_finite() && r.g_adv.is_finite() && r.g_l1.is_finite(),
            "step {step}: non-finite loss {r:?}"
        );
        if step == 10 {
            at10 = r.g_l1;
        }
    }
    ensure!(trainer.generator.params.all_finite(), "non-finite generator weights");
    let last = trainer.l1_on(&batch).unwrap() as f64;
    println!("        criterion 8: masked L1 {at10:.4} at step 10, {last:.4} after step 200 ({:.1}%)", 100.0 * last / at10);
    ensure!(last <= 0.5 * at10, "final L1 {last} above half of step-10 value {at10}");
    Ok(())
}

fn ppp_pair(g: &Generator<f32>, seed: u64, samples: usize) -> PppPair<f32> {
    let mut rng = utterance_rng(seed, 0);
    let speech = synth_speech(&mut rng, samples);
    let noise = synth_noise(&mut rng, NoiseKind::White, samples);
    let mix = mix_at_snr(&speech, &noise, 5.0, 0).unwrap();
    make_ppp_pair(g, &to32(&mix.noisy), &to32(&speech), StftConfig::default()).unwrap()
}

fn c9_ppp_overfit() -> Check {
    let g = Generator::<f32>::new(GeneratorConfig::default()).unwrap();
    let pairs = [ppp_pair(&g, 1, 4800), ppp_pair(&g, 2, 4320)];
    let batch: Vec<&PppPair<f32>> = pairs.iter().collect();
    let cfg = PppConfig::default();
    ensure!(cfg.iterations == 5, "expected M = 5");
    let mut t = PppTrainer::<f32>::new(cfg).unwrap();
    let (mut at10, mut last) = (f64::NAN, f64::NAN);
    for step in 1..=300 {
        last = t.step(&batch).map_err(|e| e.to_string())?;
        ensure!(last.is_finite(), "step {step}: non-finite MAE");
        if step == 10 {
            at10 = last;
        }
    }
    println!("        criterion 9: MAE {at10:.4} at step 10, {last:.4} at step 300 ({:.1}%)", 100.0 * last / at10);
    ensure!(last <= 0.5 * at10, "MAE {last} above half of step-10 value {at10}");
    Ok(())
}

fn c10_discriminator_lengths() -> Check {
    let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mags = Vec::new();
    for t in [10, 50, 123] {
        let m = MagnitudeSpectrogram::new(Array2::from_shape_fn((t, 161), |_| rng.random_range(0.0..2.0))).unwrap();
        let s = d.score(&m).map_err(|e| e.to_string())?;
        ensure!(s.is_finite(), "T = {t}: score {s}");
        let dup = d.score_batch(&[m.clone(), m.clone()]).unwrap();
        ensure!(dup[0] == dup[1] && dup[0] == s, "T = {t}: duplicated inputs scored {dup:?} vs {s}");
        mags.push(m);
    }
    let all = d.score_batch(&mags).unwrap();
    ensure!(all.len() == 3, "expected one score per utterance, got {}", all.len());
    Ok(())
}

fn lowpass(x: &Waveform<f64>) -> Waveform<f64> {
    let s = x.samples();
    Waveform::new(
        (0..s.len())
            .map(|i| 0.5 * s[i] + 0.3 * s[i.saturating_sub(1)] + 0.2 * s[i.saturating_sub(2)])
            .collect(),
    )
    .unwrap()
}

fn metric_files(dir: &Path) -> Vec<(PathBuf, PathBuf)> {
    (0..5u64)
        .map(|i| {
            let clean = synth_speech(&mut utterance_rng(100 + i, 0), 16_000);
            let est = match i {
                0..=2 => {
                    let kind = NoiseKind::ALL[i as usize];
                    let noise = synth_noise(&mut utterance_rng(200 + i, 0), kind, clean.len());
                    mix_at_snr(&clean, &noise, [10.0, 0.0, 5.0][i as usize], 0).unwrap().noisy
                }
                3 => lowpass(&clean),
                _ => Waveform::new(clean.samples().iter().map(|v| 0.7 * v).collect()).unwrap(),
            };
            let (c, e) = (dir.join(format!("clean_{i}.wav")), dir.join(format!("est_{i}.wav")));
            write_wav(&c, &clean).unwrap();
            write_wav(&e, &est).unwrap();
            (c, e)
        })
        .collect()
}

/// Last whitespace-separated numbers printed by `cmd`.
fn run_template(template: &str, clean: &Path, est: &Path) -> Result<Vec<f64>, String> {
    let cmd = template
        .replace("{clean}", &clean.display().to_string())
        .replace("{est}", &est.display().to_string());
    let out = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "`{cmd}` failed");
    Ok(String::from_utf8_lossy(&out.stdout)
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect())
}

/// Environment variable naming a command that runs the reference composite
/// toolkit and prints `pesq csig cbak covl` for `{clean}` and `{est}`.
const TOOLKIT_ENV: &str = "DARGAN_COMPOSITE_TOOLKIT_CMD";

fn c11_metrics() -> Result<Option<String>, String> {
    let dir = tempfile::tempdir().unwrap();
    let files = metric_files(dir.path());
    for (c, e) in &files {
        let (c, e) = (read_wav::<f64>(c).unwrap(), read_wav::<f64>(e).unwrap());
        let (cs, es) = (c.samples(), e.samples());
        let v = seg_snr(&c, &e).unwrap();
        let o = oracle_metrics::seg_snr(cs, es);
        ensure!((v - o).abs() < 1e-6, "segSNR {v} vs oracle {o}");
        let v = llr(&c, &e).unwrap();
        let o = oracle_metrics::llr(cs, es, LPC_ORDER);
        ensure!((v - o).abs() < 1e-4, "LLR {v} vs oracle {o}");
        let v = wss(&c, &e).unwrap();
        let o = oracle_metrics::wss(cs, es);
        ensure!((v - o).abs() < 1e-3, "WSS {v} vs oracle {o}");
    }
    let identity: Vec<(PathBuf, PathBuf)> = files.iter().map(|(c, _)| (c.clone(), c.clone())).collect();
    let report = evaluate_corpus(&identity, None).map_err(|e| e.to_string())?;
    for f in &report.files {
        let s = &f.scores;
        ensure!((s.llr, s.wss, s.segsnr) == (0.0, 0.0, 35.0), "identity {}: {s:?}", f.file.display());
    }

    let Ok(template) = std::env::var(TOOLKIT_ENV) else {
        return Ok(Some(format!(
            "sub-measures match their oracles; the composite cross-check needs the reference toolkit, set {TOOLKIT_ENV}"
        )));
    };
    let mut worst = 0.0f64;
    for (c, e) in &files {
        let got = run_template(&template, c, e)?;
        ensure!(got.len() >= 4, "toolkit printed {got:?}");
        let [pesq, csig, cbak, covl] = got[got.len() - 4..] else { unreachable!() };
        let (cw, ew) = (read_wav::<f64>(c).unwrap(), read_wav::<f64>(e).unwrap());
        let ours = composite(pesq, llr(&cw, &ew).unwrap(), wss(&cw, &ew).unwrap(), seg_snr(&cw, &ew).unwrap());
        for (a, b) in [(ours.csig, csig), (ours.cbak, cbak), (ours.covl, covl)] {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst < 1e-3, "composite differs from the toolkit by {worst}");
    Ok(None)
}

fn c12_mixing() -> Check {
    for (i, &snr) in TRAIN_SNRS.iter().chain(TEST_SNRS.iter()).enumerate() {
        let mut rng = utterance_rng(12, i);
        let len = rng.random_range(5000..20_000);
        let speech = synth_speech(&mut rng, len);
        let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
        let noise = synth_noise(&mut rng, kind, len + 3000);
        let offset = rng.random_range(0..3000);
        let m = mix_at_snr(&speech, &noise, snr, offset).map_err(|e| e.to_string())?;
        let got = measure_snr(speech.samples(), m.noise.samples());
        ensure!((got - snr).abs() < 1e-9, "{snr} dB requested, {got} measured");
    }
    Ok(())
}

fn dargan(run_dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dargan"))
        .env("DARGAN_RUN_DIR", run_dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`dargan {}` exited with {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Small corpus and model settings for the end-to-end runs.
const TOY: &[&str] = &[
    "--set",
    "seed=3",
    "--set",
    "data.train_utterances=4",
    "--set",
    "data.val_count=1",
    "--set",
    "data.test_utterances=2",
    "--set",
    "data.duration_s=0.4",
    "--set",
    "data.noises=[\"white\"]",
    "--set",
    "data.train_snrs=[0.0]",
    "--set",
    "training.batch=3",
    "--set",
    "training.stop_patience=1000",
    "--set",
    "training.halve_patience=999",
    "--set",
    "phase.epochs=2",
    "--set",
    "phase.iterations=2",
];

fn toy_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = TOY.to_vec();
    v.extend_from_slice(extra);
    v
}

fn c13_end_to_end() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    dargan(&run, &toy_args(&["mix"]))?;
    dargan(&run, &toy_args(&["--set", "training.epochs=60", "train"]))?;
    let noisy = run.join("corpus/train/noisy");
    let clean = run.join("corpus/train/clean");
    let enhanced = tmp.path().join("enhanced");
    let refined = tmp.path().join("refined");
    let weights = run.join("ppp/phi.ckpt");
    let (noisy_s, enhanced_s, refined_s) = (noisy.display().to_string(), enhanced.display().to_string(), refined.display().to_string());
    dargan(&run, &toy_args(&["enhance", "--input", &noisy_s, "--out", &enhanced_s]))?;
    dargan(
        &run,
        &toy_args(&["enhance", "--input", &noisy_s, "--out", &refined_s, "--ppp-weights", &weights.display().to_string()]),
    )?;
    let clean_s = clean.display().to_string();
    let report = tmp.path().join("report");
    dargan(
        &run,
        &toy_args(&["evaluate", "--clean", &clean_s, "--est", &enhanced_s, "--noisy", &noisy_s, "--plots", "--out", &report.display().to_string()]),
    )?;
    ensure!(report.join("metrics.csv").exists(), "no metrics table");

    // utterances listed in the training manifest
    let manifest = fs::read_to_string(run.join("manifests/train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let name = Path::new(first["noisy"].as_str().unwrap()).file_name().unwrap().to_owned();
    let c = read_wav::<f64>(clean.join(&name)).unwrap();
    let before = seg_snr(&c, &read_wav::<f64>(noisy.join(&name)).unwrap()).unwrap();
    let after = seg_snr(&c, &read_wav::<f64>(enhanced.join(&name)).unwrap()).unwrap();
    println!("        criterion 13: segSNR {before:.3} dB noisy, {after:.3} dB enhanced ({})", name.to_string_lossy());
    ensure!(after >= before, "enhanced segSNR {after} below noisy {before}");
    Ok(())
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c14_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        // same relative layout; the run directory itself differs
        let run = tmp.path().join(format!("r{k}"));
        fs::create_dir_all(&run).unwrap();
        let args = toy_args(&["--set", "training.epochs=2"]);
        let mut mix = args.clone();
        mix.push("mix");
        let mut train = args.clone();
        train.push("train");
        let out = Command::new(env!("CARGO_BIN_EXE_dargan")).current_dir(&run).env("DARGAN_RUN_DIR", "run").args(&mix).output().unwrap();
        ensure!(out.status.success(), "mix: {}", String::from_utf8_lossy(&out.stderr));
        let out = Command::new(env!("CARGO_BIN_EXE_dargan")).current_dir(&run).env("DARGAN_RUN_DIR", "run").args(&train).output().unwrap();
        ensure!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
        runs.push(run.join("run"));
    }
    let (a, b) = (tree(&runs[0].join("corpus")), tree(&runs[1].join("corpus")));
    ensure!(!a.is_empty() && a == b, "corpora differ");
    for sub in ["checkpoints", "ppp"] {
        let (a, b) = (tree(&runs[0].join(sub)), tree(&runs[1].join(sub)));
        ensure!(!a.is_empty(), "no {sub} written");
        ensure!(a == b, "{sub} differ between identical runs");
    }
    let best = |r: &PathBuf| fs::read(r.join("generator_best.ckpt")).unwrap();
    ensure!(best(&runs[0]) == best(&runs[1]), "best generators differ");
    for m in ["train", "val", "test"] {
        let read = |r: &PathBuf| fs::read(r.join(format!("manifests/{m}.jsonl"))).unwrap();
        ensure!(read(&runs[0]) == read(&runs[1]), "{m} manifests differ");
    }
    Ok(())
}

#[test]
fn acceptance() {
    let outcomes = vec![
        run(1, "STFT round trip", secs(10), || done(c1_stft_round_trip())),
        run(2, "projection suite", secs(10), || done(c2_projections())),
        run(3, "Griffin-Lim reduction and monotonicity", secs(30), || done(c3_griffin_lim())),
        run(4, "gradient checks", secs(120), || done(c4_gradients())),
        run(5, "spectral normalization", secs(10), || done(c5_spectral_norm())),
        run(6, "loss and schedule units", secs(1), || done(c6_losses_and_schedule())),
        run(7, "mask invariance", secs(1), || done(c7_mask_invariance())),
        run(8, "GAN overfit smoke", secs(300), || done(c8_gan_overfit())),
        run(9, "phase denoiser overfit smoke", secs(300), || done(c9_ppp_overfit())),
        run(10, "discriminator length invariance", secs(10), || done(c10_discriminator_lengths())),
        run(11, "metrics oracle", secs(30), c11_metrics),
        run(12, "mixing exactness", secs(10), || done(c12_mixing())),
        run(13, "end-to-end smoke", secs(900), || done(c13_end_to_end())),
        run(14, "determinism", secs(900), || done(c14_determinism())),
    ];
    let failed: Vec<usize> = outcomes
        .iter()
        .filter(|o| matches!(o.status, Status::Fail(_)))
        .map(|o| o.id)
        .collect();
    let blocked = outcomes.iter().filter(|o| matches!(o.status, Status::Blocked(_))).count();
    println!(
        "acceptance: {} passed, {} failed, {blocked} blocked",
        outcomes.len() - failed.len() - blocked,
        failed.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
