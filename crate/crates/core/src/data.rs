//! SNR-controlled mixing, a synthetic speech/noise corpus, and manifests.
//!
//! Manifests are JSON Lines files with one record per utterance. Paths inside
//! a manifest are stored relative to the manifest's own directory.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::dsp::{combine_mag_phase, read_wav, split_mag_phase, stft, write_wav, ComplexSpectrogram, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::training::SpecPair;
use crate::Scalar;

pub const TRAIN_SNRS: [f64; 4] = [15.0, 10.0, 5.0, 0.0];
pub const TEST_SNRS: [f64; 4] = [17.5, 12.5, 7.5, 2.5];

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `10 log10(P_speech / P_noise)` over the whole utterance.
pub fn measure_snr(speech: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(speech) / power(noise)).log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform<f64>,
    /// The scaled noise actually added.
    pub noise: Waveform<f64>,
    pub gain: f64,
    /// Samples clipped to [-1, 1] in `noisy`.
    pub clipped: usize,
}

/// Adds `noise[offset..offset + len]`, scaled to reach `snr_db` over the full
/// utterance, to `speech`.
pub fn mix_at_snr(speech: &Waveform<f64>, noise: &Waveform<f64>, snr_db: f64, offset: usize) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr_db must be finite, got {snr_db}")));
    }
    let n = speech.len();
    if n == 0 || offset + n > noise.len() {
        return Err(Error::invalid(format!(
            "noise of {} samples cannot cover {} speech samples at offset {offset}",
            noise.len(),
            n
        )));
    }
    let s = speech.samples();
    let seg = &noise.samples()[offset..offset + n];
    let (ps, pn) = (power(s), power(seg));
    if ps <= 0.0 || pn <= 0.0 {
        return Err(Error::invalid("speech and noise must have nonzero power"));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = seg.iter().map(|v| v * gain).collect();
    let mut clipped = 0;
    let noisy = s
        .iter()
        .zip(&scaled)
        .map(|(a, b)| {
            let v = a + b;
            if v.abs() > 1.0 {
                clipped += 1;
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy)?,
        noise: Waveform::new(scaled)?,
        gain,
        clipped,
    })
}

/// Uniform crop offset for mixing `speech_len` samples out of `noise_len`.
pub fn random_offset<R: Rng>(rng: &mut R, speech_len: usize, noise_len: usize) -> usize {
    rng.random_range(0..=noise_len.saturating_sub(speech_len))
}

/// Harmonic speech-like signal: voiced syllables with a wandering pitch and
/// formant-shaped harmonics, separated by short pauses.
pub fn synth_speech<R: Rng>(rng: &mut R, samples: usize) -> Waveform<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; samples];
    let f0_base = rng.random_range(95.0..230.0);
    let mut pos = (rng.random_range(0.02..0.08) * fs) as usize;
    while pos < samples {
        let len = ((rng.random_range(0.12..0.32) * fs) as usize).min(samples - pos);
        let formants = [
            (rng.random_range(300.0..850.0), 90.0),
            (rng.random_range(900.0..2300.0), 130.0),
            (rng.random_range(2400.0..3300.0), 180.0),
        ];
        let drift = rng.random_range(-0.15..0.15);
        let vib_rate = rng.random_range(3.0..6.0);
        let vib_phase = rng.random_range(0.0..2.0 * PI);
        let level = rng.random_range(0.6..1.0);
        let ramp = (0.02 * fs) as usize;
        let max_h = (7000.0 / f0_base) as usize;
        let mut phases: Vec<f64> = (0..max_h).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for i in 0..len {
            let t = i as f64 / fs;
            let frac = i as f64 / len as f64;
            let f0 = f0_base * (1.0 + drift * frac + 0.04 * (2.0 * PI * vib_rate * t + vib_phase).sin());
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if i + ramp > len {
                0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut acc = 0.0;
            for (h, ph) in phases.iter_mut().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f >= 7500.0 {
                    break;
                }
                let shape: f64 = formants
                    .iter()
                    .map(|&(fc, bw)| 1.0 / (1.0 + ((f - fc) / bw).powi(2)).sqrt())
                    .sum();
                acc += shape / ((h + 1) as f64).sqrt() * ph.sin();
                *ph += 2.0 * PI * f / fs;
            }
            out[pos + i] += level * env * acc;
        }
        pos += len + (rng.random_range(0.03..0.12) * fs) as usize;
    }
    // faint breath noise keeps pauses from being digitally silent
    for v in out.iter_mut() {
        *v += 1e-4 * rng.sample::<f64, _>(StandardNormal);
    }
    let rms = power(&out).sqrt();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = (0.08 / rms).min(0.45 / peak);
    Waveform::new(out.into_iter().map(|v| v * g).collect()).expect("synthesized samples are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }
}

pub fn synth_noise<R: Rng>(rng: &mut R, kind: NoiseKind, samples: usize) -> Waveform<f64> {
    let mut white = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let out = match kind {
        NoiseKind::White => white(samples),
        NoiseKind::Pink => {
            // Kellet's economy filter, about -3 dB/octave over the audio band
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white(samples)
                .into_iter()
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; samples];
            for _ in 0..6 {
                let talker = synth_speech(rng, samples);
                acc.iter_mut().zip(talker.samples()).for_each(|(a, b)| *a += b);
            }
            acc
        }
    };
    let rms = power(&out).sqrt().max(1e-12);
    Waveform::new(out.into_iter().map(|v| 0.1 * v / rms).collect()).expect("noise samples are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Train,
    Test,
}

impl Profile {
    pub fn snr_levels(self) -> &'static [f64] {
        match self {
            Profile::Train => &TRAIN_SNRS,
            Profile::Test => &TEST_SNRS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub duration: f64,
    pub snr_db: f64,
    pub noise: NoiseKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(split: Split, mut entries: Vec<ManifestEntry>) -> Self {
        entries.iter_mut().for_each(|e| e.split = split);
        Manifest { split, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes one JSON record per line, paths relative to the manifest's directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut text = String::new();
        for e in &self.entries {
            let mut e = e.clone();
            e.noisy = relative_to(&e.noisy, base);
            e.clean = relative_to(&e.clean, base);
            text.push_str(&serde_json::to_string(&e)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and resolves its paths against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::invalid(format!("{}:{}: {err}", path.display(), i + 1)))?;
            e.noisy = base.join(&e.noisy);
            e.clean = base.join(&e.clean);
            entries.push(e);
        }
        let split = entries
            .first()
            .map(|e| e.split)
            .ok_or_else(|| Error::invalid(format!("manifest {} is empty", path.display())))?;
        if entries.iter().any(|e| e.split != split) {
            return Err(Error::invalid(format!("manifest {} mixes splits", path.display())));
        }
        Ok(Manifest { split, entries })
    }

    /// Every listed file exists and decodes.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let n = read_wav::<f64>(&e.noisy)?;
            let c = read_wav::<f64>(&e.clean)?;
            if n.len() != c.len() {
                return Err(Error::invalid(format!(
                    "{} and {} differ in length",
                    e.noisy.display(),
                    e.clean.display()
                )));
            }
        }
        Ok(())
    }
}

fn relative_to(p: &Path, base: &Path) -> PathBuf {
    // both sides absolute so a relative run directory still yields `../corpus/...`
    let abs = |q: &Path| std::path::absolute(q).unwrap_or_else(|_| q.to_path_buf());
    pathdiff::diff_paths(abs(p), abs(base)).unwrap_or_else(|| p.to_path_buf())
}

/// Checks that no path is listed in more than one of `manifests`.
pub fn check_disjoint(manifests: &[&Manifest]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for m in manifests {
        for e in &m.entries {
            for p in [&e.noisy, &e.clean] {
                if !seen.insert(p.clone()) {
                    return Err(Error::invalid(format!("{} appears in more than one split", p.display())));
                }
            }
        }
    }
    Ok(())
}

/// Per-utterance generator, independent of how many utterances precede it.
pub fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub manifest: Manifest,
    /// Measured full-utterance SNR per entry, before WAV quantization.
    pub measured_snr: Vec<f64>,
    pub clipped: usize,
}

/// Writes `n_utts` clean/noisy WAV pairs under `dir/{clean,noisy}` and returns
/// their manifest. Lengths vary by up to 20% around `duration_s`.
pub fn synth_corpus(
    dir: impl AsRef<Path>,
    n_utts: usize,
    duration_s: f64,
    profile: Profile,
    seed: u64,
    noises: &[NoiseKind],
) -> Result<CorpusReport> {
    synth_corpus_at(dir, n_utts, duration_s, profile, profile.snr_levels(), seed, noises)
}

/// [`synth_corpus`] cycling through `levels` instead of the profile's SNRs.
pub fn synth_corpus_at(
    dir: impl AsRef<Path>,
    n_utts: usize,
    duration_s: f64,
    profile: Profile,
    levels: &[f64],
    seed: u64,
    noises: &[NoiseKind],
) -> Result<CorpusReport> {
    if levels.is_empty() || levels.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("SNR levels must be finite and non-empty, got {levels:?}")));
    }
    if n_utts < 2 {
        return Err(Error::invalid(format!("n_utts must be >= 2, got {n_utts}")));
    }
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    if noises.is_empty() {
        return Err(Error::invalid("at least one noise kind is required"));
    }
    let dir = dir.as_ref();
    let prefix = match profile {
        Profile::Train => "train",
        Profile::Test => "test",
    };
    for sub in ["clean", "noisy"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let split = match profile {
        Profile::Train => Split::Train,
        Profile::Test => Split::Test,
    };
    let mut entries = Vec::with_capacity(n_utts);
    let mut measured = Vec::with_capacity(n_utts);
    let mut clipped = 0;
    for i in 0..n_utts {
        let mut rng = utterance_rng(seed, i);
        let len = (duration_s * rng.random_range(0.8..1.2) * SAMPLE_RATE as f64).round().max(1.0) as usize;
        let kind = noises[i % noises.len()];
        let snr = levels[i % levels.len()];
        let speech = synth_speech(&mut rng, len);
        let noise = synth_noise(&mut rng, kind, len + SAMPLE_RATE as usize / 4);
        let offset = random_offset(&mut rng, len, noise.len());
        let mix = mix_at_snr(&speech, &noise, snr, offset)?;
        measured.push(measure_snr(speech.samples(), mix.noise.samples()));
        clipped += mix.clipped;
        let name = format!("{prefix}_{i:05}.wav");
        let clean = dir.join("clean").join(&name);
        let noisy = dir.join("noisy").join(&name);
        write_wav(&clean, &speech)?;
        write_wav(&noisy, &mix.noisy)?;
        entries.push(ManifestEntry {
            split,
            noisy,
            clean,
            duration: len as f64 / SAMPLE_RATE as f64,
            snr_db: snr,
            noise: kind,
            seed,
        });
    }
    Ok(CorpusReport {
        manifest: Manifest::new(split, entries),
        measured_snr: measured,
        clipped,
    })
}

/// How many entries go to validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValSize {
    Count(usize),
    Fraction(f64),
}

/// Seeded random split of a training manifest into train and validation parts.
pub fn split_manifest(manifest: &Manifest, val: ValSize, seed: u64) -> Result<(Manifest, Manifest)> {
    let total = manifest.len();
    let n_val = match val {
        ValSize::Count(n) => n,
        ValSize::Fraction(f) if (0.0..1.0).contains(&f) => (f * total as f64).round() as usize,
        ValSize::Fraction(f) => return Err(Error::invalid(format!("val fraction {f} outside [0, 1)"))),
    };
    if n_val == 0 || n_val >= total {
        return Err(Error::invalid(format!(
            "validation size {n_val} must be in [1, {total})"
        )));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (v, t) = idx.split_at(n_val);
    let (mut v, mut t) = (v.to_vec(), t.to_vec());
    v.sort_unstable();
    t.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| manifest.entries[i].clone()).collect();
    Ok((Manifest::new(Split::Train, pick(&t)), Manifest::new(Split::Val, pick(&v))))
}

/// Gain bringing `noisy` to unit RMS. Silent input gets gain 1.
///
/// Networks see every utterance at this level; the same gain is applied to
/// the clean reference and undone on the enhanced waveform.
pub fn level_gain<T: Scalar>(noisy: &Waveform<T>) -> T {
    let p = power(&noisy.samples().iter().map(|v| v.as_f64()).collect::<Vec<_>>());
    if p > 0.0 {
        T::lit(1.0 / p.sqrt())
    } else {
        T::one()
    }
}

pub fn scale_waveform<T: Scalar>(wave: &Waveform<T>, gain: T) -> Waveform<T> {
    Waveform::with_rate(wave.samples().iter().map(|&v| v * gain).collect(), wave.sample_rate())
        .expect("scaling keeps a valid waveform")
}

/// Level-normalized magnitude spectra of one manifest entry.
pub fn spec_pair<T: Scalar>(noisy: &Waveform<T>, clean: &Waveform<T>, cfg: StftConfig) -> Result<SpecPair<T>> {
    if noisy.len() != clean.len() {
        return Err(Error::invalid(format!(
            "noisy has {} samples, clean {}",
            noisy.len(),
            clean.len()
        )));
    }
    let g = level_gain(noisy);
    Ok(SpecPair {
        noisy: stft(&scale_waveform(noisy, g), cfg)?.magnitude(),
        clean: stft(&scale_waveform(clean, g), cfg)?.magnitude(),
    })
}

/// Reads and transforms every entry of `manifest`.
pub fn load_spec_pairs<T: Scalar>(manifest: &Manifest, cfg: StftConfig) -> Result<Vec<SpecPair<T>>> {
    manifest
        .entries
        .iter()
        .map(|e| spec_pair(&read_wav::<T>(&e.noisy)?, &read_wav::<T>(&e.clean)?, cfg))
        .collect()
}

/// Inputs and target for phase post-processing of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PppPair<T> {
    /// Signal length in samples.
    pub len: usize,
    /// Generator output `A`.
    pub amplitude: Array2<T>,
    /// `A` combined with the noisy phase.
    pub enhanced: ComplexSpectrogram<T>,
    pub clean: ComplexSpectrogram<T>,
}

impl<T: Scalar> PppPair<T> {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut ar = Archive::new(serde_json::json!({ "kind": "ppp-pair", "stft": self.clean.config, "len": self.len }))?;
        ar.insert("amplitude", &self.amplitude.clone().into_dyn());
        for (name, spec) in [("enhanced", &self.enhanced), ("clean", &self.clean)] {
            ar.insert(format!("{name}.re"), &spec.data.mapv(|z| z.re).into_dyn());
            ar.insert(format!("{name}.im"), &spec.data.mapv(|z| z.im).into_dyn());
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            stft: StftConfig,
            len: usize,
        }
        let h: Header = ar.header_as()?;
        let two = |name: &str| -> Result<Array2<T>> {
            ar.get::<T>(name)?
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint(format!("`{name}` is not two-dimensional")))
        };
        let spec = |name: &str| -> Result<ComplexSpectrogram<T>> {
            let re = two(&format!("{name}.re"))?;
            let im = two(&format!("{name}.im"))?;
            if re.dim() != im.dim() {
                return Err(Error::Checkpoint(format!("`{name}` real/imaginary shapes differ")));
            }
            let mut data = Array2::from_elem(re.dim(), Complex::new(T::zero(), T::zero()));
            ndarray::Zip::from(&mut data).and(&re).and(&im).for_each(|z, &r, &i| *z = Complex::new(r, i));
            ComplexSpectrogram::new(data, h.stft)
        };
        Ok(PppPair {
            len: h.len,
            amplitude: two("amplitude")?,
            enhanced: spec("enhanced")?,
            clean: spec("clean")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Enhances one noisy waveform with `generator` and pairs it with the clean spectrum.
pub fn make_ppp_pair<T: Scalar>(
    generator: &Generator<T>,
    noisy: &Waveform<T>,
    clean: &Waveform<T>,
    cfg: StftConfig,
) -> Result<PppPair<T>> {
    if noisy.len() != clean.len() {
        return Err(Error::invalid(format!(
            "noisy has {} samples, clean {}",
            noisy.len(),
            clean.len()
        )));
    }
    let g = level_gain(noisy);
    let noisy_spec = stft(&scale_waveform(noisy, g), cfg)?;
    let clean_spec = stft(&scale_waveform(clean, g), cfg)?;
    let (mag, phase) = split_mag_phase(&noisy_spec);
    let amp = generator.forward(&mag)?.pop().expect("at least one stage");
    let enhanced = combine_mag_phase(&amp, &phase)?;
    Ok(PppPair {
        len: noisy.len(),
        amplitude: amp.data,
        enhanced,
        clean: clean_spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PppPairEntry {
    pub split: Split,
    pub pair: PathBuf,
    pub noisy: PathBuf,
}

/// Runs `generator` over every utterance of `manifests`, storing one pair
/// archive per utterance under `out_dir`, and writes `out_dir/pairs.jsonl`.
pub fn build_ppp_pairs<T: Scalar>(
    manifests: &[&Manifest],
    generator: &Generator<T>,
    cfg: StftConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PppPairEntry>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::new();
    let mut text = String::new();
    for m in manifests {
        for e in &m.entries {
            let noisy = read_wav::<T>(&e.noisy)?;
            let clean = read_wav::<T>(&e.clean)?;
            let pair = make_ppp_pair(generator, &noisy, &clean, cfg)?;
            let stem = e.noisy.file_stem().and_then(|s| s.to_str()).unwrap_or("utt");
            let path = out_dir.join(format!("{stem}.ppp"));
            pair.save(&path)?;
            let entry = PppPairEntry {
                split: m.split,
                pair: path.clone(),
                noisy: e.noisy.clone(),
            };
            let mut rel = entry.clone();
            rel.pair = relative_to(&path, out_dir);
            text.push_str(&serde_json::to_string(&rel)?);
            text.push('\n');
            out.push(entry);
        }
    }
    let index = out_dir.join("pairs.jsonl");
    fs::write(&index, text).map_err(|e| Error::io(&index, e))?;
    Ok(out)
}
