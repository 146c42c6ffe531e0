//! Objective quality measures: segmental SNR, LPC log-likelihood ratio,
//! weighted spectral slope, the CSIG/CBAK/COVL composites and an external
//! PESQ adapter.
//!
//! Framing follows the widely used composite-measure toolkit at 16 kHz:
//! 512-sample Hann frames with 256-sample hop, `floor((L - 512) / 256)` frames.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, Waveform};
use crate::error::{Error, Result};
use crate::Scalar;

pub const FRAME: usize = 512;
pub const HOP: usize = 256;
pub const LPC_ORDER: usize = 10;
pub const SEGSNR_RANGE: (f64, f64) = (-10.0, 35.0);
/// Fraction of best frames kept by LLR and WSS.
pub const KEEP_FRACTION: f64 = 0.95;
/// Frames more than this far below the loudest clean frame count as silence for segSNR.
pub const ACTIVE_FLOOR_DB: f64 = 60.0;

fn samples<T: Scalar>(w: &Waveform<T>) -> Vec<f64> {
    w.samples().iter().map(|v| v.as_f64()).collect()
}

fn check_pair<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if clean.len() != est.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, estimate {}",
            clean.len(),
            est.len()
        )));
    }
    if clean.len() < FRAME + HOP {
        return Err(Error::invalid(format!(
            "signals of {} samples are shorter than two analysis frames",
            clean.len()
        )));
    }
    Ok((samples(clean), samples(est)))
}

/// Symmetric Hann window without zero endpoints.
fn hann(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos()))
        .collect()
}

/// Windowed analysis frames of `x`.
fn frames(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hann(FRAME);
    let n = (x.len() - FRAME) / HOP;
    (0..n)
        .map(|t| x[t * HOP..t * HOP + FRAME].iter().zip(&w).map(|(a, b)| a * b).collect())
        .collect()
}

/// Mean of the smallest `KEEP_FRACTION` of `values`.
fn trimmed_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let keep = ((values.len() as f64 * KEEP_FRACTION).round() as usize).clamp(1, values.len());
    values[..keep].iter().sum::<f64>() / keep as f64
}

/// Segmental SNR in dB with `clean` as reference.
pub fn seg_snr<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>) -> Result<f64> {
    let (c, e) = check_pair(clean, est)?;
    let (fc, fe) = (frames(&c), frames(&e));
    let energy: Vec<f64> = fc.iter().map(|f| f.iter().map(|v| v * v).sum()).collect();
    let loudest = energy.iter().cloned().fold(0.0, f64::max);
    if loudest <= 0.0 {
        return Err(Error::invalid("clean signal is silent"));
    }
    let floor = loudest * 10f64.powf(-ACTIVE_FLOOR_DB / 10.0);
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((a, b), &sig) in fc.iter().zip(&fe).zip(&energy) {
        if sig < floor {
            continue;
        }
        let noise: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let snr = 10.0 * (sig / (noise + f64::EPSILON) + f64::EPSILON).log10();
        acc += snr.clamp(SEGSNR_RANGE.0, SEGSNR_RANGE.1);
        n += 1;
    }
    Ok(acc / n as f64)
}

/// Autocorrelation lags `0..=order`.
fn autocorr(x: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| x[..x.len() - k].iter().zip(&x[k..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Levinson-Durbin recursion: prediction polynomial `[1, -a1, ..., -ap]`.
pub fn lpc(r: &[f64]) -> Option<Vec<f64>> {
    let p = r.len() - 1;
    if r[0] <= 0.0 {
        return None;
    }
    let mut a = vec![0.0; p + 1];
    let mut err = r[0];
    for i in 1..=p {
        let acc: f64 = (1..i).map(|j| a[j] * r[i - j]).sum();
        let k = (r[i] - acc) / err;
        let prev = a.clone();
        a[i] = k;
        for j in 1..i {
            a[j] = prev[j] - k * prev[i - j];
        }
        err *= 1.0 - k * k;
        if err <= 0.0 {
            break;
        }
    }
    let mut poly = vec![1.0];
    poly.extend(a[1..].iter().map(|v| -v));
    Some(poly)
}

/// `a^T R a` with `R` the Toeplitz matrix of `r`.
fn quad_toeplitz(a: &[f64], r: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, ai) in a.iter().enumerate() {
        for (j, aj) in a.iter().enumerate() {
            s += ai * aj * r[i.abs_diff(j)];
        }
    }
    s
}

/// Per-frame LLR values, skipping frames where either signal is silent.
pub fn llr_frames<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>) -> Result<Vec<f64>> {
    let (c, e) = check_pair(clean, est)?;
    let mut out = Vec::new();
    for (a, b) in frames(&c).iter().zip(&frames(&e)) {
        let rc = autocorr(a, LPC_ORDER);
        let re = autocorr(b, LPC_ORDER);
        let (Some(ac), Some(ae)) = (lpc(&rc), lpc(&re)) else {
            continue;
        };
        let num = quad_toeplitz(&ae, &rc);
        let den = quad_toeplitz(&ac, &rc);
        if den > 0.0 && num > 0.0 {
            out.push((num / den).ln().max(0.0));
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("every frame is silent"));
    }
    Ok(out)
}

pub fn llr<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>) -> Result<f64> {
    Ok(trimmed_mean(llr_frames(clean, est)?))
}

const CENTER_HZ: [f64; 25] = [
    50.0, 120.0, 190.0, 260.0, 330.0, 400.0, 470.0, 540.0, 617.372, 703.378, 798.717, 904.128, 1020.38, 1148.30,
    1288.72, 1442.54, 1610.70, 1794.16, 1993.93, 2211.08, 2446.71, 2701.97, 2978.04, 3276.17, 3597.63,
];
const BANDWIDTH_HZ: [f64; 25] = [
    70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 77.3724, 86.0056, 95.3398, 105.411, 116.256, 127.914, 140.423, 153.823,
    168.154, 183.457, 199.776, 217.153, 235.631, 255.255, 276.072, 298.126, 321.465, 346.136,
];
const WSS_KMAX: f64 = 20.0;
const WSS_KLOCMAX: f64 = 1.0;
const WSS_NFFT: usize = 2 * FRAME;

/// Gaussian-shaped critical-band filters over the first `WSS_NFFT / 2` bins at 16 kHz.
fn critical_filters() -> Vec<Vec<f64>> {
    let half = WSS_NFFT / 2;
    let nyquist = 8000.0;
    let min_factor = (-30.0 / (2.0 * 2.303f64)).exp();
    CENTER_HZ
        .iter()
        .zip(&BANDWIDTH_HZ)
        .map(|(&fc, &bw_hz)| {
            let f0 = (fc / nyquist * half as f64).floor();
            let bw = bw_hz / nyquist * half as f64;
            let norm = BANDWIDTH_HZ[0].ln() - bw_hz.ln();
            (0..half)
                .map(|j| {
                    let v = (-11.0 * ((j as f64 - f0) / bw).powi(2) + norm).exp();
                    if v > min_factor {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

struct BandAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<Vec<f64>>,
}

impl BandAnalyzer {
    fn new() -> Self {
        BandAnalyzer {
            fft: FftPlanner::new().plan_fft_forward(WSS_NFFT),
            filters: critical_filters(),
        }
    }

    /// Band energies in dB.
    fn energies(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(WSS_NFFT, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..WSS_NFFT / 2].iter().map(|z| z.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(a, b)| a * b).sum();
                10.0 * e.max(1e-10).log10()
            })
            .collect()
    }
}

/// Slope of each band and the level of the nearest spectral peak it leads to.
fn slopes_and_peaks(energy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nb = energy.len();
    let slope: Vec<f64> = energy.windows(2).map(|w| w[1] - w[0]).collect();
    let peaks = (0..nb - 1)
        .map(|i| {
            if slope[i] > 0.0 {
                // the reference implementation reports the band just below the peak here
                let mut n = i;
                while n < nb - 1 && slope[n] > 0.0 {
                    n += 1;
                }
                energy[n - 1]
            } else {
                let mut n = i as isize;
                while n >= 0 && slope[n as usize] <= 0.0 {
                    n -= 1;
                }
                energy[(n + 1) as usize]
            }
        })
        .collect();
    (slope, peaks)
}

fn slope_weights(energy: &[f64], peaks: &[f64]) -> Vec<f64> {
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peaks
        .iter()
        .zip(energy)
        .map(|(&pk, &e)| WSS_KMAX / (WSS_KMAX + max - e) * (WSS_KLOCMAX / (WSS_KLOCMAX + pk - e)))
        .collect()
}

pub fn wss_frames<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>) -> Result<Vec<f64>> {
    let (c, e) = check_pair(clean, est)?;
    let bands = BandAnalyzer::new();
    let mut out = Vec::new();
    for (a, b) in frames(&c).iter().zip(&frames(&e)) {
        if a.iter().all(|v| *v == 0.0) && b.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (ec, ee) = (bands.energies(a), bands.energies(b));
        let (sc, pc) = slopes_and_peaks(&ec);
        let (se, pe) = slopes_and_peaks(&ee);
        let (wc, we) = (slope_weights(&ec, &pc), slope_weights(&ee, &pe));
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..sc.len() {
            let w = 0.5 * (wc[i] + we[i]);
            num += w * (sc[i] - se[i]).powi(2);
            den += w;
        }
        out.push(num / den);
    }
    if out.is_empty() {
        return Err(Error::invalid("every frame is silent"));
    }
    Ok(out)
}

pub fn wss<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>) -> Result<f64> {
    Ok(trimmed_mean(wss_frames(clean, est)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub csig: f64,
    pub cbak: f64,
    pub covl: f64,
}

/// Linear composite predictors, each clamped to [1, 5].
pub fn composite(pesq: f64, llr: f64, wss: f64, segsnr: f64) -> Composite {
    let clamp = |v: f64| v.clamp(1.0, 5.0);
    Composite {
        csig: clamp(3.093 - 1.029 * llr + 0.603 * pesq - 0.009 * wss),
        cbak: clamp(1.634 + 0.478 * pesq - 0.007 * wss + 0.063 * segsnr),
        covl: clamp(1.594 + 0.805 * pesq - 0.512 * llr - 0.007 * wss),
    }
}

/// Runs an external PESQ implementation. `{clean}` and `{est}` in the
/// template are replaced by shell-quoted paths; the last number printed on
/// stdout is the score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PesqAdapter {
    pub template: String,
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

impl PesqAdapter {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains("{clean}") || !template.contains("{est}") {
            return Err(Error::Config(format!(
                "pesq command must contain {{clean}} and {{est}}: `{template}`"
            )));
        }
        Ok(PesqAdapter { template })
    }

    pub fn score(&self, clean: &Path, est: &Path) -> Result<f64> {
        let cmd = self
            .template
            .replace("{clean}", &shell_quote(clean))
            .replace("{est}", &shell_quote(est));
        let out = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::External(format!("cannot run `{cmd}`: {e}")))?;
        if !out.status.success() {
            return Err(Error::External(format!(
                "`{cmd}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let v: f64 = text
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .last()
            .ok_or_else(|| Error::External(format!("`{cmd}` printed no number: {}", text.trim())))?;
        if !(-0.5..=4.5).contains(&v) {
            return Err(Error::External(format!("PESQ score {v} outside [-0.5, 4.5]")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub segsnr: f64,
    pub llr: f64,
    pub wss: f64,
    pub pesq: Option<f64>,
    pub composite: Option<Composite>,
}

impl Scores {
    pub fn compute<T: Scalar>(clean: &Waveform<T>, est: &Waveform<T>, pesq: Option<f64>) -> Result<Self> {
        let segsnr = seg_snr(clean, est)?;
        let llr = llr(clean, est)?;
        let wss = wss(clean, est)?;
        Ok(Scores {
            segsnr,
            llr,
            wss,
            pesq,
            composite: pesq.map(|p| composite(p, llr, wss, segsnr)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileScores {
    pub file: PathBuf,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub files: Vec<FileScores>,
    pub mean: Scores,
    /// Files that could not be scored, with the reason.
    pub failures: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str = "file,segsnr,llr,wss,pesq,csig,cbak,covl";

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let rows = self
            .files
            .iter()
            .map(|f| (f.file.display().to_string(), &f.scores))
            .chain(std::iter::once(("mean".to_string(), &self.mean)));
        for (name, sc) in rows {
            let c = sc.composite;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                name,
                sc.segsnr,
                sc.llr,
                sc.wss,
                opt(sc.pesq),
                opt(c.map(|c| c.csig)),
                opt(c.map(|c| c.cbak)),
                opt(c.map(|c| c.covl)),
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let m = &self.mean;
        let mut s = format!(
            "{} files scored, {} failed\nsegSNR {:.3} dB  LLR {:.4}  WSS {:.3}",
            self.files.len(),
            self.failures.len(),
            m.segsnr,
            m.llr,
            m.wss
        );
        if let (Some(p), Some(c)) = (m.pesq, m.composite) {
            let _ = write!(s, "\nPESQ {p:.3}  CSIG {:.3}  CBAK {:.3}  COVL {:.3}", c.csig, c.cbak, c.covl);
        }
        for (f, e) in &self.failures {
            let _ = write!(s, "\nfailed: {}: {e}", f.display());
        }
        s
    }
}

fn score_file(clean: &Path, est: &Path, pesq: Option<&PesqAdapter>, warnings: &mut Vec<String>) -> Result<Scores> {
    let c = read_wav::<f64>(clean)?;
    let e = read_wav::<f64>(est)?;
    let n = c.len().min(e.len());
    if c.len().abs_diff(e.len()) > HOP {
        warnings.push(format!(
            "{}: lengths differ by {} samples; trimmed to {n}",
            est.display(),
            c.len().abs_diff(e.len())
        ));
    }
    let c = Waveform::with_rate(c.samples()[..n].to_vec(), c.sample_rate())?;
    let e = Waveform::with_rate(e.samples()[..n].to_vec(), e.sample_rate())?;
    let p = pesq.map(|a| a.score(clean, est)).transpose()?;
    Scores::compute(&c, &e, p)
}

/// Scores every `(clean, estimate)` pair in order of estimate path. Files
/// that fail are listed in the report and skipped; the call fails only if
/// the list is empty or nothing could be scored.
pub fn evaluate_corpus(pairs: &[(PathBuf, PathBuf)], pesq: Option<&PesqAdapter>) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut order: Vec<&(PathBuf, PathBuf)> = pairs.iter().collect();
    order.sort_by(|a, b| a.1.cmp(&b.1));
    let mut files = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (clean, est) in order {
        match score_file(clean, est, pesq, &mut warnings) {
            Ok(scores) => files.push(FileScores {
                file: est.clone(),
                scores,
            }),
            Err(e) => failures.push((est.clone(), e.to_string())),
        }
    }
    if files.is_empty() {
        return Err(Error::invalid(format!("no file could be scored ({} failures)", failures.len())));
    }
    let n = files.len() as f64;
    let mean_of = |f: &dyn Fn(&Scores) -> f64| files.iter().map(|x| f(&x.scores)).sum::<f64>() / n;
    let all_pesq = files.iter().all(|f| f.scores.pesq.is_some());
    let pesq_mean = all_pesq.then(|| mean_of(&|s| s.pesq.unwrap_or(0.0)));
    let mean = Scores {
        segsnr: mean_of(&|s| s.segsnr),
        llr: mean_of(&|s| s.llr),
        wss: mean_of(&|s| s.wss),
        pesq: pesq_mean,
        composite: all_pesq.then(|| Composite {
            csig: mean_of(&|s| s.composite.map_or(0.0, |c| c.csig)),
            cbak: mean_of(&|s| s.composite.map_or(0.0, |c| c.cbak)),
            covl: mean_of(&|s| s.composite.map_or(0.0, |c| c.covl)),
        }),
    };
    Ok(MetricsReport {
        files,
        mean,
        failures,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(x: Vec<f64>) -> Waveform<f64> {
        Waveform::new(x).unwrap()
    }

    fn tone(len: usize) -> Vec<f64> {
        (0..len).map(|n| (n as f64 * 0.05).sin() * 0.3 + (n as f64 * 0.31).sin() * 0.1).collect()
    }

    #[test]
    fn identity_is_optimal() {
        let c = wave(tone(4000));
        assert_eq!(seg_snr(&c, &c).unwrap(), 35.0);
        assert_eq!(llr(&c, &c).unwrap(), 0.0);
        assert_eq!(wss(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn doubled_estimate_is_zero_db() {
        let c = tone(4000);
        let e: Vec<f64> = c.iter().map(|v| 2.0 * v).collect();
        assert!(seg_snr(&wave(c), &wave(e)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn composite_clamps_and_is_monotone_in_pesq() {
        let c = composite(4.5, 0.0, 0.0, 35.0);
        assert_eq!((c.csig, c.cbak, c.covl), (5.0, 5.0, 5.0));
        let c = composite(-0.5, 2.0, 100.0, -10.0);
        assert_eq!((c.csig, c.cbak, c.covl), (1.0, 1.0, 1.0));
        let mut prev = composite(-0.5, 0.4, 30.0, 5.0);
        for i in 1..=50 {
            let p = -0.5 + i as f64 * 0.1;
            let c = composite(p, 0.4, 30.0, 5.0);
            assert!(c.csig >= prev.csig && c.cbak >= prev.cbak && c.covl >= prev.covl);
            prev = c;
        }
    }

    #[test]
    fn composite_arithmetic() {
        let c = composite(2.5, 0.5, 40.0, 8.0);
        assert!((c.csig - (3.093 - 0.5145 + 1.5075 - 0.36)).abs() < 1e-12);
        assert!((c.cbak - (1.634 + 1.195 - 0.28 + 0.504)).abs() < 1e-12);
        assert!((c.covl - (1.594 + 2.0125 - 0.256 - 0.28)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_silence_are_errors() {
        assert!(seg_snr(&wave(tone(4000)), &wave(tone(3999))).is_err());
        let z = wave(vec![0.0; 4000]);
        assert!(seg_snr(&z, &z).is_err());
        assert!(llr(&z, &z).is_err());
        assert!(wss(&z, &z).is_err());
    }

    #[test]
    fn lpc_recovers_ar2_coefficients() {
        // r of x[n] = 0.5 x[n-1] - 0.2 x[n-2] + e: solve Yule-Walker by hand
        let (a1, a2) = (0.5, -0.2);
        let rho1 = a1 / (1.0 - a2);
        let rho2 = a1 * rho1 + a2;
        let poly = lpc(&[1.0, rho1, rho2]).unwrap();
        assert!((poly[1] + a1).abs() < 1e-12 && (poly[2] + a2).abs() < 1e-12);
    }

    #[test]
    fn pesq_template_needs_both_placeholders() {
        assert!(PesqAdapter::new("pesq {clean}").is_err());
        let a = PesqAdapter::new("echo 1 2.5 # {clean} {est}").unwrap();
        assert_eq!(a.score(Path::new("a b.wav"), Path::new("c'd.wav")).unwrap(), 2.5);
        let bad = PesqAdapter::new("echo 9 # {clean} {est}").unwrap();
        assert!(bad.score(Path::new("a"), Path::new("b")).is_err());
    }
}
