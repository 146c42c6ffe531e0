//! Time-frequency front end: waveforms, STFT analysis/synthesis and WAV I/O.

mod stft;
mod wav;

pub use stft::{istft, stft, StftPlan};
pub use wav::{read_wav, write_wav};

use ndarray::Array2;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Scalar, EPS_MODULUS};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Waveform { samples })
    }

    /// Validating constructor for data that carries its own rate.
    pub fn with_rate(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        Self::new(samples)
    }

    pub fn zeros(len: usize) -> Self {
        Waveform {
            samples: vec![T::zero(); len],
        }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hamming, `0.54 - 0.46 cos(2 pi n / N)`.
    Hamming,
}

impl WindowKind {
    pub fn coefficients<T: Scalar>(self, len: usize) -> Vec<T> {
        match self {
            WindowKind::Hamming => (0..len)
                .map(|n| {
                    let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
                    T::lit(0.54 - 0.46 * phase.cos())
                })
                .collect(),
        }
    }
}

/// Frame geometry. The default is a 20 ms Hamming window at 16 kHz with 50 %
/// overlap and a 320-point transform, giving 161 frequency bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_length: 320,
            hop_length: 160,
            fft_size: 320,
            window: WindowKind::Hamming,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length < 2 || self.win_length % 2 != 0 {
            return Err(Error::Config(format!(
                "dsp.win_length must be even and >= 2, got {}",
                self.win_length
            )));
        }
        if self.hop_length * 2 != self.win_length {
            return Err(Error::Config(format!(
                "dsp.hop_length must be win_length / 2 ({}), got {}",
                self.win_length / 2,
                self.hop_length
            )));
        }
        if self.fft_size < self.win_length || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "dsp.fft_size must be even and >= win_length, got {}",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Reflect padding applied at each end before framing.
    pub fn pad(&self) -> usize {
        self.win_length / 2
    }

    /// Frame count for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        let effective = len.max(self.win_length);
        (effective + 2 * self.pad() - self.win_length) / self.hop_length + 1
    }
}

/// `T x F` grid of complex STFT coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub data: Array2<Complex<T>>,
    pub config: StftConfig,
}

/// `T x F` grid of nonnegative magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram<T> {
    pub data: Array2<T>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn new(data: Array2<Complex<T>>, config: StftConfig) -> Result<Self> {
        if data.ncols() != config.num_bins() {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, config implies {}",
                data.ncols(),
                config.num_bins()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("spectrogram has non-finite entries"));
        }
        Ok(ComplexSpectrogram { data, config })
    }

    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        ComplexSpectrogram {
            data: Array2::from_elem((frames, config.num_bins()), Complex::new(T::zero(), T::zero())),
            config,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram<T> {
        MagnitudeSpectrogram {
            data: self.data.mapv(|z| z.norm()),
        }
    }
}

impl<T: Scalar> MagnitudeSpectrogram<T> {
    pub fn new(data: Array2<T>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::invalid(format!("magnitude entry {v} is negative or not finite")));
        }
        Ok(MagnitudeSpectrogram { data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

/// Unit phasor of `z`, with the fixed `1 + 0i` convention where `|z| <= EPS_MODULUS`.
#[inline]
pub fn unit_phasor<T: Scalar>(z: Complex<T>) -> Complex<T> {
    let m = z.norm();
    if m > T::lit(EPS_MODULUS) {
        z / m
    } else {
        Complex::new(T::one(), T::zero())
    }
}

/// Splits a spectrogram into its magnitude and unit-modulus phasors.
pub fn split_mag_phase<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
) -> (MagnitudeSpectrogram<T>, ComplexSpectrogram<T>) {
    let mag = spec.data.mapv(|z| z.norm());
    let phase = spec.data.mapv(unit_phasor);
    (
        MagnitudeSpectrogram { data: mag },
        ComplexSpectrogram {
            data: phase,
            config: spec.config,
        },
    )
}

/// Elementwise `magnitude * phasor`.
pub fn combine_mag_phase<T: Scalar>(
    mag: &MagnitudeSpectrogram<T>,
    phase: &ComplexSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    if mag.data.dim() != phase.data.dim() {
        return Err(Error::shape(format!(
            "magnitude {:?} vs phase {:?}",
            mag.data.dim(),
            phase.data.dim()
        )));
    }
    let mut data = phase.data.clone();
    data.zip_mut_with(&mag.data, |z, &m| *z = *z * m);
    Ok(ComplexSpectrogram {
        data,
        config: phase.config,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn default_config_has_161_bins() {
        let cfg = StftConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_bins(), 161);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = StftConfig::default();
        cfg.hop_length = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = StftConfig::default();
        cfg.fft_size = 256;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pythagorean_split() {
        let cfg = StftConfig::default();
        let mut spec = ComplexSpectrogram::<f64>::zeros(2, cfg);
        spec.data[[0, 0]] = Complex64::new(3.0, 4.0);
        let (mag, ph) = split_mag_phase(&spec);
        assert_eq!(mag.data[[0, 0]], 5.0);
        assert!((ph.data[[0, 0]] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(mag.data[[1, 3]], 0.0);
        assert_eq!(ph.data[[1, 3]], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn split_recombines_within_1e12() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = StftConfig::default();
        let data = Array2::from_shape_fn((13, 161), |_| {
            Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
        });
        let spec = ComplexSpectrogram::new(data, cfg).unwrap();
        let (mag, ph) = split_mag_phase(&spec);
        let back = combine_mag_phase(&mag, &ph).unwrap();
        let err = back
            .data
            .iter()
            .zip(spec.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        assert!(ph.data.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn waveform_rejects_non_finite_and_foreign_rates() {
        assert!(Waveform::new(vec![0.0, f64::NAN]).is_err());
        assert!(Waveform::with_rate(vec![0.0f64], 48_000).is_err());
        assert!(Waveform::with_rate(vec![0.0f64], 16_000).is_ok());
    }
}
