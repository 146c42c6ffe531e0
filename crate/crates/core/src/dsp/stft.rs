use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::Scalar;

/// Planned transforms and windows for one [`StftConfig`].
///
/// Besides analysis and synthesis this exposes the exact adjoints of both maps
/// (treating complex coefficients as real/imaginary pairs), which is what the
/// autodiff layer needs to differentiate through the consistency projection.
#[derive(Clone)]
pub struct StftPlan<T: Scalar> {
    cfg: StftConfig,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            cfg,
            window: cfg.window.coefficients(cfg.win_length),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Source sample of each padded position: reflect padding of `pad` samples
    /// at both ends of the signal zero-extended to one window.
    fn padded_source(&self, len: usize) -> Vec<Option<usize>> {
        let pad = self.cfg.pad() as isize;
        let effective = len.max(self.cfg.win_length) as isize;
        (0..effective + 2 * pad)
            .map(|i| {
                let mut j = i - pad;
                if j < 0 {
                    j = -j;
                }
                if j >= effective {
                    j = 2 * (effective - 1) - j;
                }
                let j = j as usize;
                (j < len).then_some(j)
            })
            .collect()
    }

    fn padded_len(&self, len: usize) -> usize {
        len.max(self.cfg.win_length) + 2 * self.cfg.pad()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::invalid("empty signal"));
        }
        Ok(())
    }

    /// Frame count produced for `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        self.cfg.num_frames(len)
    }

    /// Forward STFT of raw samples, `[frames, bins]`.
    pub fn analyze(&self, x: &[T]) -> Result<Array2<Complex<T>>> {
        self.check_len(x.len())?;
        if let Some(i) = x.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        let src = self.padded_source(x.len());
        let padded: Vec<T> = src.iter().map(|s| s.map_or(T::zero(), |j| x[j])).collect();
        let (n, win, hop, bins) = self.dims();
        let frames = self.num_frames(x.len());
        let mut out = Array2::from_elem((frames, bins), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            for i in 0..win {
                buf[i] = Complex::new(padded[t * hop + i] * self.window[i], T::zero());
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = buf[k];
            }
        }
        Ok(out)
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.cfg.fft_size,
            self.cfg.win_length,
            self.cfg.hop_length,
            self.cfg.num_bins(),
        )
    }

    /// Sum of squared analysis windows at each padded position.
    fn envelope(&self, frames: usize, padded_len: usize) -> Vec<T> {
        let (_, win, hop, _) = self.dims();
        let mut env = vec![T::zero(); padded_len.max((frames - 1) * hop + win)];
        for t in 0..frames {
            for i in 0..win {
                env[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        env
    }

    /// Valid synthesis lengths for a given frame count.
    fn check_target(&self, frames: usize, target_len: usize) -> Result<()> {
        let (_, win, hop, _) = self.dims();
        if frames == 0 {
            return Err(Error::invalid("spectrogram has no frames"));
        }
        let max_len = (frames - 1) * hop + self.cfg.pad();
        if target_len == 0 || target_len > max_len || target_len + win < (frames - 1) * hop {
            return Err(Error::invalid(format!(
                "target length {target_len} is inconsistent with {frames} frames (max {max_len})"
            )));
        }
        Ok(())
    }

    /// Inverse real FFT of one frame (Hermitian extension), real part only.
    fn irfft_frame(&self, row: ndarray::ArrayView1<Complex<T>>, buf: &mut [Complex<T>]) {
        let (n, _, _, bins) = self.dims();
        for k in 0..bins {
            buf[k] = row[k];
        }
        for k in 1..n - bins + 1 {
            buf[n - k] = row[k].conj();
        }
        self.inverse.process(buf);
    }

    /// Least-squares inverse of [`StftPlan::analyze`]: weighted overlap-add in
    /// which reflected edge positions fold back onto the samples they mirror,
    /// normalized by the folded window-square envelope.
    pub fn synthesize(&self, spec: ArrayView2<Complex<T>>, target_len: usize) -> Result<Vec<T>> {
        let (n, win, hop, bins) = self.dims();
        if spec.ncols() != bins {
            return Err(Error::shape(format!("expected {bins} bins, got {}", spec.ncols())));
        }
        let frames = spec.nrows();
        self.check_target(frames, target_len)?;
        let padded_len = self.padded_len(target_len).max((frames - 1) * hop + win);
        let mut acc = vec![T::zero(); padded_len];
        let scale = T::one() / T::from_usize(n).unwrap();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            self.irfft_frame(spec.row(t), &mut buf);
            for i in 0..win {
                acc[t * hop + i] += buf[i].re * scale * self.window[i];
            }
        }
        let env = self.folded_envelope(frames, target_len);
        let mut out = vec![T::zero(); target_len];
        for (p, s) in self.padded_source(target_len).iter().enumerate() {
            if let (Some(j), Some(a)) = (s, acc.get(p)) {
                out[*j] += *a;
            }
        }
        Ok(out.iter().zip(&env).map(|(a, e)| *a / *e).collect())
    }

    /// Window-square envelope gathered onto signal samples through the padding map.
    fn folded_envelope(&self, frames: usize, len: usize) -> Vec<T> {
        let padded_len = self.padded_len(len).max((frames - 1) * self.cfg.hop_length + self.cfg.win_length);
        let env = self.envelope(frames, padded_len);
        let mut out = vec![T::zero(); len];
        for (p, s) in self.padded_source(len).iter().enumerate() {
            if let Some(j) = s {
                out[*j] += env[p];
            }
        }
        out
    }

    /// Adjoint of [`StftPlan::analyze`]: maps a gradient on the spectrogram
    /// (real and imaginary parts as independent coordinates) back to samples.
    pub fn analyze_adjoint(&self, grad: ArrayView2<Complex<T>>, len: usize) -> Vec<T> {
        let (n, win, hop, bins) = self.dims();
        let src = self.padded_source(len);
        let mut gpad = vec![T::zero(); src.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..grad.nrows() {
            buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            for k in 0..bins {
                buf[k] = grad[[t, k]];
            }
            self.inverse.process(&mut buf);
            for i in 0..win {
                gpad[t * hop + i] += buf[i].re * self.window[i];
            }
        }
        let mut gx = vec![T::zero(); len];
        for (p, s) in src.iter().enumerate() {
            if let Some(j) = s {
                gx[*j] += gpad[p];
            }
        }
        gx
    }

    /// Adjoint of [`StftPlan::synthesize`].
    pub fn synthesize_adjoint(&self, grad: &[T], frames: usize) -> Array2<Complex<T>> {
        let (n, win, hop, bins) = self.dims();
        let target_len = grad.len();
        let padded_len = self.padded_len(target_len).max((frames - 1) * hop + win);
        let env = self.folded_envelope(frames, target_len);
        let mut gacc = vec![T::zero(); padded_len];
        for (p, s) in self.padded_source(target_len).iter().enumerate() {
            if let Some(j) = s {
                gacc[p] = grad[*j] / env[*j];
            }
        }
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let two = T::lit(2.0);
        let mut out = Array2::from_elem((frames, bins), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            for i in 0..win {
                buf[i] = Complex::new(gacc[t * hop + i] * self.window[i], T::zero());
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let c = if k == 0 || 2 * k == n { inv_n } else { two * inv_n };
                // Hermitian extension ignores the imaginary part of DC and Nyquist.
                let mut z = buf[k] * c;
                if k == 0 || 2 * k == n {
                    z.im = T::zero();
                }
                out[[t, k]] = z;
            }
        }
        out
    }
}

/// STFT of `wave` under `cfg`.
pub fn stft<T: Scalar>(wave: &Waveform<T>, cfg: StftConfig) -> Result<ComplexSpectrogram<T>> {
    let plan = StftPlan::new(cfg)?;
    Ok(ComplexSpectrogram {
        data: plan.analyze(wave.samples())?,
        config: cfg,
    })
}

/// Inverse STFT producing exactly `target_len` samples.
pub fn istft<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    cfg: StftConfig,
    target_len: usize,
) -> Result<Waveform<T>> {
    if spec.config != cfg {
        return Err(Error::invalid("spectrogram was produced with a different STFT config"));
    }
    let plan = StftPlan::new(cfg)?;
    Waveform::new(plan.synthesize(spec.data.view(), target_len)?)
}
