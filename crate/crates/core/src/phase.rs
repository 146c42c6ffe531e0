//! Phase post-processing: amplitude and consistency projections, the deep
//! Griffin-Lim iteration with a trainable denoiser, and phase extraction.
//!
//! One iteration maps `X` to `Z - phi(X, R, Z)` with `R = P_A(X)` and
//! `Z = P_C(R)`. With `phi` identically zero this is classical Griffin-Lim.

use std::path::Path;

use ndarray::{s, Array2, ArrayD, Axis, Ix4, IxDyn};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{
    amplitude_projection_var, complex_mul_var, concat, istft_var, log_compress_var, stft_var, ConvGeometry, Tape, Var,
};
use crate::data::{level_gain, scale_waveform, PppPair};
use crate::dsp::{istft, stft, unit_phasor, ComplexSpectrogram, MagnitudeSpectrogram, StftConfig, StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{Adam, AdamConfig, Bound, Conv2d, ParamStore};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PppConfig {
    pub iterations: usize,
    pub phi_channels: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PppConfig {
    fn default() -> Self {
        PppConfig {
            iterations: 5,
            phi_channels: vec![32, 32, 2],
            epochs: 60,
            lr: 2e-4,
            batch: 4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("phase.iterations must be >= 1".into()));
        }
        if self.phi_channels.is_empty() || self.phi_channels.contains(&0) {
            return Err(Error::Config("phase.phi_channels must be non-empty and positive".into()));
        }
        if self.phi_channels.last() != Some(&2) {
            return Err(Error::Config(format!(
                "phase.phi_channels must end in 2 (real and imaginary correction), got {:?}",
                self.phi_channels
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("phase.lr, phase.epochs and phase.batch must be positive".into()));
        }
        Ok(())
    }
}

fn check_same<T>(a: &Array2<T>, b: &Array2<Complex<T>>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "amplitude {:?} and spectrogram {:?} differ in shape",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `P_A`: every bin takes modulus `A` and keeps its phase; bins with
/// `|X| <= EPS_MODULUS` get zero phase.
pub fn proj_amplitude<T: Scalar>(
    x: &ComplexSpectrogram<T>,
    a: &MagnitudeSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    check_same(&a.data, &x.data)?;
    if let Some(v) = a.data.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::invalid(format!("reference amplitude has negative entry {v}")));
    }
    let mut data = x.data.clone();
    ndarray::Zip::from(&mut data)
        .and(&a.data)
        .for_each(|z, &m| *z = unit_phasor(*z) * m);
    Ok(ComplexSpectrogram { data, config: x.config })
}

/// Consistency projection onto spectrograms of `len`-sample signals.
#[derive(Debug, Clone)]
pub struct Consistency<T: Scalar> {
    plan: StftPlan<T>,
    len: usize,
}

impl<T: Scalar> Consistency<T> {
    pub fn new(cfg: StftConfig, len: usize) -> Result<Self> {
        Ok(Consistency {
            plan: StftPlan::new(cfg)?,
            len,
        })
    }

    /// Shortest signal length that yields `frames` frames.
    pub fn for_frames(cfg: StftConfig, frames: usize) -> Result<Self> {
        if frames < 3 {
            return Err(Error::invalid(format!("need at least 3 frames, got {frames}")));
        }
        Self::new(cfg, (frames - 1) * cfg.hop_length)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn plan(&self) -> &StftPlan<T> {
        &self.plan
    }

    pub fn project(&self, x: &ComplexSpectrogram<T>) -> Result<ComplexSpectrogram<T>> {
        if x.config != *self.plan.config() {
            return Err(Error::invalid("spectrogram was produced with a different STFT config"));
        }
        if self.plan.num_frames(self.len) != x.frames() {
            return Err(Error::invalid(format!(
                "{} frames do not match a {}-sample signal",
                x.frames(),
                self.len
            )));
        }
        let wave = self.plan.synthesize(x.data.view(), self.len)?;
        Ok(ComplexSpectrogram {
            data: self.plan.analyze(&wave)?,
            config: x.config,
        })
    }
}

/// `P_C = stft . istft` for the shortest signal length consistent with the frame count.
pub fn proj_consistency<T: Scalar>(x: &ComplexSpectrogram<T>) -> Result<ComplexSpectrogram<T>> {
    Consistency::for_frames(x.config, x.frames())?.project(x)
}

/// `A * X / |X|` per bin, with zero phase where `|X| <= EPS_MODULUS`.
pub fn apply_phase<T: Scalar>(
    a: &MagnitudeSpectrogram<T>,
    x: &ComplexSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    proj_amplitude(x, a)
}

/// The trainable denoiser: a small convolutional stack over the stacked real
/// and imaginary planes of `(X_prev, R, Z)`, emitting a complex correction.
#[derive(Debug, Clone)]
pub struct PhiNet<T: Scalar> {
    config: PppConfig,
    layers: Vec<Conv2d>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> PhiNet<T> {
    pub fn new(config: PppConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut cin = 6;
        for (i, &c) in config.phi_channels.iter().enumerate() {
            layers.push(Conv2d::new(format!("phi.conv{i}"), cin, c, (3, 3), ConvGeometry::same(3, 3)));
            cin = c;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for l in &layers {
            l.init(&mut params, &mut rng);
        }
        Ok(PhiNet { config, layers, params })
    }

    /// Denoiser with every parameter zero, so that the iteration is plain Griffin-Lim.
    pub fn zero(config: PppConfig) -> Result<Self> {
        let mut phi = Self::new(config)?;
        phi.params.zero_all();
        Ok(phi)
    }

    pub fn config(&self) -> &PppConfig {
        &self.config
    }

    /// `x_prev`, `r`, `z` are `[B, 2, T, F]`. The convolutional stack sees
    /// log-compressed copies of the three spectra and emits a complex mask
    /// `m`; the correction is `z * m`, so all-zero parameters give no correction.
    pub fn forward_var<'t>(&self, p: &Bound<'t, T>, x_prev: Var<'t, T>, r: Var<'t, T>, z: Var<'t, T>) -> Var<'t, T> {
        let mut x = concat(1, &[log_compress_var(x_prev), log_compress_var(r), log_compress_var(z)]);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x);
            if i < last {
                x = x.elu();
            }
        }
        complex_mul_var(z, x)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut ar = Archive::new(serde_json::json!({ "kind": "phi", "phase": self.config }))?;
        self.params.save_into("", &mut ar);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            phase: PppConfig,
        }
        let h: Header = ar.header_as()?;
        if h.kind != "phi" {
            return Err(Error::Checkpoint(format!("expected a phi archive, found `{}`", h.kind)));
        }
        let mut phi = Self::new(h.phase)?;
        phi.params.load_from("", ar)?;
        Ok(phi)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn spec_to_planes<T: Scalar>(x: &Array2<Complex<T>>) -> ArrayD<T> {
    let (t, f) = x.dim();
    let mut out = ArrayD::zeros(IxDyn(&[1, 2, t, f]));
    out.slice_mut(s![0, 0, .., ..]).assign(&x.mapv(|z| z.re));
    out.slice_mut(s![0, 1, .., ..]).assign(&x.mapv(|z| z.im));
    out
}

fn planes_to_spec<T: Scalar>(x: &ArrayD<T>) -> Array2<Complex<T>> {
    let v = x.view().into_dimensionality::<Ix4>().expect("[1, 2, T, F]");
    let (re, im) = (v.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned(), v.slice(s![0, 1, .., ..]).to_owned());
    let mut out = Array2::from_elem(re.dim(), Complex::new(T::zero(), T::zero()));
    ndarray::Zip::from(&mut out)
        .and(&re)
        .and(&im)
        .for_each(|z, &r, &i| *z = Complex::new(r, i));
    out
}

fn amplitude_planes<T: Scalar>(a: &Array2<T>) -> ArrayD<T> {
    let (t, f) = a.dim();
    a.clone().into_shape_with_order(IxDyn(&[1, 1, t, f])).unwrap()
}

/// `M` iterations on the tape from `x0: [1, 2, T, F]`; every iteration uses the same bound parameters.
pub fn dgla_chain_var<'t, T: Scalar>(
    phi: Option<(&PhiNet<T>, &Bound<'t, T>)>,
    proj: &Consistency<T>,
    x0: Var<'t, T>,
    a: &Array2<T>,
    iterations: usize,
) -> Var<'t, T> {
    let amp = amplitude_planes(a);
    let mut x = x0;
    for _ in 0..iterations {
        let r = amplitude_projection_var(x, &amp);
        let z = stft_var(proj.plan(), istft_var(proj.plan(), r, proj.len()));
        x = match phi {
            Some((net, p)) => z.sub(net.forward_var(p, x, r, z)),
            None => z,
        };
    }
    x
}

/// Result of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DglaStep<T> {
    pub x_next: ComplexSpectrogram<T>,
    pub r: ComplexSpectrogram<T>,
    pub z: ComplexSpectrogram<T>,
}

pub fn dgla_step<T: Scalar>(
    x_prev: &ComplexSpectrogram<T>,
    a: &MagnitudeSpectrogram<T>,
    phi: &PhiNet<T>,
    proj: &Consistency<T>,
) -> Result<DglaStep<T>> {
    let r = proj_amplitude(x_prev, a)?;
    let z = proj.project(&r)?;
    let tape = Tape::inference();
    let p = phi.params.bind(&tape, false);
    let corr = phi.forward_var(
        &p,
        tape.constant(spec_to_planes(&x_prev.data)),
        tape.constant(spec_to_planes(&r.data)),
        tape.constant(spec_to_planes(&z.data)),
    );
    let data = &z.data - &planes_to_spec(&corr.value());
    Ok(DglaStep {
        x_next: ComplexSpectrogram { data, config: z.config },
        r,
        z,
    })
}

/// Initial iterate: the reference amplitude with the phase of `noisy`.
pub fn initial_estimate<T: Scalar>(
    a: &MagnitudeSpectrogram<T>,
    noisy: &ComplexSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    proj_amplitude(noisy, a)
}

/// Runs `iterations` steps from `A` with the noisy phase, then extracts the
/// phase. `phi = None` is classical Griffin-Lim.
pub fn enhance_phase<T: Scalar>(
    a: &MagnitudeSpectrogram<T>,
    noisy: &ComplexSpectrogram<T>,
    phi: Option<&PhiNet<T>>,
    iterations: usize,
    len: usize,
) -> Result<ComplexSpectrogram<T>> {
    let mut x = initial_estimate(a, noisy)?;
    if iterations == 0 {
        return apply_phase(a, &x);
    }
    let proj = Consistency::new(noisy.config, len)?;
    if proj.plan().num_frames(len) != noisy.frames() {
        return Err(Error::invalid(format!(
            "{} frames do not match a {len}-sample signal",
            noisy.frames()
        )));
    }
    for _ in 0..iterations {
        x = match phi {
            Some(phi) => dgla_step(&x, a, phi, &proj)?.x_next,
            None => proj.project(&proj_amplitude(&x, a)?)?,
        };
    }
    apply_phase(a, &x)
}

/// Full enhancement of one waveform: level normalization, generator
/// magnitude, `iterations` phase iterations (`phi = None` is Griffin-Lim,
/// `iterations = 0` keeps the noisy phase), inverse STFT and level restore.
pub fn enhance_waveform<T: Scalar>(
    generator: &Generator<T>,
    noisy: &Waveform<T>,
    cfg: StftConfig,
    phi: Option<&PhiNet<T>>,
    iterations: usize,
) -> Result<Waveform<T>> {
    let g = level_gain(noisy);
    let spec = stft(&scale_waveform(noisy, g), cfg)?;
    let amp = generator
        .forward(&spec.magnitude())?
        .pop()
        .ok_or_else(|| Error::invalid("generator produced no stages"))?;
    let x = enhance_phase(&amp, &spec, phi, iterations, noisy.len())?;
    let out = istft(&x, cfg, noisy.len())?;
    Ok(Waveform::with_rate(out.samples().iter().map(|&v| v / g).collect(), noisy.sample_rate())?)
}

/// `||P_A(X) - X||_F`, the distance of a consistent iterate from the amplitude set.
pub fn amplitude_residual<T: Scalar>(x: &ComplexSpectrogram<T>, a: &MagnitudeSpectrogram<T>) -> Result<f64> {
    let r = proj_amplitude(x, a)?;
    Ok(r.data
        .iter()
        .zip(x.data.iter())
        .map(|(p, q)| (p - q).norm_sqr().as_f64())
        .sum::<f64>()
        .sqrt())
}

fn mae_var<'t, T: Scalar>(x: Var<'t, T>, target: &ArrayD<T>) -> Var<'t, T> {
    let n = T::lit(target.len() as f64);
    x.sub(x.tape().constant(target.clone())).abs().sum().scale(T::one() / n)
}

/// Mean absolute error over real and imaginary parts of `X^[M]` against the clean spectrum.
pub fn ppp_loss<T: Scalar>(phi: &PhiNet<T>, pair: &PppPair<T>) -> Result<f64> {
    let tape = Tape::inference();
    let p = phi.params.bind(&tape, false);
    let proj = Consistency::new(pair.clean.config, pair.len)?;
    let x0 = tape.constant(spec_to_planes(&pair.enhanced.data));
    let x = dgla_chain_var(Some((phi, &p)), &proj, x0, &pair.amplitude, phi.config.iterations);
    Ok(mae_var(x, &spec_to_planes(&pair.clean.data)).item().as_f64())
}

/// One optimizer step over `batch`. The loss is the mean over every real and
/// imaginary entry of every utterance.
#[derive(Debug, Clone)]
pub struct PppTrainer<T: Scalar> {
    pub phi: PhiNet<T>,
    pub opt: Adam<T>,
    pub steps: usize,
}

impl<T: Scalar> PppTrainer<T> {
    pub fn new(config: PppConfig) -> Result<Self> {
        let opt = Adam::new(config.lr, config.adam);
        Ok(PppTrainer {
            phi: PhiNet::new(config)?,
            opt,
            steps: 0,
        })
    }

    pub fn step(&mut self, batch: &[&PppPair<T>]) -> Result<f64> {
        self.steps += 1;
        let tape = Tape::new();
        let p = self.phi.params.bind(&tape, true);
        let total: usize = batch.iter().map(|b| 2 * b.clean.data.len()).sum();
        let mut loss: Option<Var<'_, T>> = None;
        for pair in batch {
            let proj = Consistency::new(pair.clean.config, pair.len)?;
            let x0 = tape.constant(spec_to_planes(&pair.enhanced.data));
            let x = dgla_chain_var(Some((&self.phi, &p)), &proj, x0, &pair.amplitude, self.phi.config.iterations);
            let target = tape.constant(spec_to_planes(&pair.clean.data));
            let l = x.sub(target).abs().sum();
            loss = Some(match loss {
                Some(acc) => acc.add(l),
                None => l,
            });
        }
        let loss = loss
            .ok_or_else(|| Error::invalid("empty batch"))?
            .scale(T::one() / T::lit(total as f64));
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: "phase",
                step: self.steps,
                detail: format!("mae = {value}"),
            });
        }
        let grads = p.gradients(&tape.backward(loss));
        self.opt.step(&mut self.phi.params, &grads);
        if !self.phi.params.all_finite() {
            return Err(Error::Diverged {
                stage: "phase",
                step: self.steps,
                detail: format!("non-finite parameters after mae = {value}"),
            });
        }
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PppEpoch {
    pub epoch: usize,
    pub step: usize,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

/// Trains the denoiser for `config.epochs` epochs with seeded shuffling and
/// returns the parameters with the lowest validation loss (the last epoch's
/// when `val` is empty).
pub fn train_ppp<T: Scalar>(
    train: &[PppPair<T>],
    val: &[PppPair<T>],
    config: &PppConfig,
    mut on_epoch: impl FnMut(&PppEpoch),
) -> Result<(PhiNet<T>, Vec<PppEpoch>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut trainer = PppTrainer::new(config.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(f64, PhiNet<T>)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut acc, mut n) = (0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&PppPair<T>> = chunk.iter().map(|&i| &train[i]).collect();
            acc += trainer.step(&batch)? * chunk.len() as f64;
            n += chunk.len();
        }
        let val_mae = if val.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for pair in val {
                s += ppp_loss(&trainer.phi, pair)?;
            }
            Some(s / val.len() as f64)
        };
        let rec = PppEpoch {
            epoch,
            step: trainer.steps,
            train_mae: acc / n as f64,
            val_mae,
        };
        on_epoch(&rec);
        history.push(rec);
        match val_mae {
            Some(v) if best.as_ref().is_none_or(|(b, _)| v < *b) => best = Some((v, trainer.phi.clone())),
            _ => {}
        }
    }
    let phi = match best {
        Some((_, phi)) => phi,
        None => trainer.phi,
    };
    Ok((phi, history))
}
