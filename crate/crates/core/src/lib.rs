pub mod archive;
pub mod data;
pub mod autograd;
pub mod discriminator;
pub mod dsp;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod phase;
pub mod training;
mod scalar;

pub use error::{Error, Result};
pub use scalar::{Scalar, EPS_MODULUS};

pub type WaveformF32 = dsp::Waveform<f32>;
pub type WaveformF64 = dsp::Waveform<f64>;
pub type ComplexSpectrogramF32 = dsp::ComplexSpectrogram<f32>;
pub type ComplexSpectrogramF64 = dsp::ComplexSpectrogram<f64>;
pub type MagnitudeSpectrogramF32 = dsp::MagnitudeSpectrogram<f32>;
pub type MagnitudeSpectrogramF64 = dsp::MagnitudeSpectrogram<f64>;
pub type GeneratorF32 = generator::Generator<f32>;
pub type GeneratorF64 = generator::Generator<f64>;
pub type DiscriminatorF32 = discriminator::Discriminator<f32>;
pub type DiscriminatorF64 = discriminator::Discriminator<f64>;
pub type GanTrainerF32 = training::GanTrainer<f32>;
pub type GanTrainerF64 = training::GanTrainer<f64>;
pub type PhiNetF32 = phase::PhiNet<f32>;
pub type PhiNetF64 = phase::PhiNet<f64>;
