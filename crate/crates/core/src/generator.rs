//! Recursive dynamic-attention generator.
//!
//! One network is unfolded over `num_stages` stages. Each stage sees the noisy
//! magnitude and the previous stage's estimate and runs three parts:
//!
//! * a convolutional GRU (the stage memory) updating `h`,
//! * an attention network producing one sigmoid gate per noise-removal block,
//! * a causal convolutional encoder/decoder with skip connections whose block
//!   outputs are multiplied by those gates, ending in a softplus head.
//!
//! Weights are shared by all stages. Every convolution is causal or per-frame
//! in time, so an estimate at frame `t` never depends on frames after `t`.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{concat, ConvGeometry, Tape, Var};
use crate::dsp::MagnitudeSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::Scalar;

const SRNN_KERNEL: (usize, usize) = (1, 3);
const BLOCK_KERNEL: (usize, usize) = (2, 3);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_stages: usize,
    /// Encoder channel counts; the decoder mirrors them.
    pub feature_channels: Vec<usize>,
    /// Channel counts of the attention trunk.
    pub attention_channels: Vec<usize>,
    pub srnn_hidden: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_stages: 3,
            feature_channels: vec![16, 32, 64, 64, 64],
            attention_channels: vec![16, 16, 16],
            srnn_hidden: 8,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Config("generator.num_stages must be >= 1".into()));
        }
        if self.feature_channels.is_empty() || self.feature_channels.contains(&0) {
            return Err(Error::Config(
                "generator.feature_channels must be non-empty with every entry >= 1".into(),
            ));
        }
        if self.attention_channels.is_empty() || self.attention_channels.contains(&0) {
            return Err(Error::Config(
                "generator.attention_channels must be non-empty with every entry >= 1".into(),
            ));
        }
        if self.srnn_hidden == 0 {
            return Err(Error::Config("generator.srnn_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of gated noise-removal blocks (encoder plus decoder).
    pub fn num_gates(&self) -> usize {
        2 * self.feature_channels.len()
    }

    /// Output channels of every gated block, encoder first.
    pub fn gate_channels(&self) -> Vec<usize> {
        let enc = &self.feature_channels;
        let mut out = enc.clone();
        for j in (0..enc.len()).rev() {
            out.push(enc[j.saturating_sub(1)]);
        }
        out
    }
}

/// Stage memory `h`, laid out `[srnn_hidden, frames, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState<T> {
    pub h: Array3<T>,
}

/// One gate map per gated block, each `[channels, frames]` and shared across
/// frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector<T> {
    pub gates: Vec<Array2<T>>,
}

impl<T: Scalar> AttentionVector<T> {
    /// Gates fixed to one, which disables attention.
    pub fn ones(cfg: &GeneratorConfig, frames: usize) -> Self {
        AttentionVector {
            gates: cfg
                .gate_channels()
                .into_iter()
                .map(|c| Array2::ones((c, frames)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Layers {
    srnn_z: Conv2d,
    srnn_r: Conv2d,
    srnn_c: Conv2d,
    agm_trunk: Vec<Conv2d>,
    agm_heads: Vec<Conv2d>,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    head: Conv2d,
}

impl Layers {
    fn new(cfg: &GeneratorConfig) -> Self {
        let hid = cfg.srnn_hidden;
        let same = ConvGeometry::same(SRNN_KERNEL.0, SRNN_KERNEL.1);
        let down = ConvGeometry::causal(BLOCK_KERNEL.0, 2, 1);
        let srnn_in = 2 + hid;

        let mut agm_trunk = Vec::new();
        let mut cin = 2;
        for (i, &c) in cfg.attention_channels.iter().enumerate() {
            agm_trunk.push(Conv2d::new(format!("agm.trunk{i}"), cin, c, BLOCK_KERNEL, down));
            cin = c;
        }
        let agm_heads = cfg
            .gate_channels()
            .into_iter()
            .enumerate()
            .map(|(i, c)| Conv2d::new(format!("agm.gate{i}"), cin, c, (1, 1), ConvGeometry::pointwise()))
            .collect();

        let enc = &cfg.feature_channels;
        let mut encoder = Vec::new();
        let mut cin = srnn_in;
        for (i, &c) in enc.iter().enumerate() {
            encoder.push(Conv2d::new(format!("nrm.enc{i}"), cin, c, BLOCK_KERNEL, down));
            cin = c;
        }
        // decoder block j undoes encoder block j; geometry gets its output width at run time
        let mut decoder = Vec::new();
        let n = enc.len();
        for j in (0..n).rev() {
            let cin = if j == n - 1 { enc[j] } else { 2 * enc[j] };
            let cout = enc[j.saturating_sub(1)];
            decoder.push(Conv2d::new(
                format!("nrm.dec{j}"),
                cin,
                cout,
                BLOCK_KERNEL,
                ConvGeometry::causal_transposed(BLOCK_KERNEL.0, 2, 1, 0),
            ));
        }
        Layers {
            srnn_z: Conv2d::new("srnn.update", srnn_in, hid, SRNN_KERNEL, same),
            srnn_r: Conv2d::new("srnn.reset", srnn_in, hid, SRNN_KERNEL, same),
            srnn_c: Conv2d::new("srnn.candidate", srnn_in, hid, SRNN_KERNEL, same),
            agm_trunk,
            agm_heads,
            encoder,
            decoder,
            head: Conv2d::new("nrm.head", enc[0], 1, (1, 1), ConvGeometry::pointwise()),
        }
    }

    fn all(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.srnn_z, &self.srnn_r, &self.srnn_c];
        v.extend(&self.agm_trunk);
        v.extend(&self.agm_heads);
        v.extend(&self.encoder);
        v.extend(&self.decoder);
        v.push(&self.head);
        v
    }
}

/// Generator weights together with the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    config: GeneratorConfig,
    layers: Layers,
    pub params: ParamStore<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    generator: GeneratorConfig,
}

fn mag_var<'t, T: Scalar>(tape: &'t Tape<T>, m: &MagnitudeSpectrogram<T>) -> Var<'t, T> {
    let (t, f) = m.data.dim();
    tape.constant(m.data.clone().into_shape_with_order(IxDyn(&[1, 1, t, f])).unwrap())
}

fn var_to_mag<T: Scalar>(v: Var<'_, T>) -> MagnitudeSpectrogram<T> {
    let a = v.value();
    let d = a.shape();
    MagnitudeSpectrogram {
        data: a
            .to_shape((d[2], d[3]))
            .unwrap()
            .to_owned(),
    }
}

impl<T: Scalar> Generator<T> {
    /// Fresh, seed-initialized weights.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let layers = Layers::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for l in layers.all() {
            l.init(&mut params, &mut rng);
        }
        Ok(Generator {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn srnn_var<'t>(
        &self,
        p: &Bound<'t, T>,
        noisy: Var<'t, T>,
        prev: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Var<'t, T> {
        let l = &self.layers;
        let (noisy, prev) = (noisy.ln_1p(), prev.ln_1p());
        let xh = concat(1, &[noisy, prev, h]);
        let z = l.srnn_z.forward(p, xh).sigmoid();
        let r = l.srnn_r.forward(p, xh).sigmoid();
        let xrh = concat(1, &[noisy, prev, r.mul(h)]);
        let c = l.srnn_c.forward(p, xrh).tanh();
        z.one_minus().mul(h).add(z.mul(c))
    }

    /// Gates shaped `[B, C_l, T, 1]`.
    pub fn attention_var<'t>(&self, p: &Bound<'t, T>, noisy: Var<'t, T>, prev: Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut x = concat(1, &[noisy.ln_1p(), prev.ln_1p()]);
        for conv in &self.layers.agm_trunk {
            x = conv.forward(p, x).elu();
        }
        let pooled = x.mean_axis(3);
        self.layers
            .agm_heads
            .iter()
            .map(|head| head.forward(p, pooled).sigmoid())
            .collect()
    }

    /// Noise-removal network. `gates = None` runs it ungated.
    pub fn nrm_var<'t>(
        &self,
        p: &Bound<'t, T>,
        noisy: Var<'t, T>,
        prev: Var<'t, T>,
        h: Var<'t, T>,
        gates: Option<&[Var<'t, T>]>,
    ) -> Var<'t, T> {
        let gate = |i: usize, x: Var<'t, T>| match gates {
            Some(g) => x.mul(g[i]),
            None => x,
        };
        let l = &self.layers;
        let n = l.encoder.len();
        let mut x = concat(1, &[noisy.ln_1p(), prev.ln_1p(), h]);
        let mut widths = vec![x.dims()[3]];
        let mut skips = Vec::with_capacity(n);
        for (i, conv) in l.encoder.iter().enumerate() {
            x = gate(i, conv.forward(p, x).elu());
            widths.push(x.dims()[3]);
            skips.push(x);
        }
        for (k, conv) in l.decoder.iter().enumerate() {
            let j = n - 1 - k;
            let input = if k == 0 { x } else { concat(1, &[x, skips[j]]) };
            let mut conv = conv.clone();
            conv.geometry = ConvGeometry::causal_transposed(BLOCK_KERNEL.0, 2, 1, widths[j]);
            x = gate(n + k, conv.forward(p, input).elu());
        }
        l.head.forward(p, x).softplus().mul(noisy)
    }

    /// One stage: returns the new estimate and the new memory.
    pub fn stage_var<'t>(
        &self,
        p: &Bound<'t, T>,
        noisy: Var<'t, T>,
        prev: Var<'t, T>,
        h: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let h = self.srnn_var(p, noisy, prev, h);
        let gates = self.attention_var(p, noisy, prev);
        (self.nrm_var(p, noisy, prev, h, Some(&gates)), h)
    }

    /// All stage estimates for a `[B, 1, T, F]` batch; the last is the output.
    pub fn forward_var<'t>(&self, p: &Bound<'t, T>, noisy: Var<'t, T>) -> Vec<Var<'t, T>> {
        let d = noisy.dims();
        let tape = noisy.tape();
        let mut h = tape.constant(ArrayD::zeros(IxDyn(&[d[0], self.config.srnn_hidden, d[2], d[3]])));
        let mut prev = noisy;
        let mut out = Vec::with_capacity(self.config.num_stages);
        for _ in 0..self.config.num_stages {
            let (est, h_next) = self.stage_var(p, noisy, prev, h);
            out.push(est);
            prev = est;
            h = h_next;
        }
        out
    }

    pub fn zero_state(&self, frames: usize, bins: usize) -> StageState<T> {
        StageState {
            h: Array3::zeros((self.config.srnn_hidden, frames, bins)),
        }
    }

    fn check_pair(noisy: &MagnitudeSpectrogram<T>, prev: &MagnitudeSpectrogram<T>) -> Result<()> {
        if noisy.data.dim() != prev.data.dim() {
            return Err(Error::invalid(format!(
                "noisy magnitude is {:?} but previous estimate is {:?}",
                noisy.data.dim(),
                prev.data.dim()
            )));
        }
        if noisy.frames() == 0 || noisy.bins() == 0 {
            return Err(Error::invalid("empty magnitude spectrogram"));
        }
        Ok(())
    }

    fn check_state(&self, noisy: &MagnitudeSpectrogram<T>, state: &StageState<T>) -> Result<()> {
        let want = (self.config.srnn_hidden, noisy.frames(), noisy.bins());
        if state.h.dim() != want {
            return Err(Error::invalid(format!(
                "stage state is {:?}, expected {want:?}",
                state.h.dim()
            )));
        }
        Ok(())
    }

    fn state_var<'t>(tape: &'t Tape<T>, state: &StageState<T>) -> Var<'t, T> {
        tape.constant(state.h.clone().insert_axis(Axis(0)).into_dyn())
    }

    pub fn srnn_step(
        &self,
        noisy: &MagnitudeSpectrogram<T>,
        prev_est: &MagnitudeSpectrogram<T>,
        prev_state: &StageState<T>,
    ) -> Result<StageState<T>> {
        Self::check_pair(noisy, prev_est)?;
        self.check_state(noisy, prev_state)?;
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let h = self.srnn_var(
            &p,
            mag_var(&tape, noisy),
            mag_var(&tape, prev_est),
            Self::state_var(&tape, prev_state),
        );
        let h = h.value().index_axis(Axis(0), 0).to_owned();
        Ok(StageState {
            h: h.into_dimensionality().unwrap(),
        })
    }

    pub fn attention_forward(
        &self,
        noisy: &MagnitudeSpectrogram<T>,
        prev_est: &MagnitudeSpectrogram<T>,
    ) -> Result<AttentionVector<T>> {
        Self::check_pair(noisy, prev_est)?;
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let gates = self
            .attention_var(&p, mag_var(&tape, noisy), mag_var(&tape, prev_est))
            .into_iter()
            .map(|g| g.value().slice(s![0, .., .., 0]).to_owned())
            .collect();
        Ok(AttentionVector { gates })
    }

    pub fn nrm_forward(
        &self,
        noisy: &MagnitudeSpectrogram<T>,
        prev_est: &MagnitudeSpectrogram<T>,
        state: &StageState<T>,
        gates: &AttentionVector<T>,
    ) -> Result<MagnitudeSpectrogram<T>> {
        Self::check_pair(noisy, prev_est)?;
        self.check_state(noisy, state)?;
        let chans = self.config.gate_channels();
        if gates.gates.len() != chans.len()
            || gates
                .gates
                .iter()
                .zip(&chans)
                .any(|(g, &c)| g.dim() != (c, noisy.frames()))
        {
            return Err(Error::invalid(format!(
                "attention gates do not match {} blocks with channels {chans:?} over {} frames",
                chans.len(),
                noisy.frames()
            )));
        }
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let g: Vec<_> = gates
            .gates
            .iter()
            .map(|g| {
                let (c, t) = g.dim();
                tape.constant(g.clone().into_shape_with_order(IxDyn(&[1, c, t, 1])).unwrap())
            })
            .collect();
        let out = self.nrm_var(
            &p,
            mag_var(&tape, noisy),
            mag_var(&tape, prev_est),
            Self::state_var(&tape, state),
            Some(&g),
        );
        Ok(var_to_mag(out))
    }

    /// Runs all stages on one utterance.
    pub fn forward(&self, noisy: &MagnitudeSpectrogram<T>) -> Result<Vec<MagnitudeSpectrogram<T>>> {
        Self::check_pair(noisy, noisy)?;
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        Ok(self
            .forward_var(&p, mag_var(&tape, noisy))
            .into_iter()
            .map(var_to_mag)
            .collect())
    }

    /// Final-stage estimate for a batch `[B, T, F]`.
    pub fn enhance_batch(&self, noisy: &ndarray::Array3<T>) -> ndarray::Array3<T> {
        let (b, t, f) = noisy.dim();
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(noisy.clone().into_shape_with_order(IxDyn(&[b, 1, t, f])).unwrap());
        let out = self.forward_var(&p, x).pop().unwrap();
        let v = out.value();
        v.view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .index_axis(Axis(1), 0)
            .to_owned()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut ar = Archive::new(Header {
            kind: "generator".into(),
            generator: self.config.clone(),
        })?;
        self.params.save_into("", &mut ar);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let header: Header = ar
            .header_as()
            .map_err(|e| Error::Checkpoint(format!("not a generator checkpoint: {e}")))?;
        if header.kind != "generator" {
            return Err(Error::Checkpoint(format!(
                "expected a generator checkpoint, found `{}`",
                header.kind
            )));
        }
        let mut g = Generator::new(header.generator)?;
        g.params.load_from("", ar)?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_mag(rng: &mut ChaCha8Rng, t: usize, f: usize) -> MagnitudeSpectrogram<f64> {
        MagnitudeSpectrogram::new(Array2::from_shape_fn((t, f), |_| rng.random_range(0.0..2.0))).unwrap()
    }

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_stages: 3,
            feature_channels: vec![4, 4, 8, 8, 8],
            attention_channels: vec![4, 4, 4],
            srnn_hidden: 3,
            seed: 11,
        }
    }

    #[test]
    fn gate_channel_layout() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.gate_channels(), vec![16, 32, 64, 64, 64, 64, 64, 32, 16, 16]);
        assert_eq!(cfg.num_gates(), 10);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = small();
        cfg.num_stages = 0;
        assert!(Generator::<f64>::new(cfg).is_err());
        let mut cfg = small();
        cfg.feature_channels = vec![4, 0];
        assert!(Generator::<f64>::new(cfg).is_err());
    }

    #[test]
    fn zero_params_give_zero_state() {
        // z = sigmoid(0) = 1/2, candidate = tanh(0) = 0, h' = h/2 + 0 = 0 from h = 0
        let mut g = Generator::<f64>::new(small()).unwrap();
        g.params.zero_all();
        let x = MagnitudeSpectrogram::new(Array2::zeros((5, 9))).unwrap();
        let h = g.srnn_step(&x, &x, &g.zero_state(5, 9)).unwrap();
        assert_eq!(h.h.dim(), (3, 5, 9));
        assert!(h.h.iter().all(|&v| v == 0.0));

        // with a nonzero previous state the closed form is h' = h / 2
        let prev = StageState {
            h: Array3::from_elem((3, 5, 9), 0.8),
        };
        let h = g.srnn_step(&x, &x, &prev).unwrap();
        assert!(h.h.iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn zero_params_give_half_gates() {
        let mut g = Generator::<f64>::new(small()).unwrap();
        g.params.zero_all();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_mag(&mut rng, 6, 17);
        let a = g.attention_forward(&x, &x).unwrap();
        assert_eq!(a.gates.len(), 10);
        assert!(a.gates.iter().all(|m| m.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn gates_respond_to_input() {
        let g = Generator::<f64>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_mag(&mut rng, 6, 17);
        let a = g.attention_forward(&x, &x).unwrap();
        assert!(a.gates.iter().all(|m| m.iter().all(|&v| v > 0.0 && v < 1.0)));
        let mut y = x.clone();
        y.data[[3, 5]] += 0.5;
        let b = g.attention_forward(&y, &x).unwrap();
        let moved = a
            .gates
            .iter()
            .zip(&b.gates)
            .any(|(p, q)| p.iter().zip(q.iter()).any(|(u, v)| u != v));
        assert!(moved);
    }

    #[test]
    fn shapes_and_range_across_lengths() {
        let g = Generator::<f64>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [10, 50, 123] {
            let x = random_mag(&mut rng, t, 161);
            let outs = g.forward(&x).unwrap();
            assert_eq!(outs.len(), 3);
            for o in outs {
                assert_eq!(o.data.dim(), (t, 161));
                assert!(o.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }
    }

    #[test]
    fn attention_changes_the_output() {
        let g = Generator::<f64>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_mag(&mut rng, 8, 33);
        let h = g.srnn_step(&x, &x, &g.zero_state(8, 33)).unwrap();
        let gates = g.attention_forward(&x, &x).unwrap();
        let gated = g.nrm_forward(&x, &x, &h, &gates).unwrap();
        let open = g
            .nrm_forward(&x, &x, &h, &AttentionVector::ones(g.config(), 8))
            .unwrap();
        let diff = gated
            .data
            .iter()
            .zip(open.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn single_stage_equals_one_explicit_pass() {
        let mut cfg = small();
        cfg.num_stages = 1;
        let g = Generator::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_mag(&mut rng, 7, 21);
        let out = g.forward(&x).unwrap();
        assert_eq!(out.len(), 1);
        let h = g.srnn_step(&x, &x, &g.zero_state(7, 21)).unwrap();
        let a = g.attention_forward(&x, &x).unwrap();
        let manual = g.nrm_forward(&x, &x, &h, &a).unwrap();
        assert_eq!(out[0], manual);
    }

    #[test]
    fn stages_chain_through_estimate_and_memory() {
        let g = Generator::<f64>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_mag(&mut rng, 7, 21);
        let out = g.forward(&x).unwrap();
        let mut prev = x.clone();
        let mut h = g.zero_state(7, 21);
        for want in &out {
            h = g.srnn_step(&x, &prev, &h).unwrap();
            let a = g.attention_forward(&x, &prev).unwrap();
            prev = g.nrm_forward(&x, &prev, &h, &a).unwrap();
            assert_eq!(&prev, want);
        }

        // stage 2 with the memory wiped
        let h1 = g.srnn_step(&x, &x, &g.zero_state(7, 21)).unwrap();
        let est1 = &out[0];
        let h2_wiped = g.srnn_step(&x, est1, &g.zero_state(7, 21)).unwrap();
        let a2 = g.attention_forward(&x, est1).unwrap();
        let wiped = g.nrm_forward(&x, est1, &h2_wiped, &a2).unwrap();
        assert!(h1.h.iter().any(|&v| v != 0.0));
        let diff = wiped
            .data
            .iter()
            .zip(out[1].data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = Generator::<f64>::new(small()).unwrap();
        let b = Generator::<f64>::new(small()).unwrap();
        assert_eq!(a.params, b.params);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_mag(&mut rng, 9, 41);
        let (p, q) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
        for (u, v) in p.iter().zip(&q) {
            assert!(u.data.iter().zip(v.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let g = Generator::<f64>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_mag(&mut rng, 5, 9);
        let y = random_mag(&mut rng, 6, 9);
        assert!(g.srnn_step(&x, &y, &g.zero_state(5, 9)).is_err());
        assert!(g.srnn_step(&x, &x, &g.zero_state(6, 9)).is_err());
        assert!(g.attention_forward(&x, &y).is_err());
        let a = g.attention_forward(&x, &x).unwrap();
        assert!(g.nrm_forward(&y, &y, &g.zero_state(6, 9), &a).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let g = Generator::<f32>::new(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        g.save(&path).unwrap();
        let back = Generator::<f32>::load(&path).unwrap();
        assert_eq!(back.params, g.params);
        assert_eq!(back.config(), g.config());
    }

    #[test]
    fn outputs_ignore_future_frames() {
        let g = Generator::<f64>::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_mag(&mut rng, 12, 17);
        let mut y = x.clone();
        for t in 8..12 {
            for f in 0..17 {
                y.data[[t, f]] = rng.random_range(0.0..5.0);
            }
        }
        let (a, b) = (g.forward(&x).unwrap(), g.forward(&y).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.data.slice(s![..8, ..]), v.data.slice(s![..8, ..]));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = GeneratorConfig {
            num_stages: 2,
            feature_channels: vec![2, 2, 2, 2, 2],
            attention_channels: vec![2, 2, 2],
            srnn_hidden: 2,
            seed: 12,
        };
        let g = Generator::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noisy = Array2::from_shape_fn((4, 9), |_| rng.random_range(0.0..2.0))
            .into_shape_with_order(IxDyn(&[1, 1, 4, 9]))
            .unwrap();
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 9]), |_| rng.random_range(0.0..2.0));
        let names: Vec<String> = g.params.names().map(String::from).collect();
        let inputs: Vec<ArrayD<f64>> = g.params.iter().map(|(_, v)| v.clone()).collect();
        let report = crate::autograd::gradcheck::check(&inputs, 1e-4, |tape, v| {
            let p = Bound::from_vars(names.clone(), v);
            let out = g.forward_var(&p, tape.constant(noisy.clone())).pop().unwrap();
            out.sub(tape.constant(target.clone())).square().mean()
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert_eq!(report.entries_checked, g.params.num_elements());
    }
}
