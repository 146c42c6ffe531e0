//! Convolutional-recurrent discriminator.
//!
//! Six spectrally normalized conv blocks (causal in time, stride 2 in
//! frequency, ELU), a bidirectional LSTM over the flattened per-frame
//! features, two per-frame fully connected layers, then the mean over frames.
//! Each utterance of a batch is cut to its own length before the LSTM, so
//! zero padding never changes its score.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{concat, ConvGeometry, Tape, Var};
use crate::dsp::MagnitudeSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, Bound, Conv2d, Linear, ParamStore};
use crate::{Scalar, EPS_MODULUS};

const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub conv_channels: Vec<usize>,
    /// (time, frequency)
    pub kernel: (usize, usize),
    /// (time, frequency); the time stride must be 1.
    pub stride: (usize, usize),
    pub blstm_units: usize,
    pub fc_units: Vec<usize>,
    pub sn_power_iters: usize,
    /// Inputs shorter than this are zero-padded in time.
    pub min_frames: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            conv_channels: vec![16, 16, 32, 32, 64, 64],
            kernel: (2, 5),
            stride: (1, 2),
            blstm_units: 128,
            fc_units: vec![16, 1],
            sn_power_iters: 1,
            min_frames: 7,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != 6 || self.conv_channels.contains(&0) {
            return Err(Error::Config(format!(
                "discriminator.conv_channels must list 6 positive counts, got {:?}",
                self.conv_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.kernel.1 % 2 == 0 {
            return Err(Error::Config(format!(
                "discriminator.kernel must be positive with an odd frequency extent, got {:?}",
                self.kernel
            )));
        }
        if self.stride.0 != 1 || self.stride.1 == 0 {
            return Err(Error::Config(format!(
                "discriminator.stride must be (1, s) with s >= 1, got {:?}",
                self.stride
            )));
        }
        if self.blstm_units == 0 {
            return Err(Error::Config("discriminator.blstm_units must be >= 1".into()));
        }
        if self.fc_units.last() != Some(&1) || self.fc_units.contains(&0) {
            return Err(Error::Config(format!(
                "discriminator.fc_units must be positive and end in 1, got {:?}",
                self.fc_units
            )));
        }
        Ok(())
    }

    /// Frequency width after the encoder for an input of `bins` bins.
    pub fn encoded_width(&self, bins: usize) -> usize {
        let geom = self.geometry();
        (0..self.conv_channels.len()).fold(bins, |f, _| geom.out_freq(f, self.kernel.1))
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::causal(self.kernel.0, self.stride.1, self.kernel.1 / 2)
    }
}

/// Result of [`spectral_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNorm<T> {
    pub weight: Array2<T>,
    pub sigma: T,
    pub u: Array1<T>,
    pub v: Array1<T>,
}

fn normalized<T: Scalar>(x: Array1<T>) -> Option<Array1<T>> {
    let n = x.dot(&x).sqrt();
    (n > T::lit(EPS_MODULUS)).then(|| x / n)
}

/// Power iteration on `weight` (rows = output channels) warm-started from `u`.
/// Each iteration updates `v <- W^T u / |W^T u|`, then `u <- W v / |W v|`.
/// The estimate is `sigma = u^T W v`, floored at 1e-12.
pub fn spectral_normalize<T: Scalar>(weight: &Array2<T>, u: &Array1<T>, iters: usize) -> SpectralNorm<T> {
    let mut u = u.clone();
    let mut v = normalized(weight.t().dot(&u)).unwrap_or_else(|| Array1::zeros(weight.ncols()));
    for _ in 0..iters {
        if let Some(nv) = normalized(weight.t().dot(&u)) {
            v = nv;
        }
        if let Some(nu) = normalized(weight.dot(&v)) {
            u = nu;
        }
    }
    let sigma = u.dot(&weight.dot(&v)).max(T::lit(SIGMA_FLOOR));
    SpectralNorm {
        weight: weight.mapv(|w| w / sigma),
        sigma,
        u,
        v,
    }
}

/// `W / sigma` with `sigma = u^T W v` for fixed `u`, `v`; `w` is any tensor whose
/// first axis has `u.len()` entries and whose remaining axes flatten to `v.len()`.
pub fn spectral_norm_var<'t, T: Scalar>(w: Var<'t, T>, u: &Array1<T>, v: &Array1<T>) -> Var<'t, T> {
    let wv = w.value();
    let shape = wv.shape().to_vec();
    let rows = shape[0];
    let cols = wv.len() / rows;
    let mat = wv.to_shape((rows, cols)).unwrap().to_owned();
    let raw = u.dot(&mat.dot(v));
    let floor = T::lit(SIGMA_FLOOR);
    let sigma = raw.max(floor);
    let out = wv.mapv(|x| x / sigma);
    let outer: ArrayD<T> = {
        let mut o = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                o[[i, j]] = u[i] * v[j];
            }
        }
        o.into_shape_with_order(IxDyn(&shape)).unwrap()
    };
    let w_copy = wv.clone();
    w.tape().push(out, &[w], move |g, _| {
        let mut gw = g.mapv(|x| x / sigma);
        if raw > floor {
            let inner: T = g.iter().zip(w_copy.iter()).map(|(&a, &b)| a * b).sum();
            let k = inner / (sigma * sigma);
            gw.zip_mut_with(&outer, |x, &o| *x -= k * o);
        }
        vec![Some(gw)]
    })
}

#[derive(Debug, Clone)]
struct Lstm {
    name: String,
    input: usize,
    hidden: usize,
}

impl Lstm {
    fn names(&self) -> [String; 3] {
        [
            format!("{}.w_ih", self.name),
            format!("{}.w_hh", self.name),
            format!("{}.bias", self.name),
        ]
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let [ih, hh, b] = self.names();
        let h4 = 4 * self.hidden;
        store.insert(ih, kaiming_uniform(rng, &[self.input, h4], self.hidden));
        store.insert(hh, kaiming_uniform(rng, &[self.hidden, h4], self.hidden));
        store.insert(b, ArrayD::zeros(IxDyn(&[h4])));
    }

    /// Runs over `x: [L, input]`, forwards or backwards, giving `[L, hidden]`
    /// in the original frame order. Gate order is input, forget, cell, output.
    fn run<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, reverse: bool) -> Var<'t, T> {
        let [ih, hh, b] = self.names();
        let len = x.dims()[0];
        let hsz = self.hidden;
        let xw = x.matmul(p.get(&ih)).add(p.get(&b));
        let w_hh = p.get(&hh);
        let tape = x.tape();
        let mut h = tape.constant(ArrayD::zeros(IxDyn(&[1, hsz])));
        let mut c = tape.constant(ArrayD::zeros(IxDyn(&[1, hsz])));
        let mut outs = vec![h; len];
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let gates = xw.narrow(0, t, 1).add(h.matmul(w_hh));
            let i = gates.narrow(1, 0, hsz).sigmoid();
            let f = gates.narrow(1, hsz, hsz).sigmoid();
            let g = gates.narrow(1, 2 * hsz, hsz).tanh();
            let o = gates.narrow(1, 3 * hsz, hsz).sigmoid();
            c = f.mul(c).add(i.mul(g));
            h = o.mul(c.tanh());
            outs[t] = h;
        }
        concat(0, &outs)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    convs: Vec<Conv2d>,
    fwd: Lstm,
    bwd: Lstm,
    fcs: Vec<Linear>,
}

/// Discriminator weights plus the power-iteration vectors of every conv.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    config: DiscriminatorConfig,
    bins: usize,
    layers: Layers,
    pub params: ParamStore<T>,
    /// `{conv}.sn_u` and `{conv}.sn_v` per conv block.
    pub sn_state: ParamStore<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    bins: usize,
    discriminator: DiscriminatorConfig,
}

impl<T: Scalar> Discriminator<T> {
    /// Fresh weights for inputs with `bins` frequency bins.
    pub fn new(config: DiscriminatorConfig, bins: usize) -> Result<Self> {
        config.validate()?;
        if bins == 0 {
            return Err(Error::Config("discriminator input needs at least one bin".into()));
        }
        let geom = config.geometry();
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(format!("ce.conv{i}"), cin, c, config.kernel, geom));
            cin = c;
        }
        let feat = cin * config.encoded_width(bins);
        let hid = config.blstm_units;
        let mut fcs = Vec::new();
        let mut din = 2 * hid;
        for (i, &u) in config.fc_units.iter().enumerate() {
            fcs.push(Linear::new(format!("fc{i}"), din, u));
            din = u;
        }
        let layers = Layers {
            convs,
            fwd: Lstm {
                name: "blstm.fwd".into(),
                input: feat,
                hidden: hid,
            },
            bwd: Lstm {
                name: "blstm.bwd".into(),
                input: feat,
                hidden: hid,
            },
            fcs,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut sn_state = ParamStore::new();
        for conv in &layers.convs {
            conv.init(&mut params, &mut rng);
            let u: Array1<T> = Array1::from_shape_fn(conv.out_channels, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z)
            });
            let u = normalized(u).expect("random start vector is nonzero");
            let cols = conv.in_channels * config.kernel.0 * config.kernel.1;
            sn_state.insert(format!("{}.sn_u", conv.name), u.into_dyn());
            sn_state.insert(format!("{}.sn_v", conv.name), ArrayD::zeros(IxDyn(&[cols])));
        }
        layers.fwd.init(&mut params, &mut rng);
        layers.bwd.init(&mut params, &mut rng);
        for fc in &layers.fcs {
            fc.init(&mut params, &mut rng);
        }
        let mut d = Discriminator {
            config,
            bins,
            layers,
            params,
            sn_state,
        };
        d.power_iterate(1);
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    fn weight_matrix(&self, conv: &Conv2d) -> Array2<T> {
        let w = self.params.get(&conv.weight_name()).unwrap();
        let rows = w.shape()[0];
        w.to_shape((rows, w.len() / rows)).unwrap().to_owned()
    }

    fn sn_vectors(&self, conv: &Conv2d) -> (Array1<T>, Array1<T>) {
        let get = |s: &str| {
            self.sn_state
                .get(&format!("{}.{s}", conv.name))
                .unwrap()
                .clone()
                .into_dimensionality()
                .unwrap()
        };
        (get("sn_u"), get("sn_v"))
    }

    /// Advances the stored `u`, `v` of every conv by `iters` power iterations on
    /// the current weights. Training calls this once per discriminator step.
    pub fn power_iterate(&mut self, iters: usize) {
        for conv in self.layers.convs.clone() {
            let (u, _) = self.sn_vectors(&conv);
            let sn = spectral_normalize(&self.weight_matrix(&conv), &u, iters);
            self.sn_state.insert(format!("{}.sn_u", conv.name), sn.u.into_dyn());
            self.sn_state.insert(format!("{}.sn_v", conv.name), sn.v.into_dyn());
        }
    }

    /// Current singular-value estimate of every conv weight.
    pub fn sigmas(&self) -> Vec<T> {
        self.layers
            .convs
            .iter()
            .map(|conv| {
                let (u, v) = self.sn_vectors(conv);
                u.dot(&self.weight_matrix(conv).dot(&v)).max(T::lit(SIGMA_FLOOR))
            })
            .collect()
    }

    /// Normalized weight matrices as used by the forward pass.
    pub fn normalized_weights(&self) -> Vec<Array2<T>> {
        self.layers
            .convs
            .iter()
            .zip(self.sigmas())
            .map(|(conv, s)| self.weight_matrix(conv).mapv(|w| w / s))
            .collect()
    }

    /// Scores of `x: [B, 1, T, F]`, one per utterance, as a `[B]` tensor.
    /// `lengths[b]` is the number of real frames of utterance `b`.
    pub fn forward_var<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, lengths: &[usize]) -> Var<'t, T> {
        let d = x.dims();
        assert_eq!(d.len(), 4, "discriminator input is [B, 1, T, F]");
        assert_eq!(d[3], self.bins, "discriminator built for {} bins", self.bins);
        assert_eq!(lengths.len(), d[0], "one length per utterance");
        let min = self.config.min_frames;
        let mut x = x;
        if d[2] < min {
            let pad = x.tape().constant(ArrayD::zeros(IxDyn(&[d[0], d[1], min - d[2], d[3]])));
            x = concat(2, &[x, pad]);
        }
        for conv in &self.layers.convs {
            let (u, v) = self.sn_vectors(conv);
            let w = spectral_norm_var(p.get(&conv.weight_name()), &u, &v);
            x = conv.forward_with_weight(p, w, x).elu();
        }
        let e = x.dims();
        let (b, c, t, f) = (e[0], e[1], e[2], e[3]);
        let seq = x.permute(&[0, 2, 1, 3]).reshape(&[b, t, c * f]);
        let scores: Vec<_> = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let len = len.clamp(1, t).max(min.min(t));
                let s = seq.narrow(0, i, 1).reshape(&[t, c * f]).narrow(0, 0, len);
                let h = concat(
                    1,
                    &[self.layers.fwd.run(p, s, false), self.layers.bwd.run(p, s, true)],
                );
                let mut y = h;
                let n = self.layers.fcs.len();
                for (k, fc) in self.layers.fcs.iter().enumerate() {
                    y = fc.forward(p, y);
                    if k + 1 < n {
                        y = y.elu();
                    }
                }
                y.mean().reshape(&[1])
            })
            .collect();
        concat(0, &scores)
    }

    fn check_mag(&self, mag: &MagnitudeSpectrogram<T>) -> Result<()> {
        if mag.bins() != self.bins {
            return Err(Error::invalid(format!(
                "discriminator expects {} frequency bins, got {}",
                self.bins,
                mag.bins()
            )));
        }
        if mag.frames() == 0 {
            return Err(Error::invalid("empty magnitude spectrogram"));
        }
        Ok(())
    }

    /// Score of one utterance with the stored power-iteration vectors.
    pub fn score(&self, mag: &MagnitudeSpectrogram<T>) -> Result<T> {
        Ok(self.score_batch(std::slice::from_ref(mag))?[0])
    }

    /// Scores of several utterances, zero-padded to a common length.
    pub fn score_batch(&self, mags: &[MagnitudeSpectrogram<T>]) -> Result<Vec<T>> {
        if mags.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for m in mags {
            self.check_mag(m)?;
        }
        let tmax = mags.iter().map(|m| m.frames()).max().unwrap();
        let mut x = ArrayD::zeros(IxDyn(&[mags.len(), 1, tmax, self.bins]));
        for (b, m) in mags.iter().enumerate() {
            x.slice_mut(ndarray::s![b, 0, ..m.frames(), ..]).assign(&m.data);
        }
        let lengths: Vec<usize> = mags.iter().map(|m| m.frames()).collect();
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let out = self.forward_var(&p, tape.constant(x), &lengths);
        let scores = out.value().iter().copied().collect();
        Ok(scores)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut ar = Archive::new(Header {
            kind: "discriminator".into(),
            bins: self.bins,
            discriminator: self.config.clone(),
        })?;
        self.params.save_into("", &mut ar);
        self.sn_state.save_into("", &mut ar);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let header: Header = ar
            .header_as()
            .map_err(|e| Error::Checkpoint(format!("not a discriminator checkpoint: {e}")))?;
        if header.kind != "discriminator" {
            return Err(Error::Checkpoint(format!(
                "expected a discriminator checkpoint, found `{}`",
                header.kind
            )));
        }
        let mut d = Discriminator::new(header.discriminator, header.bins)?;
        d.params.load_from("", ar)?;
        d.sn_state.load_from("", ar)?;
        Ok(d)
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
    use nalgebra::DMatrix;
    use rand::Rng;

    use super::*;

    fn largest_singular_value(w: &Array2<f64>) -> f64 {
        let m = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
        m.singular_values().max()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        normalized(Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn random_mag(rng: &mut ChaCha8Rng, t: usize, f: usize) -> MagnitudeSpectrogram<f64> {
        MagnitudeSpectrogram::new(Array2::from_shape_fn((t, f), |_| rng.random_range(0.0..2.0))).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let w = ndarray::arr2(&[[2.0f64, 0.0], [0.0, 1.0]]);
        let u = ndarray::arr1(&[0.6, 0.8]);
        let sn = spectral_normalize(&w, &u, 50);
        assert!((sn.sigma - 2.0).abs() < 1e-12);
        let want = ndarray::arr2(&[[1.0, 0.0], [0.0, 0.5]]);
        assert!(sn.weight.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn unit_norm_matrix_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 5, 7);
        let w = &w / largest_singular_value(&w);
        let sn = spectral_normalize(&w, &unit(&mut rng, 5), 100);
        let err = (&sn.weight - &w).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-6, "{err}");
    }

    fn top_two_singular_values(w: &Array2<f64>) -> (f64, f64) {
        let m = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
        let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (s[0], s[1])
    }

    #[test]
    fn fifty_iterations_match_dense_svd_when_the_gap_allows() {
        // sigma converges like (s2/s1)^(4k); with k = 50 that is below 1e-7
        // whenever s2/s1 < 0.92, which holds for most uniform 8x12 matrices
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        for _ in 0..20 {
            let w = random_matrix(&mut rng, 8, 12);
            let u = unit(&mut rng, 8);
            let (s1, s2) = top_two_singular_values(&w);
            if (s2 / s1).powi(200) > 1e-7 {
                continue;
            }
            let sn = spectral_normalize(&w, &u, 50);
            assert!((sn.sigma - s1).abs() < 1e-6, "{} vs {s1}", sn.sigma);
            assert!((sn.u.dot(&sn.u) - 1.0).abs() < 1e-12);
            assert!((sn.v.dot(&sn.v) - 1.0).abs() < 1e-12);
            checked += 1;
        }
        assert!(checked >= 10, "{checked}");
    }

    #[test]
    fn converges_to_dense_svd_on_any_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w = random_matrix(&mut rng, 8, 12);
            let sn = spectral_normalize(&w, &unit(&mut rng, 8), 2000);
            let want = largest_singular_value(&w);
            assert!((sn.sigma - want).abs() < 1e-6, "{} vs {want}", sn.sigma);
        }
    }

    #[test]
    fn zero_matrix_uses_the_floor() {
        let w = Array2::<f64>::zeros((3, 4));
        let sn = spectral_normalize(&w, &ndarray::arr1(&[1.0, 0.0, 0.0]), 5);
        assert_eq!(sn.sigma, 1e-12);
        assert!(sn.weight.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spectral_norm_op_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_matrix(&mut rng, 3, 6).into_shape_with_order(IxDyn(&[3, 2, 1, 3])).unwrap();
        let u = unit(&mut rng, 3);
        let v = unit(&mut rng, 6);
        let probe = ArrayD::from_shape_fn(IxDyn(&[3, 2, 1, 3]), |_| rng.random_range(-1.0..1.0));
        let report = crate::autograd::gradcheck::check(&[w], 1e-6, |tape, x| {
            spectral_norm_var(x[0], &u, &v).mul(tape.constant(probe.clone())).sum()
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn encoder_width_follows_the_halving_chain() {
        let cfg = DiscriminatorConfig::default();
        let mut f = 161usize;
        let mut chain = vec![f];
        for _ in 0..6 {
            f = f.div_ceil(2);
            chain.push(f);
        }
        assert_eq!(chain, vec![161, 81, 41, 21, 11, 6, 3]);
        assert_eq!(cfg.encoded_width(161), 3);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = DiscriminatorConfig::default();
        cfg.conv_channels.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = DiscriminatorConfig::default();
        cfg.fc_units = vec![16, 2];
        assert!(cfg.validate().is_err());
        let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(d.score(&random_mag(&mut rng, 10, 160)).is_err());
    }

    #[test]
    fn scalar_per_utterance_for_any_length() {
        let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in [3, 10, 50, 123] {
            let s = d.score(&random_mag(&mut rng, t, 161)).unwrap();
            assert!(s.is_finite());
        }
    }

    #[test]
    fn batch_padding_does_not_change_scores() {
        let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_mag(&mut rng, 12, 161);
        let b = random_mag(&mut rng, 30, 161);
        let c = random_mag(&mut rng, 4, 161);
        let batch = d.score_batch(&[a.clone(), b.clone(), c.clone(), a.clone()]).unwrap();
        assert_eq!(batch[0], d.score(&a).unwrap());
        assert_eq!(batch[1], d.score(&b).unwrap());
        assert_eq!(batch[2], d.score(&c).unwrap());
        assert_eq!(batch[0], batch[3]);
    }

    #[test]
    fn zero_weights_reduce_to_head_biases() {
        let mut d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, v) in d.params.iter_mut() {
            if name.ends_with("bias") {
                v.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            } else {
                v.fill(0.0);
            }
        }
        d.power_iterate(1);
        // every conv output is its bias, the LSTM output depends only on its
        // biases, and the zero first FC weight discards it: y = b1 + w1 . elu(b0)
        d.params.get_mut("fc1.weight").unwrap().fill(1.0);
        let b0 = d.params.get("fc0.bias").unwrap().clone();
        let b1 = d.params.get("fc1.bias").unwrap()[[0]];
        let elu = |x: f64| if x > 0.0 { x } else { x.exp() - 1.0 };
        let want = b1 + b0.iter().map(|&x| elu(x)).sum::<f64>();
        let got = d.score(&random_mag(&mut rng, 20, 161)).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn power_iteration_bounds_every_conv() {
        let mut d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 161).unwrap();
        d.power_iterate(100);
        for w in d.normalized_weights() {
            let s = largest_singular_value(&w);
            assert!((0.99..=1.01).contains(&s), "{s}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = DiscriminatorConfig {
            conv_channels: vec![2; 6],
            blstm_units: 3,
            fc_units: vec![4, 1],
            seed: 8,
            ..DiscriminatorConfig::default()
        };
        let d = Discriminator::<f64>::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 9]), |_| rng.random_range(0.0..2.0));
        let names: Vec<String> = d.params.names().map(String::from).collect();
        let inputs: Vec<ArrayD<f64>> = d.params.iter().map(|(_, v)| v.clone()).collect();
        let report = crate::autograd::gradcheck::check(&inputs, 1e-4, |tape, v| {
            let p = Bound::from_vars(names.clone(), v);
            let s = d.forward_var(&p, tape.constant(x.clone()), &[8, 7]);
            s.add_scalar(-1.0).square().mean()
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn archive_keeps_power_iteration_state() {
        let mut d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 161).unwrap();
        d.power_iterate(3);
        let back = Discriminator::<f32>::from_archive(&d.to_archive().unwrap()).unwrap();
        assert_eq!(back.params, d.params);
        assert_eq!(back.sn_state, d.sn_state);
    }
}
