use rand::Rng;

use super::{kaiming_uniform, Bound, ParamStore};
use crate::autograd::{conv2d, ConvGeometry, Var};
use crate::Scalar;
use ndarray::{ArrayD, IxDyn};

/// 2-D convolution over `[B, C, T, F]` maps. Parameters live under
/// `{name}.weight` (`[out, in, kt, kf]`) and `{name}.bias` (`[out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub geometry: ConvGeometry,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
    ) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            geometry,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let (kt, kf) = self.kernel;
        let fan_in = self.in_channels * kt * kf;
        store.insert(
            self.weight_name(),
            kaiming_uniform(rng, &[self.out_channels, self.in_channels, kt, kf], fan_in),
        );
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_channels])));
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.forward_with_weight(p, p.get(&self.weight_name()), x)
    }

    /// Same as [`Conv2d::forward`] but with a substitute weight tensor, e.g. a
    /// spectrally normalized one.
    pub fn forward_with_weight<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        weight: Var<'t, T>,
        x: Var<'t, T>,
    ) -> Var<'t, T> {
        conv2d(x, weight, Some(p.get(&self.bias_name())), self.geometry)
    }
}

/// Affine map on the last axis of a 2-D input, `y = x W + b` with
/// `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(
            self.weight_name(),
            kaiming_uniform(rng, &[self.in_features, self.out_features], self.in_features),
        );
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_features])));
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(p.get(&self.weight_name()))
            .add(p.get(&self.bias_name()))
    }
}
