//! 2-D convolution over `[batch, channel, time, freq]` tensors.
//!
//! Time is always stride 1 with explicit (before, after) padding, which covers
//! causal kernels as well as centred ones. The frequency axis is either a
//! regular strided convolution or a transposed (fractionally strided) one used
//! by decoders to undo the encoder's downsampling.

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::Var;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreqMode {
    Strided,
    /// Transposed convolution producing exactly `out_width` bins.
    Transposed { out_width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub pad_time: (usize, usize),
    pub stride_freq: usize,
    pub pad_freq: usize,
    pub mode: FreqMode,
}

impl ConvGeometry {
    /// Causal in time (`kt - 1` frames of left padding), strided in frequency.
    pub fn causal(kernel_time: usize, stride_freq: usize, pad_freq: usize) -> Self {
        ConvGeometry {
            pad_time: (kernel_time - 1, 0),
            stride_freq,
            pad_freq,
            mode: FreqMode::Strided,
        }
    }

    /// Causal in time, transposed in frequency.
    pub fn causal_transposed(
        kernel_time: usize,
        stride_freq: usize,
        pad_freq: usize,
        out_width: usize,
    ) -> Self {
        ConvGeometry {
            pad_time: (kernel_time - 1, 0),
            stride_freq,
            pad_freq,
            mode: FreqMode::Transposed { out_width },
        }
    }

    /// Stride 1, symmetric "same" padding on both axes for odd kernels.
    pub fn same(kernel_time: usize, kernel_freq: usize) -> Self {
        ConvGeometry {
            pad_time: (kernel_time / 2, kernel_time / 2),
            stride_freq: 1,
            pad_freq: kernel_freq / 2,
            mode: FreqMode::Strided,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1)
    }

    pub fn out_time(&self, t: usize, kt: usize) -> usize {
        (t + self.pad_time.0 + self.pad_time.1 + 1)
            .checked_sub(kt)
            .expect("time axis shorter than kernel")
    }

    pub fn out_freq(&self, f: usize, kf: usize) -> usize {
        match self.mode {
            FreqMode::Strided => {
                (f + 2 * self.pad_freq)
                    .checked_sub(kf)
                    .expect("frequency axis shorter than kernel")
                    / self.stride_freq
                    + 1
            }
            FreqMode::Transposed { out_width } => out_width,
        }
    }

    fn time_map(&self, t: usize, kt: usize) -> Vec<Option<usize>> {
        let to = self.out_time(t, kt);
        let mut map = vec![None; kt * to];
        for k in 0..kt {
            for o in 0..to {
                let i = (o + k) as isize - self.pad_time.0 as isize;
                if i >= 0 && (i as usize) < t {
                    map[k * to + o] = Some(i as usize);
                }
            }
        }
        map
    }

    fn freq_map(&self, f: usize, kf: usize) -> Vec<Option<usize>> {
        let fo = self.out_freq(f, kf);
        let s = self.stride_freq as isize;
        let p = self.pad_freq as isize;
        let mut map = vec![None; kf * fo];
        for k in 0..kf {
            for o in 0..fo {
                let i = match self.mode {
                    FreqMode::Strided => Some(o as isize * s + k as isize - p),
                    FreqMode::Transposed { .. } => {
                        let num = o as isize + p - k as isize;
                        (num >= 0 && num % s == 0).then(|| num / s)
                    }
                };
                if let Some(i) = i {
                    if i >= 0 && (i as usize) < f {
                        map[k * fo + o] = Some(i as usize);
                    }
                }
            }
        }
        map
    }
}

struct Layout {
    cin: usize,
    t: usize,
    f: usize,
    kt: usize,
    kf: usize,
    to: usize,
    fo: usize,
    tmap: Vec<Option<usize>>,
    fmap: Vec<Option<usize>>,
}

impl Layout {
    fn rows(&self) -> usize {
        self.cin * self.kt * self.kf
    }

    fn cols(&self) -> usize {
        self.to * self.fo
    }

    /// Gathers the receptive fields of one batch item into a `[rows, cols]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let p = self.cols();
        out.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..self.cin {
            for kt in 0..self.kt {
                for kf in 0..self.kf {
                    let row = (ci * self.kt + kt) * self.kf + kf;
                    let dst = &mut out[row * p..(row + 1) * p];
                    for o_t in 0..self.to {
                        let Some(ti) = self.tmap[kt * self.to + o_t] else {
                            continue;
                        };
                        let src = &x[(ci * self.t + ti) * self.f..(ci * self.t + ti + 1) * self.f];
                        let fm = &self.fmap[kf * self.fo..(kf + 1) * self.fo];
                        let d = &mut dst[o_t * self.fo..(o_t + 1) * self.fo];
                        for (dv, fi) in d.iter_mut().zip(fm) {
                            if let Some(fi) = *fi {
                                *dv = src[fi];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Layout::im2col`]: scatter-adds columns back onto the input grid.
    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.cin {
            for kt in 0..self.kt {
                for kf in 0..self.kf {
                    let row = (ci * self.kt + kt) * self.kf + kf;
                    let src = &cols[row * p..(row + 1) * p];
                    for o_t in 0..self.to {
                        let Some(ti) = self.tmap[kt * self.to + o_t] else {
                            continue;
                        };
                        let base = (ci * self.t + ti) * self.f;
                        let fm = &self.fmap[kf * self.fo..(kf + 1) * self.fo];
                        let s = &src[o_t * self.fo..(o_t + 1) * self.fo];
                        for (sv, fi) in s.iter().zip(fm) {
                            if let Some(fi) = *fi {
                                gx[base + fi] += *sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of `x: [B, Cin, T, F]` with `weight: [Cout, Cin, KT, KF]` plus an
/// optional `bias: [Cout]`.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: ConvGeometry,
) -> Var<'t, T> {
    let xv = x.value();
    let wv = weight.value();
    let (xs, ws) = (xv.shape(), wv.shape());
    assert_eq!(xs.len(), 4, "conv2d input must be [B, C, T, F], got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, KT, KF]");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
    let (b, cin, t, f) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kt, kf) = (ws[0], ws[2], ws[3]);
    let layout = Layout {
        cin,
        t,
        f,
        kt,
        kf,
        to: geom.out_time(t, kt),
        fo: geom.out_freq(f, kf),
        tmap: geom.time_map(t, kt),
        fmap: geom.freq_map(f, kf),
    };
    let (k, p) = (layout.rows(), layout.cols());

    let x_std = xv.as_standard_layout();
    let w_std = wv.as_standard_layout();
    let x_flat = x_std.as_slice().unwrap();
    let w2 = ArrayView2::from_shape((cout, k), w_std.as_slice().unwrap()).unwrap();
    let bias_v = bias.map(|b| b.value());

    let mut y = ArrayD::<T>::zeros(IxDyn(&[b, cout, layout.to, layout.fo]));
    let mut cols = vec![T::zero(); k * p];
    {
        let y_flat = y.as_slice_mut().unwrap();
        for bi in 0..b {
            layout.im2col(&x_flat[bi * cin * t * f..(bi + 1) * cin * t * f], &mut cols);
            let cview = ArrayView2::from_shape((k, p), &cols).unwrap();
            let mut yb =
                ArrayViewMut2::from_shape((cout, p), &mut y_flat[bi * cout * p..(bi + 1) * cout * p])
                    .unwrap();
            if let Some(bv) = &bias_v {
                for (mut row, &bval) in yb.rows_mut().into_iter().zip(bv.iter()) {
                    row.fill(bval);
                }
                general_mat_mul(T::one(), &w2, &cview, T::one(), &mut yb);
            } else {
                general_mat_mul(T::one(), &w2, &cview, T::zero(), &mut yb);
            }
        }
    }

    let mut parents = vec![x, weight];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    let has_bias = bias.is_some();
    let xv_c = xv.clone();
    let wv_c = wv.clone();
    x.tape().push(y, &parents, move |g, needs| {
        let g_std = g.as_standard_layout();
        let g_flat = g_std.as_slice().unwrap();
        let x_std = xv_c.as_standard_layout();
        let x_flat = x_std.as_slice().unwrap();
        let w_std = wv_c.as_standard_layout();
        let w2 = ArrayView2::from_shape((cout, k), w_std.as_slice().unwrap()).unwrap();

        let mut gx = needs[0].then(|| vec![T::zero(); b * cin * t * f]);
        let mut gw = needs[1].then(|| Array2::<T>::zeros((cout, k)));
        let mut gcols = Array2::<T>::zeros((k, p));
        let mut cols = vec![T::zero(); k * p];
        for bi in 0..b {
            let gb = ArrayView2::from_shape((cout, p), &g_flat[bi * cout * p..(bi + 1) * cout * p])
                .unwrap();
            if let Some(gw) = gw.as_mut() {
                layout.im2col(&x_flat[bi * cin * t * f..(bi + 1) * cin * t * f], &mut cols);
                let cview = ArrayView2::from_shape((k, p), &cols).unwrap();
                general_mat_mul(T::one(), &gb, &cview.t(), T::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut gcols);
                layout.col2im(
                    gcols.as_slice().unwrap(),
                    &mut gx[bi * cin * t * f..(bi + 1) * cin * t * f],
                );
            }
        }
        let mut out = vec![
            gx.map(|v| ArrayD::from_shape_vec(IxDyn(&[b, cin, t, f]), v).unwrap()),
            gw.map(|w| w.into_shape_with_order(IxDyn(&[cout, cin, kt, kf])).unwrap()),
        ];
        if has_bias {
            out.push(needs[2].then(|| {
                let mut gbias = ArrayD::zeros(IxDyn(&[cout]));
                for bi in 0..b {
                    for c in 0..cout {
                        let s: T = g_flat[(bi * cout + c) * p..(bi * cout + c + 1) * p]
                            .iter()
                            .copied()
                            .sum();
                        gbias[c] += s;
                    }
                }
                gbias
            }));
        }
        out
    })
}
