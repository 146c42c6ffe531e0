//! Differentiable spectral operations. Complex spectrograms live on the tape as
//! real tensors of shape `[B, 2, T, F]` (real plane, imaginary plane).

use ndarray::{s, Array2, ArrayD, IxDyn};
use num_complex::Complex;

use super::Var;
use crate::dsp::StftPlan;
use crate::{Scalar, EPS_MODULUS};

fn to_complex<T: Scalar>(x: &ArrayD<T>, b: usize) -> Array2<Complex<T>> {
    let re = x.slice(s![b, 0, .., ..]);
    let im = x.slice(s![b, 1, .., ..]);
    let mut out = Array2::from_elem(re.raw_dim(), Complex::new(T::zero(), T::zero()));
    ndarray::Zip::from(&mut out)
        .and(&re)
        .and(&im)
        .for_each(|z, &r, &i| *z = Complex::new(r, i));
    out
}

fn write_planes<T: Scalar>(dst: &mut ArrayD<T>, b: usize, z: &Array2<Complex<T>>) {
    dst.slice_mut(s![b, 0, .., ..]).assign(&z.mapv(|v| v.re));
    dst.slice_mut(s![b, 1, .., ..]).assign(&z.mapv(|v| v.im));
}

/// STFT of each row of `x: [B, L]`, giving `[B, 2, T, F]`.
pub fn stft_var<'t, T: Scalar>(plan: &StftPlan<T>, x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let (b, len) = (xv.shape()[0], xv.shape()[1]);
    let frames = plan.num_frames(len);
    let bins = plan.config().num_bins();
    let mut y = ArrayD::zeros(IxDyn(&[b, 2, frames, bins]));
    for bi in 0..b {
        let row: Vec<T> = xv.slice(s![bi, ..]).to_vec();
        let z = plan.analyze(&row).expect("finite signal");
        write_planes(&mut y, bi, &z);
    }
    let plan = plan.clone();
    x.tape().push(y, &[x], move |g, _| {
        let mut gx = ArrayD::zeros(IxDyn(&[b, len]));
        for bi in 0..b {
            let gz = to_complex(g, bi);
            let row = plan.analyze_adjoint(gz.view(), len);
            gx.slice_mut(s![bi, ..])
                .assign(&ndarray::ArrayView1::from(&row));
        }
        vec![Some(gx)]
    })
}

/// Inverse STFT of `spec: [B, 2, T, F]` to `[B, len]`.
pub fn istft_var<'t, T: Scalar>(plan: &StftPlan<T>, spec: Var<'t, T>, len: usize) -> Var<'t, T> {
    let sv = spec.value();
    let (b, frames) = (sv.shape()[0], sv.shape()[2]);
    let mut y = ArrayD::zeros(IxDyn(&[b, len]));
    for bi in 0..b {
        let z = to_complex(&sv, bi);
        let row = plan
            .synthesize(z.view(), len)
            .expect("spectrogram shape consistent with target length");
        y.slice_mut(s![bi, ..]).assign(&ndarray::ArrayView1::from(&row));
    }
    let plan = plan.clone();
    let full = sv.shape().to_vec();
    spec.tape().push(y, &[spec], move |g, _| {
        let mut gs = ArrayD::zeros(IxDyn(&full));
        for bi in 0..b {
            let row: Vec<T> = g.slice(s![bi, ..]).to_vec();
            let gz = plan.synthesize_adjoint(&row, frames);
            write_planes(&mut gs, bi, &gz);
        }
        vec![Some(gs)]
    })
}

/// Replaces the modulus of every bin of `spec: [B, 2, T, F]` by `amplitude: [B, 1, T, F]`,
/// keeping the phase. Bins with modulus `<= EPS_MODULUS` get zero phase and no gradient.
pub fn amplitude_projection_var<'t, T: Scalar>(
    spec: Var<'t, T>,
    amplitude: &ArrayD<T>,
) -> Var<'t, T> {
    let sv = spec.value();
    let shape = sv.shape().to_vec();
    assert_eq!(shape[1], 2, "complex tensors carry 2 planes");
    assert_eq!(
        amplitude.shape(),
        &[shape[0], 1, shape[2], shape[3]],
        "amplitude shape"
    );
    let eps = T::lit(EPS_MODULUS);
    let mut y = ArrayD::zeros(IxDyn(&shape));
    for b in 0..shape[0] {
        for t in 0..shape[2] {
            for f in 0..shape[3] {
                let (re, im) = (sv[[b, 0, t, f]], sv[[b, 1, t, f]]);
                let a = amplitude[[b, 0, t, f]];
                let m = re.hypot(im);
                if m > eps {
                    y[[b, 0, t, f]] = a * re / m;
                    y[[b, 1, t, f]] = a * im / m;
                } else {
                    y[[b, 0, t, f]] = a;
                }
            }
        }
    }
    let amp = amplitude.clone();
    spec.tape().push(y, &[spec], move |g, _| {
        // d(a z/|z|) = a/|z| (I - u u^T) dz with u = z/|z|
        let mut gz = ArrayD::zeros(IxDyn(&shape));
        for b in 0..shape[0] {
            for t in 0..shape[2] {
                for f in 0..shape[3] {
                    let (re, im) = (sv[[b, 0, t, f]], sv[[b, 1, t, f]]);
                    let m = re.hypot(im);
                    if m <= eps {
                        continue;
                    }
                    let (ur, ui) = (re / m, im / m);
                    let (gr, gi) = (g[[b, 0, t, f]], g[[b, 1, t, f]]);
                    let dot = ur * gr + ui * gi;
                    let k = amp[[b, 0, t, f]] / m;
                    gz[[b, 0, t, f]] = k * (gr - ur * dot);
                    gz[[b, 1, t, f]] = k * (gi - ui * dot);
                }
            }
        }
        vec![Some(gz)]
    })
}

/// `z * ln(1 + |z|) / |z|` per bin of `x: [B, 2, T, F]`: log-compressed modulus, same phase.
pub fn log_compress_var<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    assert_eq!(shape[1], 2, "complex tensors carry 2 planes");
    // g(m) = ln(1 + m) / m and its derivative, with series near zero
    let gain = |m: T| -> (T, T) {
        if m < T::lit(1e-4) {
            (T::one() - m / T::lit(2.0), T::lit(-0.5) + m * T::lit(2.0 / 3.0))
        } else {
            let l = m.ln_1p();
            (l / m, (m / (T::one() + m) - l) / (m * m))
        }
    };
    let mut y = ArrayD::zeros(IxDyn(&shape));
    for b in 0..shape[0] {
        for t in 0..shape[2] {
            for f in 0..shape[3] {
                let (re, im) = (xv[[b, 0, t, f]], xv[[b, 1, t, f]]);
                let (g, _) = gain(re.hypot(im));
                y[[b, 0, t, f]] = g * re;
                y[[b, 1, t, f]] = g * im;
            }
        }
    }
    x.tape().push(y, &[x], move |gy, _| {
        // J^T v = g v + g'(m) m u (u . v)
        let mut gx = ArrayD::zeros(IxDyn(&shape));
        for b in 0..shape[0] {
            for t in 0..shape[2] {
                for f in 0..shape[3] {
                    let (re, im) = (xv[[b, 0, t, f]], xv[[b, 1, t, f]]);
                    let (vr, vi) = (gy[[b, 0, t, f]], gy[[b, 1, t, f]]);
                    let m = re.hypot(im);
                    let (g, dg) = gain(m);
                    let (mut ar, mut ai) = (g * vr, g * vi);
                    if m > T::zero() {
                        let k = dg * (re * vr + im * vi) / m;
                        ar += k * re;
                        ai += k * im;
                    }
                    gx[[b, 0, t, f]] = ar;
                    gx[[b, 1, t, f]] = ai;
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Elementwise complex product of two `[B, 2, T, F]` tensors.
pub fn complex_mul_var<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let (ar, ai) = (a.narrow(1, 0, 1), a.narrow(1, 1, 1));
    let (br, bi) = (b.narrow(1, 0, 1), b.narrow(1, 1, 1));
    super::concat(1, &[ar.mul(br).sub(ai.mul(bi)), ar.mul(bi).add(ai.mul(br))])
}
