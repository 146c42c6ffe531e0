//! Straight-from-the-definition reference implementations. Everything here
//! is deliberately naive (direct DFT sums, explicit loops) and shares no code
//! with the main crate, so the tests can compare the two.

use std::f64::consts::PI;

use num_complex::Complex64;

pub mod stft {
    use super::*;

    pub struct Geometry {
        pub win: usize,
        pub hop: usize,
        pub nfft: usize,
    }

    pub const DEFAULT: Geometry = Geometry {
        win: 320,
        hop: 160,
        nfft: 320,
    };

    pub fn hamming(n: usize) -> Vec<f64> {
        (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
    }

    /// Index of the signal sample that padded position `p` mirrors. Requires `len >= win`.
    fn source(g: &Geometry, len: usize, p: usize) -> usize {
        let pad = g.win as isize / 2;
        let mut j = p as isize - pad;
        if j < 0 {
            j = -j;
        }
        if j >= len as isize {
            j = 2 * (len as isize - 1) - j;
        }
        j as usize
    }

    pub fn frames(g: &Geometry, len: usize) -> usize {
        len / g.hop + 1
    }

    /// `exp(sign * 2 pi i m / n)` for every `m < n`.
    fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
        (0..n).map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64)).collect()
    }

    /// One-sided spectrum `[frame][bin]` by direct DFT of reflect-padded, windowed frames.
    pub fn analyze(g: &Geometry, x: &[f64]) -> Vec<Vec<Complex64>> {
        assert!(x.len() >= g.win);
        let w = hamming(g.win);
        let bins = g.nfft / 2 + 1;
        let tw = twiddles(g.nfft, -1.0);
        (0..frames(g, x.len()))
            .map(|t| {
                (0..bins)
                    .map(|k| {
                        (0..g.win)
                            .map(|i| {
                                let v = x[source(g, x.len(), t * g.hop + i)] * w[i];
                                tw[(k * i) % g.nfft] * v
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Least-squares signal for a (possibly inconsistent) spectrum: every frame
    /// is inverted by a direct inverse DFT and each sample takes the
    /// window-weighted average of all frame values that cover it, counting
    /// mirrored edge positions.
    pub fn synthesize(g: &Geometry, spec: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let w = hamming(g.win);
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        let tw = twiddles(g.nfft, 1.0);
        for (t, row) in spec.iter().enumerate() {
            for i in 0..g.win {
                let mut v = row[0].re;
                for k in 1..g.nfft / 2 {
                    v += 2.0 * (row[k] * tw[(k * i) % g.nfft]).re;
                }
                v += (row[g.nfft / 2] * tw[(g.nfft / 2 * i) % g.nfft]).re;
                v /= g.nfft as f64;
                let j = source(g, len, t * g.hop + i);
                num[j] += w[i] * v;
                den[j] += w[i] * w[i];
            }
        }
        num.iter().zip(&den).map(|(a, b)| a / b).collect()
    }

    pub fn project_consistent(g: &Geometry, spec: &[Vec<Complex64>], len: usize) -> Vec<Vec<Complex64>> {
        analyze(g, &synthesize(g, spec, len))
    }
}

/// Frobenius distance between two spectra.
pub fn distance(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).norm_sqr()))
        .sum::<f64>()
        .sqrt()
}

/// Bin with modulus `a` and the phase of `z` (zero phase for a vanishing `z`).
pub fn with_modulus(z: Complex64, a: f64, eps: f64) -> Complex64 {
    let m = z.norm();
    if m > eps {
        z * (a / m)
    } else {
        Complex64::new(a, 0.0)
    }
}

/// Classical Griffin-Lim from `x0`, returning every post-consistency iterate.
pub fn griffin_lim(
    g: &stft::Geometry,
    amplitude: &[Vec<f64>],
    x0: &[Vec<Complex64>],
    len: usize,
    iterations: usize,
    eps: f64,
) -> Vec<Vec<Vec<Complex64>>> {
    let mut x = x0.to_vec();
    let mut out = Vec::new();
    for _ in 0..iterations {
        let r: Vec<Vec<Complex64>> = x
            .iter()
            .zip(amplitude)
            .map(|(row, a)| row.iter().zip(a).map(|(&z, &m)| with_modulus(z, m, eps)).collect())
            .collect();
        x = stft::project_consistent(g, &r, len);
        out.push(x.clone());
    }
    out
}

/// Composite-measure sub-metrics computed frame by frame with plain loops.
pub mod metrics {
    use super::*;

    const WIN: usize = 512;
    const SKIP: usize = 256;

    fn window(i: usize) -> f64 {
        // symmetric Hann of length WIN with the zero end points dropped
        0.5 - 0.5 * (2.0 * PI * (i + 1) as f64 / (WIN + 1) as f64).cos()
    }

    fn frame(x: &[f64], t: usize) -> Vec<f64> {
        (0..WIN).map(|i| x[t * SKIP + i] * window(i)).collect()
    }

    fn count(len: usize) -> usize {
        (len - WIN) / SKIP
    }

    /// Mean of the lowest 95% (rounded) of the values.
    fn low_mean(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = (v.len() as f64 * 0.95).round() as usize;
        v[..k].iter().sum::<f64>() / k as f64
    }

    pub fn seg_snr(clean: &[f64], est: &[f64]) -> f64 {
        let n = count(clean.len());
        let mut energies = Vec::new();
        let mut snrs = Vec::new();
        for t in 0..n {
            let c = frame(clean, t);
            let e = frame(est, t);
            let mut sig = 0.0;
            let mut noise = 0.0;
            for i in 0..WIN {
                sig += c[i] * c[i];
                noise += (c[i] - e[i]) * (c[i] - e[i]);
            }
            let mut snr = 10.0 * (sig / (noise + f64::EPSILON) + f64::EPSILON).log10();
            snr = snr.max(-10.0).min(35.0);
            energies.push(sig);
            snrs.push(snr);
        }
        let loudest = energies.iter().cloned().fold(0.0, f64::max);
        let mut total = 0.0;
        let mut used = 0;
        for t in 0..n {
            if energies[t] >= loudest * 1e-6 {
                total += snrs[t];
                used += 1;
            }
        }
        total / used as f64
    }

    /// Solves the order-`p` normal equations by Gaussian elimination with partial pivoting.
    pub fn lpc_direct(x: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
        let r: Vec<f64> = (0..=p)
            .map(|k| (0..x.len() - k).map(|i| x[i] * x[i + k]).sum())
            .collect();
        let mut m: Vec<Vec<f64>> = (0..p)
            .map(|i| {
                let mut row: Vec<f64> = (0..p).map(|j| r[(i as isize - j as isize).unsigned_abs()]).collect();
                row.push(r[i + 1]);
                row
            })
            .collect();
        for col in 0..p {
            let piv = (col..p).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()).unwrap();
            m.swap(col, piv);
            for row in 0..p {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    for k in col..=p {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
        let mut a = vec![1.0];
        a.extend((0..p).map(|i| -m[i][p] / m[i][i]));
        (a, r)
    }

    pub fn llr(clean: &[f64], est: &[f64], p: usize) -> f64 {
        let mut v = Vec::new();
        for t in 0..count(clean.len()) {
            let (ac, rc) = lpc_direct(&frame(clean, t), p);
            let (ae, _) = lpc_direct(&frame(est, t), p);
            let quad = |a: &[f64]| {
                let mut s = 0.0;
                for i in 0..=p {
                    for j in 0..=p {
                        s += a[i] * rc[(i as isize - j as isize).unsigned_abs()] * a[j];
                    }
                }
                s
            };
            v.push((quad(&ae) / quad(&ac)).ln());
        }
        low_mean(v)
    }

    const CF: [f64; 25] = [
        50.0, 120.0, 190.0, 260.0, 330.0, 400.0, 470.0, 540.0, 617.372, 703.378, 798.717, 904.128, 1020.38,
        1148.30, 1288.72, 1442.54, 1610.70, 1794.16, 1993.93, 2211.08, 2446.71, 2701.97, 2978.04, 3276.17, 3597.63,
    ];
    const BW: [f64; 25] = [
        70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 70.0, 77.3724, 86.0056, 95.3398, 105.411, 116.256, 127.914, 140.423,
        153.823, 168.154, 183.457, 199.776, 217.153, 235.631, 255.255, 276.072, 298.126, 321.465, 346.136,
    ];

    fn band_db(x: &[f64]) -> Vec<f64> {
        let nfft = 2 * WIN;
        let half = WIN;
        let power: Vec<f64> = (0..half)
            .map(|k| {
                let z: Complex64 = x
                    .iter()
                    .enumerate()
                    .map(|(n, &v)| Complex64::from_polar(v, -2.0 * PI * (k * n) as f64 / nfft as f64))
                    .sum();
                z.norm_sqr()
            })
            .collect();
        (0..25)
            .map(|b| {
                let f0 = (CF[b] / 8000.0 * half as f64).floor();
                let bw = BW[b] / 8000.0 * half as f64;
                let mut e = 0.0;
                for (j, p) in power.iter().enumerate() {
                    let g = (-11.0 * ((j as f64 - f0) / bw).powi(2) + (70.0f64 / BW[b]).ln()).exp();
                    if g > (-30.0f64 / 4.606).exp() {
                        e += g * p;
                    }
                }
                10.0 * e.max(1e-10).log10()
            })
            .collect()
    }

    fn weights(e: &[f64]) -> Vec<f64> {
        let slope: Vec<f64> = (0..24).map(|i| e[i + 1] - e[i]).collect();
        let top = e.iter().cloned().fold(f64::MIN, f64::max);
        (0..24)
            .map(|i| {
                let peak = if slope[i] > 0.0 {
                    let j = (i..24).find(|&j| slope[j] <= 0.0).unwrap_or(24);
                    e[j - 1]
                } else {
                    match (0..=i).rev().find(|&j| slope[j] > 0.0) {
                        Some(j) => e[j + 1],
                        None => e[0],
                    }
                };
                20.0 / (20.0 + top - e[i]) * (1.0 / (1.0 + peak - e[i]))
            })
            .collect()
    }

    pub fn wss(clean: &[f64], est: &[f64]) -> f64 {
        let mut v = Vec::new();
        for t in 0..count(clean.len()) {
            let ec = band_db(&frame(clean, t));
            let ee = band_db(&frame(est, t));
            let (wc, we) = (weights(&ec), weights(&ee));
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..24 {
                let w = (wc[i] + we[i]) / 2.0;
                let d = (ec[i + 1] - ec[i]) - (ee[i + 1] - ee[i]);
                num += w * d * d;
                den += w;
            }
            v.push(num / den);
        }
        low_mean(v)
    }
}
