//! Band-limited quality scores and the feature-space Fréchet distance.
//!
//! Spectra use a plain length-64 DFT. The low band (bins 0–4) carries motion,
//! bin 16 carries texture, and everything else in bins 5–31 is artifact energy
//! that lowers fidelity. Bin 32 belongs to neither score.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::synthgen::{Sequence, SEQ_LEN};

pub const MOTION_BINS: std::ops::RangeInclusive<usize> = 0..=4;
pub const TEXTURE_BIN: usize = 16;

fn is_fidelity_bin(k: usize) -> bool {
    (5..=31).contains(&k) && k != TEXTURE_BIN
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

fn twiddles() -> &'static Twiddles {
    static T: OnceLock<Twiddles> = OnceLock::new();
    T.get_or_init(|| {
        let n = SEQ_LEN;
        let mut cos = vec![0.0; n * n];
        let mut sin = vec![0.0; n * n];
        for k in 0..n {
            for i in 0..n {
                // reduce k·i mod n first so every entry is an exact table angle
                let angle = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                cos[k * n + i] = angle.cos();
                sin[k * n + i] = angle.sin();
            }
        }
        Twiddles { cos, sin }
    })
}

/// DFT coefficients `X_k = Σ x[i]·e^{−2πiki/L}` for `k = 0..=L/2`, as (re, im).
pub fn dft_half(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    assert_eq!(n, SEQ_LEN, "DFT length");
    let tw = twiddles();
    (0..=n / 2)
        .map(|k| {
            let row_c = &tw.cos[k * n..(k + 1) * n];
            let row_s = &tw.sin[k * n..(k + 1) * n];
            let re: f64 = x.iter().zip(row_c).map(|(a, c)| a * c).sum();
            let im: f64 = -x.iter().zip(row_s).map(|(a, s)| a * s).sum::<f64>();
            (re, im)
        })
        .collect()
}

/// Amplitude per bin: `(2/L)·|X_k|` for `k = 1..L/2−1`, `|X_k|/L` at DC and Nyquist.
pub fn amplitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    dft_half(x)
        .iter()
        .enumerate()
        .map(|(k, (re, im))| {
            let mag = re.hypot(*im);
            if k == 0 || k == x.len() / 2 {
                mag / n
            } else {
                2.0 * mag / n
            }
        })
        .collect()
}

/// Time-domain component of `x` made of the DFT bins accepted by `keep`.
pub fn band_component(x: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let n = x.len();
    let coeffs = dft_half(x);
    let tw = twiddles();
    let mut out = vec![0.0; n];
    for (k, &(re, im)) in coeffs.iter().enumerate() {
        if !keep(k) {
            continue;
        }
        let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let c = tw.cos[k * n + i];
            let s = tw.sin[k * n + i];
            // Re(X_k·e^{+iθ}) = re·cos θ − im·sin θ
            *o += w * (re * c - im * s);
        }
    }
    out
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Low band (bins 0–4) of `x`.
pub fn low_band(x: &[f64]) -> Vec<f64> {
    band_component(x, |k| MOTION_BINS.contains(&k))
}

/// RMS of the circular first difference of the low band. Linear in the
/// amplitude of the low-frequency content.
pub fn motion_score(x: &Sequence) -> f64 {
    motion_score_raw(x.as_slice())
}

pub fn motion_score_raw(x: &[f64]) -> f64 {
    let low = low_band(x);
    let n = low.len();
    let diff: Vec<f64> = (0..n).map(|i| low[(i + 1) % n] - low[i]).collect();
    rms(&diff)
}

/// Minus the RMS of the out-of-band residual (bins 5–15 and 17–31). Zero for a
/// clean sample; more negative means more artifact energy.
pub fn fidelity_score(x: &Sequence) -> f64 {
    fidelity_score_raw(x.as_slice())
}

pub fn fidelity_score_raw(x: &[f64]) -> f64 {
    -rms(&band_component(x, is_fidelity_bin))
}

/// Euclidean distance between the low bands of two signals, per-coordinate RMS.
pub fn low_band_divergence(a: &[f64], b: &[f64]) -> f64 {
    let la = low_band(a);
    let lb = low_band(b);
    let d: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x - y).collect();
    rms(&d)
}

/// Result of [`frechet_distance`]. `value` is the squared Fréchet distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub value: f64,
    /// Set when a covariance was singular and had to be regularized.
    pub regularized: bool,
}

type Mat2 = [[f64; 2]; 2];

const DEGENERATE_DET: f64 = 1e-18;
const RIDGE: f64 = 1e-8;

fn mean_cov(features: &[[f64; 2]]) -> ([f64; 2], Mat2) {
    let n = features.len() as f64;
    let mut mu = [0.0; 2];
    for f in features {
        mu[0] += f[0];
        mu[1] += f[1];
    }
    mu[0] /= n;
    mu[1] /= n;
    let mut cov = [[0.0; 2]; 2];
    for f in features {
        let d = [f[0] - mu[0], f[1] - mu[1]];
        for r in 0..2 {
            for c in 0..2 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    (mu, cov)
}

fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn trace(m: &Mat2) -> f64 {
    m[0][0] + m[1][1]
}

fn matmul2(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

/// Principal square root of a symmetric positive semi-definite 2×2 matrix:
/// `√M = (M + s·I) / t` with `s = √det M`, `t = √(tr M + 2s)`.
fn sqrt_psd(m: &Mat2) -> Mat2 {
    let s = det(m).max(0.0).sqrt();
    let t = (trace(m) + 2.0 * s).max(0.0).sqrt();
    if t == 0.0 {
        return [[0.0; 2]; 2];
    }
    [
        [(m[0][0] + s) / t, m[0][1] / t],
        [m[1][0] / t, (m[1][1] + s) / t],
    ]
}

fn regularize(c: &mut Mat2) -> bool {
    if det(c) <= DEGENERATE_DET {
        c[0][0] += RIDGE;
        c[1][1] += RIDGE;
        true
    } else {
        false
    }
}

/// Squared Fréchet distance between Gaussians fitted to two 2-D feature sets.
pub fn frechet_from_features(a: &[[f64; 2]], b: &[[f64; 2]]) -> Frechet {
    let (mu_a, mut cov_a) = mean_cov(a);
    let (mu_b, mut cov_b) = mean_cov(b);
    let ra = regularize(&mut cov_a);
    let rb = regularize(&mut cov_b);
    let mean_term = (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2);
    let sa = sqrt_psd(&cov_a);
    let inner = matmul2(&matmul2(&sa, &cov_b), &sa);
    // tr √M for a 2×2 PSD M is √(tr M + 2√det M)
    let tr_sqrt = (trace(&inner) + 2.0 * det(&inner).max(0.0).sqrt()).max(0.0).sqrt();
    let value = (mean_term + trace(&cov_a) + trace(&cov_b) - 2.0 * tr_sqrt).max(0.0);
    Frechet {
        value,
        regularized: ra || rb,
    }
}

pub fn features(set: &[Sequence]) -> Vec<[f64; 2]> {
    set.iter()
        .map(|x| [motion_score(x), fidelity_score(x)])
        .collect()
}

/// Fréchet distance on (motion_score, fidelity_score) features.
pub fn frechet_distance(set_a: &[Sequence], set_b: &[Sequence]) -> Result<Frechet, MetricError> {
    for (name, set) in [("set_a", set_a), ("set_b", set_b)] {
        if set.len() < MIN_FRECHET_SAMPLES {
            return Err(MetricError::TooFewSamples {
                set: name,
                got: set.len(),
            });
        }
    }
    Ok(frechet_from_features(&features(set_a), &features(set_b)))
}

pub const MIN_FRECHET_SAMPLES: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("{set} has {got} samples; at least 10 are required")]
    TooFewSamples { set: &'static str, got: usize },
}
