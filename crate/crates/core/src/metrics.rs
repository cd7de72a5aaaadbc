//! Image quality metrics.
//!
//! SSIM uses an 11 x 11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`
//! and data range 1, with half-sample symmetric padding at the borders.
//! Multi-channel images are scored per channel and averaged.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imageio::{mulaw_encode, tonemap_sample, HdrImage, MuLawParams};

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    MuLaw,
    Tonemapped,
    Linear,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::MuLaw => "mulaw",
            Space::Tonemapped => "tonemapped",
            Space::Linear => "linear",
        })
    }
}

impl FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mulaw" | "mu-law" => Ok(Space::MuLaw),
            "tonemapped" | "tm" => Ok(Space::Tonemapped),
            "linear" => Ok(Space::Linear),
            _ => Err(Error::Unknown {
                kind: "metric space",
                name: s.to_string(),
            }),
        }
    }
}

/// Maps an image into `[0, 1]` in the chosen space. μ-law rejects samples
/// above the white level.
pub fn to_space(img: &HdrImage, space: Space, mu: MuLawParams) -> Result<Vec<f64>> {
    let w = img.white_level;
    match space {
        Space::MuLaw => img.data.iter().map(|&v| mulaw_encode(v as f64, mu)).collect(),
        Space::Tonemapped => Ok(img.data.iter().map(|&v| tonemap_sample(v as f64, w)).collect()),
        Space::Linear => Ok(img.data.iter().map(|&v| (v as f64 / w).clamp(0.0, 1.0)).collect()),
    }
}

fn check_dims(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(1 / MSE)` for values in `[0, 1]`; `+∞` when identical.
pub fn psnr_values(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

pub fn psnr(a: &HdrImage, b: &HdrImage, space: Space, mu: MuLawParams) -> Result<f64> {
    check_dims(a, b)?;
    Ok(psnr_values(&to_space(a, space, mu)?, &to_space(b, space, mu)?))
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut g = [0.0; 2 * SSIM_RADIUS + 1];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Half-sample symmetric index folding: `-1 -> 0`, `n -> n - 1`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian filter of a single-channel `w x h` plane.
fn blur(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * row[reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, &gk) in g.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, h);
            let (o, s) = (&mut out[y * w..(y + 1) * w], &tmp[sy * w..(sy + 1) * w]);
            for x in 0..w {
                o[x] += gk * s[x];
            }
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_adjoint(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for (k, &gk) in g.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, h);
            for x in 0..w {
                tmp[sy * w + x] += gk * src[y * w + x];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = tmp[y * w + x];
            for (k, &gk) in g.iter().enumerate() {
                out[y * w + reflect(x as isize + k as isize - r, w)] += gk * v;
            }
        }
    }
    out
}

struct SsimPlane {
    map: Vec<f64>,
    // Partial derivatives of the SSIM map w.r.t. the filtered moments of `a`.
    d_mu: Vec<f64>,
    d_e2: Vec<f64>,
    d_exy: Vec<f64>,
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, with_grad: bool) -> SsimPlane {
    let g = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let mu_a = blur(a, w, h, &g);
    let mu_b = blur(b, w, h, &g);
    let ea2 = blur(&sq(a), w, h, &g);
    let eb2 = blur(&sq(b), w, h, &g);
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let eab = blur(&prod, w, h, &g);
    let n = w * h;
    let mut map = vec![0.0; n];
    let (mut d_mu, mut d_e2, mut d_exy) = if with_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (mu_a[i], mu_b[i]);
        let sxx = ea2[i] - mx * mx;
        let syy = eb2[i] - my * my;
        let sxy = eab[i] - mx * my;
        let n1 = 2.0 * mx * my + c1;
        let n2 = 2.0 * sxy + c2;
        let d1 = mx * mx + my * my + c1;
        let d2 = sxx + syy + c2;
        let den = d1 * d2;
        let s = n1 * n2 / den;
        map[i] = s;
        if with_grad {
            d_mu[i] = (2.0 * my * n2 - 2.0 * my * n1) / den - s * (2.0 * mx * d2 - 2.0 * mx * d1) / den;
            d_e2[i] = -s * d1 / den;
            d_exy[i] = 2.0 * n1 / den;
        }
    }
    SsimPlane {
        map,
        d_mu,
        d_e2,
        d_exy,
    }
}

fn plane(data: &[f64], w: usize, h: usize, channels: usize, c: usize) -> Vec<f64> {
    (0..w * h).map(|i| data[i * channels + c]).collect()
}

fn check_len(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<()> {
    if a.len() != w * h * channels || b.len() != a.len() || w == 0 || h == 0 || channels == 0 {
        return Err(Error::Shape(format!(
            "SSIM inputs of length {} and {} for {w}x{h}x{channels}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Per-pixel SSIM averaged over channels; inputs are interleaved `[0, 1]` data.
pub fn ssim_map(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<Vec<f64>> {
    check_len(a, b, w, h, channels)?;
    let mut out = vec![0.0; w * h];
    for c in 0..channels {
        let p = ssim_plane(&plane(a, w, h, channels, c), &plane(b, w, h, channels, c), w, h, false);
        for (o, v) in out.iter_mut().zip(&p.map) {
            *o += v / channels as f64;
        }
    }
    Ok(out)
}

pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<f64> {
    let m = ssim_map(a, b, w, h, channels)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `(1 - SSIM) / 2`.
pub fn dssim(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<f64> {
    Ok((1.0 - ssim(a, b, w, h, channels)?) / 2.0)
}

/// Per-pixel `(1 - SSIM) / 2`.
pub fn dssim_map(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<Vec<f64>> {
    Ok(ssim_map(a, b, w, h, channels)?.into_iter().map(|s| (1.0 - s) / 2.0).collect())
}

/// DSSIM and its gradient with respect to `a`.
pub fn dssim_with_grad(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> Result<(f64, Vec<f64>)> {
    check_len(a, b, w, h, channels)?;
    let g = gaussian_taps();
    let n = w * h;
    // d DSSIM / d map_i = -1 / (2 n channels)
    let scale = -0.5 / (n * channels) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    for c in 0..channels {
        let pa = plane(a, w, h, channels, c);
        let pb = plane(b, w, h, channels, c);
        let p = ssim_plane(&pa, &pb, w, h, true);
        total += p.map.iter().sum::<f64>();
        let scaled = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
        let gm = blur_adjoint(&scaled(&p.d_mu), w, h, &g);
        let ge = blur_adjoint(&scaled(&p.d_e2), w, h, &g);
        let gx = blur_adjoint(&scaled(&p.d_exy), w, h, &g);
        for i in 0..n {
            grad[i * channels + c] = gm[i] + 2.0 * pa[i] * ge[i] + pb[i] * gx[i];
        }
    }
    let mean = total / (n * channels) as f64;
    Ok(((1.0 - mean) / 2.0, grad))
}
