//! Feature activations and direction encoding.
//!
//! Interpolated features go through a periodic `[sin(f); cos(f)]` map before
//! being blended and decoded. No frequency multipliers are applied: spatial
//! variation of the interpolated feature already sets the local frequency.
//! The other encodings exist to reproduce the encoding ablation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Encoding {
    Identity,
    Relu,
    Cos,
    #[default]
    SinCos,
}

impl Encoding {
    pub const ALL: [Encoding; 4] = [
        Encoding::Identity,
        Encoding::Relu,
        Encoding::Cos,
        Encoding::SinCos,
    ];

    /// Encoded width for `n_f` input features.
    pub fn width(self, n_f: usize) -> usize {
        match self {
            Encoding::SinCos => 2 * n_f,
            _ => n_f,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Encoding::Identity => 0,
            Encoding::Relu => 1,
            Encoding::Cos => 2,
            Encoding::SinCos => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Encoding::ALL
            .into_iter()
            .find(|e| e.id() == id)
            .ok_or_else(|| Error::Unknown {
                kind: "encoding id",
                name: id.to_string(),
            })
    }

    /// Writes the encoding of `f` into `out` (`out.len() == self.width(f.len())`).
    #[inline]
    pub fn encode<T: Real>(self, f: &[T], out: &mut [T]) {
        let n = f.len();
        debug_assert_eq!(out.len(), self.width(n));
        match self {
            Encoding::Identity => out.copy_from_slice(f),
            Encoding::Relu => {
                for (o, &v) in out.iter_mut().zip(f) {
                    *o = v.max(T::zero());
                }
            }
            Encoding::Cos => {
                for (o, &v) in out.iter_mut().zip(f) {
                    *o = v.cos();
                }
            }
            Encoding::SinCos => {
                let (s, c) = out.split_at_mut(n);
                for i in 0..n {
                    let (sv, cv) = f[i].sin_cos();
                    s[i] = sv;
                    c[i] = cv;
                }
            }
        }
    }

    /// Chain rule: given `f` and `dL/d encode(f)`, accumulates `dL/df` into `grad_f`.
    #[inline]
    pub fn backward<T: Real>(self, f: &[T], grad_out: &[T], grad_f: &mut [T]) {
        let n = f.len();
        match self {
            Encoding::Identity => {
                for i in 0..n {
                    grad_f[i] += grad_out[i];
                }
            }
            Encoding::Relu => {
                for i in 0..n {
                    if f[i] > T::zero() {
                        grad_f[i] += grad_out[i];
                    }
                }
            }
            Encoding::Cos => {
                for i in 0..n {
                    grad_f[i] -= f[i].sin() * grad_out[i];
                }
            }
            Encoding::SinCos => {
                for i in 0..n {
                    let (s, c) = f[i].sin_cos();
                    grad_f[i] += c * grad_out[i] - s * grad_out[n + i];
                }
            }
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::Identity => "identity",
            Encoding::Relu => "relu",
            Encoding::Cos => "cos",
            Encoding::SinCos => "sincos",
        })
    }
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(Encoding::Identity),
            "relu" => Ok(Encoding::Relu),
            "cos" | "cosine" => Ok(Encoding::Cos),
            "sincos" | "sin-cos" => Ok(Encoding::SinCos),
            _ => Err(Error::Unknown {
                kind: "encoding",
                name: s.to_string(),
            }),
        }
    }
}

/// `[sin(f); cos(f)]`.
pub fn encode_sincos<T: Real>(f: &[T]) -> Vec<T> {
    encode_variant(f, Encoding::SinCos)
}

pub fn encode_variant<T: Real>(f: &[T], mode: Encoding) -> Vec<T> {
    let mut out = vec![T::zero(); mode.width(f.len())];
    mode.encode(f, &mut out);
    out
}

// Orthonormal real spherical harmonics, bands 0..=2.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2_XY: f64 = 1.092_548_430_592_079_2;
pub const SH_C2_ZZ: f64 = 0.315_391_565_252_520_05;
pub const SH_C2_XX_YY: f64 = 0.546_274_215_296_039_6;

pub const SH2_DIM: usize = 9;

/// Degree-2 real SH basis at `d`, ordered `l = 0, 1, 2` and `m = -l..=l`.
///
/// Non-unit inputs are normalized; the flag reports when that happened
/// (tolerance `1e-6` on the norm). A zero vector maps to `+z`.
pub fn sh2_encode(d: [f64; 3]) -> ([f64; SH2_DIM], bool) {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let renorm = (norm - 1.0).abs() > 1e-6;
    let [x, y, z] = if norm > 0.0 {
        [d[0] / norm, d[1] / norm, d[2] / norm]
    } else {
        [0.0, 0.0, 1.0]
    };
    let sh = [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_XY * x * y,
        SH_C2_XY * y * z,
        SH_C2_ZZ * (3.0 * z * z - 1.0),
        SH_C2_XY * x * z,
        SH_C2_XX_YY * (x * x - y * y),
    ];
    (sh, renorm)
}

/// `k * SH2(d)`, the direction term appended to blended harmonics.
pub fn sh2_scaled(d: [f64; 3], k: f64) -> [f64; SH2_DIM] {
    let (mut sh, _) = sh2_encode(d);
    for v in &mut sh {
        *v *= k;
    }
    sh
}
