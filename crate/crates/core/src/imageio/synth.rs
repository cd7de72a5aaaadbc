//! Deterministic synthetic HDR images for tests, benchmarks and demos.
//!
//! Scenes are defined in normalized coordinates, so every resolution samples
//! the same continuous picture.

use super::{HdrImage, DEFAULT_WHITE_LEVEL};

fn hash(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = hash(seed ^ hash((ix as u64).wrapping_mul(0x1656_67B1) ^ (iy as u64).wrapping_mul(0x27D4_EB2F)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(tx), s(ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

/// Fractal sum of `octaves` noise layers starting at `base` cycles per unit.
pub fn fbm(x: f64, y: f64, base: f64, octaves: u32, seed: u64) -> f64 {
    let (mut sum, mut amp, mut norm, mut f) = (0.0, 1.0, 0.0, base);
    for o in 0..octaves {
        sum += amp * value_noise(x * f, y * f, seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    sum / norm
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Outdoor-like HDR scene: graded sky, a near-white sun, a textured
/// hillside under a wavy horizon, and a few hard-edged objects. Values
/// span roughly four decades below the white level.
pub fn landscape(width: usize, height: usize, seed: u64) -> HdrImage {
    let w = DEFAULT_WHITE_LEVEL;
    let aspect = width as f64 / height as f64;
    let pix = 1.0 / height as f64;
    HdrImage::from_fn(width, height, w, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let ux = u * aspect;
        // Sky.
        let sky_t = v / 0.6;
        let mut rgb = [
            w * (0.10 + 0.12 * sky_t),
            w * (0.16 + 0.14 * sky_t),
            w * (0.32 + 0.10 * sky_t),
        ];
        let clouds = smoothstep(0.55, 0.8, fbm(ux, v * 2.0, 3.0, 4, seed ^ 0xC10D));
        for c in rgb.iter_mut() {
            *c += clouds * (w * 0.35 - *c) * 0.8;
        }
        // Sun with a soft glow.
        let (sx, sy) = (0.72 * aspect, 0.18);
        let r = ((ux - sx).powi(2) + (v - sy).powi(2)).sqrt();
        let glow = (-r * r / 0.01).exp() * 0.35;
        let disk = 1.0 - smoothstep(0.035, 0.035 + 1.5 * pix, r);
        for (c, k) in rgb.iter_mut().zip([1.0, 0.95, 0.85]) {
            *c = (*c + w * glow * k).min(w);
            *c += (w * 0.98 * k - *c) * disk;
        }
        // Hillside below a wavy horizon, lit from the sun side.
        let horizon = 0.55 + 0.05 * (ux * 5.0 + 1.0).sin() + 0.03 * (fbm(ux, 0.0, 4.0, 3, seed ^ 0x4011) - 0.5);
        let ground = smoothstep(horizon - 0.5 * pix, horizon + 0.5 * pix, v);
        if ground > 0.0 {
            let tex = fbm(ux, v, 12.0, 4, seed ^ 0x6A55);
            let depth = ((v - horizon) / (1.0 - horizon)).clamp(0.0, 1.0);
            let shade = 0.015 + 0.05 * (1.0 - depth) + 0.03 * tex;
            let g = [w * shade * 0.8, w * shade * 1.0, w * shade * 0.45];
            for c in 0..3 {
                rgb[c] += (g[c] - rgb[c]) * ground;
            }
        }
        // A lake with wind ripples reflecting the sky.
        if v > 0.86 {
            let phase = v * 70.0 + 2.0 * (ux * 6.0).sin() + 0.8 * fbm(ux, v, 6.0, 2, seed ^ 0x1A4E);
            let ripple = 0.5 + 0.5 * (std::f64::consts::TAU * phase).sin();
            let k = 0.04 + 0.10 * ripple;
            rgb = [w * k * 0.7, w * k * 0.9, w * k * 1.2];
        }
        // A brick wall.
        if (0.62 * aspect..0.9 * aspect).contains(&ux) && (0.6..0.8).contains(&v) {
            let row = (v * 90.0).floor();
            let shift = if row as i64 % 2 == 0 { 0.0 } else { 0.5 };
            let col = ux * 45.0 + shift;
            let mortar = (v * 90.0).fract() < 0.18 || col.fract() < 0.08;
            let tone = 0.6 + 0.4 * lattice(col.floor() as i64, row as i64, seed ^ 0xB41C);
            rgb = if mortar {
                [w * 0.02, w * 0.02, w * 0.018]
            } else {
                [w * 0.06 * tone, w * 0.025 * tone, w * 0.015 * tone]
            };
        }
        // A dark rectangular building and a bright round sign.
        let in_rect = (0.18 * aspect..0.34 * aspect).contains(&ux) && (0.38..0.68).contains(&v);
        if in_rect {
            let lit = if ((ux * 40.0).floor() as i64 + (v * 30.0).floor() as i64) % 5 == 0 { 0.25 } else { 0.004 };
            rgb = [w * lit, w * lit * 0.85, w * lit * 0.6];
        }
        let (bx, by) = (0.5 * aspect, 0.75);
        let rb = ((ux - bx).powi(2) + (v - by).powi(2)).sqrt();
        if rb < 0.08 {
            let inner = 0.4 + 0.2 * (1.0 - rb / 0.08);
            rgb = [w * inner, w * inner * 0.3, w * 0.05];
        }
        rgb.map(|c| c.clamp(0.0, w) as f32)
    })
}

/// Smoothly shaded halves split by a sharp tilted line, with an HDR
/// contrast of about 1:100 across the edge.
pub fn sharp_edge(width: usize, height: usize) -> HdrImage {
    let w = DEFAULT_WHITE_LEVEL;
    HdrImage::from_fn(width, height, w, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let side = v - 0.35 - 0.3 * u;
        if side < 0.0 {
            let s = 0.5 + 0.3 * u;
            [(w * s) as f32, (w * s * 0.9) as f32, (w * s * 0.7) as f32]
        } else {
            let s = 0.004 + 0.004 * v;
            [(w * s * 0.6) as f32, (w * s * 0.8) as f32, (w * s) as f32]
        }
    })
}

/// Smooth diagonal ramp from `lo` to `hi` times the white level.
pub fn ramp(width: usize, height: usize, lo: f64, hi: f64) -> HdrImage {
    let w = DEFAULT_WHITE_LEVEL;
    HdrImage::from_fn(width, height, w, |x, y| {
        let t = (x + y) as f64 / (width + height - 2).max(1) as f64;
        let v = w * (lo + (hi - lo) * t);
        [v as f32, (0.8 * v) as f32, (0.6 * v) as f32]
    })
}
