//! 2D Gaussian splats with harmonic features and deferred decoding.
//!
//! Each splat carries three feature vectors on a bounding triangle in its
//! whitened frame. A pixel whitens its position into every splat, reads the
//! scaffold features there, applies `[sin; cos]`, and alpha-composites the
//! result front to back. The composited vector, with a scaled SH₂ direction
//! term appended, is decoded by the MLP once per pixel.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harmonic::{sh2_scaled, Encoding, SH2_DIM};
use crate::imageio::{mulaw_decode_unchecked, HdrImage, MuLawParams};
use crate::nn::Mlp;

/// Vertices of the equilateral triangle circumscribing the unit circle.
pub const CANONICAL_TRIANGLE: [[f64; 2]; 3] = [
    [0.0, 2.0],
    [-1.732_050_807_568_877_2, -1.0],
    [1.732_050_807_568_877_2, -1.0],
];

/// Parameters per splat in the flat gradient layout:
/// `[mx, my, θ, sx, sy, opacity, f⁰, f¹, f²]`.
pub fn splat_stride(n_f: usize) -> usize {
    6 + 3 * n_f
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub mean: [f64; 2],
    pub theta: f64,
    pub scales: [f64; 2],
    pub opacity: f64,
    /// Depth key; smaller is nearer.
    pub z: f64,
    pub features: [Vec<f64>; 3],
}

impl Splat {
    pub fn check(&self, n_f: usize) -> Result<()> {
        let finite = self.mean.iter().chain(&self.scales).all(|v| v.is_finite())
            && self.theta.is_finite()
            && self.z.is_finite()
            && self.features.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("non-finite splat parameter".into()));
        }
        if !(self.scales[0] > 0.0 && self.scales[1] > 0.0) {
            return Err(Error::Config(format!("splat scales {:?} must be positive", self.scales)));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::OutOfRange {
                value: self.opacity,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if self.features.iter().any(|f| f.len() != n_f) {
            return Err(Error::Shape(format!("splat features must have length {n_f}")));
        }
        Ok(())
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        let (a, b) = (self.scales[0] * self.scales[0], self.scales[1] * self.scales[1]);
        [
            [c * c * a + s * s * b, c * s * (a - b)],
            [c * s * (a - b), s * s * a + c * c * b],
        ]
    }

    /// `S⁻¹ Rᵀ (p − μ)`.
    #[inline]
    pub fn whiten(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let q = [p[0] - self.mean[0], p[1] - self.mean[1]];
        [
            (c * q[0] + s * q[1]) / self.scales[0],
            (-s * q[0] + c * q[1]) / self.scales[1],
        ]
    }
}

/// `exp(−½ |S⁻¹Rᵀ(p − μ)|²)`.
#[inline]
pub fn kernel_eval(splat: &Splat, p: [f64; 2]) -> f64 {
    let z = splat.whiten(p);
    (-0.5 * (z[0] * z[0] + z[1] * z[1])).exp()
}

/// Same kernel through an explicit inverse covariance.
pub fn kernel_eval_cov(splat: &Splat, p: [f64; 2]) -> Result<f64> {
    let s = splat.covariance();
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    if !(det > 0.0) || !(s[0][0] > 0.0) {
        return Err(Error::Degenerate("covariance is not positive definite"));
    }
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let d = [p[0] - splat.mean[0], p[1] - splat.mean[1]];
    let m = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    Ok((-0.5 * m).exp())
}

/// Barycentrics of a whitened point in the canonical triangle, clamped to
/// be non-negative and renormalized. Also returns the Jacobian `dβ/dz`.
#[inline]
pub fn scaffold_bary(z: [f64; 2]) -> ([f64; 3], [[f64; 2]; 3]) {
    let v = CANONICAL_TRIANGLE;
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let d = cross(v[0], v[1], v[2]);
    let raw = [cross(z, v[1], v[2]) / d, cross(z, v[2], v[0]) / d, cross(z, v[0], v[1]) / d];
    // d/dz of cross(z, a, b) = [a1 - b1, b0 - a0]
    let grad = |a: [f64; 2], b: [f64; 2]| [(a[1] - b[1]) / d, (b[0] - a[0]) / d];
    let raw_grad = [grad(v[1], v[2]), grad(v[2], v[0]), grad(v[0], v[1])];
    if raw.iter().all(|&b| b >= 0.0) {
        return (raw, raw_grad);
    }
    let mut n = [0.0; 3];
    let mut dn = [[0.0; 2]; 3];
    for k in 0..3 {
        if raw[k] > 0.0 {
            n[k] = raw[k];
            dn[k] = raw_grad[k];
        }
    }
    let s = n[0] + n[1] + n[2];
    let ds = [dn[0][0] + dn[1][0] + dn[2][0], dn[0][1] + dn[1][1] + dn[2][1]];
    let b = n.map(|x| x / s);
    let mut jac = [[0.0; 2]; 3];
    for k in 0..3 {
        for a in 0..2 {
            jac[k][a] = (dn[k][a] - b[k] * ds[a]) / s;
        }
    }
    (b, jac)
}

/// Scaffold features of `splat` at pixel `p`.
pub fn interpolate_on_scaffold(splat: &Splat, p: [f64; 2]) -> Vec<f64> {
    let (b, _) = scaffold_bary(splat.whiten(p));
    let n = splat.features[0].len();
    (0..n)
        .map(|c| b[0] * splat.features[0][c] + b[1] * splat.features[1][c] + b[2] * splat.features[2][c])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatSet {
    pub n_f: usize,
    pub splats: Vec<Splat>,
}

impl SplatSet {
    pub fn new(n_f: usize, splats: Vec<Splat>) -> Result<Self> {
        for s in &splats {
            s.check(n_f)?;
        }
        Ok(SplatSet { n_f, splats })
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Indices sorted front to back by `z`, ties by index.
    pub fn depth_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.splats.len()).collect();
        order.sort_by(|&a, &b| self.splats[a].z.total_cmp(&self.splats[b].z).then(a.cmp(&b)));
        order
    }

    /// Width of the decoder input.
    pub fn input_dim(&self) -> usize {
        2 * self.n_f + SH2_DIM
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Centred pinhole with focal length equal to the longer image side.
    pub fn for_image(width: usize, height: usize) -> Self {
        Camera {
            focal: width.max(height) as f64,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
        }
    }

    pub fn direction(&self, p: [f64; 2]) -> [f64; 3] {
        let d = [(p[0] - self.cx) / self.focal, (p[1] - self.cy) / self.focal, 1.0];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Contributions with `α` below this are skipped (0 keeps every splat).
    pub min_alpha: f64,
    /// Stop compositing once transmittance drops below this.
    pub early_stop: Option<f64>,
    /// Direction-term scale `k`.
    pub direction_scale: f64,
    pub mulaw: MuLawParams,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            min_alpha: 0.0,
            early_stop: None,
            direction_scale: 1.0,
            mulaw: MuLawParams::default(),
        }
    }
}

/// Front-to-back composite at `p`: `Σ α_i T_i [sin f_i; cos f_i]` followed
/// by `k · SH₂(d)`. `order` must be the depth order of `set`.
pub fn composite_pixel(set: &SplatSet, order: &[usize], p: [f64; 2], d: [f64; 3], opts: &RenderOptions) -> Vec<f64> {
    let n = set.n_f;
    let mut out = vec![0.0; 2 * n + SH2_DIM];
    let mut t = 1.0;
    let mut f = vec![0.0; n];
    let mut h = vec![0.0; 2 * n];
    for &i in order {
        if let Some(stop) = opts.early_stop {
            if t < stop {
                break;
            }
        }
        let s = &set.splats[i];
        let alpha = s.opacity * kernel_eval(s, p);
        if alpha < opts.min_alpha || alpha == 0.0 {
            continue;
        }
        let (b, _) = scaffold_bary(s.whiten(p));
        for c in 0..n {
            f[c] = b[0] * s.features[0][c] + b[1] * s.features[1][c] + b[2] * s.features[2][c];
        }
        Encoding::SinCos.encode(&f, &mut h);
        let w = alpha * t;
        for (o, &v) in out.iter_mut().zip(&h) {
            *o += w * v;
        }
        t *= 1.0 - alpha;
    }
    out[2 * n..].copy_from_slice(&sh2_scaled(d, opts.direction_scale));
    out
}

/// Accumulates into `grad` (flat, [`splat_stride`] per splat) the gradient
/// of `⟨g, composite⟩` for the harmonic part `g` (`2 n_f` entries).
pub fn composite_backward(set: &SplatSet, order: &[usize], p: [f64; 2], g: &[f64], opts: &RenderOptions, grad: &mut [f64]) {
    let n = set.n_f;
    let stride = splat_stride(n);
    struct Hit {
        i: usize,
        alpha: f64,
        rho: f64,
        t: f64,
        z: [f64; 2],
        b: [f64; 3],
        jac: [[f64; 2]; 3],
        f: Vec<f64>,
        gh: f64,
    }
    let mut hits: Vec<Hit> = Vec::new();
    let mut t = 1.0;
    let mut h = vec![0.0; 2 * n];
    for &i in order {
        if let Some(stop) = opts.early_stop {
            if t < stop {
                break;
            }
        }
        let s = &set.splats[i];
        let z = s.whiten(p);
        let rho = (-0.5 * (z[0] * z[0] + z[1] * z[1])).exp();
        let alpha = s.opacity * rho;
        if alpha < opts.min_alpha || alpha == 0.0 {
            continue;
        }
        let (b, jac) = scaffold_bary(z);
        let f: Vec<f64> = (0..n)
            .map(|c| b[0] * s.features[0][c] + b[1] * s.features[1][c] + b[2] * s.features[2][c])
            .collect();
        Encoding::SinCos.encode(&f, &mut h);
        let gh = h.iter().zip(g).map(|(a, b)| a * b).sum();
        hits.push(Hit { i, alpha, rho, t, z, b, jac, f, gh });
        t *= 1.0 - alpha;
    }
    // R_k: weighted sum of everything behind hit k, normalized by its transmittance.
    let mut r = 0.0;
    let mut gf = vec![0.0; n];
    let mut gh_in = vec![0.0; 2 * n];
    for hit in hits.iter().rev() {
        let s = &set.splats[hit.i];
        let base = hit.i * stride;
        let d_alpha = hit.t * (hit.gh - r);
        r = hit.alpha * hit.gh + (1.0 - hit.alpha) * r;
        // Feature path: dL/dh = α T g.
        let w = hit.alpha * hit.t;
        for (o, &v) in gh_in.iter_mut().zip(g) {
            *o = w * v;
        }
        gf.fill(0.0);
        Encoding::SinCos.backward(&hit.f, &gh_in, &mut gf);
        let mut dz = [0.0; 2];
        for c in 0..n {
            for k in 0..3 {
                grad[base + 6 + k * n + c] += hit.b[k] * gf[c];
                let fk = s.features[k][c];
                dz[0] += gf[c] * fk * hit.jac[k][0];
                dz[1] += gf[c] * fk * hit.jac[k][1];
            }
        }
        // Opacity and kernel path: α = σ ρ, dρ/dz = −ρ z.
        grad[base + 5] += d_alpha * hit.rho;
        let dr = d_alpha * s.opacity * hit.rho;
        dz[0] -= dr * hit.z[0];
        dz[1] -= dr * hit.z[1];
        // z = S⁻¹ Rᵀ (p − μ).
        let (sn, cs) = s.theta.sin_cos();
        let (s0, s1) = (s.scales[0], s.scales[1]);
        let rq = [hit.z[0] * s0, hit.z[1] * s1];
        grad[base] += -(dz[0] * cs / s0) + dz[1] * sn / s1;
        grad[base + 1] += -(dz[0] * sn / s0) - dz[1] * cs / s1;
        grad[base + 2] += dz[0] * rq[1] / s0 - dz[1] * rq[0] / s1;
        grad[base + 3] += -dz[0] * hit.z[0] / s0;
        grad[base + 4] += -dz[1] * hit.z[1] / s1;
    }
}

#[derive(Debug, Default)]
pub struct RenderStats {
    mlp_evals: AtomicUsize,
}

impl RenderStats {
    pub fn mlp_evals(&self) -> usize {
        self.mlp_evals.load(Ordering::Relaxed)
    }
}

/// Composited decoder inputs of every pixel, row-major.
pub fn composite_image(set: &SplatSet, width: usize, height: usize, camera: &Camera, opts: &RenderOptions) -> Vec<f64> {
    let order = set.depth_order();
    let dim = set.input_dim();
    let mut out = vec![0.0; width * height * dim];
    out.par_chunks_mut(width * dim).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let v = composite_pixel(set, &order, p, camera.direction(p), opts);
            row[x * dim..(x + 1) * dim].copy_from_slice(&v);
        }
    });
    out
}

/// Decoder outputs (μ-law codes, unclamped) for composited inputs, in fixed-size chunks.
pub fn decode_inputs(mlp: &Mlp<f64>, inputs: &[f64], stats: Option<&RenderStats>) -> Result<Vec<f64>> {
    let dim = mlp.input_dim();
    const CHUNK: usize = 4096;
    let parts: Result<Vec<Vec<f64>>> = inputs.par_chunks(CHUNK * dim).map(|c| mlp.infer(c)).collect();
    if let Some(s) = stats {
        s.mlp_evals.fetch_add(inputs.len() / dim, Ordering::Relaxed);
    }
    Ok(parts?.concat())
}

/// Renders the splat set with one decoder evaluation per pixel.
pub fn render_deferred(
    set: &SplatSet,
    mlp: &Mlp<f64>,
    width: usize,
    height: usize,
    camera: &Camera,
    opts: &RenderOptions,
    stats: Option<&RenderStats>,
) -> Result<HdrImage> {
    if mlp.input_dim() != set.input_dim() || mlp.output_dim() != 3 {
        return Err(Error::Shape(format!(
            "decoder {:?} does not match splat input width {}",
            mlp.dims(),
            set.input_dim()
        )));
    }
    let inputs = composite_image(set, width, height, camera, opts);
    let codes = decode_inputs(mlp, &inputs, stats)?;
    let data = codes
        .iter()
        .map(|&y| mulaw_decode_unchecked(y.clamp(0.0, 1.0), opts.mulaw) as f32)
        .collect();
    HdrImage::new(width, height, data, opts.mulaw.white_level)
}

// ---------------------------------------------------------------------------
// Scene files

/// A splat scene: image size, decoder shape and the splats.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub direction_scale: f64,
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
    pub set: SplatSet,
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{x}` for `{key}`")))
        })
        .collect()
}

fn parse_pair(key: &str, v: &str) -> Result<[f64; 2]> {
    let l = parse_list(key, v)?;
    if l.len() != 2 {
        return Err(Error::Config(format!("`{key}` needs two values")));
    }
    Ok([l[0], l[1]])
}

fn parse_scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl Scene {
    /// Parses the text format: `key=value` header lines and one
    /// `splat key=value ...` line per splat; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let (mut width, mut height, mut n_f) = (None, None, None);
        let mut direction_scale = 1.0;
        let (mut hidden, mut layers, mut seed) = (32usize, 2usize, 0u64);
        let mut splats = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = |e: Error| Error::Config(format!("line {}: {e}", lineno + 1));
            let mut tokens = line.split_whitespace().peekable();
            let is_splat = tokens.peek() == Some(&"splat");
            if is_splat {
                tokens.next();
            }
            let mut fields = std::collections::BTreeMap::new();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| ctx(Error::Config(format!("expected key=value, got `{tok}`"))))?;
                fields.insert(k.to_string(), v.to_string());
            }
            if is_splat {
                let nf = n_f.ok_or_else(|| ctx(Error::Config("n_f must precede splats".into())))?;
                let get = |k: &str| fields.get(k).ok_or_else(|| ctx(Error::Config(format!("splat missing `{k}`"))));
                let feat = |k: &str| -> Result<Vec<f64>> {
                    let v = parse_list(k, get(k)?).map_err(ctx)?;
                    if v.len() != nf {
                        return Err(ctx(Error::Shape(format!("`{k}` has {} values, n_f = {nf}", v.len()))));
                    }
                    Ok(v)
                };
                let splat = Splat {
                    mean: parse_pair("mean", get("mean")?).map_err(ctx)?,
                    theta: fields.get("theta").map_or(Ok(0.0), |v| parse_scalar("theta", v)).map_err(ctx)?,
                    scales: parse_pair("scale", get("scale")?).map_err(ctx)?,
                    opacity: parse_scalar("opacity", get("opacity")?).map_err(ctx)?,
                    z: fields.get("z").map_or(Ok(splats.len() as f64), |v| parse_scalar("z", v)).map_err(ctx)?,
                    features: [feat("f0")?, feat("f1")?, feat("f2")?],
                };
                splat.check(nf).map_err(ctx)?;
                splats.push(splat);
                for k in fields.keys() {
                    if !["mean", "theta", "scale", "opacity", "z", "f0", "f1", "f2"].contains(&k.as_str()) {
                        return Err(ctx(Error::Unknown {
                            kind: "splat key",
                            name: k.clone(),
                        }));
                    }
                }
            } else {
                for (k, v) in &fields {
                    match k.as_str() {
                        "width" => width = Some(parse_scalar::<usize>(k, v).map_err(ctx)?),
                        "height" => height = Some(parse_scalar::<usize>(k, v).map_err(ctx)?),
                        "n_f" => n_f = Some(parse_scalar::<usize>(k, v).map_err(ctx)?),
                        "k" => direction_scale = parse_scalar(k, v).map_err(ctx)?,
                        "hidden" => hidden = parse_scalar(k, v).map_err(ctx)?,
                        "layers" => layers = parse_scalar(k, v).map_err(ctx)?,
                        "seed" => seed = parse_scalar(k, v).map_err(ctx)?,
                        _ => {
                            return Err(ctx(Error::Unknown {
                                kind: "scene key",
                                name: k.clone(),
                            }))
                        }
                    }
                }
            }
        }
        let width = width.ok_or_else(|| Error::Config("scene missing `width`".into()))?;
        let height = height.ok_or_else(|| Error::Config("scene missing `height`".into()))?;
        let n_f = n_f.ok_or_else(|| Error::Config("scene missing `n_f`".into()))?;
        if width == 0 || height == 0 || n_f == 0 || hidden == 0 {
            return Err(Error::Config("scene sizes must be positive".into()));
        }
        Ok(Scene {
            width,
            height,
            direction_scale,
            hidden,
            layers,
            seed,
            set: SplatSet::new(n_f, splats)?,
        })
    }

    /// Decoder with `layers` hidden layers of width `hidden`, initialised
    /// from `seed`.
    pub fn decoder(&self) -> Result<Mlp<f64>> {
        use rand::SeedableRng;
        let mut dims = vec![self.set.input_dim()];
        dims.extend(std::iter::repeat_n(self.hidden, self.layers));
        dims.push(3);
        Mlp::init(&dims, &mut rand_chacha::ChaCha8Rng::seed_from_u64(self.seed))
    }

    pub fn render(&self) -> Result<HdrImage> {
        let opts = RenderOptions {
            direction_scale: self.direction_scale,
            ..RenderOptions::default()
        };
        let camera = Camera::for_image(self.width, self.height);
        render_deferred(&self.set, &self.decoder()?, self.width, self.height, &camera, &opts, None)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "width={} height={} n_f={} k={} hidden={} layers={} seed={}",
            self.width, self.height, self.set.n_f, self.direction_scale, self.hidden, self.layers, self.seed
        );
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        for sp in &self.set.splats {
            let _ = writeln!(
                s,
                "splat mean={:?},{:?} theta={:?} scale={:?},{:?} opacity={:?} z={:?} f0={} f1={} f2={}",
                sp.mean[0],
                sp.mean[1],
                sp.theta,
                sp.scales[0],
                sp.scales[1],
                sp.opacity,
                sp.z,
                list(&sp.features[0]),
                list(&sp.features[1]),
                list(&sp.features[2])
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_splat(r: &mut impl Rng, n_f: usize) -> Splat {
        Splat {
            mean: [r.random_range(0.0..16.0), r.random_range(0.0..16.0)],
            theta: r.random_range(-3.0..3.0),
            scales: [r.random_range(0.5..4.0), r.random_range(0.5..4.0)],
            opacity: r.random_range(0.05..1.0),
            z: r.random_range(0.0..1.0),
            features: std::array::from_fn(|_| (0..n_f).map(|_| r.random_range(-2.0..2.0)).collect()),
        }
    }

    fn random_set(seed: u64, n: usize, n_f: usize) -> SplatSet {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SplatSet::new(n_f, (0..n).map(|_| random_splat(&mut r, n_f)).collect()).unwrap()
    }

    #[test]
    fn kernel_values() {
        let mut s = random_set(1, 1, 2).splats[0].clone();
        assert_eq!(kernel_eval(&s, s.mean), 1.0);
        s.scales = [1.0, 1.0];
        let p = [s.mean[0] + 0.6, s.mean[1] + 0.8];
        assert!((kernel_eval(&s, p) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_two_paths_agree() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = random_splat(&mut r, 1);
            let p = [r.random_range(-5.0..20.0), r.random_range(-5.0..20.0)];
            assert!((kernel_eval(&s, p) - kernel_eval_cov(&s, p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn scaffold_interpolation() {
        let mut s = random_set(3, 1, 3).splats[0].clone();
        let f = interpolate_on_scaffold(&s, s.mean);
        for c in 0..3 {
            let mean = (s.features[0][c] + s.features[1][c] + s.features[2][c]) / 3.0;
            assert!((f[c] - mean).abs() < 1e-12);
        }
        s.theta = 0.0;
        let v0 = [s.mean[0], s.mean[1] + 2.0 * s.scales[1]];
        let f0 = interpolate_on_scaffold(&s, v0);
        for c in 0..3 {
            assert!((f0[c] - s.features[0][c]).abs() < 1e-12);
        }
        s.features = [vec![0.7; 3], vec![0.7; 3], vec![0.7; 3]];
        for p in [[-30.0, 4.0], [9.0, 9.0], [100.0, -100.0]] {
            for v in interpolate_on_scaffold(&s, p) {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaffold_jacobian_matches_fd() {
        let h = 1e-7;
        for z in [[0.1, 0.2], [3.0, 0.5], [-4.0, -3.0], [0.0, 5.0]] {
            let (_, jac) = scaffold_bary(z);
            for a in 0..2 {
                let mut zp = z;
                zp[a] += h;
                let mut zm = z;
                zm[a] -= h;
                let (bp, _) = scaffold_bary(zp);
                let (bm, _) = scaffold_bary(zm);
                for k in 0..3 {
                    assert!(((bp[k] - bm[k]) / (2.0 * h) - jac[k][a]).abs() < 1e-6);
                }
            }
        }
    }

    /// Per-splat loop with explicit transmittance products.
    fn naive_composite(set: &SplatSet, p: [f64; 2]) -> Vec<f64> {
        let order = set.depth_order();
        let n = set.n_f;
        let mut out = vec![0.0; 2 * n];
        for (rank, &i) in order.iter().enumerate() {
            let mut t = 1.0;
            for &j in &order[..rank] {
                t *= 1.0 - set.splats[j].opacity * kernel_eval(&set.splats[j], p);
            }
            let s = &set.splats[i];
            let alpha = s.opacity * kernel_eval(s, p);
            let f = interpolate_on_scaffold(s, p);
            for c in 0..n {
                out[c] += alpha * t * f[c].sin();
                out[n + c] += alpha * t * f[c].cos();
            }
        }
        out
    }

    #[test]
    fn composite_matches_naive() {
        let opts = RenderOptions::default();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for seed in 0..100 {
            let set = random_set(100 + seed, 10, 3);
            let order = set.depth_order();
            let p = [r.random_range(0.0..16.0), r.random_range(0.0..16.0)];
            let fast = composite_pixel(&set, &order, p, [0.0, 0.0, 1.0], &opts);
            let slow = naive_composite(&set, p);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_and_single_opaque() {
        let opts = RenderOptions::default();
        let empty = SplatSet::new(2, vec![]).unwrap();
        let v = composite_pixel(&empty, &[], [1.0, 1.0], [0.0, 0.0, 1.0], &opts);
        assert!(v[..4].iter().all(|&x| x == 0.0));
        let mut s = random_set(4, 1, 2);
        s.splats[0].opacity = 1.0;
        let p = s.splats[0].mean;
        let v = composite_pixel(&s, &[0], p, [0.0, 0.0, 1.0], &opts);
        let f = interpolate_on_scaffold(&s.splats[0], p);
        let e = crate::harmonic::encode_sincos(&f);
        for c in 0..4 {
            assert!((v[c] - e[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn transmittance_telescopes() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let alphas: Vec<f64> = (0..20).map(|_| r.random_range(0.0..1.0)).collect();
            let mut t = 1.0;
            let mut acc = 0.0;
            for &a in &alphas {
                acc += a * t;
                t *= 1.0 - a;
            }
            let prod: f64 = alphas.iter().map(|a| 1.0 - a).product();
            assert!((1.0 - acc - prod).abs() < 1e-14);
            assert!((t - prod).abs() < 1e-15);
        }
    }

    #[test]
    fn order_matters() {
        let mut set = random_set(6, 2, 2);
        set.splats[0].mean = [8.0, 8.0];
        set.splats[1].mean = [8.0, 8.0];
        set.splats[0].opacity = 0.9;
        set.splats[1].opacity = 0.9;
        set.splats[0].z = 0.0;
        set.splats[1].z = 1.0;
        let opts = RenderOptions::default();
        let a = composite_pixel(&set, &set.depth_order(), [8.0, 8.0], [0.0, 0.0, 1.0], &opts);
        set.splats[0].z = 2.0;
        let b = composite_pixel(&set, &set.depth_order(), [8.0, 8.0], [0.0, 0.0, 1.0], &opts);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn composite_backward_matches_fd() {
        let set = random_set(7, 6, 2);
        let n = set.n_f;
        let stride = splat_stride(n);
        let order = set.depth_order();
        let opts = RenderOptions::default();
        let g: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.7).sin()).collect();
        let p = [8.3, 7.9];
        let loss = |s: &SplatSet| -> f64 {
            composite_pixel(s, &order, p, [0.0, 0.0, 1.0], &opts)[..2 * n]
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grad = vec![0.0; set.len() * stride];
        composite_backward(&set, &order, p, &g, &opts, &mut grad);
        let h = 1e-6;
        let perturb = |s: &mut SplatSet, i: usize, k: usize, d: f64| {
            let sp = &mut s.splats[i];
            match k {
                0 => sp.mean[0] += d,
                1 => sp.mean[1] += d,
                2 => sp.theta += d,
                3 => sp.scales[0] += d,
                4 => sp.scales[1] += d,
                5 => sp.opacity += d,
                _ => sp.features[(k - 6) / n][(k - 6) % n] += d,
            }
        };
        for i in 0..set.len() {
            for k in 0..stride {
                let mut a = set.clone();
                perturb(&mut a, i, k, h);
                let mut b = set.clone();
                perturb(&mut b, i, k, -h);
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                let an = grad[i * stride + k];
                assert!((fd - an).abs() < 1e-5 * fd.abs().max(1e-3), "splat {i} param {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn deferred_render_counts_and_matches_pointwise() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut set = random_set(8, 1, 3);
        set.splats[0] = Splat {
            mean: [6.0, 5.0],
            theta: 0.2,
            scales: [20.0, 15.0],
            opacity: 1.0,
            z: 0.0,
            features: set.splats[0].features.clone(),
        };
        let mlp = Mlp::<f64>::init(&[set.input_dim(), 16, 3], &mut r).unwrap();
        let cam = Camera::for_image(12, 10);
        let opts = RenderOptions::default();
        let stats = RenderStats::default();
        let img = render_deferred(&set, &mlp, 12, 10, &cam, &opts, Some(&stats)).unwrap();
        assert_eq!(stats.mlp_evals(), 120);
        let order = set.depth_order();
        for (x, y) in [(0usize, 0usize), (5, 7), (11, 9)] {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let inp = composite_pixel(&set, &order, p, cam.direction(p), &opts);
            let out = mlp.infer(&inp).unwrap();
            let px = img.pixel(x, y);
            for c in 0..3 {
                let want = mulaw_decode_unchecked(out[c].clamp(0.0, 1.0), opts.mulaw) as f32;
                assert_eq!(px[c], want);
            }
        }
    }

    #[test]
    fn empty_set_renders_per_direction_constant() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let set = SplatSet::new(2, vec![]).unwrap();
        let mlp = Mlp::<f64>::init(&[set.input_dim(), 8, 3], &mut r).unwrap();
        let cam = Camera::for_image(4, 4);
        let opts = RenderOptions {
            direction_scale: 0.0,
            ..Default::default()
        };
        let img = render_deferred(&set, &mlp, 4, 4, &cam, &opts, None).unwrap();
        assert!(img.data.chunks(3).all(|p| p == &img.data[..3]));
    }

    #[test]
    fn early_termination_is_close() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut set = random_set(11, 40, 3);
        for s in &mut set.splats {
            s.opacity = 0.95;
            s.scales = [6.0, 6.0];
        }
        let mlp = Mlp::<f64>::init(&[set.input_dim(), 16, 3], &mut r).unwrap();
        let cam = Camera::for_image(16, 16);
        let exact = render_deferred(&set, &mlp, 16, 16, &cam, &RenderOptions::default(), None).unwrap();
        let fast_opts = RenderOptions {
            early_stop: Some(1e-4),
            ..Default::default()
        };
        let fast = render_deferred(&set, &mlp, 16, 16, &cam, &fast_opts, None).unwrap();
        let w = exact.white_level as f32;
        for (a, b) in exact.data.iter().zip(&fast.data) {
            assert!(((a - b) / w).abs() < 1e-3);
        }
    }

    #[test]
    fn scene_roundtrip() {
        let set = random_set(12, 3, 2);
        let scene = Scene {
            width: 16,
            height: 12,
            direction_scale: 0.5,
            hidden: 8,
            layers: 2,
            seed: 3,
            set,
        };
        let text = scene.to_text();
        assert_eq!(Scene::parse(&text).unwrap(), scene);
        assert!(Scene::parse("width=4 height=4 n_f=1\nsplat mean=1,1 scale=1,1 opacity=2 f0=0 f1=0 f2=0").is_err());
        assert!(Scene::parse("width=4 height=4 n_f=1 bogus=1").is_err());
        assert!(Scene::parse("height=4 n_f=1").is_err());
    }
}
