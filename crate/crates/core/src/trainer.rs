//! Image fitting: stratified sampling, losses, densification and the
//! training loops for the mesh and splat representations.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harmonic::Encoding;
use crate::imageio::{mulaw_decode_unchecked, mulaw_encode_clamped, HdrImage, MuLawParams, DEFAULT_MU};
use crate::interp::{apply_weights, basis_slice, weights_jacobian, FeatureField, GradientStencil, Interpolation, N_WEIGHTS};
use crate::mesh::{init_edge_aware, validate_or_remesh, Mesh};
use crate::metrics::{dssim_map, dssim_with_grad, psnr_values};
use crate::nn::{lr_at, Adam, Ema, Mlp, Schedule};
use crate::real::Real;
use crate::splat2d::{composite_backward, composite_image, splat_stride, Camera, RenderOptions, Splat, SplatSet};

/// Samples per independently processed chunk. Fixed so the reduction order,
/// and therefore every sum, is the same for any thread count.
pub const CHUNK: usize = 4096;

/// Bytes per pixel of the uncompressed reference (three `f32` channels).
pub const RAW_BYTES_PER_PIXEL: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    Mesh,
    Splat,
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Mesh => "mesh",
            FitMode::Splat => "splat",
        })
    }
}

impl FromStr for FitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mesh" => Ok(FitMode::Mesh),
            "splat" => Ok(FitMode::Splat),
            _ => Err(Error::Unknown {
                kind: "mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Every training knob. Parsed from `key = value` text; see [`TrainConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: FitMode,
    pub iters: usize,
    pub batch_pixels: usize,
    /// Position learning rate as a fraction of the longer image side.
    pub lr_positions: f64,
    pub lr_features: f64,
    pub lr_mlp: f64,
    pub schedule: Schedule,
    pub densify: bool,
    pub densify_start: usize,
    pub densify_end: usize,
    pub densify_every: usize,
    pub growth: f64,
    pub score_exponent: f64,
    pub min_pixels: usize,
    /// Pixel stride of the scoring render.
    pub score_stride: usize,
    /// Vertex budget; 0 derives it from `compression_ratio`.
    pub max_vertices: usize,
    pub compression_ratio: f64,
    /// Initial vertex count; 0 picks one from the budget.
    pub init_vertices: usize,
    pub init_floor: f64,
    pub learn_positions: bool,
    /// Treat the one-ring gradient stencil as constant in the position gradient.
    pub detach_stencil_positions: bool,
    pub n_f: usize,
    pub hidden: usize,
    pub layers: usize,
    pub encoding: Encoding,
    pub interpolation: Interpolation,
    pub mu: f64,
    pub seed: u64,
    pub refine_iters: usize,
    pub lambda_dssim: f64,
    pub lambda_alpha: f64,
    pub lambda_scale: f64,
    pub ema_gamma: f64,
    pub log_every: usize,
    pub eval_samples: usize,
    pub n_splats: usize,
    pub direction_scale: f64,
    /// Splat mean learning rate as a fraction of the longer image side.
    pub lr_means: f64,
    pub lr_scales: f64,
    pub lr_opacity: f64,
    pub lr_rotation: f64,
    pub lr_splat_features: f64,
    pub lr_splat_mlp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: FitMode::Mesh,
            iters: 25_000,
            batch_pixels: 160_000,
            lr_positions: 1e-4,
            lr_features: 5e-3,
            lr_mlp: 5e-5,
            schedule: Schedule::exp2d(),
            densify: true,
            densify_start: 1_500,
            densify_end: 15_000,
            densify_every: 500,
            growth: 0.35,
            score_exponent: 0.75,
            min_pixels: 3,
            score_stride: 1,
            max_vertices: 0,
            compression_ratio: 20.0,
            init_vertices: 0,
            init_floor: 0.1,
            learn_positions: true,
            detach_stencil_positions: false,
            n_f: 8,
            hidden: 64,
            layers: 2,
            encoding: Encoding::SinCos,
            interpolation: Interpolation::CloughTocher,
            mu: DEFAULT_MU,
            seed: 0,
            refine_iters: 3_000,
            lambda_dssim: 0.1,
            lambda_alpha: 0.02,
            lambda_scale: 0.005,
            ema_gamma: 0.95,
            log_every: 100,
            eval_samples: 16_384,
            n_splats: 256,
            direction_scale: 1.0,
            lr_means: 1.6e-4,
            lr_scales: 5e-3,
            lr_opacity: 5e-2,
            lr_rotation: 1e-3,
            lr_splat_features: 1.5e-2,
            lr_splat_mlp: 6.8e-4,
        }
    }
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "iters",
        "batch_pixels",
        "lr_positions",
        "lr_features",
        "lr_mlp",
        "schedule",
        "densify",
        "densify_start",
        "densify_end",
        "densify_every",
        "growth",
        "score_exponent",
        "min_pixels",
        "score_stride",
        "max_vertices",
        "compression_ratio",
        "init_vertices",
        "init_floor",
        "learn_positions",
        "detach_stencil_positions",
        "n_f",
        "hidden",
        "layers",
        "encoding",
        "interpolation",
        "mu",
        "seed",
        "refine_iters",
        "lambda_dssim",
        "lambda_alpha",
        "lambda_scale",
        "ema_gamma",
        "log_every",
        "eval_samples",
        "n_splats",
        "direction_scale",
        "lr_means",
        "lr_scales",
        "lr_opacity",
        "lr_rotation",
        "lr_splat_features",
        "lr_splat_mlp",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        match k {
            "mode" => self.mode = v.parse()?,
            "iters" => self.iters = parse_val(k, v)?,
            "batch_pixels" => self.batch_pixels = parse_val(k, v)?,
            "lr_positions" => self.lr_positions = parse_val(k, v)?,
            "lr_features" => self.lr_features = parse_val(k, v)?,
            "lr_mlp" => self.lr_mlp = parse_val(k, v)?,
            "schedule" => self.schedule = v.parse()?,
            "densify" => self.densify = parse_bool(k, v)?,
            "densify_start" => self.densify_start = parse_val(k, v)?,
            "densify_end" => self.densify_end = parse_val(k, v)?,
            "densify_every" => self.densify_every = parse_val(k, v)?,
            "growth" => self.growth = parse_val(k, v)?,
            "score_exponent" => self.score_exponent = parse_val(k, v)?,
            "min_pixels" => self.min_pixels = parse_val(k, v)?,
            "score_stride" => self.score_stride = parse_val(k, v)?,
            "max_vertices" => self.max_vertices = parse_val(k, v)?,
            "compression_ratio" => self.compression_ratio = parse_val(k, v)?,
            "init_vertices" => self.init_vertices = parse_val(k, v)?,
            "init_floor" => self.init_floor = parse_val(k, v)?,
            "learn_positions" => self.learn_positions = parse_bool(k, v)?,
            "detach_stencil_positions" => self.detach_stencil_positions = parse_bool(k, v)?,
            "n_f" => self.n_f = parse_val(k, v)?,
            "hidden" => self.hidden = parse_val(k, v)?,
            "layers" => self.layers = parse_val(k, v)?,
            "encoding" => self.encoding = v.parse()?,
            "interpolation" => self.interpolation = v.parse()?,
            "mu" => self.mu = parse_val(k, v)?,
            "seed" => self.seed = parse_val(k, v)?,
            "refine_iters" => self.refine_iters = parse_val(k, v)?,
            "lambda_dssim" => self.lambda_dssim = parse_val(k, v)?,
            "lambda_alpha" => self.lambda_alpha = parse_val(k, v)?,
            "lambda_scale" => self.lambda_scale = parse_val(k, v)?,
            "ema_gamma" => self.ema_gamma = parse_val(k, v)?,
            "log_every" => self.log_every = parse_val(k, v)?,
            "eval_samples" => self.eval_samples = parse_val(k, v)?,
            "n_splats" => self.n_splats = parse_val(k, v)?,
            "direction_scale" => self.direction_scale = parse_val(k, v)?,
            "lr_means" => self.lr_means = parse_val(k, v)?,
            "lr_scales" => self.lr_scales = parse_val(k, v)?,
            "lr_opacity" => self.lr_opacity = parse_val(k, v)?,
            "lr_rotation" => self.lr_rotation = parse_val(k, v)?,
            "lr_splat_features" => self.lr_splat_features = parse_val(k, v)?,
            "lr_splat_mlp" => self.lr_splat_mlp = parse_val(k, v)?,
            _ => {
                return Err(Error::Unknown {
                    kind: "config key",
                    name: k.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Serializes every field so that `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &k in Self::KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "iters" => self.iters.to_string(),
            "batch_pixels" => self.batch_pixels.to_string(),
            "lr_positions" => format!("{:?}", self.lr_positions),
            "lr_features" => format!("{:?}", self.lr_features),
            "lr_mlp" => format!("{:?}", self.lr_mlp),
            "schedule" => self.schedule.id().to_string(),
            "densify" => self.densify.to_string(),
            "densify_start" => self.densify_start.to_string(),
            "densify_end" => self.densify_end.to_string(),
            "densify_every" => self.densify_every.to_string(),
            "growth" => format!("{:?}", self.growth),
            "score_exponent" => format!("{:?}", self.score_exponent),
            "min_pixels" => self.min_pixels.to_string(),
            "score_stride" => self.score_stride.to_string(),
            "max_vertices" => self.max_vertices.to_string(),
            "compression_ratio" => format!("{:?}", self.compression_ratio),
            "init_vertices" => self.init_vertices.to_string(),
            "init_floor" => format!("{:?}", self.init_floor),
            "learn_positions" => self.learn_positions.to_string(),
            "detach_stencil_positions" => self.detach_stencil_positions.to_string(),
            "n_f" => self.n_f.to_string(),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "encoding" => self.encoding.to_string(),
            "interpolation" => self.interpolation.to_string(),
            "mu" => format!("{:?}", self.mu),
            "seed" => self.seed.to_string(),
            "refine_iters" => self.refine_iters.to_string(),
            "lambda_dssim" => format!("{:?}", self.lambda_dssim),
            "lambda_alpha" => format!("{:?}", self.lambda_alpha),
            "lambda_scale" => format!("{:?}", self.lambda_scale),
            "ema_gamma" => format!("{:?}", self.ema_gamma),
            "log_every" => self.log_every.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "n_splats" => self.n_splats.to_string(),
            "direction_scale" => format!("{:?}", self.direction_scale),
            "lr_means" => format!("{:?}", self.lr_means),
            "lr_scales" => format!("{:?}", self.lr_scales),
            "lr_opacity" => format!("{:?}", self.lr_opacity),
            "lr_rotation" => format!("{:?}", self.lr_rotation),
            "lr_splat_features" => format!("{:?}", self.lr_splat_features),
            "lr_splat_mlp" => format!("{:?}", self.lr_splat_mlp),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("iters", self.iters as f64),
            ("batch_pixels", self.batch_pixels as f64),
            ("lr_positions", self.lr_positions),
            ("lr_features", self.lr_features),
            ("lr_mlp", self.lr_mlp),
            ("densify_every", self.densify_every as f64),
            ("score_exponent", self.score_exponent),
            ("score_stride", self.score_stride as f64),
            ("compression_ratio", self.compression_ratio),
            ("n_f", self.n_f as f64),
            ("hidden", self.hidden as f64),
            ("layers", self.layers as f64),
            ("mu", self.mu),
            ("log_every", self.log_every as f64),
            ("eval_samples", self.eval_samples as f64),
            ("n_splats", self.n_splats as f64),
            ("lr_means", self.lr_means),
            ("lr_scales", self.lr_scales),
            ("lr_opacity", self.lr_opacity),
            ("lr_rotation", self.lr_rotation),
            ("lr_splat_features", self.lr_splat_features),
            ("lr_splat_mlp", self.lr_splat_mlp),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("lambda_dssim", self.lambda_dssim),
            ("lambda_alpha", self.lambda_alpha),
            ("lambda_scale", self.lambda_scale),
            ("direction_scale", self.direction_scale),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be non-negative, got {v}"));
            }
        }
        if self.lambda_dssim > 1.0 {
            return bad("`lambda_dssim` must lie in [0, 1]".into());
        }
        if !(self.growth > 0.0 && self.growth <= 1.0) {
            return bad(format!("`growth` must lie in (0, 1], got {}", self.growth));
        }
        if !(0.0..=1.0).contains(&self.init_floor) {
            return bad("`init_floor` must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.ema_gamma) {
            return bad("`ema_gamma` must lie in [0, 1)".into());
        }
        if self.densify && !(self.densify_start <= self.densify_end && self.densify_end <= self.iters) {
            return bad(format!(
                "densification window {}..{} must satisfy start <= end <= iters ({})",
                self.densify_start, self.densify_end, self.iters
            ));
        }
        if self.refine_iters > self.iters {
            return bad("`refine_iters` exceeds `iters`".into());
        }
        if self.init_vertices != 0 && self.init_vertices < 4 {
            return bad("`init_vertices` must be 0 (auto) or at least 4".into());
        }
        Ok(())
    }

    pub fn mulaw(&self, white_level: f64) -> Result<MuLawParams> {
        MuLawParams::new(self.mu, white_level)
    }

    /// Decoder layer widths for a mesh model.
    pub fn mlp_dims(&self, input: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat_n(self.hidden, self.layers));
        d.push(3);
        d
    }

    /// Resolved vertex budget for an image of the given size.
    pub fn vertex_budget(&self, width: usize, height: usize) -> usize {
        if self.max_vertices > 0 {
            return self.max_vertices;
        }
        let mlp_params = count_mlp_params(&self.mlp_dims(self.encoding.width(self.n_f)));
        vertex_budget(width, height, self.compression_ratio, self.n_f, mlp_params)
    }
}

fn count_mlp_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Bytes of a float container per vertex: `f64` position plus `f32` features.
pub fn float_bytes_per_vertex(n_f: usize) -> usize {
    16 + 4 * n_f
}

/// Largest vertex count whose float container (positions, features and an
/// `f32` decoder) fits `raw / ratio` bytes, where raw is [`RAW_BYTES_PER_PIXEL`]
/// per pixel. Never below the four corners.
pub fn vertex_budget(width: usize, height: usize, ratio: f64, n_f: usize, mlp_params: usize) -> usize {
    let target = RAW_BYTES_PER_PIXEL * (width * height) as f64 / ratio;
    let spare = target - 4.0 * mlp_params as f64 - 64.0;
    ((spare / float_bytes_per_vertex(n_f) as f64).floor().max(0.0) as usize).max(4)
}

// ---------------------------------------------------------------------------
// Sampling and losses

/// Sample positions with μ-law targets, `targets[3 i + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub positions: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `⌈√n⌉²` equal strata over `[0,w)×[0,h)`, one jittered point in each,
/// truncated to a random subset of `n` strata (kept in stratum order).
pub fn stratified_positions<R: Rng>(rng: &mut R, width: f64, height: f64, n: usize) -> Vec<[f64; 2]> {
    if n == 0 {
        return Vec::new();
    }
    let g = (n as f64).sqrt().ceil() as usize;
    let g = if (g - 1) * (g - 1) >= n { g - 1 } else { g };
    let (sx, sy) = (width / g as f64, height / g as f64);
    let mut cells: Vec<usize> = if g * g == n {
        (0..n).collect()
    } else {
        sample_indices(rng, g * g, n).into_vec()
    };
    cells.sort_unstable();
    cells
        .into_iter()
        .map(|c| {
            let (i, j) = (c % g, c / g);
            let x = ((i as f64 + rng.random::<f64>()) * sx).min(width * (1.0 - f64::EPSILON));
            let y = ((j as f64 + rng.random::<f64>()) * sy).min(height * (1.0 - f64::EPSILON));
            [x, y]
        })
        .collect()
}

/// Stratified sample of `n` points with bilinear ground truth in μ-law space.
pub fn sample_batch<R: Rng>(rng: &mut R, img: &HdrImage, mu: MuLawParams, n: usize) -> Batch {
    let positions = stratified_positions(rng, img.width as f64, img.height as f64, n);
    let mut targets = Vec::with_capacity(3 * n);
    for p in &positions {
        for v in img.bilinear(p[0], p[1]) {
            targets.push(mulaw_encode_clamped(v, mu).0);
        }
    }
    Batch { positions, targets }
}

/// `mean (mulaw(pred) − mulaw(gt))²` over every element, with its gradient
/// with respect to `pred`. Predictions are clamped to `[0, w]`; clamped
/// elements get zero gradient.
pub fn loss_mulaw_mse(pred: &[f64], gt: &[f64], p: MuLawParams) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&x, &g) in pred.iter().zip(gt) {
        let (fx, clamped) = mulaw_encode_clamped(x, p);
        let (fg, _) = mulaw_encode_clamped(g, p);
        let d = fx - fg;
        loss += d * d;
        grad.push(if clamped { 0.0 } else { 2.0 * d * p.encode_slope(x) / n });
    }
    Ok((loss / n, grad))
}

/// Composite loss of the splat representation and its gradients.
#[derive(Debug, Clone)]
pub struct SplatLoss {
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub grad_pred: Vec<f64>,
    pub grad_opacity: Vec<f64>,
    pub grad_scales: Vec<[f64; 2]>,
}

/// `(1−λ) L1 + λ DSSIM + λ_α mean(opacity) + λ_s mean(|s|₁) / extent`
/// on interleaved RGB images of size `w × h`. `extent = 1` gives the
/// unnormalized scale term.
#[allow(clippy::too_many_arguments)]
pub fn loss_splat(
    pred: &[f64],
    gt: &[f64],
    w: usize,
    h: usize,
    set: &SplatSet,
    lambda: f64,
    lambda_alpha: f64,
    lambda_scale: f64,
    extent: f64,
) -> Result<SplatLoss> {
    if pred.len() != gt.len() || pred.len() != 3 * w * h {
        return Err(Error::Shape("splat loss images must match".into()));
    }
    let n = pred.len() as f64;
    let mut l1 = 0.0;
    let mut grad_pred: Vec<f64> = Vec::with_capacity(pred.len());
    for (&a, &b) in pred.iter().zip(gt) {
        l1 += (a - b).abs();
        let s = if a > b {
            1.0
        } else if a < b {
            -1.0
        } else {
            0.0
        };
        grad_pred.push((1.0 - lambda) * s / n);
    }
    l1 /= n;
    let mut dssim = 0.0;
    if lambda > 0.0 {
        let (d, g) = dssim_with_grad(pred, gt, w, h, 3)?;
        dssim = d;
        for (o, gi) in grad_pred.iter_mut().zip(g) {
            *o += lambda * gi;
        }
    }
    let k = set.len().max(1) as f64;
    let r_alpha = set.splats.iter().map(|s| s.opacity).sum::<f64>() / k;
    let r_scale = set.splats.iter().map(|s| s.scales[0].abs() + s.scales[1].abs()).sum::<f64>() / (k * extent);
    let grad_opacity = vec![lambda_alpha / k; set.len()];
    let grad_scales = set
        .splats
        .iter()
        .map(|s| s.scales.map(|v| lambda_scale * v.signum() / (k * extent)))
        .collect();
    Ok(SplatLoss {
        loss: (1.0 - lambda) * l1 + lambda * dssim + lambda_alpha * r_alpha + lambda_scale * r_scale,
        l1,
        dssim,
        grad_pred,
        grad_opacity,
        grad_scales,
    })
}

// ---------------------------------------------------------------------------
// Mesh pipeline

/// Borrowed view of everything the mesh forward pass reads.
#[derive(Clone, Copy)]
pub struct MeshView<'a, T> {
    pub mesh: &'a Mesh,
    pub features: &'a [T],
    /// Vertex gradients `[v][axis][c]`; empty for linear interpolation.
    pub gradients: &'a [T],
    pub n_f: usize,
    pub mlp: &'a Mlp<T>,
    pub interpolation: Interpolation,
    pub encoding: Encoding,
}

/// Gradients of the mean squared code error.
#[derive(Debug, Clone)]
pub struct MeshGrads<T> {
    pub loss: f64,
    pub features: Vec<T>,
    /// `dL/d∇f`, consumed by the stencil backward.
    pub gradients: Vec<T>,
    pub positions: Vec<[f64; 2]>,
    pub mlp: Vec<T>,
}

impl<T: Real> MeshGrads<T> {
    fn zeros(v: usize, n_f: usize, with_grads: bool, with_pos: bool, n_mlp: usize) -> Self {
        MeshGrads {
            loss: 0.0,
            features: vec![T::zero(); v * n_f],
            gradients: if with_grads { vec![T::zero(); v * 2 * n_f] } else { Vec::new() },
            positions: if with_pos { vec![[0.0; 2]; v] } else { Vec::new() },
            mlp: vec![T::zero(); n_mlp],
        }
    }

    fn add(&mut self, o: &MeshGrads<T>) {
        self.loss += o.loss;
        for (a, &b) in self.features.iter_mut().zip(&o.features) {
            *a += b;
        }
        for (a, &b) in self.gradients.iter_mut().zip(&o.gradients) {
            *a += b;
        }
        for (a, b) in self.positions.iter_mut().zip(&o.positions) {
            a[0] += b[0];
            a[1] += b[1];
        }
        for (a, &b) in self.mlp.iter_mut().zip(&o.mlp) {
            *a += b;
        }
    }
}

/// Encoded decoder inputs of a set of points.
fn encode_points<T: Real>(view: &MeshView<T>, pts: &[[f64; 2]]) -> Result<(Vec<T>, Vec<T>)> {
    let n_f = view.n_f;
    let ew = view.encoding.width(n_f);
    let mut feats = vec![T::zero(); pts.len() * n_f];
    let mut enc = vec![T::zero(); pts.len() * ew];
    for (i, &p) in pts.iter().enumerate() {
        let (t, _) = view.mesh.locate(p)?;
        let w = crate::interp::weights(view.interpolation, view.mesh.triangle_points(t), p);
        let f = &mut feats[i * n_f..(i + 1) * n_f];
        apply_weights(view.mesh.triangles()[t], &w, view.features, view.gradients, n_f, f);
        view.encoding.encode(f, &mut enc[i * ew..(i + 1) * ew]);
    }
    Ok((feats, enc))
}

/// Raw decoder outputs (μ-law codes) at `pts`, evaluated in fixed chunks.
pub fn mesh_predict<T: Real>(view: &MeshView<T>, pts: &[[f64; 2]]) -> Result<Vec<f64>> {
    let parts: Result<Vec<Vec<f64>>> = pts
        .par_chunks(CHUNK)
        .map(|c| {
            let (_, enc) = encode_points(view, c)?;
            Ok(view.mlp.infer(&enc)?.into_iter().map(|v| v.f64()).collect())
        })
        .collect();
    Ok(parts?.concat())
}

fn chunk_grads<T: Real>(
    view: &MeshView<T>,
    pts: &[[f64; 2]],
    targets: &[f64],
    norm: f64,
    want_pos: bool,
) -> Result<MeshGrads<T>> {
    let n_f = view.n_f;
    let ew = view.encoding.width(n_f);
    let nv = view.mesh.num_vertices();
    let used = if view.gradients.is_empty() { 3 } else { N_WEIGHTS };
    let mut out = MeshGrads::zeros(nv, n_f, !view.gradients.is_empty(), want_pos, view.mlp.num_params());
    let mut tris = Vec::with_capacity(pts.len());
    let mut ws = Vec::with_capacity(pts.len());
    let mut jacs = Vec::with_capacity(if want_pos { pts.len() } else { 0 });
    let mut feats = vec![T::zero(); pts.len() * n_f];
    let mut enc = vec![T::zero(); pts.len() * ew];
    for (i, &p) in pts.iter().enumerate() {
        let (t, _) = view.mesh.locate(p)?;
        let v = view.mesh.triangle_points(t);
        let w = if want_pos {
            let (w, j) = weights_jacobian(view.interpolation, v, p);
            jacs.push(j);
            w
        } else {
            crate::interp::weights(view.interpolation, v, p)
        };
        let tri = view.mesh.triangles()[t];
        let f = &mut feats[i * n_f..(i + 1) * n_f];
        apply_weights(tri, &w, view.features, view.gradients, n_f, f);
        view.encoding.encode(f, &mut enc[i * ew..(i + 1) * ew]);
        tris.push(tri);
        ws.push(w);
    }
    let cache = view.mlp.forward(&enc)?;
    let y = cache.output();
    let mut gy = vec![T::zero(); y.len()];
    for (k, (&yv, &t)) in y.iter().zip(targets).enumerate() {
        let d = yv.f64() - t;
        out.loss += d * d;
        gy[k] = T::of(2.0 * d / norm);
    }
    let dx = view.mlp.backward(&cache, &gy, &mut out.mlp)?;
    let mut df = vec![T::zero(); n_f];
    for i in 0..pts.len() {
        let f = &feats[i * n_f..(i + 1) * n_f];
        df.fill(T::zero());
        view.encoding.backward(f, &dx[i * ew..(i + 1) * ew], &mut df);
        let tri = tris[i];
        let w = &ws[i];
        let mut s = [0.0f64; N_WEIGHTS];
        for k in 0..used {
            let (dst, off) = if k < 3 {
                (&mut out.features, tri[k] as usize * n_f)
            } else {
                let vi = (k - 3) / 2;
                (&mut out.gradients, tri[vi] as usize * 2 * n_f + ((k - 3) % 2) * n_f)
            };
            let wk = T::of(w[k]);
            for c in 0..n_f {
                dst[off + c] += wk * df[c];
            }
            if want_pos {
                let b = basis_slice(tri, k, view.features, view.gradients, n_f);
                s[k] = b.iter().zip(&df).map(|(&bv, &dv)| (bv * dv).f64()).sum();
            }
        }
        if want_pos {
            let jac = &jacs[i];
            for (j, &v) in tri.iter().enumerate() {
                for a in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..used {
                        acc += s[k] * jac[k][2 * j + a];
                    }
                    out.positions[v as usize][a] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Loss `mean (y − target)²` over samples and channels, with gradients for
/// features, positions (if `want_positions`) and decoder weights. Chunks
/// are processed in parallel and reduced in a fixed order. With
/// `stencil_positions = false` the one-ring stencil is treated as constant.
pub fn mesh_loss_and_grads<T: Real>(
    view: &MeshView<T>,
    stencil: Option<&GradientStencil>,
    batch: &Batch,
    want_positions: bool,
    stencil_positions: bool,
) -> Result<MeshGrads<T>> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if view.interpolation.needs_gradients() && view.gradients.len() != view.features.len() * 2 {
        return Err(Error::Shape("interpolation needs vertex gradients".into()));
    }
    let norm = batch.targets.len() as f64;
    let parts: Result<Vec<MeshGrads<T>>> = batch
        .positions
        .par_chunks(CHUNK)
        .zip(batch.targets.par_chunks(3 * CHUNK))
        .map(|(p, t)| chunk_grads(view, p, t, norm, want_positions))
        .collect();
    let mut parts = parts?.into_iter();
    let mut total = parts.next().expect("non-empty batch");
    for p in parts {
        total.add(&p);
    }
    total.loss /= norm;
    if !total.gradients.is_empty() {
        let stencil = stencil.ok_or_else(|| Error::Shape("gradient stencil required".into()))?;
        stencil.backward_features(&total.gradients, view.n_f, &mut total.features);
        if want_positions && stencil_positions {
            stencil.backward_positions(view.mesh, view.features, &total.gradients, view.n_f, &mut total.positions);
        }
    }
    Ok(total)
}

/// Trained mesh representation.
#[derive(Debug, Clone)]
pub struct MeshModel {
    pub width: usize,
    pub height: usize,
    pub mulaw: MuLawParams,
    pub interpolation: Interpolation,
    pub encoding: Encoding,
    pub mesh: Mesh,
    pub field: FeatureField<f32>,
    pub mlp: Mlp<f32>,
}

impl PartialEq for MeshModel {
    fn eq(&self, o: &Self) -> bool {
        self.width == o.width
            && self.height == o.height
            && self.mulaw == o.mulaw
            && self.interpolation == o.interpolation
            && self.encoding == o.encoding
            && self.mesh.positions() == o.mesh.positions()
            && self.mesh.triangles() == o.mesh.triangles()
            && self.field.n_f() == o.field.n_f()
            && self.field.features() == o.field.features()
            && self.mlp.dims() == o.mlp.dims()
            && self.mlp.params() == o.mlp.params()
    }
}

impl MeshModel {
    pub fn check(&self) -> Result<()> {
        self.mesh.check()?;
        if self.field.num_vertices() != self.mesh.num_vertices() {
            return Err(Error::Shape("feature count does not match vertex count".into()));
        }
        if self.mlp.input_dim() != self.encoding.width(self.field.n_f()) || self.mlp.output_dim() != 3 {
            return Err(Error::Shape(format!("decoder dims {:?} do not fit the encoding", self.mlp.dims())));
        }
        Ok(())
    }

    fn gradients(&self) -> Vec<f32> {
        if self.interpolation.needs_gradients() {
            GradientStencil::new(&self.mesh).apply(self.field.features(), self.field.n_f())
        } else {
            Vec::new()
        }
    }

    /// Clamped μ-law codes on a grid of block centres with the given stride.
    /// Returns `(codes, grid_width, grid_height)`.
    pub fn render_codes(&self, stride: usize) -> Result<(Vec<f64>, usize, usize)> {
        let grads = self.gradients();
        let view = MeshView {
            mesh: &self.mesh,
            features: self.field.features(),
            gradients: &grads,
            n_f: self.field.n_f(),
            mlp: &self.mlp,
            interpolation: self.interpolation,
            encoding: self.encoding,
        };
        let (pts, gw, gh) = grid_points(self.width, self.height, stride);
        let mut codes = mesh_predict(&view, &pts)?;
        for c in codes.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        Ok((codes, gw, gh))
    }

    pub fn render(&self) -> Result<HdrImage> {
        let (codes, _, _) = self.render_codes(1)?;
        let data = codes.iter().map(|&y| mulaw_decode_unchecked(y, self.mulaw) as f32).collect();
        HdrImage::new(self.width, self.height, data, self.mulaw.white_level)
    }
}

/// Centres of `stride × stride` blocks, row-major.
pub fn grid_points(width: usize, height: usize, stride: usize) -> (Vec<[f64; 2]>, usize, usize) {
    let s = stride.max(1);
    let (gw, gh) = (width.div_ceil(s), height.div_ceil(s));
    let mut pts = Vec::with_capacity(gw * gh);
    for j in 0..gh {
        for i in 0..gw {
            let x = ((i * s) as f64 + 0.5 * s as f64).min(width as f64 - 0.5);
            let y = ((j * s) as f64 + 0.5 * s as f64).min(height as f64 - 0.5);
            pts.push([x, y]);
        }
    }
    (pts, gw, gh)
}

fn grid_targets(img: &HdrImage, mu: MuLawParams, pts: &[[f64; 2]]) -> Vec<f64> {
    pts.iter()
        .flat_map(|p| img.bilinear(p[0], p[1]).map(|v| mulaw_encode_clamped(v, mu).0))
        .collect()
}

// ---------------------------------------------------------------------------
// Densification

/// Mean per-pixel DSSIM of each triangle times `pixels^exponent`; triangles
/// with fewer than `min_pixels` pixels score `−∞`. `pred` and `gt` are
/// interleaved RGB on the stride grid, each grid point standing for
/// `stride²` pixels.
#[allow(clippy::too_many_arguments)]
pub fn score_triangles(
    mesh: &Mesh,
    pred: &[f64],
    gt: &[f64],
    width: usize,
    height: usize,
    stride: usize,
    exponent: f64,
    min_pixels: usize,
) -> Result<Vec<f64>> {
    let (pts, gw, gh) = grid_points(width, height, stride);
    let map = dssim_map(pred, gt, gw, gh, 3)?;
    let mut sum = vec![0.0; mesh.num_triangles()];
    let mut count = vec![0usize; mesh.num_triangles()];
    let tris: Result<Vec<usize>> = pts.par_iter().map(|&p| mesh.locate(p).map(|(t, _)| t)).collect();
    for (t, d) in tris?.into_iter().zip(&map) {
        sum[t] += d;
        count[t] += 1;
    }
    let area = (stride.max(1) * stride.max(1)) as f64;
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| {
            if c == 0 {
                f64::NEG_INFINITY
            } else {
                triangle_score(s / c as f64, c as f64 * area, exponent, min_pixels)
            }
        })
        .collect())
}

/// `mean_dssim · pixels^exponent`, or `−∞` below `min_pixels`.
pub fn triangle_score(mean_dssim: f64, pixels: f64, exponent: f64, min_pixels: usize) -> f64 {
    if pixels < min_pixels as f64 {
        f64::NEG_INFINITY
    } else {
        mean_dssim * pixels.powf(exponent)
    }
}

/// Inserts centroid vertices into the highest-scoring triangles: at most
/// `⌊growth·V⌋` and never beyond `max_vertices`; only positive finite
/// scores qualify, ties broken by triangle id. New features are the mean
/// of the parent vertices. Returns the number of inserted vertices.
pub fn densify_step<T: Real>(
    mesh: &mut Mesh,
    field: &mut FeatureField<T>,
    scores: &[f64],
    growth: f64,
    max_vertices: usize,
) -> Result<usize> {
    if scores.len() != mesh.num_triangles() {
        return Err(Error::Shape("one score per triangle required".into()));
    }
    let v = mesh.num_vertices();
    let cap = ((growth * v as f64).floor() as usize).min(max_vertices.saturating_sub(v));
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&t| scores[t] > 0.0 && scores[t].is_finite()).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cand.truncate(cap);
    if cand.is_empty() {
        return Ok(0);
    }
    let n_f = field.n_f();
    let third = T::of(1.0 / 3.0);
    let mut pts = Vec::with_capacity(cand.len());
    for &t in &cand {
        pts.push(mesh.centroid(t));
        let tri = mesh.triangles()[t];
        let f: Vec<T> = (0..n_f)
            .map(|c| (field.feature(tri[0] as usize)[c] + field.feature(tri[1] as usize)[c] + field.feature(tri[2] as usize)[c]) * third)
            .collect();
        field.push_vertex(&f);
    }
    mesh.insert_points(&pts)?;
    if !mesh.is_valid() {
        *mesh = validate_or_remesh(mesh.clone());
    }
    while field.num_vertices() < mesh.num_vertices() {
        field.push_vertex(&vec![T::zero(); n_f]);
    }
    Ok(cand.len())
}

// ---------------------------------------------------------------------------
// Fitting loops

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub vertices: usize,
    /// PSNR of the EMA decoder on fixed held-out strata, μ-law space.
    pub psnr_heldout: Option<f64>,
    pub event: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MeshFit {
    pub model: MeshModel,
    pub log: Vec<LogEntry>,
    pub final_loss: f64,
    pub densify_events: Vec<(usize, usize)>,
}

fn rebind_schedule(s: Schedule, total: usize) -> Schedule {
    match s {
        Schedule::Cosine { final_factor, .. } => Schedule::Cosine {
            total: total as f64,
            final_factor,
        },
        Schedule::Exp3d { final_factor, .. } => Schedule::Exp3d {
            total: total as f64,
            final_factor,
        },
        other => other,
    }
}

fn init_features<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    (0..n).map(|_| T::of(normal.sample(rng))).collect()
}

/// Starts the decoder at the mean image: zero output weights, mean-code bias.
fn set_output_bias<T: Real>(mlp: &mut Mlp<T>, bias: [f64; 3]) {
    let last = mlp.num_layers() - 1;
    let (wt, b) = mlp.layer_mut(last);
    wt.fill(T::zero());
    for (o, v) in b.iter_mut().zip(bias) {
        *o = T::of(v);
    }
}

fn mean_code(img: &HdrImage, mu: MuLawParams) -> [f64; 3] {
    let codes = img.to_mulaw(mu);
    let mut m = [0.0; 3];
    for px in codes.chunks(3) {
        for c in 0..3 {
            m[c] += px[c];
        }
    }
    m.map(|v| v / img.pixel_count() as f64)
}

fn non_finite(step: usize, detail: String) -> Error {
    Error::NonFinite { step, detail }
}

/// Fits the mesh representation to `img`.
pub fn fit_image(img: &HdrImage, cfg: &TrainConfig) -> Result<MeshFit> {
    fit_image_with(img, cfg, |_| {})
}

/// [`fit_image`] with a callback receiving each log entry as it is produced.
pub fn fit_image_with(img: &HdrImage, cfg: &TrainConfig, mut on_log: impl FnMut(&LogEntry)) -> Result<MeshFit> {
    cfg.validate()?;
    img.check()?;
    let mu = cfg.mulaw(img.white_level)?;
    let (w, h) = (img.width, img.height);
    let n_f = cfg.n_f;
    let budget = cfg.vertex_budget(w, h);
    let n_init = if cfg.init_vertices > 0 {
        cfg.init_vertices
    } else if cfg.densify {
        // Start low enough that the budget is reached about halfway through the window.
        let events = (cfg.densify_end - cfg.densify_start) / cfg.densify_every + 1;
        let shrink = (1.0 + cfg.growth).powf(events as f64 * 0.5);
        ((budget as f64 / shrink) as usize).max(16)
    } else {
        budget
    }
    .min(budget)
    .max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mesh = init_edge_aware(img, n_init, cfg.init_floor, cfg.seed ^ 0x5EED)?;
    let mut field = FeatureField::<f32>::new(n_f, init_features(&mut rng, mesh.num_vertices() * n_f))?;
    let dims = cfg.mlp_dims(cfg.encoding.width(n_f));
    let mut mlp = Mlp::<f32>::init(&dims, &mut rng)?;
    set_output_bias(&mut mlp, mean_code(img, mu));
    let mut ema = Ema::new(mlp.params(), cfg.ema_gamma)?;
    let mut adam_f = Adam::<f32>::new(field.features().len());
    let mut adam_p = Adam::<f64>::new(mesh.num_vertices() * 2);
    let mut adam_m = Adam::<f32>::new(mlp.num_params());
    let schedule = rebind_schedule(cfg.schedule, cfg.iters);
    let extent = w.max(h) as f64;
    let refine_from = cfg.iters - cfg.refine_iters;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE7A1);
    let heldout = sample_batch(&mut eval_rng, img, mu, cfg.eval_samples);

    let mut log = Vec::new();
    let mut densify_events = Vec::new();
    let mut final_loss = f64::NAN;
    let mut stencil = GradientStencil::new(&mesh);
    let mut stencil_dirty = false;

    for step in 0..cfg.iters {
        let learn_pos = cfg.learn_positions && step < refine_from;
        if step == refine_from && cfg.learn_positions && !mesh.is_delaunay() {
            mesh.retriangulate()?;
            mesh = validate_or_remesh(mesh);
            stencil_dirty = true;
        }
        if stencil_dirty {
            stencil = GradientStencil::new(&mesh);
            stencil_dirty = false;
        }
        if cfg.interpolation.needs_gradients() {
            field.refresh_gradients(&stencil);
        }
        let batch = sample_batch(&mut rng, img, mu, cfg.batch_pixels);
        let grads = {
            let view = MeshView {
                mesh: &mesh,
                features: field.features(),
                gradients: field.gradients().unwrap_or(&[]),
                n_f,
                mlp: &mlp,
                interpolation: cfg.interpolation,
                encoding: cfg.encoding,
            };
            mesh_loss_and_grads(&view, Some(&stencil), &batch, learn_pos, !cfg.detach_stencil_positions)?
        };
        final_loss = grads.loss;
        let lr_f = lr_at(&schedule, step, cfg.lr_features);
        if !grads.loss.is_finite() {
            return Err(non_finite(
                step,
                format!(
                    "loss = {} with {} vertices, lr_features = {lr_f:e}, |mlp| = {}",
                    grads.loss,
                    mesh.num_vertices(),
                    mlp.params().iter().map(|v| v.abs()).fold(0.0f32, f32::max)
                ),
            ));
        }
        adam_f.step(field.features_mut(), &grads.features, lr_f);
        adam_m.step(mlp.params_mut(), &grads.mlp, lr_at(&schedule, step, cfg.lr_mlp));
        ema.update(mlp.params());
        if learn_pos {
            let mut flat: Vec<f64> = mesh.positions().iter().flat_map(|p| [p[0], p[1]]).collect();
            let g: Vec<f64> = grads
                .positions
                .iter()
                .zip(mesh.boundary())
                .flat_map(|(g, k)| k.project(*g))
                .collect();
            adam_p.step(&mut flat, &g, lr_at(&schedule, step, cfg.lr_positions * extent));
            let new: Vec<[f64; 2]> = flat
                .chunks(2)
                .zip(mesh.boundary())
                .map(|(p, k)| k.constrain([p[0], p[1]], w as f64, h as f64))
                .collect();
            mesh.set_positions(new)?;
            if !mesh.is_valid() {
                mesh = validate_or_remesh(mesh);
            }
            stencil_dirty = true;
        }

        let densify_now = cfg.densify
            && step > 0
            && step >= cfg.densify_start
            && step <= cfg.densify_end
            && (step - cfg.densify_start).is_multiple_of(cfg.densify_every)
            && mesh.num_vertices() < budget
            && step < refine_from;
        let mut event = None;
        if densify_now {
            if cfg.interpolation.needs_gradients() {
                field.refresh_gradients(&stencil);
            }
            let model = MeshModel {
                width: w,
                height: h,
                mulaw: mu,
                interpolation: cfg.interpolation,
                encoding: cfg.encoding,
                mesh: mesh.clone(),
                field: field.clone(),
                mlp: Mlp::from_params(mlp.dims(), ema.shadow().to_vec())?,
            };
            let (pred, _, _) = model.render_codes(cfg.score_stride)?;
            let (pts, _, _) = grid_points(w, h, cfg.score_stride);
            let gt = grid_targets(img, mu, &pts);
            let scores = score_triangles(&mesh, &pred, &gt, w, h, cfg.score_stride, cfg.score_exponent, cfg.min_pixels)?;
            let before = mesh.num_vertices();
            let added = densify_step(&mut mesh, &mut field, &scores, cfg.growth, budget)?;
            if added > 0 {
                adam_f.grow(field.features().len());
                adam_p.grow(mesh.num_vertices() * 2);
                stencil_dirty = true;
                densify_events.push((step, mesh.num_vertices()));
                event = Some(format!("densify {before} -> {}", mesh.num_vertices()));
            }
        }

        let last = step + 1 == cfg.iters;
        if step % cfg.log_every == 0 || last || event.is_some() {
            let psnr = if step % cfg.log_every == 0 || last {
                if cfg.interpolation.needs_gradients() && stencil_dirty {
                    stencil = GradientStencil::new(&mesh);
                    stencil_dirty = false;
                }
                if cfg.interpolation.needs_gradients() {
                    field.refresh_gradients(&stencil);
                }
                let ema_mlp = Mlp::from_params(mlp.dims(), ema.shadow().to_vec())?;
                let view = MeshView {
                    mesh: &mesh,
                    features: field.features(),
                    gradients: field.gradients().unwrap_or(&[]),
                    n_f,
                    mlp: &ema_mlp,
                    interpolation: cfg.interpolation,
                    encoding: cfg.encoding,
                };
                let mut pred = mesh_predict(&view, &heldout.positions)?;
                pred.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                Some(psnr_values(&pred, &heldout.targets))
            } else {
                None
            };
            let entry = LogEntry {
                step,
                loss: grads.loss,
                lr: lr_f,
                vertices: mesh.num_vertices(),
                psnr_heldout: psnr,
                event,
            };
            on_log(&entry);
            log.push(entry);
        }
    }
    if !mesh.is_delaunay() {
        mesh.retriangulate()?;
        mesh = validate_or_remesh(mesh);
    }
    let model = MeshModel {
        width: w,
        height: h,
        mulaw: mu,
        interpolation: cfg.interpolation,
        encoding: cfg.encoding,
        mesh,
        field,
        mlp: Mlp::from_params(&dims, ema.shadow().to_vec())?,
    };
    Ok(MeshFit {
        model,
        log,
        final_loss,
        densify_events,
    })
}

/// PSNR in μ-law space of the model's full render against `img`.
pub fn mesh_psnr(model: &MeshModel, img: &HdrImage) -> Result<f64> {
    let (pred, _, _) = model.render_codes(1)?;
    Ok(psnr_values(&pred, &img.to_mulaw(model.mulaw)))
}

// ---------------------------------------------------------------------------
// Splat fitting

/// Trained splat representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatModel {
    pub width: usize,
    pub height: usize,
    pub mulaw: MuLawParams,
    pub camera: Camera,
    pub direction_scale: f64,
    pub set: SplatSet,
    pub mlp: Mlp<f64>,
}

impl SplatModel {
    pub fn options(&self) -> RenderOptions {
        RenderOptions {
            min_alpha: 0.0,
            early_stop: None,
            direction_scale: self.direction_scale,
            mulaw: self.mulaw,
        }
    }

    /// Clamped μ-law codes of every pixel.
    pub fn render_codes(&self) -> Result<Vec<f64>> {
        let inputs = composite_image(&self.set, self.width, self.height, &self.camera, &self.options());
        let mut y = crate::splat2d::decode_inputs(&self.mlp, &inputs, None)?;
        y.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(y)
    }

    pub fn render(&self) -> Result<HdrImage> {
        crate::splat2d::render_deferred(&self.set, &self.mlp, self.width, self.height, &self.camera, &self.options(), None)
    }
}

#[derive(Debug, Clone)]
pub struct SplatFit {
    pub model: SplatModel,
    pub log: Vec<LogEntry>,
    pub final_loss: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fits `cfg.n_splats` splats to `img` with full-frame steps.
pub fn fit_splats(img: &HdrImage, cfg: &TrainConfig) -> Result<SplatFit> {
    fit_splats_with(img, cfg, |_| {})
}

/// Unconstrained parameters: means, θ, log-scales, opacity logits, features.
struct SplatParams {
    means: Vec<f64>,
    theta: Vec<f64>,
    log_scales: Vec<f64>,
    logits: Vec<f64>,
    features: Vec<f64>,
    z: Vec<f64>,
}

impl SplatParams {
    fn to_set(&self, n_f: usize) -> SplatSet {
        let splats = (0..self.theta.len())
            .map(|i| Splat {
                mean: [self.means[2 * i], self.means[2 * i + 1]],
                theta: self.theta[i],
                scales: [self.log_scales[2 * i].exp(), self.log_scales[2 * i + 1].exp()],
                opacity: sigmoid(self.logits[i]).clamp(1e-12, 1.0),
                z: self.z[i],
                features: std::array::from_fn(|k| {
                    let off = (3 * i + k) * n_f;
                    self.features[off..off + n_f].to_vec()
                }),
            })
            .collect();
        SplatSet { n_f, splats }
    }
}

pub fn fit_splats_with(img: &HdrImage, cfg: &TrainConfig, mut on_log: impl FnMut(&LogEntry)) -> Result<SplatFit> {
    cfg.validate()?;
    img.check()?;
    let mu = cfg.mulaw(img.white_level)?;
    let (w, h) = (img.width, img.height);
    let n = cfg.n_splats;
    let n_f = cfg.n_f;
    let extent = w.max(h) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres = stratified_positions(&mut rng, w as f64, h as f64, n);
    let s0 = (0.5 * ((w * h) as f64 / n as f64).sqrt()).max(0.5).ln();
    let mut p = SplatParams {
        means: centres.iter().flat_map(|c| [c[0], c[1]]).collect(),
        theta: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        log_scales: vec![s0; 2 * n],
        logits: vec![0.0; n],
        features: init_features(&mut rng, 3 * n * n_f),
        z: (0..n).map(|_| rng.random::<f64>()).collect(),
    };
    let camera = Camera::for_image(w, h);
    let opts = RenderOptions {
        min_alpha: 0.0,
        early_stop: None,
        direction_scale: cfg.direction_scale,
        mulaw: mu,
    };
    let dims = cfg.mlp_dims(2 * n_f + crate::harmonic::SH2_DIM);
    let mut mlp = Mlp::<f64>::init(&dims, &mut rng)?;
    set_output_bias(&mut mlp, mean_code(img, mu));
    let mut ema = Ema::new(mlp.params(), cfg.ema_gamma)?;
    let gt = img.to_mulaw(mu);
    let schedule = rebind_schedule(cfg.schedule, cfg.iters);
    let refine_from = cfg.iters - cfg.refine_iters;
    let mut a_mean = Adam::<f64>::new(2 * n);
    let mut a_theta = Adam::<f64>::new(n);
    let mut a_scale = Adam::<f64>::new(2 * n);
    let mut a_logit = Adam::<f64>::new(n);
    let mut a_feat = Adam::<f64>::new(3 * n * n_f);
    let mut a_mlp = Adam::<f64>::new(mlp.num_params());
    let stride = splat_stride(n_f);
    let hw = 2 * n_f;
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.iters {
        let refine = step >= refine_from;
        let set = p.to_set(n_f);
        let order = set.depth_order();
        let inputs = composite_image(&set, w, h, &camera, &opts);
        let dim = set.input_dim();
        let (lam_a, lam_s) = if refine { (0.0, 0.0) } else { (cfg.lambda_alpha, cfg.lambda_scale) };
        // Decoder forward and backward per chunk of pixels.
        let caches: Result<Vec<_>> = inputs.par_chunks(CHUNK * dim).map(|c| mlp.forward(c)).collect();
        let caches = caches?;
        let pred: Vec<f64> = caches.iter().flat_map(|c| c.output().iter().copied()).collect();
        let loss = loss_splat(&pred, &gt, w, h, &set, cfg.lambda_dssim, lam_a, lam_s, extent)?;
        final_loss = loss.loss;
        if !loss.loss.is_finite() {
            return Err(non_finite(step, format!("splat loss = {} with {n} splats", loss.loss)));
        }
        let parts: Result<Vec<(Vec<f64>, Vec<f64>)>> = caches
            .par_iter()
            .zip(loss.grad_pred.par_chunks(3 * CHUNK))
            .map(|(c, g)| {
                let mut gm = vec![0.0; mlp.num_params()];
                let dx = mlp.backward(c, g, &mut gm)?;
                Ok((gm, dx))
            })
            .collect();
        let mut g_mlp = vec![0.0; mlp.num_params()];
        let mut dx_all = Vec::with_capacity(inputs.len());
        for (gm, dx) in parts? {
            for (a, b) in g_mlp.iter_mut().zip(gm) {
                *a += b;
            }
            dx_all.extend(dx);
        }
        // Compositor backward, row-parallel with ordered reduction.
        let rows: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut g = vec![0.0; n * stride];
                for x in 0..w {
                    let i = y * w + x;
                    let pix = [x as f64 + 0.5, y as f64 + 0.5];
                    composite_backward(&set, &order, pix, &dx_all[i * dim..i * dim + hw], &opts, &mut g);
                }
                g
            })
            .collect();
        let mut g = vec![0.0; n * stride];
        for r in rows {
            for (a, b) in g.iter_mut().zip(r) {
                *a += b;
            }
        }
        let lr = |base: f64| lr_at(&schedule, step, base);
        let mut g_feat = vec![0.0; 3 * n * n_f];
        for i in 0..n {
            g_feat[3 * i * n_f..3 * (i + 1) * n_f].copy_from_slice(&g[i * stride + 6..(i + 1) * stride]);
        }
        a_feat.step(&mut p.features, &g_feat, lr(cfg.lr_splat_features));
        a_mlp.step(mlp.params_mut(), &g_mlp, lr(cfg.lr_splat_mlp));
        ema.update(mlp.params());
        if !refine {
            let mut g_mean = vec![0.0; 2 * n];
            let mut g_theta = vec![0.0; n];
            let mut g_scale = vec![0.0; 2 * n];
            let mut g_logit = vec![0.0; n];
            for (i, s) in set.splats.iter().enumerate() {
                let b = i * stride;
                g_mean[2 * i] = g[b];
                g_mean[2 * i + 1] = g[b + 1];
                g_theta[i] = g[b + 2];
                for a in 0..2 {
                    g_scale[2 * i + a] = (g[b + 3 + a] + loss.grad_scales[i][a]) * s.scales[a];
                }
                let sg = sigmoid(p.logits[i]);
                g_logit[i] = (g[b + 5] + loss.grad_opacity[i]) * sg * (1.0 - sg);
            }
            a_mean.step(&mut p.means, &g_mean, lr(cfg.lr_means * extent));
            a_theta.step(&mut p.theta, &g_theta, lr(cfg.lr_rotation));
            a_scale.step(&mut p.log_scales, &g_scale, lr(cfg.lr_scales));
            a_logit.step(&mut p.logits, &g_logit, lr(cfg.lr_opacity));
        }
        let last = step + 1 == cfg.iters;
        if step % cfg.log_every == 0 || last {
            let entry = LogEntry {
                step,
                loss: loss.loss,
                lr: lr(cfg.lr_splat_features),
                vertices: n,
                psnr_heldout: Some(psnr_values(&pred.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>(), &gt)),
                event: refine.then(|| "refine".to_string()),
            };
            on_log(&entry);
            log.push(entry);
        }
    }
    let model = SplatModel {
        width: w,
        height: h,
        mulaw: mu,
        camera,
        direction_scale: cfg.direction_scale,
        set: p.to_set(n_f),
        mlp: Mlp::from_params(&dims, ema.shadow().to_vec())?,
    };
    Ok(SplatFit {
        model,
        log,
        final_loss,
    })
}
