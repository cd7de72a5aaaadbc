//! Post-training quantization and the `.nht` container.
//!
//! A model is first lowered to a set of sections (positions, features,
//! tie-break bits, decoder weights), each either in float or quantized form.
//! [`quantize`] returns exactly the model that [`deserialize`] reconstructs
//! from [`serialize`], so the codec loss can be measured without touching
//! bytes. Triangulations are never stored: the decoder re-runs Delaunay on
//! the stored positions and replays one flip bit per co-circular edge.
//!
//! The byte layout is documented in `docs/format.md`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use half::f16;
use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};
use crate::harmonic::Encoding;
use crate::imageio::{HdrImage, MuLawParams};
use crate::interp::{FeatureField, Interpolation};
use crate::mesh::{validate_or_remesh, Mesh, EPS_CIRC};
use crate::metrics::psnr_values;
use crate::nn::Mlp;
use crate::splat2d::{Camera, Splat, SplatSet};
use crate::trainer::{MeshModel, SplatModel};

pub const MAGIC: [u8; 4] = *b"NHT1";
pub const VERSION: u16 = 1;
pub const ZSTD_LEVEL: i32 = 19;
/// Fixed-point scale of stored positions.
pub const POSITION_LEVELS: f64 = 65535.0;
/// Upper bound on the declared decompressed size, to refuse absurd headers.
pub const MAX_BODY_BYTES: u64 = 1 << 32;

const HEADER_LEN: usize = 24;
const CHECKSUM_LEN: usize = 8;

const KIND_MESH: u8 = 0;
const KIND_SPLAT: u8 = 1;

const SEC_POSITIONS: u8 = 1;
const SEC_FEATURES: u8 = 2;
const SEC_TIEBITS: u8 = 3;
const SEC_MLP: u8 = 4;
const SEC_SPLATS: u8 = 5;

/// Which quantizers and which entropy stage are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuantFlags {
    /// Per-channel affine int8 features.
    pub features_int8: bool,
    /// uint16 fixed-point positions (mesh) or f32 geometry (splats).
    pub positions_u16: bool,
    /// Half-precision decoder weights.
    pub mlp_f16: bool,
    /// Zstandard frame around the body.
    pub entropy: bool,
}

impl QuantFlags {
    /// Lossless float container.
    pub const NONE: QuantFlags = QuantFlags {
        features_int8: false,
        positions_u16: false,
        mlp_f16: false,
        entropy: false,
    };
    /// Every quantizer plus entropy coding.
    pub const ALL: QuantFlags = QuantFlags {
        features_int8: true,
        positions_u16: true,
        mlp_f16: true,
        entropy: true,
    };

    pub fn bits(self) -> u16 {
        (self.features_int8 as u16) | (self.positions_u16 as u16) << 1 | (self.mlp_f16 as u16) << 2 | (self.entropy as u16) << 3
    }

    pub fn from_bits(bits: u16) -> Result<Self> {
        if bits & !0xF != 0 {
            return Err(Error::Corrupt(format!("unknown flag bits {bits:#06x}")));
        }
        Ok(QuantFlags {
            features_int8: bits & 1 != 0,
            positions_u16: bits & 2 != 0,
            mlp_f16: bits & 4 != 0,
            entropy: bits & 8 != 0,
        })
    }
}

impl FromStr for QuantFlags {
    type Err = Error;

    /// Comma-separated list of `int8`, `uint16`, `fp16`, `zstd`, or one of
    /// `all` / `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = QuantFlags::NONE;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "int8" => f.features_int8 = true,
                "uint16" => f.positions_u16 = true,
                "fp16" => f.mlp_f16 = true,
                "zstd" => f.entropy = true,
                "all" => f = QuantFlags::ALL,
                "none" => f = QuantFlags::NONE,
                _ => {
                    return Err(Error::Unknown {
                        kind: "quantizer",
                        name: tok.to_string(),
                    })
                }
            }
        }
        Ok(f)
    }
}

impl fmt::Display for QuantFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.features_int8, "int8"),
            (self.positions_u16, "uint16"),
            (self.mlp_f16, "fp16"),
            (self.entropy, "zstd"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// A trained model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mesh(MeshModel),
    Splat(SplatModel),
}

impl Model {
    pub fn width(&self) -> usize {
        match self {
            Model::Mesh(m) => m.width,
            Model::Splat(m) => m.width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Model::Mesh(m) => m.height,
            Model::Splat(m) => m.height,
        }
    }

    pub fn mulaw(&self) -> MuLawParams {
        match self {
            Model::Mesh(m) => m.mulaw,
            Model::Splat(m) => m.mulaw,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Mesh(_) => "mesh",
            Model::Splat(_) => "splat",
        }
    }

    /// Clamped μ-law codes at pixel centres, interleaved RGB.
    pub fn render_codes(&self) -> Result<Vec<f64>> {
        match self {
            Model::Mesh(m) => m.render_codes(1).map(|(c, _, _)| c),
            Model::Splat(m) => m.render_codes(),
        }
    }

    pub fn render(&self) -> Result<HdrImage> {
        match self {
            Model::Mesh(m) => m.render(),
            Model::Splat(m) => m.render(),
        }
    }

    /// PSNR in μ-law space against `reference`.
    pub fn psnr_mulaw(&self, reference: &HdrImage) -> Result<f64> {
        if reference.width != self.width() || reference.height != self.height() {
            return Err(Error::Shape(format!(
                "model is {}x{}, reference is {}x{}",
                self.width(),
                self.height(),
                reference.width,
                reference.height
            )));
        }
        let pred = self.render_codes()?;
        Ok(psnr_values(&pred, &reference.to_mulaw(self.mulaw())))
    }
}

// ---------------------------------------------------------------------------
// Scalar quantizers

/// Int8 features with one affine map per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFeatures {
    pub n_f: usize,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub data: Vec<i8>,
}

impl QuantizedFeatures {
    pub fn dequantize(&self) -> Vec<f64> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let c = i % self.n_f;
                self.offset[c] + self.scale[c] * (q as f64 + 128.0)
            })
            .collect()
    }
}

/// Maps each channel's `[min, max]` onto `[−128, 127]`. A constant channel
/// gets `scale = 1`, `offset = value` and reconstructs exactly.
pub fn quantize_features(data: &[f64], n_f: usize) -> Result<QuantizedFeatures> {
    if n_f == 0 || !data.len().is_multiple_of(n_f) {
        return Err(Error::Shape(format!("{} feature values for n_f = {n_f}", data.len())));
    }
    if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidSample { index, value });
    }
    let mut lo = vec![f64::INFINITY; n_f];
    let mut hi = vec![f64::NEG_INFINITY; n_f];
    for (i, &v) in data.iter().enumerate() {
        let c = i % n_f;
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
    }
    let mut scale = vec![1.0; n_f];
    let mut offset = vec![0.0; n_f];
    for c in 0..n_f {
        if data.is_empty() {
            continue;
        }
        let s = (hi[c] - lo[c]) / 255.0;
        if s > 0.0 && s.is_finite() {
            scale[c] = s;
        }
        offset[c] = lo[c];
    }
    let q = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % n_f;
            (((v - offset[c]) / scale[c]).round() - 128.0).clamp(-128.0, 127.0) as i8
        })
        .collect();
    Ok(QuantizedFeatures {
        n_f,
        scale,
        offset,
        data: q,
    })
}

/// Fixed-point positions: `round(x / extent · 65535)` per axis.
pub fn quantize_positions(positions: &[[f64; 2]], width: f64, height: f64) -> Vec<[u16; 2]> {
    let q = |v: f64, extent: f64| (v / extent * POSITION_LEVELS).round().clamp(0.0, POSITION_LEVELS) as u16;
    positions.iter().map(|p| [q(p[0], width), q(p[1], height)]).collect()
}

pub fn dequantize_positions(q: &[[u16; 2]], width: f64, height: f64) -> Vec<[f64; 2]> {
    q.iter()
        .map(|p| [p[0] as f64 * width / POSITION_LEVELS, p[1] as f64 * height / POSITION_LEVELS])
        .collect()
}

// ---------------------------------------------------------------------------
// Topology recovery

/// Interior edges of a fresh triangulation whose quad is co-circular within
/// `EPS_CIRC`, in ascending vertex order.
fn cocircular_edges(mesh: &Mesh) -> Vec<(u32, u32, u32, u32)> {
    mesh.interior_edges()
        .into_iter()
        .filter(|e| mesh.edge_circle_margin(e).abs() <= EPS_CIRC)
        .map(|e| (e.a, e.b, e.c, e.d))
        .collect()
}

/// One bit per co-circular edge of the Delaunay triangulation of
/// `positions`: set when `original` uses the other diagonal.
pub fn tie_break_bits(original: &Mesh, positions: &[[f64; 2]]) -> Result<Vec<bool>> {
    let fresh = Mesh::from_points(original.width(), original.height(), positions.to_vec())?;
    Ok(cocircular_edges(&fresh)
        .into_iter()
        .map(|(a, b, c, d)| !original.has_edge(a, b) && original.has_edge(c, d))
        .collect())
}

/// Delaunay triangulation of `positions` with the tie-break flips replayed;
/// repaired when quantization produced an invalid mesh.
pub fn rebuild_mesh(width: f64, height: f64, positions: Vec<[f64; 2]>, bits: &[bool]) -> Result<Mesh> {
    let mut mesh = Mesh::from_points(width, height, positions)?;
    let edges = cocircular_edges(&mesh);
    if edges.len() != bits.len() {
        return Err(Error::Corrupt(format!(
            "{} tie-break bits for {} co-circular edges",
            bits.len(),
            edges.len()
        )));
    }
    for ((a, b, _, _), &flip) in edges.into_iter().zip(bits) {
        if flip {
            mesh.flip_edge(a, b);
        }
    }
    Ok(validate_or_remesh(mesh))
}

// ---------------------------------------------------------------------------
// Sections

#[derive(Debug, Clone, PartialEq)]
enum Positions {
    F64(Vec<[f64; 2]>),
    U16(Vec<[u16; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
enum Features {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(QuantizedFeatures),
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    F32(Vec<f32>),
    F64(Vec<f64>),
    F16(Vec<f16>),
}

/// Per splat: mean x, mean y, θ, scale x, scale y, opacity, z.
#[derive(Debug, Clone, PartialEq)]
enum Geometry {
    F64(Vec<[f64; 7]>),
    F32(Vec<[f32; 7]>),
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Mesh {
        interpolation: Interpolation,
        encoding: Encoding,
        positions: Positions,
        tie_bits: Vec<bool>,
    },
    Splat {
        camera: Camera,
        direction_scale: f64,
        geometry: Geometry,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Parts {
    width: usize,
    height: usize,
    mulaw: MuLawParams,
    n_f: usize,
    dims: Vec<usize>,
    body: Body,
    features: Features,
    weights: Weights,
}

impl Features {
    fn values(&self) -> Vec<f64> {
        match self {
            Features::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Features::F64(v) => v.clone(),
            Features::I8(q) => q.dequantize(),
        }
    }
}

impl Weights {
    fn values(&self) -> Vec<f64> {
        match self {
            Weights::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Weights::F64(v) => v.clone(),
            Weights::F16(v) => v.iter().map(|x| x.to_f64()).collect(),
        }
    }
}

fn lower(model: &Model, flags: QuantFlags) -> Result<Parts> {
    match model {
        Model::Mesh(m) => {
            m.check()?;
            let (w, h) = (m.mesh.width(), m.mesh.height());
            let (positions, deq) = if flags.positions_u16 {
                let q = quantize_positions(m.mesh.positions(), w, h);
                let d = dequantize_positions(&q, w, h);
                (Positions::U16(q), d)
            } else {
                (Positions::F64(m.mesh.positions().to_vec()), m.mesh.positions().to_vec())
            };
            let tie_bits = tie_break_bits(&m.mesh, &deq)?;
            let features = if flags.features_int8 {
                let f: Vec<f64> = m.field.features().iter().map(|&x| x as f64).collect();
                Features::I8(quantize_features(&f, m.field.n_f())?)
            } else {
                Features::F32(m.field.features().to_vec())
            };
            let weights = if flags.mlp_f16 {
                Weights::F16(m.mlp.params().iter().map(|&x| f16::from_f32(x)).collect())
            } else {
                Weights::F32(m.mlp.params().to_vec())
            };
            Ok(Parts {
                width: m.width,
                height: m.height,
                mulaw: m.mulaw,
                n_f: m.field.n_f(),
                dims: m.mlp.dims().to_vec(),
                body: Body::Mesh {
                    interpolation: m.interpolation,
                    encoding: m.encoding,
                    positions,
                    tie_bits,
                },
                features,
                weights,
            })
        }
        Model::Splat(m) => {
            let n_f = m.set.n_f;
            let rows: Vec<[f64; 7]> = m
                .set
                .splats
                .iter()
                .map(|s| [s.mean[0], s.mean[1], s.theta, s.scales[0], s.scales[1], s.opacity, s.z])
                .collect();
            let geometry = if flags.positions_u16 {
                Geometry::F32(rows.iter().map(|r| r.map(|v| v as f32)).collect())
            } else {
                Geometry::F64(rows)
            };
            let f: Vec<f64> = m
                .set
                .splats
                .iter()
                .flat_map(|s| s.features.iter().flatten().copied())
                .collect();
            let features = if flags.features_int8 {
                Features::I8(quantize_features(&f, n_f)?)
            } else {
                Features::F64(f)
            };
            let weights = if flags.mlp_f16 {
                Weights::F16(m.mlp.params().iter().map(|&x| f16::from_f64(x)).collect())
            } else {
                Weights::F64(m.mlp.params().to_vec())
            };
            Ok(Parts {
                width: m.width,
                height: m.height,
                mulaw: m.mulaw,
                n_f,
                dims: m.mlp.dims().to_vec(),
                body: Body::Splat {
                    camera: m.camera,
                    direction_scale: m.direction_scale,
                    geometry,
                },
                features,
                weights,
            })
        }
    }
}

fn raise(p: &Parts) -> Result<Model> {
    let corrupt = |e: Error| Error::Corrupt(e.to_string());
    match &p.body {
        Body::Mesh {
            interpolation,
            encoding,
            positions,
            tie_bits,
        } => {
            let (w, h) = (p.width as f64, p.height as f64);
            let pos = match positions {
                Positions::F64(v) => v.clone(),
                Positions::U16(q) => dequantize_positions(q, w, h),
            };
            let mesh = rebuild_mesh(w, h, pos, tie_bits)?;
            let features: Vec<f32> = match &p.features {
                Features::F32(v) => v.clone(),
                other => other.values().into_iter().map(|x| x as f32).collect(),
            };
            let field = FeatureField::new(p.n_f, features).map_err(corrupt)?;
            let params: Vec<f32> = match &p.weights {
                Weights::F32(v) => v.clone(),
                other => other.values().into_iter().map(|x| x as f32).collect(),
            };
            let mlp = Mlp::from_params(&p.dims, params).map_err(corrupt)?;
            let model = MeshModel {
                width: p.width,
                height: p.height,
                mulaw: p.mulaw,
                interpolation: *interpolation,
                encoding: *encoding,
                mesh,
                field,
                mlp,
            };
            model.check().map_err(corrupt)?;
            Ok(Model::Mesh(model))
        }
        Body::Splat {
            camera,
            direction_scale,
            geometry,
        } => {
            let rows: Vec<[f64; 7]> = match geometry {
                Geometry::F64(v) => v.clone(),
                Geometry::F32(v) => v.iter().map(|r| r.map(|x| x as f64)).collect(),
            };
            let f = p.features.values();
            let per = 3 * p.n_f;
            if f.len() != rows.len() * per {
                return Err(Error::Corrupt("feature count does not match splat count".into()));
            }
            let splats = rows
                .iter()
                .zip(f.chunks_exact(per.max(1)))
                .map(|(r, fs)| Splat {
                    mean: [r[0], r[1]],
                    theta: r[2],
                    scales: [r[3], r[4]],
                    opacity: r[5],
                    z: r[6],
                    features: [0, 1, 2].map(|k| fs[k * p.n_f..(k + 1) * p.n_f].to_vec()),
                })
                .collect();
            let set = SplatSet::new(p.n_f, splats).map_err(corrupt)?;
            let mlp = Mlp::from_params(&p.dims, p.weights.values()).map_err(corrupt)?;
            if mlp.input_dim() != set.input_dim() || mlp.output_dim() != 3 {
                return Err(Error::Corrupt(format!("decoder dims {:?} do not fit the splats", p.dims)));
            }
            Ok(Model::Splat(SplatModel {
                width: p.width,
                height: p.height,
                mulaw: p.mulaw,
                camera: *camera,
                direction_scale: *direction_scale,
                set,
                mlp,
            }))
        }
    }
}

/// The model exactly as it decodes after `serialize(model, flags)`.
pub fn quantize(model: &Model, flags: QuantFlags) -> Result<Model> {
    raise(&lower(model, flags)?)
}

// ---------------------------------------------------------------------------
// Bytes

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("section overruns body at byte {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len_checked(&mut self, count: usize, elem: usize) -> Result<usize> {
        count
            .checked_mul(elem)
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Corrupt(format!("{count} elements of {elem} bytes exceed the section")))
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in 32 bits")))
}

fn encode_positions(p: &Positions) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        Positions::F64(v) => v.iter().flatten().for_each(|&x| put_f64(&mut out, x)),
        Positions::U16(v) => v.iter().flatten().for_each(|&x| put_u16(&mut out, x)),
    }
    out
}

fn encode_features(f: &Features) -> Vec<u8> {
    let mut out = Vec::new();
    match f {
        Features::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Features::F64(v) => v.iter().for_each(|&x| put_f64(&mut out, x)),
        Features::I8(q) => {
            q.scale.iter().chain(&q.offset).for_each(|&x| put_f64(&mut out, x));
            out.extend(q.data.iter().map(|&x| x as u8));
        }
    }
    out
}

fn encode_weights(w: &Weights) -> Vec<u8> {
    let mut out = Vec::new();
    match w {
        Weights::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Weights::F64(v) => v.iter().for_each(|&x| put_f64(&mut out, x)),
        Weights::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn encode_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, bits.len() as u32);
    for chunk in bits.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b as u8) << i));
    }
    out
}

fn encode_geometry(g: &Geometry) -> Vec<u8> {
    let mut out = Vec::new();
    match g {
        Geometry::F64(v) => v.iter().flatten().for_each(|&x| put_f64(&mut out, x)),
        Geometry::F32(v) => v.iter().flatten().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

fn encode_body(p: &Parts) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let kind = match p.body {
        Body::Mesh { .. } => KIND_MESH,
        Body::Splat { .. } => KIND_SPLAT,
    };
    out.push(kind);
    put_u32(&mut out, to_u32(p.width, "width")?);
    put_u32(&mut out, to_u32(p.height, "height")?);
    put_f64(&mut out, p.mulaw.white_level);
    put_f64(&mut out, p.mulaw.mu);
    put_u16(
        &mut out,
        u16::try_from(p.n_f).map_err(|_| Error::Shape(format!("n_f {} too large", p.n_f)))?,
    );
    out.push(u8::try_from(p.dims.len()).map_err(|_| Error::Shape("too many decoder layers".into()))?);
    for &d in &p.dims {
        put_u32(&mut out, to_u32(d, "layer width")?);
    }
    let sections: Vec<(u8, Vec<u8>)> = match &p.body {
        Body::Mesh {
            interpolation,
            encoding,
            positions,
            tie_bits,
        } => {
            out.push(interpolation.id());
            out.push(encoding.id());
            let n = match positions {
                Positions::F64(v) => v.len(),
                Positions::U16(v) => v.len(),
            };
            put_u32(&mut out, to_u32(n, "vertex count")?);
            vec![
                (SEC_POSITIONS, encode_positions(positions)),
                (SEC_FEATURES, encode_features(&p.features)),
                (SEC_TIEBITS, encode_bits(tie_bits)),
                (SEC_MLP, encode_weights(&p.weights)),
            ]
        }
        Body::Splat {
            camera,
            direction_scale,
            geometry,
        } => {
            let n = match geometry {
                Geometry::F64(v) => v.len(),
                Geometry::F32(v) => v.len(),
            };
            put_u32(&mut out, to_u32(n, "splat count")?);
            for v in [camera.focal, camera.cx, camera.cy, *direction_scale] {
                put_f64(&mut out, v);
            }
            vec![
                (SEC_SPLATS, encode_geometry(geometry)),
                (SEC_FEATURES, encode_features(&p.features)),
                (SEC_MLP, encode_weights(&p.weights)),
            ]
        }
    };
    out.push(sections.len() as u8);
    let mut offset = 0u64;
    for (id, data) in &sections {
        out.push(*id);
        put_u64(&mut out, offset);
        put_u64(&mut out, data.len() as u64);
        offset += data.len() as u64;
    }
    for (_, data) in sections {
        out.extend_from_slice(&data);
    }
    Ok(out)
}

fn decode_body(body: &[u8], flags: QuantFlags) -> Result<Parts> {
    let mut r = Reader { buf: body, pos: 0 };
    let kind = r.u8()?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let white_level = r.f64()?;
    let mu = r.f64()?;
    let n_f = r.u16()? as usize;
    let n_dims = r.u8()? as usize;
    let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if width == 0 || height == 0 || n_f == 0 || dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Corrupt("degenerate header".into()));
    }
    if !(white_level > 0.0 && white_level.is_finite() && mu > 0.0 && mu.is_finite()) {
        return Err(Error::Corrupt(format!("invalid μ-law parameters w={white_level} μ={mu}")));
    }
    let n_params: usize = dims
        .windows(2)
        .try_fold(0usize, |acc, w| w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc))
        .ok_or_else(|| Error::Corrupt("decoder size overflows".into()))?;
    let mulaw = MuLawParams { mu, white_level };

    enum Meta {
        Mesh(Interpolation, Encoding, usize),
        Splat(usize, Camera, f64),
    }
    let meta = match kind {
        KIND_MESH => {
            let interp = Interpolation::from_id(r.u8()?).map_err(|e| Error::Corrupt(e.to_string()))?;
            let enc = Encoding::from_id(r.u8()?).map_err(|e| Error::Corrupt(e.to_string()))?;
            Meta::Mesh(interp, enc, r.u32()? as usize)
        }
        KIND_SPLAT => {
            let n = r.u32()? as usize;
            let camera = Camera {
                focal: r.f64()?,
                cx: r.f64()?,
                cy: r.f64()?,
            };
            Meta::Splat(n, camera, r.f64()?)
        }
        k => return Err(Error::Corrupt(format!("unknown model kind {k}"))),
    };

    let n_sections = r.u8()? as usize;
    let mut table = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        table.push((r.u8()?, r.u64()?, r.u64()?));
    }
    let data = &body[r.pos..];
    let mut expect = 0u64;
    for &(_, off, len) in &table {
        if off != expect {
            return Err(Error::Corrupt(format!("section offset {off}, expected {expect}")));
        }
        expect = off
            .checked_add(len)
            .ok_or_else(|| Error::Corrupt("section length overflows".into()))?;
    }
    if expect != data.len() as u64 {
        return Err(Error::Corrupt(format!("sections span {expect} bytes, body holds {}", data.len())));
    }
    let section = |id: u8| -> Result<Reader<'_>> {
        let &(_, off, len) = table
            .iter()
            .find(|s| s.0 == id)
            .ok_or_else(|| Error::Corrupt(format!("missing section {id}")))?;
        Ok(Reader {
            buf: &data[off as usize..(off + len) as usize],
            pos: 0,
        })
    };
    let finish = |r: &Reader<'_>, id: u8| -> Result<()> {
        if r.pos != r.buf.len() {
            return Err(Error::Corrupt(format!("section {id} has {} trailing bytes", r.buf.len() - r.pos)));
        }
        Ok(())
    };

    let rows = match meta {
        Meta::Mesh(_, _, n) => n,
        Meta::Splat(n, _, _) => 3 * n,
    };
    let wide = kind == KIND_SPLAT;

    let mut fr = section(SEC_FEATURES)?;
    let n_feat = rows
        .checked_mul(n_f)
        .ok_or_else(|| Error::Corrupt("feature count overflows".into()))?;
    let features = if flags.features_int8 {
        let scale = (0..n_f).map(|_| fr.f64()).collect::<Result<Vec<_>>>()?;
        let offset = (0..n_f).map(|_| fr.f64()).collect::<Result<Vec<_>>>()?;
        let n = fr.len_checked(n_feat, 1)?;
        let raw = fr.take(n)?;
        Features::I8(QuantizedFeatures {
            n_f,
            scale,
            offset,
            data: raw.iter().map(|&b| b as i8).collect(),
        })
    } else if wide {
        fr.len_checked(n_feat, 8)?;
        Features::F64((0..n_feat).map(|_| fr.f64()).collect::<Result<_>>()?)
    } else {
        fr.len_checked(n_feat, 4)?;
        Features::F32((0..n_feat).map(|_| fr.f32()).collect::<Result<_>>()?)
    };
    finish(&fr, SEC_FEATURES)?;

    let mut wr = section(SEC_MLP)?;
    let weights = if flags.mlp_f16 {
        wr.len_checked(n_params, 2)?;
        Weights::F16((0..n_params).map(|_| wr.u16().map(f16::from_bits)).collect::<Result<_>>()?)
    } else if wide {
        wr.len_checked(n_params, 8)?;
        Weights::F64((0..n_params).map(|_| wr.f64()).collect::<Result<_>>()?)
    } else {
        wr.len_checked(n_params, 4)?;
        Weights::F32((0..n_params).map(|_| wr.f32()).collect::<Result<_>>()?)
    };
    finish(&wr, SEC_MLP)?;

    let body = match meta {
        Meta::Mesh(interpolation, encoding, n) => {
            let mut pr = section(SEC_POSITIONS)?;
            let positions = if flags.positions_u16 {
                pr.len_checked(n, 4)?;
                Positions::U16((0..n).map(|_| Ok([pr.u16()?, pr.u16()?])).collect::<Result<_>>()?)
            } else {
                pr.len_checked(n, 16)?;
                Positions::F64((0..n).map(|_| Ok([pr.f64()?, pr.f64()?])).collect::<Result<_>>()?)
            };
            finish(&pr, SEC_POSITIONS)?;
            let mut tr = section(SEC_TIEBITS)?;
            let count = tr.u32()? as usize;
            let n = tr.len_checked(count.div_ceil(8), 1)?;
            let packed = tr.take(n)?;
            let tie_bits = (0..count).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            finish(&tr, SEC_TIEBITS)?;
            Body::Mesh {
                interpolation,
                encoding,
                positions,
                tie_bits,
            }
        }
        Meta::Splat(n, camera, direction_scale) => {
            let mut gr = section(SEC_SPLATS)?;
            let geometry = if flags.positions_u16 {
                gr.len_checked(n, 28)?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut row = [0f32; 7];
                    for x in row.iter_mut() {
                        *x = gr.f32()?;
                    }
                    v.push(row);
                }
                Geometry::F32(v)
            } else {
                gr.len_checked(n, 56)?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut row = [0f64; 7];
                    for x in row.iter_mut() {
                        *x = gr.f64()?;
                    }
                    v.push(row);
                }
                Geometry::F64(v)
            };
            finish(&gr, SEC_SPLATS)?;
            Body::Splat {
                camera,
                direction_scale,
                geometry,
            }
        }
    };
    Ok(Parts {
        width,
        height,
        mulaw,
        n_f,
        dims,
        body,
        features,
        weights,
    })
}

/// Encodes `model` with the given quantizers.
pub fn serialize(model: &Model, flags: QuantFlags) -> Result<Vec<u8>> {
    let body = encode_body(&lower(model, flags)?)?;
    let payload = if flags.entropy {
        zstd::bulk::compress(&body, ZSTD_LEVEL).map_err(|e| Error::Corrupt(format!("zstd: {e}")))?
    } else {
        body.clone()
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, VERSION);
    put_u16(&mut out, flags.bits());
    put_u64(&mut out, body.len() as u64);
    put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    let sum = xxh3_64(&out);
    put_u64(&mut out, sum);
    Ok(out)
}

/// Decodes a container. Errors are distinct for a foreign file, an unknown
/// version, a short file and a checksum failure.
pub fn deserialize(bytes: &[u8]) -> Result<(Model, QuantFlags)> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(Error::Truncated(format!(
            "{} bytes, header and checksum need {}",
            bytes.len(),
            HEADER_LEN + CHECKSUM_LEN
        )));
    }
    let mut h = Reader { buf: bytes, pos: 6 };
    let flag_bits = h.u16()?;
    let raw_len = h.u64()?;
    let stored_len = h.u64()?;
    let total = (HEADER_LEN as u64)
        .checked_add(stored_len)
        .and_then(|n| n.checked_add(CHECKSUM_LEN as u64));
    match total {
        Some(t) if t == bytes.len() as u64 => {}
        Some(t) if t > bytes.len() as u64 => {
            return Err(Error::Truncated(format!("{} bytes, header declares {t}", bytes.len())));
        }
        _ => return Err(Error::Corrupt(format!("length field {stored_len} does not match file size"))),
    }
    let split = bytes.len() - CHECKSUM_LEN;
    let stored = u64::from_le_bytes(bytes[split..].try_into().expect("8 bytes"));
    let computed = xxh3_64(&bytes[..split]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let flags = QuantFlags::from_bits(flag_bits)?;
    if raw_len > MAX_BODY_BYTES {
        return Err(Error::Corrupt(format!("declared body of {raw_len} bytes")));
    }
    let payload = &bytes[HEADER_LEN..split];
    let body = if flags.entropy {
        zstd::bulk::decompress(payload, raw_len as usize).map_err(|e| Error::Corrupt(format!("zstd: {e}")))?
    } else {
        payload.to_vec()
    };
    if body.len() as u64 != raw_len {
        return Err(Error::Corrupt(format!("body is {} bytes, header declares {raw_len}", body.len())));
    }
    let model = raise(&decode_body(&body, flags)?)?;
    Ok((model, flags))
}

pub fn write_file(path: impl AsRef<Path>, model: &Model, flags: QuantFlags) -> Result<usize> {
    let bytes = serialize(model, flags)?;
    std::fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(bytes.len())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<(Model, QuantFlags)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    deserialize(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mesh_model(seed: u64, n: usize) -> MeshModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (40usize, 30usize);
        let mut pts = vec![[0.0, 0.0], [w as f64, 0.0], [w as f64, h as f64], [0.0, h as f64]];
        for _ in 0..n {
            pts.push([rng.random_range(1.0..w as f64 - 1.0), rng.random_range(1.0..h as f64 - 1.0)]);
        }
        let mesh = Mesh::from_points(w as f64, h as f64, pts).unwrap();
        let n_f = 4;
        let feats: Vec<f32> = (0..mesh.num_vertices() * n_f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let field = FeatureField::new(n_f, feats).unwrap();
        let mlp = Mlp::init(&[8, 16, 3], &mut rng).unwrap();
        MeshModel {
            width: w,
            height: h,
            mulaw: MuLawParams::default(),
            interpolation: Interpolation::CloughTocher,
            encoding: Encoding::SinCos,
            mesh,
            field,
            mlp,
        }
    }

    fn random_splat_model(seed: u64) -> SplatModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_f = 2;
        let splats = (0..12)
            .map(|_| Splat {
                mean: [rng.random_range(0.0..16.0), rng.random_range(0.0..12.0)],
                theta: rng.random_range(-3.0..3.0),
                scales: [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
                opacity: rng.random_range(0.1..0.9),
                z: rng.random_range(0.0..1.0),
                features: [0, 1, 2].map(|_| (0..n_f).map(|_| rng.random_range(-1.0..1.0)).collect()),
            })
            .collect();
        let set = SplatSet::new(n_f, splats).unwrap();
        let mlp = Mlp::init(&[set.input_dim(), 8, 3], &mut rng).unwrap();
        SplatModel {
            width: 16,
            height: 12,
            mulaw: MuLawParams::default(),
            camera: Camera::for_image(16, 12),
            direction_scale: 1.0,
            set,
            mlp,
        }
    }

    #[test]
    fn constant_channel_is_exact() {
        let data = vec![0.25, -1.0, 0.25, 3.0, 0.25, 1.0];
        let q = quantize_features(&data, 2).unwrap();
        assert_eq!(q.scale[0], 1.0);
        assert_eq!(q.offset[0], 0.25);
        let d = q.dequantize();
        assert_eq!(d[0], 0.25);
        assert_eq!(d[2], 0.25);
        assert_eq!(d[4], 0.25);
    }

    #[test]
    fn unit_range_error_bound_over_grid() {
        // Every value on a fine grid of [-1, 1] plus both ends.
        let data: Vec<f64> = (0..=20000).map(|i| -1.0 + i as f64 / 10000.0).collect();
        let q = quantize_features(&data, 1).unwrap();
        let d = q.dequantize();
        let worst = data.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0 + 1e-15, "{worst}");
        assert_eq!(d[0], -1.0);
        assert!((d[20000] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_features() {
        assert!(quantize_features(&[0.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn corner_positions_are_exact() {
        let q = quantize_positions(&[[0.0, 0.0], [640.0, 480.0]], 640.0, 480.0);
        assert_eq!(q, vec![[0, 0], [65535, 65535]]);
        assert_eq!(dequantize_positions(&q, 640.0, 480.0), vec![[0.0, 0.0], [640.0, 480.0]]);
    }

    proptest! {
        #[test]
        fn feature_error_within_half_step(vals in prop::collection::vec(-50.0f64..50.0, 3..300)) {
            let n_f = 3;
            let len = vals.len() / n_f * n_f;
            let data = &vals[..len];
            let q = quantize_features(data, n_f).unwrap();
            let d = q.dequantize();
            for (i, (a, b)) in data.iter().zip(&d).enumerate() {
                let s = q.scale[i % n_f];
                prop_assert!((a - b).abs() <= 0.5 * s * (1.0 + 1e-9) + 1e-12);
            }
        }

        #[test]
        fn position_error_within_half_step(
            pts in prop::collection::vec((0.0f64..=1920.0, 0.0f64..=1080.0), 1..200)
        ) {
            let p: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let d = dequantize_positions(&quantize_positions(&p, 1920.0, 1080.0), 1920.0, 1080.0);
            for (a, b) in p.iter().zip(&d) {
                prop_assert!((a[0] - b[0]).abs() <= 0.5 * 1920.0 / 65535.0 + 1e-9);
                prop_assert!((a[1] - b[1]).abs() <= 0.5 * 1080.0 / 65535.0 + 1e-9);
            }
        }
    }

    #[test]
    fn flags_parse_and_bits() {
        let f: QuantFlags = "int8,uint16,fp16".parse().unwrap();
        assert!(f.features_int8 && f.positions_u16 && f.mlp_f16 && !f.entropy);
        assert_eq!(QuantFlags::from_bits(QuantFlags::ALL.bits()).unwrap(), QuantFlags::ALL);
        assert_eq!(QuantFlags::ALL.to_string(), "int8,uint16,fp16,zstd");
        assert!("int4".parse::<QuantFlags>().is_err());
    }

    #[test]
    fn float_roundtrip_is_lossless() {
        let m = Model::Mesh(random_mesh_model(1, 60));
        let bytes = serialize(&m, QuantFlags::NONE).unwrap();
        let (back, flags) = deserialize(&bytes).unwrap();
        assert_eq!(flags, QuantFlags::NONE);
        assert_eq!(back, m);
    }

    #[test]
    fn quantized_roundtrip_matches_quantize_bitwise() {
        for seed in 0..4 {
            let m = Model::Mesh(random_mesh_model(seed, 80));
            for flags in [QuantFlags::ALL, "int8".parse().unwrap(), "uint16,zstd".parse().unwrap()] {
                let bytes = serialize(&m, flags).unwrap();
                let (back, _) = deserialize(&bytes).unwrap();
                assert_eq!(back, quantize(&m, flags).unwrap());
            }
        }
    }

    #[test]
    fn splat_roundtrip() {
        let m = Model::Splat(random_splat_model(3));
        let (back, _) = deserialize(&serialize(&m, QuantFlags::NONE).unwrap()).unwrap();
        assert_eq!(back, m);
        let (back, _) = deserialize(&serialize(&m, QuantFlags::ALL).unwrap()).unwrap();
        assert_eq!(back, quantize(&m, QuantFlags::ALL).unwrap());
    }

    #[test]
    fn cocircular_grid_keeps_original_diagonals() {
        // A regular grid: every interior quad is co-circular, so the
        // triangulation is decided entirely by the tie-break bits.
        let mut pts = Vec::new();
        for j in 0..=4 {
            for i in 0..=4 {
                pts.push([i as f64 * 4.0, j as f64 * 4.0]);
            }
        }
        let mut mesh = Mesh::from_points(16.0, 16.0, pts.clone()).unwrap();
        let edges = cocircular_edges(&mesh);
        assert!(!edges.is_empty());
        for &(a, b, _, _) in edges.iter().step_by(3) {
            mesh.flip_edge(a, b);
        }
        let bits = tie_break_bits(&mesh, mesh.positions()).unwrap();
        assert!(bits.iter().any(|&b| b));
        let rebuilt = rebuild_mesh(16.0, 16.0, pts, &bits).unwrap();
        assert_eq!(rebuilt.triangles(), mesh.triangles());
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let m = Model::Mesh(random_mesh_model(5, 20));
        let bytes = serialize(&m, QuantFlags::ALL).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(deserialize(&bad), Err(Error::UnsupportedVersion(9))));

        assert!(matches!(deserialize(&bytes[..bytes.len() - 5]), Err(Error::Truncated(_))));
        assert!(matches!(deserialize(&bytes[..10]), Err(Error::Truncated(_))));

        for i in [HEADER_LEN, HEADER_LEN + 7, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(deserialize(&bad), Err(Error::ChecksumMismatch { .. })), "byte {i}");
        }
    }

    #[test]
    fn quantized_container_is_smaller() {
        let m = Model::Mesh(random_mesh_model(7, 400));
        let float = serialize(&m, QuantFlags::NONE).unwrap().len();
        let small = serialize(&m, QuantFlags::ALL).unwrap().len();
        assert!(float as f64 / small as f64 > 2.5, "{float} vs {small}");
    }
}
