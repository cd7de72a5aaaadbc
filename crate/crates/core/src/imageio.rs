//! HDR image containers, file I/O, μ-law companding and the display tonemap.
//!
//! Samples are linear light in sensor units: `0` is black and the white
//! level `w` (14-bit sensor default, 16383) is full scale. PFM files are read
//! and written in those units verbatim; PNG files are linearized through the
//! inverse sRGB curve and scaled so the maximum code maps to `w`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub mod synth;

pub const DEFAULT_WHITE_LEVEL: f64 = 16383.0;
pub const DEFAULT_MU: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, interleaved, top row first.
    pub data: Vec<f32>,
    pub white_level: f64,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>, white_level: f64) -> Result<Self> {
        let img = HdrImage {
            width,
            height,
            channels: 3,
            data,
            white_level,
        };
        img.check()?;
        Ok(img)
    }

    pub fn filled(width: usize, height: usize, value: f32, white_level: f64) -> Self {
        HdrImage {
            width,
            height,
            channels: 3,
            data: vec![value; width * height * 3],
            white_level,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        white_level: f64,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        HdrImage {
            width,
            height,
            channels: 3,
            data,
            white_level,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", self.channels)));
        }
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image with {} samples",
                self.width,
                self.height,
                self.channels,
                self.data.len()
            )));
        }
        if !(self.white_level > 0.0) {
            return Err(Error::OutOfRange {
                value: self.white_level,
                lo: f64::MIN_POSITIVE,
                hi: f64::INFINITY,
            });
        }
        for (index, &v) in self.data.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSample {
                    index,
                    value: v as f64,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Bilinear lookup at continuous image coordinates. Pixel `(i, j)` has its
    /// center at `(i + 0.5, j + 0.5)`; lookups outside the centers clamp to the
    /// edge.
    pub fn bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (fx.floor() as usize).min(self.width - 1);
        let y0 = (fy.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let mut out = [0.0; 3];
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
            let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
            out[c] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// Crops a `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(HdrImage::from_fn(w, h, self.white_level, |x, y| {
            self.pixel(x0 + x, y0 + y)
        }))
    }

    /// μ-law encoded copy, all samples in `[0, 1]` (values above white clip).
    pub fn to_mulaw(&self, p: MuLawParams) -> Vec<f64> {
        self.data
            .iter()
            .map(|&v| mulaw_encode_clamped(v as f64, p).0)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuLawParams {
    pub mu: f64,
    pub white_level: f64,
}

impl Default for MuLawParams {
    fn default() -> Self {
        MuLawParams {
            mu: DEFAULT_MU,
            white_level: DEFAULT_WHITE_LEVEL,
        }
    }
}

impl MuLawParams {
    pub fn new(mu: f64, white_level: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Config(format!("mu must be positive, got {mu}")));
        }
        if !(white_level > 0.0) || !white_level.is_finite() {
            return Err(Error::Config(format!(
                "white level must be positive, got {white_level}"
            )));
        }
        Ok(MuLawParams { mu, white_level })
    }

    #[inline]
    fn log1p_mu(&self) -> f64 {
        self.mu.ln_1p()
    }

    /// Derivative of the encoder at linear value `x`.
    #[inline]
    pub fn encode_slope(&self, x: f64) -> f64 {
        self.mu / (self.white_level * (1.0 + self.mu * x / self.white_level) * self.log1p_mu())
    }
}

/// `log(1 + μ x / w) / log(1 + μ)` for `x` in `[0, w]`.
pub fn mulaw_encode(x: f64, p: MuLawParams) -> Result<f64> {
    if !(0.0..=p.white_level).contains(&x) {
        return Err(Error::OutOfRange {
            value: x,
            lo: 0.0,
            hi: p.white_level,
        });
    }
    Ok((p.mu * x / p.white_level).ln_1p() / p.log1p_mu())
}

/// Training-path variant: clamps into `[0, w]` and reports whether it had to.
#[inline]
pub fn mulaw_encode_clamped(x: f64, p: MuLawParams) -> (f64, bool) {
    let c = x.clamp(0.0, p.white_level);
    ((p.mu * c / p.white_level).ln_1p() / p.log1p_mu(), c != x)
}

pub fn mulaw_decode(y: f64, p: MuLawParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::OutOfRange {
            value: y,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(mulaw_decode_unchecked(y, p))
}

#[inline]
pub(crate) fn mulaw_decode_unchecked(y: f64, p: MuLawParams) -> f64 {
    (y * p.log1p_mu()).exp_m1() * p.white_level / p.mu
}

/// Display transform: `clamp(x / w, 0, 1) ^ (1 / 2.2)`.
#[inline]
pub fn tonemap_sample(x: f64, white_level: f64) -> f64 {
    (x / white_level).clamp(0.0, 1.0).powf(1.0 / 2.2)
}

pub fn tonemap(img: &HdrImage) -> Vec<f64> {
    img.data
        .iter()
        .map(|&v| tonemap_sample(v as f64, img.white_level))
        .collect()
}

/// Loads a `.pfm` or `.png` file.
pub fn load_image(path: impl AsRef<Path>) -> Result<HdrImage> {
    load_image_with_white(path, DEFAULT_WHITE_LEVEL)
}

pub fn load_image_with_white(path: impl AsRef<Path>, white_level: f64) -> Result<HdrImage> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = match ext.as_str() {
        "pfm" => decode_pfm(&bytes, white_level)?,
        "png" => decode_png(&bytes, white_level)?,
        other => return Err(Error::UnsupportedFormat(format!("extension `{other}`"))),
    };
    img.check()?;
    Ok(img)
}

pub fn save_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "PF\n{} {}\n-1.0\n", img.width, img.height).map_err(io)?;
    // PFM stores the bottom row first.
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        for v in row {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes the tonemapped image as an 8-bit sRGB-ish PNG.
pub fn save_png_tonemapped(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = tonemap(img)
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    write_png(path.as_ref(), img.width, img.height, png::BitDepth::Eight, &bytes)
}

/// Writes linear samples as a 16-bit PNG through the sRGB curve, inverting
/// what [`load_image`] does for PNG input.
pub fn save_png16(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let lin = (v as f64 / img.white_level).clamp(0.0, 1.0);
        let code = (srgb_encode(lin) * 65535.0).round() as u16;
        bytes.extend_from_slice(&code.to_be_bytes());
    }
    write_png(path.as_ref(), img.width, img.height, png::BitDepth::Sixteen, &bytes)
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(depth);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::MalformedImage(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::MalformedImage(e.to_string()))
}

fn decode_pfm(bytes: &[u8], white_level: f64) -> Result<HdrImage> {
    // Header: three whitespace-separated tokens after the magic, then one
    // whitespace byte before the raster.
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedImage("truncated PFM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(Error::UnsupportedFormat(format!("PFM magic `{magic}`"))),
    };
    let parse = |s: String| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::MalformedImage(format!("bad PFM header field `{s}`")))
    };
    let width = parse(token()?)? as usize;
    let height = parse(token()?)? as usize;
    let scale = parse(token()?)?;
    let raster = &bytes[pos + 1..];
    let n = width * height * channels;
    if width == 0 || height == 0 || raster.len() < n * 4 {
        return Err(Error::MalformedImage(format!(
            "PFM raster holds {} bytes, need {}",
            raster.len(),
            n * 4
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; width * height * 3];
    for y in 0..height {
        let dst_row = height - 1 - y;
        for x in 0..width {
            for c in 0..3 {
                let src_c = if channels == 1 { 0 } else { c };
                let i = ((y * width + x) * channels + src_c) * 4;
                let b = [raster[i], raster[i + 1], raster[i + 2], raster[i + 3]];
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                data[(dst_row * width + x) * 3 + c] = v;
            }
        }
    }
    for (index, v) in data.iter_mut().enumerate() {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::InvalidSample {
                index,
                value: *v as f64,
            });
        }
        *v = v.min(white_level as f32);
    }
    HdrImage::new(width, height, data, white_level)
}

fn decode_png(bytes: &[u8], white_level: f64) -> Result<HdrImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedImage(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedImage("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::MalformedImage(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let samples_per_px = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("indexed PNG".into()));
        }
    };
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let max = if sixteen { 65535.0 } else { 255.0 };
    let sample = |i: usize| -> f64 {
        if sixteen {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64
        } else {
            buf[i] as f64
        }
    };
    let mut data = Vec::with_capacity(width * height * 3);
    for p in 0..width * height {
        for c in 0..3 {
            let src = if samples_per_px < 3 { 0 } else { c };
            let code = sample(p * samples_per_px + src) / max;
            data.push((srgb_decode(code) * white_level) as f32);
        }
    }
    HdrImage::new(width, height, data, white_level)
}

/// Inverse sRGB transfer; exact at both endpoints.
pub fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}
