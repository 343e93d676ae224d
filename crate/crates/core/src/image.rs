//! Image containers, decoding, grayscale conversion, resizing and the
//! synthetic corpus generators used by both pipeline stages.

use std::f64::consts::PI;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Smallest side accepted by [`SyntheticSpec`].
pub const MIN_SYNTHETIC_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format in {0} (expected PNG, P5 or P6)")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("corrupt pixel data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },
    #[error("target dimension must be non-zero, got {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("buffer of length {len} does not match {width}x{height}x{channels}")]
    BadBuffer {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
}

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::BadBuffer {
                len: data.len(),
                width,
                height,
                channels: 3,
            });
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, data).expect("sized buffer")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mirror the image left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BadBuffer {
                len: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("sized buffer")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("sized buffer")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Replicate the intensity into three equal channels.
    pub fn to_rgb(&self) -> RgbImage {
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Decode a PNG (8-bit gray/RGB, with or without alpha) or binary PGM/PPM
/// file. 8-bit samples map to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes, path)
}

fn decode_image(bytes: &[u8], path: &Path) -> Result<RgbImage, ImageError> {
    const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes, path)
    } else {
        Err(ImageError::UnsupportedFormat(path.to_path_buf()))
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<RgbImage, ImageError> {
    let corrupt = |reason: String| ImageError::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ImageError::CorruptData {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ImageError::UnsupportedFormat(path.to_path_buf())),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            match channels {
                1 | 2 => {
                    let v = px[0] as f64 / 255.0;
                    data.extend_from_slice(&[v, v, v]);
                }
                _ => data.extend(px[..3].iter().map(|&c| c as f64 / 255.0)),
            }
        }
    }
    RgbImage::new(w, h, data)
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<RgbImage, ImageError> {
    let corrupt = |reason: &str| ImageError::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(corrupt("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(corrupt("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(corrupt("only 8-bit maxval (1..=255) is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("missing separator after maxval"));
    }
    pos += 1;
    let need = w * h * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(ImageError::CorruptData {
            path: path.to_path_buf(),
            reason: format!("expected {need} raster bytes, found {}", raster.len()),
        });
    }
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(w * h * 3);
    for px in raster[..need].chunks_exact(channels) {
        if channels == 3 {
            data.extend(px.iter().map(|&c| c as f64 / scale));
        } else {
            let v = px[0] as f64 / scale;
            data.extend_from_slice(&[v, v, v]);
        }
    }
    RgbImage::new(w, h, data)
}

/// Encode as binary PGM (P5).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

/// Encode as binary PPM (P6).
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2])
        .collect();
    GrayImage::new(img.width, img.height, data).expect("sized buffer")
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` samples the
/// source at `i * (src - 1) / (dst - 1)`.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage, ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroDimension { width, height });
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let coord = |i: usize, dst: usize, src: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (s.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| coord(x, width, img.width)).collect();
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, img.height);
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage::new(width, height, data)
}

/// [`resize_bilinear`] applied to each channel.
pub fn resize_rgb_bilinear(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage, ImageError> {
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let channels: Vec<GrayImage> = (0..3)
        .map(|c| {
            let plane = img.data.iter().skip(c).step_by(3).copied().collect();
            resize_bilinear(&GrayImage::new(img.width, img.height, plane)?, width, height)
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(width * height * 3);
    for i in 0..width * height {
        data.extend(channels.iter().map(|ch| ch.data()[i]));
    }
    RgbImage::new(width, height, data)
}

/// Number of texture classes produced by [`SyntheticKind::TexturedClass`].
pub const TEXTURE_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SyntheticKind {
    Constant { value: f64 },
    Checkerboard { period: usize },
    StepEdge,
    UniformNoise { seed: u64 },
    /// Class 0: smooth blobs. Class 1: mid-frequency gratings. Class 2:
    /// fine gratings over speckle.
    TexturedClass { class: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub width: usize,
    pub height: usize,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, width: usize, height: usize) -> Result<Self, ImageError> {
        let spec = Self { kind, width, height };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.width < MIN_SYNTHETIC_SIDE || self.height < MIN_SYNTHETIC_SIDE {
            return Err(ImageError::InvalidSpec(format!(
                "size {}x{} is below the {MIN_SYNTHETIC_SIDE}x{MIN_SYNTHETIC_SIDE} minimum",
                self.width, self.height
            )));
        }
        match self.kind {
            SyntheticKind::Checkerboard { period: 0 } => {
                Err(ImageError::InvalidSpec("checkerboard period must be >= 1".into()))
            }
            SyntheticKind::Constant { value } if !(0.0..=1.0).contains(&value) => {
                Err(ImageError::InvalidSpec(format!("constant value {value} outside [0,1]")))
            }
            SyntheticKind::TexturedClass { class, .. } if class >= TEXTURE_CLASSES => Err(
                ImageError::InvalidSpec(format!("texture class {class} >= {TEXTURE_CLASSES}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Parses `constant[:v]`, `checkerboard:P`, `step-edge`, `noise:SEED` and
/// `textured:CLASS:SEED`, optionally suffixed with `@WxH` (default 64x64).
impl FromStr for SyntheticSpec {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ImageError::InvalidSpec(s.to_string());
        let (body, size) = match s.split_once('@') {
            Some((b, size)) => {
                let (w, h) = size.split_once('x').ok_or_else(bad)?;
                (b, (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
            }
            None => (s, (64, 64)),
        };
        let parts: Vec<&str> = body.split(':').collect();
        let num = |i: usize| parts.get(i).ok_or_else(bad)?.parse::<u64>().map_err(|_| bad());
        let kind = match parts[0] {
            "constant" => SyntheticKind::Constant {
                value: match parts.get(1) {
                    Some(v) => v.parse().map_err(|_| bad())?,
                    None => 0.5,
                },
            },
            "checkerboard" => SyntheticKind::Checkerboard { period: num(1)? as usize },
            "step-edge" | "step" => SyntheticKind::StepEdge,
            "noise" | "uniform-noise" => SyntheticKind::UniformNoise { seed: num(1)? },
            "textured" | "textured-class" => SyntheticKind::TexturedClass {
                class: num(1)? as usize,
                seed: num(2)?,
            },
            _ => return Err(bad()),
        };
        Self::new(kind, size.0, size.1)
    }
}

/// Render a synthetic image. Pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> GrayImage {
    let (w, h) = (spec.width, spec.height);
    match spec.kind {
        SyntheticKind::Constant { value } => GrayImage::filled(w, h, value),
        SyntheticKind::Checkerboard { period } => {
            GrayImage::from_fn(w, h, |x, y| ((x / period + y / period) % 2) as f64)
        }
        SyntheticKind::StepEdge => GrayImage::from_fn(w, h, |x, _| if x < w / 2 { 0.0 } else { 1.0 }),
        SyntheticKind::UniformNoise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            GrayImage::from_fn(w, h, |_, _| rng.random::<f64>())
        }
        SyntheticKind::TexturedClass { class, seed } => textured(class, seed, w, h),
    }
}

fn textured(class: usize, seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64 + 1) << 56));
    let contrast = rng.random_range(0.5..0.9);
    let mean = rng.random_range(0.35..0.65);
    let side = w.min(h) as f64;
    let field: Box<dyn Fn(f64, f64) -> f64> = match class {
        0 => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..4))
                .map(|_| {
                    (
                        rng.random_range(0.0..w as f64),
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.25..0.45) * side,
                        if rng.random::<bool>() { 1.0 } else { -1.0 },
                    )
                })
                .collect();
            Box::new(move |x, y| {
                blobs
                    .iter()
                    .map(|&(cx, cy, r, s)| s * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                    .sum::<f64>()
                    .clamp(-1.0, 1.0)
            })
        }
        1 | 2 => {
            let (lo, hi) = if class == 1 { (7.0, 11.0) } else { (2.2, 3.2) };
            let gratings: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    let period = rng.random_range(lo..hi);
                    let theta = rng.random_range(0.0..PI);
                    (2.0 * PI / period * theta.cos(), 2.0 * PI / period * theta.sin(), rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            Box::new(move |x, y| {
                0.5 * gratings.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum::<f64>()
            })
        }
        _ => unreachable!("class validated"),
    };
    let speckle = if class == 2 { 0.25 } else { 0.05 };
    GrayImage::from_fn(w, h, |x, y| {
        let v = mean + 0.5 * contrast * field(x as f64, y as f64) + speckle * (rng.random::<f64>() - 0.5);
        v.clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn ppm_white_is_all_ones() {
        let img = decode_image(&ppm(2, 2, &[255; 12]), Path::new("x")).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pgm_single_black_pixel() {
        let img = decode_image(b"P5 1 1 255\n\0", Path::new("x")).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_scales_each_channel() {
        let mut px = vec![0u8; 18];
        px[..3].copy_from_slice(&[128, 64, 32]);
        let img = decode_image(&ppm(3, 2, &px), Path::new("x")).unwrap();
        assert_eq!(img.pixel(0, 0), [128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0]);
        assert_eq!((img.width(), img.height()), (3, 2));
    }

    #[test]
    fn pnm_header_with_comment() {
        let img = decode_image(b"P5\n# made by hand\n2 1\n255\n\x00\xff", Path::new("x")).unwrap();
        assert_eq!(img.pixel(1, 0), [1.0; 3]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert!(matches!(
            decode_image(b"GIF89a", Path::new("x")),
            Err(ImageError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_image(b"P6 2 x 255\n", Path::new("x")),
            Err(ImageError::CorruptHeader { .. })
        ));
        assert!(matches!(
            decode_image(b"P6 2 2 65535\n", Path::new("x")),
            Err(ImageError::CorruptHeader { .. })
        ));
        assert!(matches!(
            decode_image(&ppm(2, 2, &[0; 5]), Path::new("x")),
            Err(ImageError::CorruptData { .. })
        ));
        assert!(matches!(
            load_image("/nonexistent/definitely/not/here.png"),
            Err(ImageError::Unreadable { .. })
        ));
    }

    #[test]
    fn png_roundtrip_through_decoder() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().unwrap();
            writer.write_image_data(&[255, 0, 0, 0, 51, 255]).unwrap();
        }
        let img = decode_image(&bytes, Path::new("x.png")).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), [0.0, 0.2, 1.0]);
    }

    #[test]
    fn grayscale_cases() {
        let white = to_grayscale(&RgbImage::filled(3, 3, [1.0; 3]));
        assert!(white.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let black = to_grayscale(&RgbImage::filled(3, 3, [0.0; 3]));
        assert!(black.data().iter().all(|&v| v == 0.0));
        let red = to_grayscale(&RgbImage::filled(1, 1, [1.0, 0.0, 0.0]));
        assert_eq!(red.data()[0], 0.299);
    }

    #[test]
    fn resize_cases() {
        let c = GrayImage::filled(5, 7, 0.5);
        let r = resize_bilinear(&c, 13, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let two = GrayImage::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_bilinear(&two, 2, 2).unwrap(), two);

        let ramp = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(resize_bilinear(&ramp, 3, 1).unwrap().data(), &[0.0, 0.5, 1.0]);

        assert!(matches!(resize_bilinear(&two, 0, 4), Err(ImageError::ZeroDimension { .. })));
    }

    #[test]
    fn generator_cases() {
        let c = generate(&"constant:0.25@16x16".parse().unwrap());
        assert!(c.data().iter().all(|&v| v == 0.25));

        let cb = generate(&SyntheticSpec::new(SyntheticKind::Checkerboard { period: 1 }, 8, 8).unwrap());
        let board = GrayImage::from_fn(8, 8, |x, y| ((x + y) % 2) as f64);
        assert_eq!(cb, board);

        let spec: SyntheticSpec = "noise:7".parse().unwrap();
        assert_eq!(generate(&spec), generate(&spec));
    }

    #[test]
    fn spec_validation() {
        assert!("checkerboard:0".parse::<SyntheticSpec>().is_err());
        assert!("noise:1@4x4".parse::<SyntheticSpec>().is_err());
        assert!("textured:3:1".parse::<SyntheticSpec>().is_err());
        assert!("sparkles".parse::<SyntheticSpec>().is_err());
        let s: SyntheticSpec = "textured:2:9@32x40".parse().unwrap();
        assert_eq!((s.width, s.height), (32, 40));
    }
}
