//! Coarse stage: three training-free complexity descriptors, the fused score
//! and the threshold-based granularity assignment.

use std::fmt;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;

/// Smallest side accepted by the spatial and spectral descriptors (the
/// Gaussian kernel is 5x5).
pub const MIN_DESCRIPTOR_SIDE: usize = 8;

/// Tolerance on normalized gradient magnitudes when comparing neighbours
/// during non-maximum suppression.
pub const NMS_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ComplexityError {
    #[error("image {width}x{height} is smaller than the {min}x{min} minimum")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("invalid granularity level {0} (expected 1, 2 or 3)")]
    InvalidLevel(u8),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error("estimator file {path}: {reason}")]
    EstimatorFile { path: String, reason: String },
}

/// Canny edge detector settings. Thresholds apply to the gradient magnitude
/// divided by its maximum over the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.4, low: 0.1, high: 0.2 }
    }
}

/// How the spectral descriptor is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum FreqMode {
    /// Share of (mean-removed) spectral energy outside a centered disk of
    /// radius `min(H, W) * radius_fraction`.
    HighFreqRatio { radius_fraction: f64 },
    /// Mean DFT magnitude divided by the image's largest attainable mean
    /// magnitude (`sqrt(HW)`), clamped to `[0, 1]`.
    MeanMagnitude,
}

impl Default for FreqMode {
    fn default() -> Self {
        FreqMode::HighFreqRatio { radius_fraction: 0.125 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub canny: CannyParams,
    pub freq: FreqMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityFeatures {
    pub edge: f64,
    pub entropy: f64,
    pub freq: f64,
}

impl ComplexityFeatures {
    pub fn new(edge: f64, entropy: f64, freq: f64) -> Self {
        Self { edge, entropy, freq }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.edge, self.entropy, self.freq]
    }
}

/// Trainable coarse-stage parameters: pre-softmax descriptor weights and the
/// raw threshold variables.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub w: [f64; 3],
    pub a: f64,
    pub b: f64,
}

impl EstimatorParams {
    pub fn thresholds(&self) -> Thresholds {
        thresholds_from_raw(self)
    }

    pub fn to_vec(&self) -> [f64; 5] {
        [self.w[0], self.w[1], self.w[2], self.a, self.b]
    }

    pub fn from_slice(v: &[f64; 5]) -> Self {
        Self { w: [v[0], v[1], v[2]], a: v[3], b: v[4] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Raw variables that produce the requested thresholds. Requires
    /// `0 < alpha < beta < 1`.
    pub fn with_thresholds(mut self, alpha: f64, beta: f64) -> Self {
        assert!(0.0 < alpha && alpha < beta && beta < 1.0, "need 0 < alpha < beta < 1");
        self.a = logit(alpha);
        self.b = logit((beta - alpha) / (1.0 - alpha));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ComplexityError> {
        let path = path.as_ref();
        let err = |reason: String| ComplexityError::EstimatorFile {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let params = Self::from_json(&text).map_err(|e| err(e.to_string()))?;
        if !params.is_finite() {
            return Err(err("non-finite parameter".into()));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub alpha: f64,
    pub beta: f64,
}

/// Routing level. `Coarse` uses the largest patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Granularity {
    Coarse = 1,
    Medium = 2,
    Fine = 3,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Coarse, Granularity::Medium, Granularity::Fine];

    pub fn level(self) -> u8 {
        self as u8
    }

    /// Zero-based index into per-granularity tables.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_level(level: u8) -> Result<Self, ComplexityError> {
        match level {
            1 => Ok(Self::Coarse),
            2 => Ok(Self::Medium),
            3 => Ok(Self::Fine),
            other => Err(ComplexityError::InvalidLevel(other)),
        }
    }
}

impl TryFrom<u8> for Granularity {
    type Error = ComplexityError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::from_level(v)
    }
}

impl From<Granularity> for u8 {
    fn from(g: Granularity) -> u8 {
        g.level()
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.level())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softmax3(w: &[f64; 3]) -> [f64; 3] {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = w.map(|x| (x - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

fn check_size(img: &GrayImage) -> Result<(), ComplexityError> {
    if img.width() < MIN_DESCRIPTOR_SIDE || img.height() < MIN_DESCRIPTOR_SIDE {
        return Err(ComplexityError::TooSmall {
            width: img.width(),
            height: img.height(),
            min: MIN_DESCRIPTOR_SIDE,
        });
    }
    Ok(())
}

/// Binary Canny edge map, row-major.
pub fn canny(img: &GrayImage, params: &CannyParams) -> Result<Vec<bool>, ComplexityError> {
    check_size(img)?;
    let (w, h) = (img.width(), img.height());
    let clamp = |x: isize, y: isize| (x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize);

    // 5x5 Gaussian, separable, replicate border
    let mut k = [0.0f64; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * params.sigma * params.sigma)).exp();
    }
    let ks: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= ks);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|i| {
                    let (sx, sy) = clamp(x as isize + i as isize - 2, y as isize);
                    k[i] * img.get(sx, sy)
                })
                .sum();
        }
    }
    let mut blur = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            blur[y * w + x] = (0..5)
                .map(|i| {
                    let (sx, sy) = clamp(x as isize, y as isize + i as isize - 2);
                    k[i] * tmp[sy * w + sx]
                })
                .sum();
        }
    }

    // Sobel
    let at = |x: isize, y: isize| {
        let (sx, sy) = clamp(x, y);
        blur[sy * w + sx]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    let mut max_mag = 0.0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
            max_mag = max_mag.max(mag[i]);
        }
    }
    if max_mag <= 1e-12 {
        return Ok(vec![false; w * h]);
    }
    mag.iter_mut().for_each(|m| *m /= max_mag);

    // Non-maximum suppression along the quantized gradient direction.
    // A pixel survives if it is strictly above the "previous" neighbour and
    // not below the "next" one, so plateaus two pixels wide keep one pixel.
    // Magnitudes within NMS_TIE_EPS count as equal, so symmetric inputs do
    // not depend on rounding order.
    let m_at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let tan22 = (std::f64::consts::PI / 8.0).tan();
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (ox, oy) = if ay <= ax * tan22 {
                (1, 0)
            } else if ax <= ay * tan22 {
                (0, 1)
            } else if (gx[i] > 0.0) == (gy[i] > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            if m > m_at(x - ox, y - oy) + NMS_TIE_EPS && m >= m_at(x + ox, y + oy) - NMS_TIE_EPS {
                thin[i] = m;
            }
        }
    }

    // Hysteresis, 8-connected.
    let mut edges = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= params.high {
            edges[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] >= params.low {
                    edges[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(edges)
}

/// Fraction of pixels on the Canny edge map.
pub fn edge_density(img: &GrayImage, params: &CannyParams) -> Result<f64, ComplexityError> {
    let edges = canny(img, params)?;
    Ok(edges.iter().filter(|&&e| e).count() as f64 / edges.len() as f64)
}

/// 256-bin histogram index of an intensity in `[0, 1]`.
#[inline]
pub fn quantize(v: f64) -> usize {
    ((v * 255.999).floor() as usize).min(255)
}

/// Shannon entropy of the 256-bin intensity histogram in bits, divided by 8.
pub fn shannon_entropy(img: &GrayImage) -> f64 {
    let mut hist = [0usize; 256];
    for &v in img.data() {
        hist[quantize(v)] += 1;
    }
    let n = img.data().len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let bits: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            // written as p * log2(1/p) so a single-bin histogram gives +0.0
            p * (1.0 / p).log2()
        })
        .sum();
    (bits / 8.0).clamp(0.0, 1.0)
}

/// Row-then-column 2-D DFT of a real grid.
pub fn dft2(data: &[f64], width: usize, height: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(width);
    let col_fft = planner.plan_fft_forward(height);
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    buf
}

/// Spectral descriptor, see [`FreqMode`].
pub fn freq_ratio(img: &GrayImage, mode: &FreqMode) -> Result<f64, ComplexityError> {
    check_size(img)?;
    let (w, h) = (img.width(), img.height());
    match *mode {
        FreqMode::HighFreqRatio { radius_fraction } => {
            let mean = img.data().iter().sum::<f64>() / (w * h) as f64;
            let centered: Vec<f64> = img.data().iter().map(|v| v - mean).collect();
            let spec = dft2(&centered, w, h);
            let radius = w.min(h) as f64 * radius_fraction;
            let (mut total, mut high) = (0.0, 0.0);
            for v in 0..h {
                // distance of the fftshifted coordinate from the center
                let dv = ((v + h / 2) % h) as f64 - (h / 2) as f64;
                for u in 0..w {
                    let du = ((u + w / 2) % w) as f64 - (w / 2) as f64;
                    let e = spec[v * w + u].norm_sqr();
                    total += e;
                    if du * du + dv * dv > radius * radius {
                        high += e;
                    }
                }
            }
            // rounding leaves ~1e-30 of energy on flat images
            if total <= 1e-18 * (w * h) as f64 {
                Ok(0.0)
            } else {
                Ok((high / total).clamp(0.0, 1.0))
            }
        }
        FreqMode::MeanMagnitude => {
            let spec = dft2(img.data(), w, h);
            let n = (w * h) as f64;
            let mean = spec.iter().map(|c| c.norm()).sum::<f64>() / n;
            Ok((mean / n.sqrt()).clamp(0.0, 1.0))
        }
    }
}

pub fn extract_features(img: &GrayImage, cfg: &DescriptorConfig) -> Result<ComplexityFeatures, ComplexityError> {
    Ok(ComplexityFeatures {
        edge: edge_density(img, &cfg.canny)?,
        entropy: shannon_entropy(img),
        freq: freq_ratio(img, &cfg.freq)?,
    })
}

/// Weighted descriptor sum before the sigmoid.
pub fn fuse_logit(feat: &ComplexityFeatures, params: &EstimatorParams) -> f64 {
    let s = softmax3(&params.w);
    let v = feat.as_array();
    s[0] * v[0] + s[1] * v[1] + s[2] * v[2]
}

/// Complexity score in `(0, 1)`.
pub fn fuse_score(feat: &ComplexityFeatures, params: &EstimatorParams) -> f64 {
    sigmoid(fuse_logit(feat, params))
}

/// `alpha = sigmoid(a)`, `beta = alpha + (1 - alpha) * sigmoid(b)`.
pub fn thresholds_from_raw(params: &EstimatorParams) -> Thresholds {
    let alpha = sigmoid(params.a);
    let beta = alpha + (1.0 - alpha) * sigmoid(params.b);
    Thresholds { alpha, beta }
}

pub fn assign_granularity(score: f64, th: &Thresholds) -> Granularity {
    if score < th.alpha {
        Granularity::Coarse
    } else if score < th.beta {
        Granularity::Medium
    } else {
        Granularity::Fine
    }
}

/// Result of running the coarse stage on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoarseDecision {
    pub features: ComplexityFeatures,
    pub score: f64,
    pub granularity: Granularity,
}

/// Frozen coarse stage: descriptors, fusion and thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoarseStage {
    pub params: EstimatorParams,
    pub descriptors: DescriptorConfig,
    /// Resize side applied before the descriptors; `None` keeps the input size.
    pub resize: Option<usize>,
}

impl CoarseStage {
    pub fn new(params: EstimatorParams) -> Self {
        Self { params, ..Default::default() }
    }

    pub fn features(&self, img: &GrayImage) -> Result<ComplexityFeatures, ComplexityError> {
        match self.resize {
            Some(side) if side != img.width() || side != img.height() => {
                let resized = crate::image::resize_bilinear(img, side, side)?;
                extract_features(&resized, &self.descriptors)
            }
            _ => extract_features(img, &self.descriptors),
        }
    }

    pub fn decide_features(&self, features: ComplexityFeatures) -> CoarseDecision {
        let score = fuse_score(&features, &self.params);
        CoarseDecision {
            features,
            score,
            granularity: assign_granularity(score, &self.params.thresholds()),
        }
    }

    pub fn decide(&self, img: &GrayImage) -> Result<CoarseDecision, ComplexityError> {
        Ok(self.decide_features(self.features(img)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{generate, SyntheticKind, SyntheticSpec};

    fn synth(kind: SyntheticKind, side: usize) -> GrayImage {
        generate(&SyntheticSpec { kind, width: side, height: side })
    }

    #[test]
    fn constant_image_has_zero_features() {
        let img = GrayImage::filled(32, 32, 0.4);
        let f = extract_features(&img, &DescriptorConfig::default()).unwrap();
        assert_eq!(f.as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn entropy_reference_values() {
        let two = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 1.0 });
        assert!((shannon_entropy(&two) - 0.125).abs() < 1e-12);
        let all = GrayImage::from_fn(16, 16, |x, y| (y * 16 + x) as f64 / 255.0);
        assert!((shannon_entropy(&all) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantizer_hits_every_bin_once() {
        let bins: Vec<usize> = (0..256).map(|i| quantize(i as f64 / 255.0)).collect();
        assert_eq!(bins, (0..256).collect::<Vec<_>>());
    }

    #[test]
    fn nyquist_checkerboard_is_high_frequency() {
        let img = synth(SyntheticKind::Checkerboard { period: 1 }, 16);
        assert!(freq_ratio(&img, &FreqMode::default()).unwrap() >= 0.99);
    }

    #[test]
    fn descriptors_reject_tiny_images() {
        let img = GrayImage::filled(7, 32, 0.0);
        assert!(matches!(
            edge_density(&img, &CannyParams::default()),
            Err(ComplexityError::TooSmall { .. })
        ));
        assert!(freq_ratio(&img, &FreqMode::default()).is_err());
    }

    #[test]
    fn mean_magnitude_mode_is_bounded() {
        for kind in [
            SyntheticKind::Checkerboard { period: 1 },
            SyntheticKind::UniformNoise { seed: 1 },
            SyntheticKind::Constant { value: 1.0 },
        ] {
            let v = freq_ratio(&synth(kind, 16), &FreqMode::MeanMagnitude).unwrap();
            assert!((0.0..=1.0).contains(&v), "{kind:?} -> {v}");
        }
    }

    #[test]
    fn fuse_score_examples() {
        let p = EstimatorParams::default();
        assert_eq!(fuse_score(&ComplexityFeatures::new(0.0, 0.0, 0.0), &p), 0.5);
        let v = fuse_score(&ComplexityFeatures::new(0.3, 0.6, 0.9), &p);
        assert!((v - 0.645_656_306_225_795).abs() < 1e-12);
        let sat = EstimatorParams { w: [20.0, -20.0, -20.0], ..p };
        let e = 0.37;
        let v = fuse_score(&ComplexityFeatures::new(e, 0.9, 0.1), &sat);
        assert!((v - sigmoid(e)).abs() < 5e-5);
    }

    #[test]
    fn threshold_examples() {
        let th = thresholds_from_raw(&EstimatorParams::default());
        assert_eq!((th.alpha, th.beta), (0.5, 0.75));
        let low = thresholds_from_raw(&EstimatorParams { a: -20.0, b: -20.0, ..Default::default() });
        assert!(0.0 < low.alpha && low.alpha < low.beta);
        let high = thresholds_from_raw(&EstimatorParams { a: 0.0, b: 20.0, ..Default::default() });
        assert_eq!(high.alpha, 0.5);
        assert!(high.beta < 1.0 && high.beta > 1.0 - 1e-8);
    }

    #[test]
    fn with_thresholds_inverts_the_map() {
        let p = EstimatorParams::default().with_thresholds(0.6, 0.8);
        let th = p.thresholds();
        assert!((th.alpha - 0.6).abs() < 1e-12 && (th.beta - 0.8).abs() < 1e-12);
    }

    #[test]
    fn granularity_boundaries() {
        let th = Thresholds { alpha: 0.5, beta: 0.75 };
        assert_eq!(assign_granularity(0.2, &th), Granularity::Coarse);
        assert_eq!(assign_granularity(0.5, &th), Granularity::Medium);
        assert_eq!(assign_granularity(0.75, &th), Granularity::Fine);
    }

    #[test]
    fn granularity_serializes_as_level() {
        assert_eq!(serde_json::to_string(&Granularity::Fine).unwrap(), "3");
        assert!(serde_json::from_str::<Granularity>("4").is_err());
    }

    #[test]
    fn estimator_json_shape() {
        let p = EstimatorParams { w: [1.0, 2.0, 3.0], a: 0.5, b: -0.25 };
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["w"], serde_json::json!([1.0, 2.0, 3.0]));
        assert_eq!(v["a"], 0.5);
        assert_eq!(EstimatorParams::from_json(&p.to_json()).unwrap(), p);
    }
}
