//! Stochastic view generation for small images.
//!
//! Pipeline: random resized crop → colour jitter → grayscale → flip →
//! Gaussian blur → flatten. Flip and blur commute here: the blur kernel is
//! symmetric and edges are reflected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels in `[0,1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape("Image::new", &[height, width, channels], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixels must lie in [0,1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Row vector of length `height·width·channels`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.pixels.len()], self.pixels.clone()).expect("length matches")
    }

    fn map_pixels(&mut self, f: impl Fn(f64) -> f64) {
        for p in &mut self.pixels {
            *p = f(*p).clamp(0.0, 1.0);
        }
    }

    fn luma(&self, y: usize, x: usize) -> f64 {
        if self.channels == 1 {
            self.at(y, x, 0)
        } else {
            0.299 * self.at(y, x, 0) + 0.587 * self.at(y, x, 1) + 0.114 * self.at(y, x, 2)
        }
    }
}

/// Deterministic per-sample random stream.
///
/// The 64-bit state is `seed ⊕ sample ⊕ epoch·0x9E3779B97F4A7C15`; the same
/// triple always replays the same draws, independent of batch order or
/// thread.
#[derive(Clone, Debug)]
pub struct RngStream {
    state: u64,
    rng: ChaCha8Rng,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

impl RngStream {
    pub fn new(seed: u64, sample: u64, epoch: u64) -> Self {
        Self::from_state(seed ^ sample ^ epoch.wrapping_mul(GOLDEN))
    }

    pub fn from_state(state: u64) -> Self {
        Self {
            state,
            rng: ChaCha8Rng::seed_from_u64(state),
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Independent sub-stream `k` of the same state (fresh, not advanced).
    pub fn branch(&self, k: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state);
        rng.set_stream(k + 1);
        Self { state: self.state, rng }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Teacher and student see the same augmented view.
    Identical,
    /// Teacher and student see independently augmented views.
    Cross,
}

impl std::str::FromStr for ViewMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(ViewMode::Identical),
            "cross" => Ok(ViewMode::Cross),
            _ => Err(Error::Config(format!("unknown view mode {s:?} (identical|cross)"))),
        }
    }
}

impl std::fmt::Display for ViewMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewMode::Identical => "identical",
            ViewMode::Cross => "cross",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    pub out_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    /// Brightness, contrast, saturation, hue.
    pub jitter: [f64; 4],
    pub jitter_p: f64,
    pub gray_p: f64,
    pub blur_sigma: (f64, f64),
    pub blur_p: f64,
    pub flip_p: f64,
    pub view_mode: ViewMode,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            out_size: 16,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_p: 0.8,
            gray_p: 0.2,
            blur_sigma: (0.1, 0.2),
            blur_p: 0.5,
            flip_p: 0.5,
            view_mode: ViewMode::Identical,
        }
    }
}

impl ViewConfig {
    /// Every stochastic stage switched off; crop keeps the full frame.
    pub fn disabled(out_size: usize) -> Self {
        Self {
            out_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            jitter: [0.0; 4],
            jitter_p: 0.0,
            gray_p: 0.0,
            blur_sigma: (0.1, 0.2),
            blur_p: 0.0,
            flip_p: 0.0,
            view_mode: ViewMode::Identical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale)));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::invalid(format!("bad crop ratio {:?}", self.crop_ratio)));
        }
        let (slo, shi) = self.blur_sigma;
        if !(0.0 < slo && slo <= shi) {
            return Err(Error::invalid(format!("bad blur sigma range {:?}", self.blur_sigma)));
        }
        for p in [self.jitter_p, self.gray_p, self.blur_p, self.flip_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0,1]")));
            }
        }
        if self.out_size == 0 {
            return Err(Error::invalid("out_size must be >= 1"));
        }
        Ok(())
    }
}

/// Crop box `(top, left, height, width)` in source pixels.
type CropBox = (usize, usize, usize, usize);

fn sample_crop(img: &Image, rng: &mut RngStream, scale: (f64, f64), ratio: (f64, f64)) -> CropBox {
    let (h, w) = (img.height, img.width);
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.uniform(scale.0, scale.1);
        let aspect = rng.uniform(log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.below(h - ch + 1);
            let left = rng.below(w - cw + 1);
            return (top, left, ch, cw);
        }
    }
    // Center crop, with the aspect ratio clamped into range.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        ((w as f64 / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, (h as f64 * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resize of a crop box to `out×out`, half-pixel centers.
fn resize_box(img: &Image, (top, left, ch, cw): CropBox, out: usize) -> Image {
    let c = img.channels;
    let mut dst = Image::constant(out, out, c, 0.0);
    let sy = ch as f64 / out as f64;
    let sx = cw as f64 / out as f64;
    for oy in 0..out {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = fx - x0 as f64;
            for k in 0..c {
                let p00 = img.at(top + y0, left + x0, k);
                let p01 = img.at(top + y0, left + x1, k);
                let p10 = img.at(top + y1, left + x0, k);
                let p11 = img.at(top + y1, left + x1, k);
                let v = (1.0 - wy) * ((1.0 - wx) * p00 + wx * p01) + wy * ((1.0 - wx) * p10 + wx * p11);
                *dst.at_mut(oy, ox, k) = v.clamp(0.0, 1.0);
            }
        }
    }
    dst
}

/// Bilinear resize of the whole frame to `out_size²`.
pub fn resize(img: &Image, out_size: usize) -> Image {
    resize_box(img, (0, 0, img.height, img.width), out_size)
}

/// Area fraction uniform in `scale`, log-aspect uniform in `ratio`; falls
/// back to a center crop after 10 rejected draws.
pub fn random_resized_crop(img: &Image, rng: &mut RngStream, scale: (f64, f64), ratio: (f64, f64), out_size: usize) -> Image {
    let b = sample_crop(img, rng, scale, ratio);
    resize_box(img, b, out_size)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_brightness(img: &mut Image, f: f64) {
    img.map_pixels(|p| p * f);
}

fn adjust_contrast(img: &mut Image, f: f64) {
    let n = (img.height * img.width) as f64;
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += img.luma(y, x);
        }
    }
    mean /= n;
    img.map_pixels(|p| f * p + (1.0 - f) * mean);
}

fn adjust_saturation(img: &mut Image, f: f64) {
    if img.channels == 1 {
        return;
    }
    for y in 0..img.height {
        for x in 0..img.width {
            let g = img.luma(y, x);
            for c in 0..3 {
                let p = img.at_mut(y, x, c);
                *p = (f * *p + (1.0 - f) * g).clamp(0.0, 1.0);
            }
        }
    }
}

fn adjust_hue(img: &mut Image, shift: f64) {
    if img.channels == 1 || shift == 0.0 {
        return;
    }
    for px in img.pixels.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

fn to_grayscale(img: &mut Image) {
    if img.channels == 1 {
        return;
    }
    for y in 0..img.height {
        for x in 0..img.width {
            let g = img.luma(y, x).clamp(0.0, 1.0);
            for c in 0..3 {
                *img.at_mut(y, x, c) = g;
            }
        }
    }
}

fn flip_horizontal(img: &mut Image) {
    let (w, c) = (img.width, img.channels);
    for row in img.pixels.chunks_mut(w * c) {
        for x in 0..w / 2 {
            for k in 0..c {
                row.swap(x * c + k, (w - 1 - x) * c + k);
            }
        }
    }
}

/// Colour jitter (gated as a whole), then grayscale, then horizontal flip.
pub fn pixel_jitter_flip_gray(img: &Image, rng: &mut RngStream, config: &ViewConfig) -> Image {
    let mut out = img.clone();
    if rng.bernoulli(config.jitter_p) {
        let [b, c, s, h] = config.jitter;
        let factor = |rng: &mut RngStream, s: f64| rng.uniform((1.0 - s).max(0.0), 1.0 + s);
        let fb = factor(rng, b);
        let fc = factor(rng, c);
        let fs = factor(rng, s);
        let fh = rng.uniform(-h, h);
        adjust_brightness(&mut out, fb);
        adjust_contrast(&mut out, fc);
        adjust_saturation(&mut out, fs);
        adjust_hue(&mut out, fh);
    }
    if rng.bernoulli(config.gray_p) {
        to_grayscale(&mut out);
    }
    if rng.bernoulli(config.flip_p) {
        flip_horizontal(&mut out);
    }
    out
}

/// Reflects an out-of-range index back into `0..n` (edge pixel not repeated).
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Normalized 1-D Gaussian kernel of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with a fixed `sigma`.
pub fn blur_with_sigma(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * img.at(y, xx, ch);
                }
                *tmp.at_mut(y, x, ch) = acc;
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp.at(yy, x, ch);
                }
                *out.at_mut(y, x, ch) = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// With probability `p`, blur with `σ ~ U[sigma.0, sigma.1]`.
pub fn gaussian_blur(img: &Image, rng: &mut RngStream, sigma: (f64, f64), p: f64) -> Image {
    if !rng.bernoulli(p) {
        return img.clone();
    }
    let s = rng.uniform(sigma.0, sigma.1);
    blur_with_sigma(img, s)
}

/// Full augmentation of one image into a flat feature vector of length
/// `out_size²·channels`.
pub fn make_view(img: &Image, config: &ViewConfig, rng: &mut RngStream) -> Tensor {
    let cropped = random_resized_crop(img, rng, config.crop_scale, config.crop_ratio, config.out_size);
    let colored = pixel_jitter_flip_gray(&cropped, rng, config);
    gaussian_blur(&colored, rng, config.blur_sigma, config.blur_p).to_tensor()
}

/// Teacher and student views of one sample. In identical mode both are the
/// same tensor; in cross mode they come from two independent branches.
pub fn view_pair(img: &Image, config: &ViewConfig, stream: &RngStream) -> (Tensor, Tensor) {
    match config.view_mode {
        ViewMode::Identical => {
            let v = make_view(img, config, &mut stream.branch(0));
            (v.clone(), v)
        }
        ViewMode::Cross => (
            make_view(img, config, &mut stream.branch(0)),
            make_view(img, config, &mut stream.branch(1)),
        ),
    }
}
