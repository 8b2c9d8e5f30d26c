//! Labeled image sets: IDX files and synthetic Gaussian-bump blobs.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{resize, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Flattened images, each resized to `out_size²` first when needed.
    pub fn features(&self, out_size: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .images
            .iter()
            .map(|img| {
                if img.height == out_size && img.width == out_size {
                    img.pixels.clone()
                } else {
                    resize(img, out_size).pixels
                }
            })
            .collect();
        if rows.is_empty() {
            return Tensor::zeros(&[0, 0]);
        }
        Tensor::from_rows(&rows).expect("equal-size images")
    }

    /// Rows `idx` as a new dataset (class count preserved).
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn expect_magic(c: &mut Cursor<'_>, want: u32) -> Result<()> {
    let got = c.u32("magic")?;
    if got != want {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {got:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file (`u8`, `N × H × W`) and its label file. Pixels
/// are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, labels) = parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)?;
    Dataset::new(images, labels)
}

pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<(Vec<Image>, Vec<usize>)> {
    let mut c = Cursor {
        bytes: image_bytes,
        pos: 0,
    };
    expect_magic(&mut c, IMAGE_MAGIC)?;
    let n = c.u32("image count")? as usize;
    let h = c.u32("row count")? as usize;
    let w = c.u32("column count")? as usize;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let px = c.take(h * w, "pixel data")?;
        let pixels = px.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(h, w, 1, pixels)?);
    }

    let mut c = Cursor {
        bytes: label_bytes,
        pos: 0,
    };
    expect_magic(&mut c, LABEL_MAGIC)?;
    let m = c.u32("label count")? as usize;
    if m != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {m} differs from image count {n}"),
        });
    }
    let labels = c.take(m, "label data")?.iter().map(|&b| b as usize).collect();
    Ok((images, labels))
}

/// Writes grayscale images and labels as IDX files; pixels are rounded to
/// the nearest `k/255`.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w) = data.images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut img = Vec::with_capacity(16 + data.len() * h * w);
    img.extend(IMAGE_MAGIC.to_be_bytes());
    img.extend((data.len() as u32).to_be_bytes());
    img.extend((h as u32).to_be_bytes());
    img.extend((w as u32).to_be_bytes());
    for im in &data.images {
        if im.channels != 1 || im.height != h || im.width != w {
            return Err(Error::invalid("IDX output needs equal-size grayscale images"));
        }
        img.extend(im.pixels.iter().map(|p| (p * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend(LABEL_MAGIC.to_be_bytes());
    lab.extend((data.len() as u32).to_be_bytes());
    for &l in &data.labels {
        let b = u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    std::fs::File::create(images_path)?.write_all(&img)?;
    std::fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Parameters of the synthetic blob dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f64,
    /// Bump standard deviation as a fraction of the grid cell width.
    pub bump_width: f64,
    /// Peak height of the bump over a zero background.
    pub amplitude: f64,
}

impl BlobSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, noise: f64) -> Self {
        Self {
            classes,
            per_class,
            size,
            noise,
            bump_width: 0.5,
            amplitude: 1.0,
        }
    }

    fn grid(&self) -> usize {
        (self.classes as f64).sqrt().ceil() as usize
    }

    /// Bump center of class `c` in pixel coordinates `(y, x)`.
    pub fn center(&self, c: usize) -> (f64, f64) {
        let g = self.grid();
        let cell = self.size as f64 / g as f64;
        (((c / g) as f64 + 0.5) * cell, ((c % g) as f64 + 0.5) * cell)
    }

    /// Noise-free image of class `c`.
    pub fn template(&self, c: usize) -> Image {
        let (cy, cx) = self.center(c);
        let s = self.bump_width * self.size as f64 / self.grid() as f64;
        let n = self.size;
        let pixels = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                self.amplitude * (-r2 / (2.0 * s * s)).exp()
            })
            .collect();
        Image::new(n, n, 1, pixels).expect("valid template")
    }
}

/// Class `c` is a Gaussian bump at its own grid cell on a `size × size`
/// canvas plus `N(0, σ²)` pixel noise, clamped to `[0,1]`. Samples are
/// ordered class-major.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("generate_blobs needs at least 2 classes"));
    }
    if spec.size == 0 || !(spec.noise >= 0.0) || !(spec.bump_width > 0.0) || !(0.0..=1.0).contains(&spec.amplitude) {
        return Err(Error::invalid(format!("bad blob parameters {spec:?}")));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.classes {
        let base = spec.template(c);
        for _ in 0..spec.per_class {
            let pixels = base
                .pixels
                .iter()
                .map(|p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            images.push(Image::new(spec.size, spec.size, 1, pixels)?);
            labels.push(c);
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: spec.classes,
    })
}
