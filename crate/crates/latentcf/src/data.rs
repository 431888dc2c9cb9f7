//! Dataset ingestion and synthesis: big-endian IDX files, a deterministic
//! glyph-based digit corpus, a fully-known synthetic manifold for oracle
//! tests, and derived per-image attribute labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Grayscale images with integer class labels. Pixels are stored row-major
/// per image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl ImageDataset {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let ds = ImageDataset {
            h,
            w,
            pixels,
            labels,
            split: Split::Train,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.labels.len() * self.h * self.w {
            return Err(Error::IdxCountMismatch {
                images: self.pixels.len() / (self.h * self.w).max(1),
                labels: self.labels.len(),
            });
        }
        if let Some(&bad) = self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelOutOfRange { value: bad });
        }
        Ok(())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w
    }

    pub fn image_pixels(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// One image as an `[h, w]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.image_pixels(i).to_vec())
            .expect("dataset invariant: image length matches h*w")
    }

    /// All images flattened into an `[n, h*w]` matrix.
    pub fn images_matrix(&self) -> Tensor {
        Tensor::new(vec![self.n(), self.image_len()], self.pixels.clone())
            .expect("dataset invariant: pixel count matches n*h*w")
    }

    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        let len = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image_pixels(i));
            labels.push(self.labels[i]);
        }
        ImageDataset {
            h: self.h,
            w: self.w,
            pixels,
            labels,
            split: self.split,
        }
    }
}

fn read_u32_be(path: &str, bytes: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected: offset + 4,
            actual: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads a pair of IDX files (big-endian, unsigned byte payload) as produced
/// for MNIST. Pixels are scaled by 1/255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<ImageDataset> {
    let ipath = images_path.as_ref().display().to_string();
    let lpath = labels_path.as_ref().display().to_string();
    let ibytes = fs::read(images_path.as_ref())?;
    let lbytes = fs::read(labels_path.as_ref())?;

    let magic = read_u32_be(&ipath, &ibytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxMagic {
            path: ipath,
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(&ipath, &ibytes, 4)? as usize;
    let h = read_u32_be(&ipath, &ibytes, 8)? as usize;
    let w = read_u32_be(&ipath, &ibytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if ibytes.len() != expected {
        return Err(Error::IdxTruncated {
            path: ipath,
            expected,
            actual: ibytes.len(),
        });
    }

    let lmagic = read_u32_be(&lpath, &lbytes, 0)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::IdxMagic {
            path: lpath,
            expected: IDX_LABEL_MAGIC,
            found: lmagic,
        });
    }
    let ln = read_u32_be(&lpath, &lbytes, 4)? as usize;
    let lexpected = 8 + ln;
    if lbytes.len() != lexpected {
        return Err(Error::IdxTruncated {
            path: lpath,
            expected: lexpected,
            actual: lbytes.len(),
        });
    }
    if n != ln {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: ln,
        });
    }

    let pixels: Vec<f64> = ibytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    ImageDataset::new(h, w, pixels, labels)
}

/// Writes a dataset back out as an IDX pair. Pixel bytes are
/// `round(255 * v)`, so a dataset that came from `load_idx` round-trips
/// bitwise.
pub fn write_idx(
    ds: &ImageDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let mut ibytes = Vec::with_capacity(16 + ds.pixels.len());
    ibytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    ibytes.extend_from_slice(&(ds.n() as u32).to_be_bytes());
    ibytes.extend_from_slice(&(ds.h as u32).to_be_bytes());
    ibytes.extend_from_slice(&(ds.w as u32).to_be_bytes());
    ibytes.extend(ds.pixels.iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(images_path, ibytes)?;

    let mut lbytes = Vec::with_capacity(8 + ds.n());
    lbytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(ds.n() as u32).to_be_bytes());
    lbytes.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lbytes)?;
    Ok(())
}

// ── synthetic digit corpus ──────────────────────────────────────────────

type Segment = (f64, f64, f64, f64);

fn push_polyline(segments: &mut Vec<Segment>, points: &[(f64, f64)]) {
    for pair in points.windows(2) {
        segments.push((pair[0].0, pair[0].1, pair[1].0, pair[1].1));
    }
}

fn push_ellipse(segments: &mut Vec<Segment>, cx: f64, cy: f64, rx: f64, ry: f64, steps: usize) {
    let pts: Vec<(f64, f64)> = (0..=steps)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect();
    push_polyline(segments, &pts);
}

/// Stroke skeleton of each digit on the unit square (x right, y down).
fn glyph_segments(digit: usize) -> Vec<Segment> {
    let mut s = Vec::new();
    match digit {
        0 => push_ellipse(&mut s, 0.5, 0.5, 0.26, 0.36, 12),
        1 => {
            push_polyline(&mut s, &[(0.38, 0.30), (0.56, 0.14), (0.56, 0.86)]);
        }
        2 => push_polyline(
            &mut s,
            &[
                (0.28, 0.34),
                (0.32, 0.20),
                (0.50, 0.14),
                (0.68, 0.20),
                (0.72, 0.34),
                (0.62, 0.52),
                (0.28, 0.86),
                (0.74, 0.86),
            ],
        ),
        3 => push_polyline(
            &mut s,
            &[
                (0.30, 0.20),
                (0.50, 0.14),
                (0.68, 0.22),
                (0.68, 0.40),
                (0.50, 0.50),
                (0.68, 0.60),
                (0.68, 0.78),
                (0.50, 0.86),
                (0.30, 0.80),
            ],
        ),
        4 => {
            push_polyline(&mut s, &[(0.62, 0.14), (0.28, 0.60), (0.78, 0.60)]);
            push_polyline(&mut s, &[(0.62, 0.14), (0.62, 0.86)]);
        }
        5 => push_polyline(
            &mut s,
            &[
                (0.70, 0.14),
                (0.34, 0.14),
                (0.32, 0.46),
                (0.55, 0.42),
                (0.70, 0.56),
                (0.68, 0.74),
                (0.50, 0.86),
                (0.30, 0.78),
            ],
        ),
        6 => {
            push_polyline(
                &mut s,
                &[(0.64, 0.14), (0.44, 0.28), (0.34, 0.50), (0.34, 0.68)],
            );
            push_ellipse(&mut s, 0.50, 0.66, 0.17, 0.18, 10);
        }
        7 => {
            push_polyline(&mut s, &[(0.26, 0.14), (0.74, 0.14), (0.44, 0.86)]);
        }
        8 => {
            push_ellipse(&mut s, 0.5, 0.30, 0.16, 0.16, 10);
            push_ellipse(&mut s, 0.5, 0.66, 0.20, 0.20, 10);
        }
        9 => {
            push_ellipse(&mut s, 0.48, 0.34, 0.19, 0.19, 10);
            push_polyline(&mut s, &[(0.67, 0.34), (0.62, 0.62), (0.52, 0.86)]);
        }
        _ => unreachable!("digit out of range"),
    }
    s
}

fn point_segment_distance(px: f64, py: f64, seg: &Segment) -> f64 {
    let (x1, y1, x2, y2) = *seg;
    let dx = x2 - x1;
    let dy = y2 - y1;
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let cx = x1 + t * dx;
    let cy = y1 + t * dy;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids pulling in a distributions crate
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic MNIST-style corpus: digits rendered from stroke skeletons
/// with per-image rotation, scale, translation, stroke width, intensity, and
/// pixel noise. Same seed, same bytes.
pub fn synth_digits(seed: u64, n: usize, side: usize) -> ImageDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.random_range(0..10usize);
        labels.push(digit);
        let theta: f64 = rng.random_range(-0.20..0.20);
        let scale: f64 = rng.random_range(0.72..1.0);
        let tx: f64 = rng.random_range(-0.09..0.09);
        let ty: f64 = rng.random_range(-0.09..0.09);
        let thickness: f64 = rng.random_range(0.050..0.085);
        let intensity: f64 = rng.random_range(0.82..1.0);
        let noise_sd = 0.06;

        let (sin, cos) = theta.sin_cos();
        let warp = |x: f64, y: f64| -> (f64, f64) {
            let (dx, dy) = (x - 0.5, y - 0.5);
            (
                0.5 + scale * (cos * dx - sin * dy) + tx,
                0.5 + scale * (sin * dx + cos * dy) + ty,
            )
        };
        let segments: Vec<Segment> = glyph_segments(digit)
            .iter()
            .map(|&(x1, y1, x2, y2)| {
                let (a, b) = warp(x1, y1);
                let (c, d) = warp(x2, y2);
                (a, b, c, d)
            })
            .collect();

        for row in 0..side {
            for col in 0..side {
                let px = (col as f64 + 0.5) / side as f64;
                let py = (row as f64 + 0.5) / side as f64;
                let dist = segments
                    .iter()
                    .map(|s| point_segment_distance(px, py, s))
                    .fold(f64::INFINITY, f64::min);
                let coverage = 1.0 / (1.0 + ((dist - thickness) / (0.25 * thickness)).exp());
                let v = intensity * coverage + noise_sd * standard_normal(&mut rng);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageDataset {
        h: side,
        w: side,
        pixels,
        labels,
        split: Split::Train,
    }
}

// ── synthetic manifold with known generator ─────────────────────────────

/// A dataset generated by a known affine-plus-sigmoid map from Gaussian
/// latents, with the ground truth kept for oracle tests.
#[derive(Debug, Clone)]
pub struct SynthManifold {
    pub dataset: ImageDataset,
    /// True latent vectors, one per image.
    pub latents: Vec<Vec<f64>>,
    /// Generator weight matrix `[d_latent, image_dim]`.
    pub weights: Tensor,
    /// Generator bias, length `image_dim`.
    pub bias: Vec<f64>,
}

/// Samples `z ~ N(0, I_d)` and emits images `sigmoid(z W + b)` of shape
/// `[image_dim, 1]`. Labels are `z[0] > 0`.
pub fn synth_manifold(
    seed: u64,
    n: usize,
    d_latent: usize,
    image_dim: usize,
) -> Result<SynthManifold> {
    if d_latent == 0 || image_dim == 0 || d_latent > image_dim {
        return Err(Error::InvalidArgument {
            op: "synth_manifold",
            msg: format!("invalid dims: d_latent={d_latent}, image_dim={image_dim}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wvals = Vec::with_capacity(d_latent * image_dim);
    for _ in 0..d_latent * image_dim {
        wvals.push(standard_normal(&mut rng) / (d_latent as f64).sqrt());
    }
    let weights = Tensor::matrix(d_latent, image_dim, wvals)?;
    let bias: Vec<f64> = (0..image_dim)
        .map(|_| 0.2 * standard_normal(&mut rng))
        .collect();

    let mut latents = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * image_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..d_latent).map(|_| standard_normal(&mut rng)).collect();
        labels.push(if z[0] > 0.0 { 1 } else { 0 });
        for j in 0..image_dim {
            let mut s = bias[j];
            for (k, zk) in z.iter().enumerate() {
                s += zk * weights.values()[k * image_dim + j];
            }
            pixels.push(crate::tensor::sigmoid_scalar(s));
        }
        latents.push(z);
    }
    Ok(SynthManifold {
        dataset: ImageDataset {
            h: image_dim,
            w: 1,
            pixels,
            labels,
            split: Split::Train,
        },
        latents,
        weights,
        bias,
    })
}

// ── derived attributes ──────────────────────────────────────────────────

/// Per-image named attribute values. Binary columns hold only 0.0 / 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    n: usize,
    columns: BTreeMap<String, Vec<f64>>,
}

impl AttributeTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(|s| s.as_str())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(|v| v.as_slice())
    }

    pub fn is_binary(&self, name: &str) -> bool {
        self.columns
            .get(name)
            .map(|col| col.iter().all(|&v| v == 0.0 || v == 1.0))
            .unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.columns.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

pub const DEFAULT_INK_THRESHOLD: f64 = 0.5;

/// Median split by rank with index tie-break: the upper half of the sorted
/// order maps to 1. Integer-valued functionals tie heavily at the median, so
/// a plain value threshold can leave the classes far from balanced; the rank
/// split keeps the positive share within 1/(2n) of one half.
fn binarize_at_median(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("attribute values are finite")
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    for &i in &order[n / 2..] {
        out[i] = 1.0;
    }
    out
}

/// Computes deterministic image functionals — ink mass, bounding-box width
/// and height, vertical symmetry, slant — plus a `_hi` binarisation of each
/// at its dataset median.
pub fn derive_attributes(ds: &ImageDataset) -> AttributeTable {
    derive_attributes_with(ds, DEFAULT_INK_THRESHOLD)
}

pub fn derive_attributes_with(ds: &ImageDataset, ink_threshold: f64) -> AttributeTable {
    let n = ds.n();
    let (h, w) = (ds.h, ds.w);
    let mut ink_mass = Vec::with_capacity(n);
    let mut width = Vec::with_capacity(n);
    let mut height = Vec::with_capacity(n);
    let mut symmetry = Vec::with_capacity(n);
    let mut slant = Vec::with_capacity(n);

    for i in 0..n {
        let img = ds.image_pixels(i);
        ink_mass.push(img.iter().sum::<f64>() / img.len() as f64);

        let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0usize, usize::MAX, 0usize);
        let mut any = false;
        for r in 0..h {
            for c in 0..w {
                if img[r * w + c] > ink_threshold {
                    any = true;
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                }
            }
        }
        if any {
            width.push((cmax - cmin + 1) as f64);
            height.push((rmax - rmin + 1) as f64);
        } else {
            width.push(0.0);
            height.push(0.0);
        }

        let mut mirror_dev = 0.0;
        for r in 0..h {
            for c in 0..w {
                mirror_dev += (img[r * w + c] - img[r * w + (w - 1 - c)]).abs();
            }
        }
        symmetry.push(1.0 - mirror_dev / img.len() as f64);

        // intensity-weighted correlation between row and column indices
        let total: f64 = img.iter().sum();
        if total == 0.0 {
            slant.push(0.0);
        } else {
            let (mut mr, mut mc) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let v = img[r * w + c];
                    mr += v * r as f64;
                    mc += v * c as f64;
                }
            }
            mr /= total;
            mc /= total;
            let (mut cov, mut vr, mut vc) = (0.0, 0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let v = img[r * w + c];
                    let dr = r as f64 - mr;
                    let dc = c as f64 - mc;
                    cov += v * dr * dc;
                    vr += v * dr * dr;
                    vc += v * dc * dc;
                }
            }
            if vr == 0.0 || vc == 0.0 {
                slant.push(0.0);
            } else {
                slant.push(cov / (vr.sqrt() * vc.sqrt()));
            }
        }
    }

    let mut columns = BTreeMap::new();
    for (name, values) in [
        ("ink_mass", ink_mass),
        ("width", width),
        ("height", height),
        ("vertical_symmetry", symmetry),
        ("slant", slant),
    ] {
        if !values.is_empty() {
            columns.insert(format!("{name}_hi"), binarize_at_median(&values));
        }
        columns.insert(name.to_string(), values);
    }
    AttributeTable { n, columns }
}
