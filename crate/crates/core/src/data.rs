//! Datasets, the seeded synthetic shapes/colors corpus, and PNG image I/O.
//!
//! Images are `(C, H, W)` arrays with values in `[-1, 1]`. Persisted images
//! are 8-bit; [`quantize`] maps a float image onto exactly the values a PNG
//! round trip produces, so metrics computed before and after persistence agree.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|x| {
            let (c, h, w) = x.dim();
            [c, h, w]
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Seeded shuffle, then the first `floor(fraction * n)` samples go left.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((fraction.clamp(0.0, 1.0) * self.len() as f64).floor() as usize).min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    pub fn batch(&self, indices: &[usize]) -> Array4<f64> {
        stack(indices.iter().map(|&i| &self.images[i]))
    }
}

/// Stack `(C, H, W)` images into an `(N, C, H, W)` batch.
pub fn stack<'a>(images: impl IntoIterator<Item = &'a Array3<f64>>) -> Array4<f64> {
    let views: Vec<_> = images.into_iter().map(|x| x.view()).collect();
    if views.is_empty() {
        return Array4::zeros((0, 0, 0, 0));
    }
    ndarray::stack(Axis(0), &views).expect("images share a shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            size: 12,
            classes: 4,
            seed: 0,
        }
    }
}

pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.95, 0.15, 0.12]),
    ("green", [0.15, 0.85, 0.2]),
    ("blue", [0.2, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("magenta", [0.9, 0.2, 0.85]),
    ("cyan", [0.15, 0.85, 0.9]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Square,
    Disk,
    Cross,
}

/// Flat gray background with one colored shape; the class is the shape's
/// color, while shape, size and position are nuisance factors.
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.classes > PALETTE.len() {
        return Err(Error::Config(format!("synthetic classes must be in 2..={}", PALETTE.len())));
    }
    if cfg.size < 6 {
        return Err(Error::Config("synthetic image size must be at least 6".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = Dataset {
        class_names: PALETTE[..cfg.classes].iter().map(|(n, _)| n.to_string()).collect(),
        ..Default::default()
    };
    for i in 0..cfg.samples {
        let label = rng.gen_range(0..cfg.classes);
        let shape = [Shape::Square, Shape::Disk, Shape::Cross][rng.gen_range(0..3)];
        ds.images.push(render(cfg.size, label, shape, &mut rng));
        ds.labels.push(label);
        ds.ids.push(format!("syn-{i:06}"));
    }
    Ok(ds)
}

fn render(size: usize, label: usize, shape: Shape, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let bg = rng.gen_range(0.15..0.35);
    let base = PALETTE[label].1;
    let color: Vec<f64> = base
        .iter()
        .map(|&c| (c + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0))
        .collect();
    let r = rng.gen_range(2..=3) as f64 + 0.5;
    let lo = r.ceil() as usize - 1;
    let cy = rng.gen_range(lo..size - lo) as f64;
    let cx = rng.gen_range(lo..size - lo) as f64;
    let mut img = Array3::from_elem((3, size, size), bg);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let inside = match shape {
                Shape::Square => dy.abs() < r - 0.5 && dx.abs() < r - 0.5,
                Shape::Disk => dy * dy + dx * dx <= r * r,
                Shape::Cross => (dy.abs() < 1.0 && dx.abs() < r) || (dx.abs() < 1.0 && dy.abs() < r),
            };
            if inside {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
    }
    quantize(&img.mapv(|v| v * 2.0 - 1.0))
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn from_u8(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

/// Snap to the 8-bit grid used by persisted images.
pub fn quantize(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| from_u8(to_u8(v)))
}

/// Encode an RGB (or single-channel) image in `[-1, 1]` as PNG.
pub fn encode_png(x: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = x.dim();
    if c != 3 && c != 1 {
        return Err(Error::InvalidArgument(format!("cannot encode {c}-channel image")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (px, py, p) in buf.enumerate_pixels_mut() {
        let (y, xx) = (py as usize, px as usize);
        let ch = |k: usize| to_u8(x[[k.min(c - 1), y, xx]]);
        *p = image::Rgb([ch(0), ch(1), ch(2)]);
    }
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Largest accepted PNG width or height.
pub const MAX_PNG_SIDE: u32 = 4096;

/// Decode a PNG into an RGB `(3, H, W)` image in `[-1, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Array3<f64>> {
    let mut reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), image::ImageFormat::Png);
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_PNG_SIDE);
    limits.max_image_height = Some(MAX_PNG_SIDE);
    reader.limits(limits);
    let img = reader.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut x = Array3::zeros((3, h as usize, w as usize));
    for (px, py, p) in img.enumerate_pixels() {
        for k in 0..3 {
            x[[k, py as usize, px as usize]] = from_u8(p.0[k]);
        }
    }
    Ok(x)
}

pub fn save_png(path: &Path, x: &Array3<f64>) -> Result<()> {
    crate::archive::write_atomic(path, &encode_png(x)?)
}

pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    decode_png(&fs::read(path)?)
}

/// Save a `[0, 1]` map as a grayscale PNG.
pub fn save_map_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let img = Array3::from_shape_fn((1, h, w), |(_, y, x)| map[[y, x]].clamp(0.0, 1.0) * 2.0 - 1.0);
    save_png(path, &img)
}

/// Load `root/<class>/*.png`; classes are the sorted subdirectory names.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let mut classes: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut ds = Dataset {
        class_names: classes.clone(),
        ..Default::default()
    };
    let mut shape: Option<Vec<usize>> = None;
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = load_png(&f)?;
            match &shape {
                Some(s) => check_shape(s, img.shape())?,
                None => shape = Some(img.shape().to_vec()),
            }
            ds.ids.push(format!("{class}/{}", f.file_stem().unwrap_or_default().to_string_lossy()));
            ds.images.push(img);
            ds.labels.push(label);
        }
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}
