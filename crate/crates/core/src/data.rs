//! Image pairs on disk, tiling, augmentation and a synthetic generator.
//!
//! A dataset root holds `{split}/A`, `{split}/B` and `{split}/label`, each
//! with identically named PNG files. Labels are single-channel; values above
//! 127 mark change.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{INPUT_MEAN, INPUT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Binary mask, one byte per pixel in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn changed_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Two co-registered acquisitions and their change label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub t1: RgbImage,
    pub t2: RgbImage,
    pub label: Mask,
}

impl SamplePair {
    pub fn size(&self) -> (usize, usize) {
        (self.label.height, self.label.width)
    }
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads an 8-bit PNG as RGB; grey and alpha variants are converted.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(image_err(path, format!("unsupported colour type {other:?}"))),
    };
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Reads a single-channel PNG label and binarises it at 127.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (info, buf) = decode_png(path)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(image_err(path, format!("label must be single-channel, found {:?}", info.color_type)));
    }
    Ok(Mask {
        width: info.width as usize,
        height: info.height as usize,
        data: buf.iter().map(|&v| u8::from(v > 127)).collect(),
    })
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    encode_png(path, img.width, img.height, png::ColorType::Rgb, &img.data)
}

/// Writes a mask as 0/255 greyscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    encode_png(path, mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every pair of `root/split`, sorted by file name.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    let base = root.join(split);
    let dirs = ["A", "B", "label"].map(|d| base.join(d));
    let lists = dirs.iter().map(|d| png_names(d)).collect::<Result<Vec<_>>>()?;
    for (i, list) in lists.iter().enumerate() {
        for (j, other) in lists.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(name) = list.iter().find(|n| other.binary_search(n).is_err()) {
                return Err(Error::Data(format!(
                    "{} has no counterpart in {}",
                    dirs[i].join(name).display(),
                    dirs[j].display()
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(lists[0].len());
    for name in &lists[0] {
        let t1 = read_rgb(&dirs[0].join(name))?;
        let t2 = read_rgb(&dirs[1].join(name))?;
        let label = read_mask(&dirs[2].join(name))?;
        let dims = [(t1.width, t1.height), (t2.width, t2.height), (label.width, label.height)];
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(Error::Data(format!("{name}: size mismatch between A, B and label: {dims:?}")));
        }
        let id = name.rsplit_once('.').map_or(name.as_str(), |(stem, _)| stem).to_string();
        out.push(SamplePair { id, t1, t2, label });
    }
    Ok(out)
}

/// Writes pairs under `root/split/{A,B,label}/{id}.png`.
pub fn save_dataset(root: &Path, split: &str, pairs: &[SamplePair]) -> Result<()> {
    let base = root.join(split);
    for p in pairs {
        let file = format!("{}.png", p.id);
        write_rgb(&base.join("A").join(&file), &p.t1)?;
        write_rgb(&base.join("B").join(&file), &p.t2)?;
        write_mask(&base.join("label").join(&file), &p.label)?;
    }
    Ok(())
}

fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        let src = ((y0 + y) * img.width + x0) * 3;
        out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&img.data[src..src + w * 3]);
    }
    out
}

fn crop_mask(m: &Mask, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
    let mut out = Mask::new(w, h);
    for y in 0..h {
        let src = (y0 + y) * m.width + x0;
        out.data[y * w..(y + 1) * w].copy_from_slice(&m.data[src..src + w]);
    }
    out
}

fn crop_pair(p: &SamplePair, x0: usize, y0: usize, size: usize, id: String) -> SamplePair {
    SamplePair {
        id,
        t1: crop_rgb(&p.t1, x0, y0, size, size),
        t2: crop_rgb(&p.t2, x0, y0, size, size),
        label: crop_mask(&p.label, x0, y0, size, size),
    }
}

/// Result of cutting one pair into tiles.
#[derive(Debug, Clone)]
pub struct Tiling {
    pub tiles: Vec<SamplePair>,
    /// Pixels per axis `(rows, cols)` past the last full tile.
    pub remainder: (usize, usize),
}

fn tile_starts(len: usize, size: usize, stride: usize) -> (Vec<usize>, usize) {
    if len < size {
        return (Vec::new(), len);
    }
    let starts: Vec<usize> = (0..=len - size).step_by(stride).collect();
    let covered = starts.last().map_or(0, |&s| s + size);
    (starts, len - covered)
}

/// Cuts `size × size` tiles with the given overlap, row-major. Pixels past
/// the last full tile are dropped with a warning.
pub fn tile(pair: &SamplePair, size: usize, overlap: usize) -> Result<Tiling> {
    if size == 0 || overlap >= size {
        return Err(Error::Config(format!("tile size {size} with overlap {overlap}")));
    }
    let stride = size - overlap;
    let (h, w) = pair.size();
    let (ys, rem_y) = tile_starts(h, size, stride);
    let (xs, rem_x) = tile_starts(w, size, stride);
    let mut tiles = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push(crop_pair(pair, x, y, size, format!("{}_{y}_{x}", pair.id)));
        }
    }
    if rem_y > 0 || rem_x > 0 {
        log::warn!("{}: dropping {rem_y} rows and {rem_x} columns past the last tile", pair.id);
    }
    Ok(Tiling {
        tiles,
        remainder: (rem_y, rem_x),
    })
}

/// Per-sample augmentation applied identically to both images and the
/// label, except for the photometric noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of rotating a sample.
    pub rotate_p: f64,
    /// Angles in degrees; multiples of 90 are exact, others need
    /// `arbitrary_rotation`.
    pub angles: Vec<f64>,
    pub arbitrary_rotation: bool,
    /// Noise standard deviation range on the [0, 1] intensity scale;
    /// `None` disables Gaussian noise.
    pub gaussian_sigma: Option<(f64, f64)>,
    /// Per-pixel corruption probability; 0 disables.
    pub salt_pepper_p: f64,
    /// Random square crop side.
    pub crop: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_p: 0.5,
            angles: vec![90.0, 180.0, 270.0],
            arbitrary_rotation: false,
            gaussian_sigma: Some((0.02, 0.02)),
            salt_pepper_p: 0.0,
            crop: None,
        }
    }
}

impl AugmentConfig {
    /// No transformation at all.
    pub fn none() -> Self {
        AugmentConfig {
            rotate_p: 0.0,
            angles: Vec::new(),
            arbitrary_rotation: false,
            gaussian_sigma: None,
            salt_pepper_p: 0.0,
            crop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rotate_p) || !(0.0..=1.0).contains(&self.salt_pepper_p) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if let Some((lo, hi)) = self.gaussian_sigma {
            if !(0.0 <= lo && lo <= hi) {
                return Err(Error::Config(format!("gaussian sigma range ({lo}, {hi})")));
            }
        }
        if !self.arbitrary_rotation {
            if let Some(a) = self.angles.iter().find(|&&a| a.rem_euclid(90.0) != 0.0) {
                return Err(Error::Config(format!("rotation by {a} degrees needs arbitrary_rotation")));
            }
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

fn rotate_quarter<P: Copy>(src: &[P], w: usize, h: usize, ch: usize, turns: usize) -> (Vec<P>, usize, usize) {
    let turns = turns % 4;
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let mut out = src.to_vec();
    for y in 0..oh {
        for x in 0..ow {
            // counter-clockwise rotation by `turns` quarter turns
            let (sx, sy) = match turns {
                0 => (x, y),
                1 => (w - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, h - 1 - x),
            };
            let (d, s) = ((y * ow + x) * ch, (sy * w + sx) * ch);
            out[d..d + ch].copy_from_slice(&src[s..s + ch]);
        }
    }
    (out, ow, oh)
}

/// Rotation about the image centre; images are sampled bilinearly, the
/// label by nearest neighbour, and uncovered pixels become 0.
fn rotate_any(p: &SamplePair, degrees: f64) -> SamplePair {
    let (h, w) = p.size();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut t1 = RgbImage::new(w, h);
    let mut t2 = RgbImage::new(w, h);
    let mut label = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                label.data[y * w + x] = p.label.data[ny as usize * w + nx as usize];
            }
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for (src, dst) in [(&p.t1, &mut t1), (&p.t2, &mut t2)] {
                let q = |xx: usize, yy: usize| src.pixel(xx, yy);
                let (a, b, c, d) = (q(x0, y0), q(x1, y0), q(x0, y1), q(x1, y1));
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                    let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
                    px[k] = (top * (1.0 - fy) + bot * fy).round() as u8;
                }
                dst.set(x, y, px);
            }
        }
    }
    SamplePair {
        id: p.id.clone(),
        t1,
        t2,
        label,
    }
}

/// Rotates a pair counter-clockwise by `degrees`.
pub fn rotate(p: &SamplePair, degrees: f64) -> SamplePair {
    if degrees.rem_euclid(90.0) != 0.0 {
        return rotate_any(p, degrees);
    }
    let turns = (degrees.rem_euclid(360.0) / 90.0) as usize;
    let (h, w) = p.size();
    let (d1, ow, oh) = rotate_quarter(&p.t1.data, w, h, 3, turns);
    let (d2, ..) = rotate_quarter(&p.t2.data, w, h, 3, turns);
    let (dl, ..) = rotate_quarter(&p.label.data, w, h, 1, turns);
    SamplePair {
        id: p.id.clone(),
        t1: RgbImage {
            width: ow,
            height: oh,
            data: d1,
        },
        t2: RgbImage {
            width: ow,
            height: oh,
            data: d2,
        },
        label: Mask {
            width: ow,
            height: oh,
            data: dl,
        },
    }
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma` on the
/// [0, 1] scale, clamping to the valid range.
pub fn gaussian_noise<R: Rng + ?Sized>(img: &mut RgbImage, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma * 255.0).expect("positive sigma");
    for v in &mut img.data {
        *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
}

/// Sets each pixel, with probability `p`, to black or white with equal odds.
/// Returns the number of pixels hit.
pub fn salt_pepper<R: Rng + ?Sized>(img: &mut RgbImage, p: f64, rng: &mut R) -> usize {
    let mut hit = 0;
    for px in img.data.chunks_exact_mut(3) {
        if rng.random::<f64>() < p {
            px.fill(if rng.random::<bool>() { 255 } else { 0 });
            hit += 1;
        }
    }
    hit
}

/// One random draw of the configured augmentation.
pub fn augment<R: Rng + ?Sized>(pair: &SamplePair, cfg: &AugmentConfig, rng: &mut R) -> Result<SamplePair> {
    let mut p = match cfg.crop {
        Some(c) => {
            let (h, w) = pair.size();
            if c > h || c > w {
                return Err(Error::Config(format!("crop {c} larger than {h}x{w} sample")));
            }
            let x0 = rng.random_range(0..=w - c);
            let y0 = rng.random_range(0..=h - c);
            crop_pair(pair, x0, y0, c, pair.id.clone())
        }
        None => pair.clone(),
    };
    if !cfg.angles.is_empty() && rng.random::<f64>() < cfg.rotate_p {
        let angle = *cfg.angles.choose(rng).expect("non-empty");
        if angle.rem_euclid(90.0) != 0.0 && !cfg.arbitrary_rotation {
            return Err(Error::Config(format!("rotation by {angle} degrees needs arbitrary_rotation")));
        }
        p = rotate(&p, angle);
    }
    if let Some((lo, hi)) = cfg.gaussian_sigma {
        for img in [&mut p.t1, &mut p.t2] {
            let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            gaussian_noise(img, sigma, rng);
        }
    }
    if cfg.salt_pepper_p > 0.0 {
        salt_pepper(&mut p.t1, cfg.salt_pepper_p, rng);
        salt_pepper(&mut p.t2, cfg.salt_pepper_p, rng);
    }
    Ok(p)
}

/// Stacks images into a normalised `N×3×H×W` tensor.
pub fn images_to_tensor<T: Element>(imgs: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = imgs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut data = vec![T::zero(); imgs.len() * 3 * plane];
    for (n, img) in imgs.iter().enumerate() {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Data(format!("batch mixes {w}x{h} with {}x{}", img.width, img.height)));
        }
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                let v = (px[c] as f64 / 255.0 - INPUT_MEAN) / INPUT_STD;
                data[(n * 3 + c) * plane + i] = T::from_f64(v);
            }
        }
    }
    Tensor::from_vec(Shape::new(imgs.len(), 3, h, w), data)
}

/// Stacks masks into an `N×1×H×W` tensor of 0/1 values.
pub fn masks_to_tensor<T: Element>(masks: &[&Mask]) -> Result<Tensor<T>> {
    let first = masks.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if (m.width, m.height) != (w, h) {
            return Err(Error::Data(format!("batch mixes {w}x{h} with {}x{}", m.width, m.height)));
        }
        data.extend(m.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(Shape::new(masks.len(), 1, h, w), data)
}

/// A batch ready for the network.
pub struct Batch<T> {
    pub t1: Tensor<T>,
    pub t2: Tensor<T>,
    pub label: Tensor<T>,
}

pub fn make_batch<T: Element>(pairs: &[&SamplePair]) -> Result<Batch<T>> {
    let t1: Vec<&RgbImage> = pairs.iter().map(|p| &p.t1).collect();
    let t2: Vec<&RgbImage> = pairs.iter().map(|p| &p.t2).collect();
    let label: Vec<&Mask> = pairs.iter().map(|p| &p.label).collect();
    Ok(Batch {
        t1: images_to_tensor(&t1)?,
        t2: images_to_tensor(&t2)?,
        label: masks_to_tensor(&label)?,
    })
}

/// Parameters of the synthetic change scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub size: usize,
    /// Target changed-pixel fraction per pair.
    pub density: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 64,
            density: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape2 {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Structure {
    shape: Shape2,
    color: [u8; 3],
}

impl Structure {
    fn random<R: Rng + ?Sized>(size: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let s = size as f64;
        let (w, h) = (rng.random_range(lo..hi) * s, rng.random_range(lo..hi) * s);
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let shape = if rng.random::<bool>() {
            Shape2::Rect {
                x0: cx - w / 2.0,
                y0: cy - h / 2.0,
                x1: cx + w / 2.0,
                y1: cy + h / 2.0,
            }
        } else {
            Shape2::Ellipse {
                cx,
                cy,
                rx: w / 2.0,
                ry: h / 2.0,
            }
        };
        let color = [0; 3].map(|_: u8| rng.random_range(0..=255u8));
        Structure { shape, color }
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self.shape {
            Shape2::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape2::Ellipse { cx, cy, rx, ry } => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
        }
    }

    fn coverage(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|i| self.covers(i % size, i / size)).collect()
    }
}

fn background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let base = [0; 3].map(|_: u8| rng.random_range(60.0..190.0));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fx = rng.random_range(0.5..3.0) / size as f64 * std::f64::consts::TAU;
            let fy = rng.random_range(0.5..3.0) / size as f64 * std::f64::consts::TAU;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fx, fy, phase, [0; 3].map(|_: u8| rng.random_range(-25.0..25.0)))
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let mut px = base;
            for (fx, fy, phase, amp) in &waves {
                let s = (fx * x + fy * y + phase).sin();
                for c in 0..3 {
                    px[c] += amp[c] * s;
                }
            }
            px
        })
        .collect()
}

fn render<R: Rng + ?Sized>(
    size: usize,
    bg: &[[f64; 3]],
    layers: &[(&Structure, &[bool])],
    rng: &mut R,
) -> RgbImage {
    let gain = rng.random_range(0.92..1.08);
    let offset = rng.random_range(-8.0..8.0);
    let noise = Normal::new(0.0, 3.0).expect("positive sigma");
    let mut img = RgbImage::new(size, size);
    for (i, px) in img.data.chunks_exact_mut(3).enumerate() {
        let top = layers.iter().rev().find(|(_, cov)| cov[i]).map(|(s, _)| s.color);
        for c in 0..3 {
            let v = top.map_or(bg[i][c], |col| col[c] as f64);
            px[c] = (v * gain + offset + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// One synthetic pair. The scene has persistent structures drawn on top of
/// structures that appear in only one of the two dates; the label is the
/// pixelwise XOR of the two dates' structure coverage.
pub fn synthetic_pair(cfg: &SyntheticConfig, index: u64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.size;
    let bg = background(n, &mut rng);

    let persistent: Vec<Structure> = (0..rng.random_range(1..=3))
        .map(|_| Structure::random(n, 0.08, 0.25, &mut rng))
        .collect();
    let persistent_cov: Vec<Vec<bool>> = persistent.iter().map(|s| s.coverage(n)).collect();
    let hidden = |i: usize| persistent_cov.iter().any(|c| c[i]);

    // changed structures never overlap each other, so coverage XOR equals
    // the visible difference
    let mut label = vec![false; n * n];
    let mut changed: Vec<(Structure, Vec<bool>, bool)> = Vec::new();
    let target = cfg.density * (n * n) as f64;
    let mut count = 0usize;
    for _ in 0..200 {
        if count as f64 >= target {
            break;
        }
        let s = Structure::random(n, 0.12, 0.4, &mut rng);
        let cov = s.coverage(n);
        if changed.iter().any(|(_, c, _)| c.iter().zip(&cov).any(|(&a, &b)| a && b)) {
            continue;
        }
        let gain = (0..n * n).filter(|&i| cov[i] && !hidden(i)).count();
        if gain == 0 {
            continue;
        }
        // keep the shape only if it moves the total closer to the target
        if (count as f64 + gain as f64 - target).abs() > (count as f64 - target).abs() && count > 0 {
            continue;
        }
        for i in 0..n * n {
            label[i] |= cov[i] && !hidden(i);
        }
        count += gain;
        changed.push((s, cov, rng.random::<bool>()));
    }

    let layers = |in_t2: bool| -> Vec<(&Structure, &[bool])> {
        changed
            .iter()
            .filter(|(_, _, added)| *added == in_t2)
            .map(|(s, c, _)| (s, c.as_slice()))
            .chain(persistent.iter().zip(&persistent_cov).map(|(s, c)| (s, c.as_slice())))
            .collect()
    };
    let t1 = render(n, &bg, &layers(false), &mut rng);
    let t2 = render(n, &bg, &layers(true), &mut rng);
    SamplePair {
        id: format!("{index:05}"),
        t1,
        t2,
        label: Mask {
            width: n,
            height: n,
            data: label.into_iter().map(u8::from).collect(),
        },
    }
}

/// Split names and sizes for a generated dataset.
pub fn split_sizes(total: usize, test_fraction: f64, val_fraction: f64) -> Result<Vec<(&'static str, usize)>> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) || test_fraction + val_fraction >= 1.0 {
        return Err(Error::Config(format!("split fractions test={test_fraction} val={val_fraction}")));
    }
    let test = (total as f64 * test_fraction).round() as usize;
    let val = (total as f64 * val_fraction).round() as usize;
    let mut out = vec![("train", total - test - val), ("test", test)];
    if val > 0 {
        out.push(("val", val));
    }
    Ok(out)
}

/// Generates `total` pairs and writes them under `root`, split in index
/// order into train, test and (optionally) val.
pub fn generate_synthetic(
    root: &Path,
    cfg: &SyntheticConfig,
    total: usize,
    test_fraction: f64,
    val_fraction: f64,
) -> Result<Vec<(String, usize)>> {
    if cfg.size < 32 || cfg.size % 32 != 0 {
        return Err(Error::Config(format!("synthetic size {} must be a positive multiple of 32", cfg.size)));
    }
    if !(cfg.density > 0.0 && cfg.density <= 0.5) {
        return Err(Error::Config(format!("density {} outside (0, 0.5]", cfg.density)));
    }
    let mut index = 0u64;
    let mut summary = Vec::new();
    for (split, n) in split_sizes(total, test_fraction, val_fraction)? {
        let pairs: Vec<SamplePair> = (0..n)
            .map(|_| {
                index += 1;
                synthetic_pair(cfg, index - 1)
            })
            .collect();
        save_dataset(root, split, &pairs)?;
        summary.push((split.to_string(), n));
    }
    Ok(summary)
}
