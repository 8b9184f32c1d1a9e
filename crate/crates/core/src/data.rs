//! Images, the seeded synthetic-shapes corpus, augmentation, and PNG corpus I/O.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    parse_manifest, write_atomic, write_manifest, CorpusManifest, ImageRecord, Modality, Provenance,
};

/// Interleaved `height x width x channels` raster of floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} has an empty axis"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Non-overlapping `patch x patch` tiles in raster order, each flattened
    /// as `(row, col, channel)`.
    pub fn patchify(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::shape(format!(
                "image {}x{} is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..gh {
            for px in 0..gw {
                for y in py * patch..(py + 1) * patch {
                    let start = (y * self.width + px * patch) * self.channels;
                    out.extend_from_slice(&self.data[start..start + patch * self.channels]);
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(y, x)
                    .copy_from_slice(self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel-centre coordinates, clamped at the border.
    fn sample(&self, y: f64, x: f64, out: &mut [f32]) {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        for c in 0..self.channels {
            let a = self.pixel(y0, x0)[c] * (1.0 - fx) + self.pixel(y0, x1)[c] * fx;
            let b = self.pixel(y1, x0)[c] * (1.0 - fx) + self.pixel(y1, x1)[c] * fx;
            out[c] = a * (1.0 - fy) + b * fy;
        }
    }
}

/// An image with a per-pixel class map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub labels: Vec<u8>,
}

impl LabeledImage {
    /// Majority class of each patch, ties to the smaller class id.
    pub fn patch_labels(&self, patch: usize, classes: usize) -> Result<Vec<usize>> {
        let img = &self.image;
        if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
            return Err(Error::shape(format!(
                "labels not divisible into {patch}x{patch} patches"
            )));
        }
        let (gh, gw) = (img.height / patch, img.width / patch);
        let mut out = Vec::with_capacity(gh * gw);
        let mut counts = vec![0usize; classes];
        for py in 0..gh {
            for px in 0..gw {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        let l = self.labels[y * img.width + x] as usize;
                        if l >= classes {
                            return Err(Error::shape(format!(
                                "label {l} outside {classes} classes"
                            )));
                        }
                        counts[l] += 1;
                    }
                }
                let best = (0..classes).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Classes of the synthetic corpus: background, disk, square, triangle.
pub const SHAPE_CLASSES: usize = 4;
pub const SHAPE_CLASS_NAMES: [&str; SHAPE_CLASSES] = ["background", "disk", "square", "triangle"];

/// Deterministic corpus of random shapes on noisy backgrounds.
pub fn synth_shapes(count: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    (0..count)
        .map(|i| synth_shape_image(size, seed, i as u64))
        .collect()
}

fn synth_shape_image(size: usize, seed: u64, index: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let base: f32 = rng.random_range(0.1..0.5);
    let mut image = Image::filled(size, size, 3, 0.0);
    for v in image.data.iter_mut() {
        *v = (base + rng.random_range(-0.08..0.08f32)).clamp(0.0, 1.0);
    }
    let mut labels = vec![0u8; size * size];
    let shapes = rng.random_range(1..=3);
    let s = size as f64;
    for _ in 0..shapes {
        let class = rng.random_range(1..SHAPE_CLASSES) as u8;
        let radius = rng.random_range(0.12 * s..0.3 * s);
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let color: [f32; 3] = [
            rng.random_range(0.5..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match class {
                    1 => dy * dy + dx * dx <= radius * radius,
                    2 => dy.abs() <= radius && dx.abs() <= radius,
                    _ => dy <= radius && dy >= -radius && dx.abs() <= (dy + radius) / 2.0,
                };
                if inside {
                    labels[y * size + x] = class;
                    image.pixel_mut(y, x).copy_from_slice(&color);
                }
            }
        }
    }
    LabeledImage { image, labels }
}

/// Random resized crop followed by an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height), sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            flip: true,
        }
    }
}

impl Augment {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        let (rlo, rhi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::config(format!(
                "crop ratio range ({rlo}, {rhi}) is invalid"
            )));
        }
        Ok(())
    }

    /// Crops a random window and resamples it back to the original size.
    pub fn apply<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        let (h, w) = (img.height as f64, img.width as f64);
        let scale = rng.random_range(self.crop_scale.0..=self.crop_scale.1);
        let log_ratio = rng.random_range(self.crop_ratio.0.ln()..=self.crop_ratio.1.ln());
        let ratio = log_ratio.exp();
        let cw = ((scale * h * w * ratio).sqrt()).clamp(1.0, w);
        let ch = ((scale * h * w / ratio).sqrt()).clamp(1.0, h);
        let top = rng.random_range(0.0..=h - ch);
        let left = rng.random_range(0.0..=w - cw);
        let flip = self.flip && rng.random_bool(0.5);
        let mut out = Image::filled(img.height, img.width, img.channels, 0.0);
        let mut px = vec![0.0f32; img.channels];
        for y in 0..img.height {
            let sy = top + (y as f64 + 0.5) * ch / h - 0.5;
            for x in 0..img.width {
                let xx = if flip { img.width - 1 - x } else { x };
                let sx = left + (xx as f64 + 0.5) * cw / w - 0.5;
                img.sample(sy, sx, &mut px);
                out.pixel_mut(y, x).copy_from_slice(&px);
            }
        }
        out
    }
}

fn to_rgb8(img: &Image) -> Result<image::RgbImage> {
    if img.channels != 3 {
        return Err(Error::shape(format!(
            "PNG export needs 3 channels, got {}",
            img.channels
        )));
    }
    let bytes = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::shape("raster size mismatch".to_string()))
}

pub(crate) fn png_bytes<P, C>(buf: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads an 8-bit image as RGB floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 255.0)
        .collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// Writes a labeled corpus as PNG pairs plus a manifest, returning the manifest.
pub fn save_corpus(dir: &Path, items: &[LabeledImage], source: &str) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let name = format!("{source}_{i:05}.png");
        let label_name = format!("{source}_{i:05}_label.png");
        write_atomic(&dir.join(&name), &png_bytes(&to_rgb8(&item.image)?)?)?;
        let gray = image::GrayImage::from_raw(
            item.image.width as u32,
            item.image.height as u32,
            item.labels.clone(),
        )
        .ok_or_else(|| Error::shape("label raster size mismatch".to_string()))?;
        write_atomic(&dir.join(&label_name), &png_bytes(&gray)?)?;
        let mut record = ImageRecord::new(name, source, Modality::Rgb);
        record.label_path = Some(label_name);
        records.push(record);
    }
    let mut manifest = CorpusManifest::new(records)?;
    manifest.provenance.push(Provenance::new(
        "synthesize",
        format!("{} labeled images from {source}", items.len()),
    ));
    write_atomic(
        &dir.join("manifest.jsonl"),
        write_manifest(&manifest).as_bytes(),
    )?;
    Ok(manifest)
}

/// Loads every manifest record that carries a label raster. Paths are relative to `base`.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<LabeledImage>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest = parse_manifest(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.len());
    for record in &manifest.records {
        let Some(label_path) = &record.label_path else {
            return Err(Error::codec(format!(
                "record {} has no label_path",
                record.path
            )));
        };
        let image = load_image(&base.join(&record.path))?;
        let labels = image::open(base.join(label_path))?.to_luma8();
        if labels.dimensions() != (image.width as u32, image.height as u32) {
            return Err(Error::shape(format!(
                "label raster of {} does not match its image",
                record.path
            )));
        }
        out.push(LabeledImage {
            image,
            labels: labels.into_raw(),
        });
    }
    Ok(out)
}
