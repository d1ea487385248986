//! On-disk datasets: `images/NNNN.png`, `masks/NNNN.png` and a
//! `manifest.txt` listing the pairs.
//!
//! Manifest: `key=value` header lines, then one `image mask` pair per
//! line, both relative to the dataset root. `#` lines are comments.
//! Header keys: `format` (`hu16` or `gray8`), `width`, `height`, `count`.
//!
//! `hu16` images are 16-bit PNGs holding `HU + 1024`; `gray8` images are
//! 8-bit PNGs holding `round(255 v)`. Masks are 8-bit, 0 or 255.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Component, Path};
use std::str::FromStr;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::config::{parse_pairs, reject_unknown, take_parsed};
use crate::error::{Error, Result};
use crate::formats::{read_file, write_atomic};
use crate::metrics::SegmentationMask;
use crate::preprocessing::{GrayImage, Phantom, WindowParams, ct_window};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const HU_OFFSET: f64 = 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelFormat {
    Hu16,
    Gray8,
}

impl PixelFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            PixelFormat::Hu16 => "hu16",
            PixelFormat::Gray8 => "gray8",
        }
    }
}

impl fmt::Display for PixelFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PixelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hu16" => Ok(PixelFormat::Hu16),
            "gray8" => Ok(PixelFormat::Gray8),
            other => Err(Error::config("format", format!("unknown pixel format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub format: PixelFormat,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<ManifestEntry>,
}

fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::format(MANIFEST, format!("path `{path}` must be relative and stay inside the dataset")))
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = String::new();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.contains('=') {
                if !entries.is_empty() {
                    return Err(Error::format(
                        MANIFEST,
                        format!("line {}: header line after the file list", lineno + 1),
                    ));
                }
                header.push_str(line);
                header.push('\n');
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(image), Some(mask), None) => {
                    check_relative(image)?;
                    check_relative(mask)?;
                    entries.push(ManifestEntry {
                        image: image.to_string(),
                        mask: mask.to_string(),
                    });
                }
                _ => {
                    return Err(Error::format(
                        MANIFEST,
                        format!("line {}: expected `image mask`, got `{line}`", lineno + 1),
                    ));
                }
            }
        }
        let mut pairs: BTreeMap<String, String> = parse_pairs(&header)?;
        let format: PixelFormat = pairs
            .remove("format")
            .ok_or_else(|| Error::format(MANIFEST, "missing `format`"))?
            .parse()?;
        let mut width = 0usize;
        let mut height = 0usize;
        let mut count = usize::MAX;
        take_parsed(&mut pairs, "width", &mut width)?;
        take_parsed(&mut pairs, "height", &mut height)?;
        take_parsed(&mut pairs, "count", &mut count)?;
        reject_unknown(&pairs)?;
        if count != entries.len() {
            return Err(Error::format(
                MANIFEST,
                format!("count says {count} but {} pairs are listed", entries.len()),
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::format(MANIFEST, "width and height must be positive"));
        }
        Ok(Self {
            format,
            width,
            height,
            entries,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "format={}\nwidth={}\nheight={}\ncount={}\n",
            self.format,
            self.width,
            self.height,
            self.entries.len()
        );
        for e in &self.entries {
            out.push_str(&e.image);
            out.push(' ');
            out.push_str(&e.mask);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: SegmentationMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub format: PixelFormat,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<Sample>,
}

fn encode_png(img: image::DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encode to memory");
    out.into_inner()
}

pub fn encode_image(img: &GrayImage, format: PixelFormat) -> Vec<u8> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    match format {
        PixelFormat::Hu16 => {
            let data = img
                .pixels()
                .iter()
                .map(|&v| (v + HU_OFFSET).round().clamp(0.0, 65535.0) as u16)
                .collect();
            encode_png(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data).expect("dims").into())
        }
        PixelFormat::Gray8 => {
            let data = img
                .pixels()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            encode_png(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, data).expect("dims").into())
        }
    }
}

pub fn encode_mask(mask: &SegmentationMask) -> Vec<u8> {
    let data = mask.labels().iter().map(|&v| v * 255).collect();
    encode_png(
        ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, data)
            .expect("dims")
            .into(),
    )
}

/// RGB PNG of a normalised image with a prediction drawn over it:
/// true positives yellow, false positives red, misses green.
pub fn encode_overlay(img: &GrayImage, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<Vec<u8>> {
    let (w, h) = (img.width(), img.height());
    for (what, m) in [("prediction", pred), ("ground truth", gt)] {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::Invalid(format!(
                "overlay: {what} is {}x{} but the image is {w}x{h}",
                m.width(),
                m.height()
            )));
        }
    }
    let mut data = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            let g = (img.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
            let lit = g / 2 + 128;
            let rgb = match (pred.get(x, y), gt.get(x, y)) {
                (true, true) => [lit, lit, g / 2],
                (true, false) => [lit, g / 2, g / 2],
                (false, true) => [g / 2, lit, g / 2],
                (false, false) => [g, g, g],
            };
            data.extend_from_slice(&rgb);
        }
    }
    Ok(encode_png(
        ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, data)
            .expect("dims")
            .into(),
    ))
}

fn decode_png(bytes: &[u8], what: &str) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(what, e.to_string()))
}

/// Decodes a PNG written by [`encode_image`].
pub fn decode_image(bytes: &[u8], format: PixelFormat, what: &str) -> Result<GrayImage> {
    let dynamic = decode_png(bytes, what)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let pixels = match (format, dynamic) {
        (PixelFormat::Hu16, image::DynamicImage::ImageLuma16(buf)) => {
            buf.into_raw().into_iter().map(|v| v as f64 - HU_OFFSET).collect()
        }
        (PixelFormat::Gray8, image::DynamicImage::ImageLuma8(buf)) => {
            buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        (_, other) => {
            return Err(Error::format(
                what,
                format!("expected {format} grayscale PNG, got {:?}", other.color()),
            ));
        }
    };
    GrayImage::new(w, h, pixels)
}

/// Decodes an 8-bit mask PNG; any nonzero value is foreground.
pub fn decode_mask(bytes: &[u8], what: &str) -> Result<SegmentationMask> {
    match decode_png(bytes, what)? {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let labels = buf.into_raw().into_iter().map(|v| (v != 0) as u8).collect();
            SegmentationMask::new(w, h, labels)
        }
        other => Err(Error::format(
            what,
            format!("expected 8-bit grayscale mask, got {:?}", other.color()),
        )),
    }
}

impl Dataset {
    pub fn from_phantoms(phantoms: Vec<Phantom>, size: usize) -> Self {
        let samples = phantoms
            .into_iter()
            .enumerate()
            .map(|(i, p)| Sample {
                id: format!("{i:04}"),
                image: p.image,
                mask: p.mask,
            })
            .collect();
        Self {
            format: PixelFormat::Hu16,
            width: size,
            height: size,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = String::from_utf8(read_file(&manifest_path)?)
            .map_err(|_| Error::format(MANIFEST, "not UTF-8"))?;
        let manifest = Manifest::parse(&text)?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let image_path = dir.join(&entry.image);
            let mask_path = dir.join(&entry.mask);
            if !mask_path.is_file() {
                return Err(Error::Invalid(format!(
                    "{}: mask partner of {} is missing",
                    mask_path.display(),
                    entry.image
                )));
            }
            let image = decode_image(&read_file(&image_path)?, manifest.format, &entry.image)?;
            let mask = decode_mask(&read_file(&mask_path)?, &entry.mask)?;
            for (what, w, h) in [
                (&entry.image, image.width(), image.height()),
                (&entry.mask, mask.width(), mask.height()),
            ] {
                if (w, h) != (manifest.width, manifest.height) {
                    return Err(Error::format(
                        what.as_str(),
                        format!("is {w}x{h}, manifest says {}x{}", manifest.width, manifest.height),
                    ));
                }
            }
            let id = Path::new(&entry.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| entry.image.clone());
            samples.push(Sample { id, image, mask });
        }
        Ok(Self {
            format: manifest.format,
            width: manifest.width,
            height: manifest.height,
            samples,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: self.format,
            width: self.width,
            height: self.height,
            entries: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    image: format!("images/{}.png", s.id),
                    mask: format!("masks/{}.png", s.id),
                })
                .collect(),
        }
    }

    /// Writes every file through a temp-and-rename; the manifest goes
    /// last so a dataset is never listed before its files exist.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (sample, entry) in self.samples.iter().zip(&manifest.entries) {
            write_atomic(&dir.join(&entry.image), &encode_image(&sample.image, self.format))?;
            write_atomic(&dir.join(&entry.mask), &encode_mask(&sample.mask))?;
        }
        write_atomic(&dir.join(MANIFEST), manifest.to_text().as_bytes())
    }

    /// Network-ready `[0, 1]` images: `hu16` data is windowed, `gray8`
    /// data is used as stored.
    pub fn normalized(&self, window: &WindowParams) -> Result<Vec<GrayImage>> {
        self.samples
            .iter()
            .map(|s| match self.format {
                PixelFormat::Hu16 => ct_window(&s.image, window),
                PixelFormat::Gray8 => Ok(s.image.clone()),
            })
            .collect()
    }

    /// The cases with [`Dataset::normalized`] images.
    pub fn normalized_samples(&self, window: &WindowParams) -> Result<Vec<Sample>> {
        Ok(self
            .normalized(window)?
            .into_iter()
            .zip(&self.samples)
            .map(|(image, s)| Sample {
                id: s.id.clone(),
                image,
                mask: s.mask.clone(),
            })
            .collect())
    }
}

/// Stacks images into an `[N, 1, H, W]` batch.
pub fn stack_images<T: Scalar>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&items)
}

pub fn stack_masks<T: Scalar>(masks: &[&SegmentationMask]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = masks.iter().map(|m| m.to_tensor()).collect();
    Tensor::stack(&items)
}
