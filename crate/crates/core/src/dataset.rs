//! Image examples, dataset containers and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus one PNG per image under
//! `images/` and one per mask under `masks/`. The manifest records the
//! generating spec, the split listings and a SHA-256 per file; its
//! `checksum` is the SHA-256 of all per-file digests in listing order.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Axis-aligned pixel rectangle, `x`/`width` along columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn right(&self) -> usize {
        self.x + self.width
    }

    pub fn bottom(&self) -> usize {
        self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x && col < self.right() && row >= self.y && row < self.bottom()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }
}

/// One image with its label and optional ground-truth relevance mask
/// (`1` = relevant pixel, row-major `height * width`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExample {
    pub id: String,
    /// `[height, width, channels]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub mask: Option<Vec<u8>>,
    /// Where the injected confounder sits, if any. Ground truth only.
    pub confounder: Option<Rect>,
}

impl ImageExample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let o = (row * self.width() + col) * c;
        &self.pixels.data()[o..o + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<ImageExample>,
    pub test: Vec<ImageExample>,
    /// Images shown to annotators. Without augmentation these are the
    /// training images themselves.
    pub visualization: Vec<ImageExample>,
}

impl Dataset {
    pub fn find(&self, id: &str) -> Option<&ImageExample> {
        self.train
            .iter()
            .chain(&self.test)
            .chain(&self.visualization)
            .find(|e| e.id == id)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn train_of_class(&self, class: usize) -> impl Iterator<Item = &ImageExample> {
        self.train.iter().filter(move |e| e.label == class)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct FileEntry {
    id: String,
    label: usize,
    image: String,
    image_sha256: String,
    mask: Option<String>,
    mask_sha256: Option<String>,
    confounder: Option<Rect>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Splits {
    train: Vec<FileEntry>,
    test: Vec<FileEntry>,
    visualization: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    version: u32,
    spec: DatasetSpec,
    splits: Splits,
    checksum: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lossless PNG encoding of an example's pixels (8-bit; generated pixels
/// are multiples of 1/255 so the round trip is exact).
pub fn encode_pixels_png(ex: &ImageExample) -> Result<Vec<u8>> {
    let (h, w, c) = (ex.height() as u32, ex.width() as u32, ex.channels());
    let raw: Vec<u8> = ex.pixels.data().iter().map(|&v| to_u8(v)).collect();
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Format(format!("unsupported channel count {c}"))),
    };
    image::ImageEncoder::write_image(enc, &raw, w, h, color)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        enc,
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

fn encode_mask_png(mask: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
    let img: GrayImage = ImageBuffer::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Format("mask size mismatch".into()))?;
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        enc,
        img.as_raw(),
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

fn decode_pixels(bytes: &[u8], channels: usize, file: &str) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{file}: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => {
            return Err(Error::Format(format!(
                "{file}: unsupported channel count {c}"
            )))
        }
    };
    Tensor::new(
        vec![h, w, channels],
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

fn decode_mask(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{file}: {e}")))?;
    Ok(img
        .to_luma8()
        .into_raw()
        .into_iter()
        .map(|b| u8::from(b > 127))
        .collect())
}

fn write_split(
    dir: &Path,
    split: &[ImageExample],
    files: &mut Vec<String>,
) -> Result<Vec<FileEntry>> {
    let mut entries = Vec::with_capacity(split.len());
    for ex in split {
        let image = format!("images/{}.png", ex.id);
        let bytes = encode_pixels_png(ex)?;
        let image_sha256 = sha256_hex(&bytes);
        fs::write(dir.join(&image), &bytes)?;
        files.push(image_sha256.clone());
        let (mask, mask_sha256) = match &ex.mask {
            Some(m) => {
                let name = format!("masks/{}.png", ex.id);
                let bytes = encode_mask_png(m, ex.width(), ex.height())?;
                let digest = sha256_hex(&bytes);
                fs::write(dir.join(&name), &bytes)?;
                files.push(digest.clone());
                (Some(name), Some(digest))
            }
            None => (None, None),
        };
        entries.push(FileEntry {
            id: ex.id.clone(),
            label: ex.label,
            image,
            image_sha256,
            mask,
            mask_sha256,
            confounder: ex.confounder,
        });
    }
    Ok(entries)
}

/// SHA-256 over the concatenated per-file digests.
pub fn combined_checksum<'a>(digests: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for d in digests {
        h.update(d.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn save(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut digests = Vec::new();
    let train = write_split(dir, &dataset.train, &mut digests)?;
    let test = write_split(dir, &dataset.test, &mut digests)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: dataset.spec.clone(),
        splits: Splits {
            train,
            test,
            visualization: dataset.visualization.iter().map(|e| e.id.clone()).collect(),
        },
        checksum: combined_checksum(digests.iter().map(String::as_str)),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_file(dir: &Path, name: &str, expected: &str) -> Result<Vec<u8>> {
    let bytes =
        fs::read(dir.join(name)).map_err(|e| Error::Format(format!("cannot read {name}: {e}")))?;
    let got = sha256_hex(&bytes);
    if got != expected {
        return Err(Error::Format(format!("{name}: sha256 mismatch")));
    }
    Ok(bytes)
}

fn read_split(dir: &Path, entries: &[FileEntry], channels: usize) -> Result<Vec<ImageExample>> {
    entries
        .iter()
        .map(|e| {
            let bytes = read_file(dir, &e.image, &e.image_sha256)?;
            let pixels = decode_pixels(&bytes, channels, &e.image)?;
            let mask = match (&e.mask, &e.mask_sha256) {
                (Some(name), Some(digest)) => {
                    Some(decode_mask(&read_file(dir, name, digest)?, name)?)
                }
                (None, None) => None,
                _ => return Err(Error::Format(format!("{}: mask without digest", e.id))),
            };
            Ok(ImageExample {
                id: e.id.clone(),
                pixels,
                label: e.label,
                mask,
                confounder: e.confounder,
            })
        })
        .collect()
}

pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let raw = fs::read(dir.join("manifest.json"))
        .map_err(|e| Error::Format(format!("cannot read manifest.json: {e}")))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let digests = manifest
        .splits
        .train
        .iter()
        .chain(&manifest.splits.test)
        .flat_map(|e| std::iter::once(e.image_sha256.as_str()).chain(e.mask_sha256.as_deref()));
    if combined_checksum(digests) != manifest.checksum {
        return Err(Error::Format("manifest checksum mismatch".into()));
    }
    let channels = manifest.spec.channels;
    let train = read_split(dir, &manifest.splits.train, channels)?;
    let test = read_split(dir, &manifest.splits.test, channels)?;
    let visualization =
        manifest
            .splits
            .visualization
            .iter()
            .map(|id| {
                train.iter().find(|e| &e.id == id).cloned().ok_or_else(|| {
                    Error::Format(format!("visualization id {id} not in train split"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: manifest.spec,
        train,
        test,
        visualization,
    })
}

/// RGB rendering of an example, for overlays.
pub fn to_rgb_image(ex: &ImageExample) -> RgbImage {
    let (h, w, c) = (ex.height(), ex.width(), ex.channels());
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = ex.pixel(y as usize, x as usize);
        if c >= 3 {
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        } else {
            let v = to_u8(p[0]);
            Rgb([v, v, v])
        }
    })
}
