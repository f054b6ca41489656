//! Dense label grids and their PGM encoding.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the values of a [`LabelImage`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// 0 = background, 1 = animal.
    Binary,
    /// 0 = background, 1 = outer edge, 2 = inner core.
    Categorical3,
    /// 0 = background, 1..=K = instance ids.
    Instance,
    /// 0 = background, 1 = body, 2 = head.
    Bodypart3,
}

impl LabelKind {
    /// Largest valid label, `None` for instance images.
    pub fn max_class(self) -> Option<u16> {
        match self {
            LabelKind::Binary => Some(1),
            LabelKind::Categorical3 | LabelKind::Bodypart3 => Some(2),
            LabelKind::Instance => None,
        }
    }
}

pub const BACKGROUND: u16 = 0;
pub const EDGE: u16 = 1;
pub const CORE: u16 = 2;
pub const BODY: u16 = 1;
pub const HEAD: u16 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    kind: LabelKind,
    pixels: Vec<u16>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, kind: LabelKind) -> Self {
        LabelImage {
            width,
            height,
            kind,
            pixels: vec![BACKGROUND; width * height],
        }
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        kind: LabelKind,
        pixels: Vec<u16>,
    ) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(max) = kind.max_class() {
            if let Some(bad) = pixels.iter().find(|&&p| p > max) {
                return Err(Error::LabelKind(format!(
                    "label {bad} is not valid for {kind:?}"
                )));
            }
        }
        Ok(LabelImage {
            width,
            height,
            kind,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [u16] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u16 {
        self.pixels.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u16) -> usize {
        self.pixels.iter().filter(|&&p| p == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != BACKGROUND).count()
    }

    /// Binary image with 1 wherever the label is nonzero.
    pub fn to_binary(&self) -> LabelImage {
        LabelImage {
            width: self.width,
            height: self.height,
            kind: LabelKind::Binary,
            pixels: self.pixels.iter().map(|&p| u16::from(p != 0)).collect(),
        }
    }

    /// Same pixels, different interpretation.
    pub fn relabel_kind(mut self, kind: LabelKind) -> Result<Self> {
        if let Some(max) = kind.max_class() {
            if self.max_label() > max {
                return Err(Error::LabelKind(format!(
                    "cannot view image with label {} as {kind:?}",
                    self.max_label()
                )));
            }
        }
        self.kind = kind;
        Ok(self)
    }

    pub(crate) fn check_same_dims(&self, other: &LabelImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Pixel coordinates carrying `label`, row-major.
    pub fn coords_of(&self, label: u16) -> Vec<(usize, usize)> {
        self.pixels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == label)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }

    /// Writes a P5 PGM; 8-bit when every label fits, 16-bit otherwise.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.max_label() > u8::MAX as u16 {
            // the pnm encoder has no 16-bit path; samples are big-endian
            let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
            bytes.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
            return std::fs::write(path, bytes).map_err(|e| Error::io(path, e));
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| p as u8).collect();
        let res = PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&bytes, w, h, ExtendedColorType::L8);
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads an 8- or 16-bit grayscale PGM.
    pub fn read_pgm(path: impl AsRef<Path>, kind: LabelKind) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<u16> = match img {
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
            image::DynamicImage::ImageLuma16(b) => b.into_raw(),
            other => {
                return Err(Error::Dataset(format!(
                    "{}: expected single-channel PGM, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        LabelImage::from_pixels(w, h, kind, pixels)
    }
}
