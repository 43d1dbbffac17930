//! Pixel containers and file IO.
//!
//! All containers are row-major with the origin at the top-left corner and
//! `y` growing downward: pixel `(x, y)` lives at index `y * width + x`.
//! Intensities are kept as `f64` in `[0, 1]`; quantization to 8 bits only
//! happens when reading or writing files.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage { width, height });
    }
    if len != width * height {
        return Err(Error::InvalidParameter(format!(
            "buffer of length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

fn check_unit(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!(
                "{what} value {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        check_unit(data.iter().copied(), "intensity")?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    pub(crate) fn from_raw_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            width,
            height,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Replicates the intensity into three channels.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| [v, v, v]).collect(),
        }
    }
}

/// Three-channel image, each channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        check_unit(data.iter().flat_map(|p| p.iter().copied()), "channel")?;
        Ok(Self {
            width,
            height,
            data,
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

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

/// Hard per-pixel labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of the image area that is set.
    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Per-pixel probabilities; holds both the prior membership field and the
/// E-step posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        check_unit(data.iter().copied(), "probability")?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

pub(crate) fn ensure_same_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("unsupported format {other:?} (expected PNG or PGM/PPM)"),
            })
        }
    }
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::EmptyImage {
            width: img.width() as usize,
            height: img.height() as usize,
        });
    }
    Ok(img)
}

fn is_single_channel(color: ColorType) -> bool {
    matches!(
        color,
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    )
}

/// Reads a PNG or binary PGM/PPM file as RGB, mapping 8-bit values `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = decode(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| {
            [
                f64::from(p[0]) / 255.0,
                f64::from(p[1]) / 255.0,
                f64::from(p[2]) / 255.0,
            ]
        })
        .collect();
    RgbImage::new(w, h, data)
}

/// Reads an image as grayscale. Single-channel files are taken verbatim,
/// colour files go through [`to_gray`].
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    if is_single_channel(img.color()) {
        let luma = img.to_luma8();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        let data = luma.pixels().map(|p| f64::from(p[0]) / 255.0).collect();
        GrayImage::new(w, h, data)
    } else {
        load_image(path).map(|rgb| to_gray(&rgb))
    }
}

/// BT.601 luma, clamped to `[0, 1]`. Pixels with equal channels pass through unchanged.
pub fn to_gray(img: &RgbImage) -> GrayImage {
    let data = img.data.iter().map(|&p| luma(p)).collect();
    GrayImage::from_raw_clamped(img.width, img.height, data)
}

#[inline]
pub(crate) fn luma([r, g, b]: [f64; 3]) -> f64 {
    if r == g && g == b {
        return r.clamp(0.0, 1.0);
    }
    (LUMA_R * r + LUMA_G * g + LUMA_B * b).clamp(0.0, 1.0)
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_luma8(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes a mask as an 8-bit single-channel PNG with values `{0, 255}`.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_luma8(path.as_ref(), mask.width, mask.height, bytes)
}

/// Reads a mask; any channel-averaged value above 127 is `true`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let luma = decode(path.as_ref())?.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    BinaryMask::new(w, h, luma.pixels().map(|p| p[0] > 127).collect())
}

/// Writes an 8-bit grayscale PNG, rounding `v * 255`.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes = img.data.iter().map(|&v| quantize(v)).collect();
    write_luma8(path.as_ref(), img.width, img.height, bytes)
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.data.iter().flat_map(|p| p.map(quantize)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
