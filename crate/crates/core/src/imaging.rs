//! Grayscale rasters, boolean masks and axis-aligned boxes.
//!
//! Every other module works on these types. Intensities are kept in `[0, 1]`;
//! 8-bit files are mapped `0..=255 -> [0, 1]` when loaded.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image dimensions {width}x{height}")]
    BadDimensions { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("invalid box [{0}, {1}, {2}, {3}]: need x_min < x_max and y_min < y_max")]
    InvalidBox(f64, f64, f64, f64),
    #[error("image i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self, ImagingError> {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::BadDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        })
    }

    /// Wraps a row-major buffer; values are clamped into `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, mut pixels: Vec<f32>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::BadDimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImagingError::BufferSize {
                got: pixels.len(),
                expected: width * height,
            });
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self, ImagingError> {
        let mut img = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Stores `value` clamped into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.pixels[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }

    /// Copies the pixels covered by `region`, snapped outward to whole pixels.
    pub fn crop(&self, region: &BBox) -> GrayImage {
        let (x0, y0, x1, y1) = region.pixel_span(self.width, self.height);
        let w = x1 - x0;
        let h = y1 - y0;
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y1 {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        GrayImage {
            width: w,
            height: h,
            pixels,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| ImagingError::Io {
                path: path.display().to_string(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::from_vec(w as usize, h as usize, pixels)
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImagingError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}

/// Boolean raster with the same dimension contract as [`GrayImage`].
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::BadDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ImagingError> {
        let mut m = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// Tight pixel box of all set pixels as a continuous box
    /// (`[x, x + 1)` per pixel), or `None` when the mask is empty.
    pub fn bounding_box(&self) -> Option<BBox> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        })
    }
}

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = ImagingError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ImagingError> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(ImagingError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, ImagingError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    /// Whole-pixel span `[x0, x1) x [y0, y1)` covering the box, clipped to the image.
    pub fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.x_min.floor().max(0.0) as usize).min(width - 1);
        let y0 = (self.y_min.floor().max(0.0) as usize).min(height - 1);
        let x1 = (self.x_max.ceil() as usize).clamp(x0 + 1, width);
        let y1 = (self.y_max.ceil() as usize).clamp(y0 + 1, height);
        (x0, y0, x1, y1)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Intersection over union of two boxes; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Maps a box between two raster sizes by per-axis scaling.
pub fn scale_box(b: &BBox, from_w: usize, from_h: usize, to_w: usize, to_h: usize) -> BBox {
    let sx = to_w as f64 / from_w as f64;
    let sy = to_h as f64 / from_h as f64;
    BBox {
        x_min: b.x_min * sx,
        y_min: b.y_min * sy,
        x_max: b.x_max * sx,
        y_max: b.y_max * sy,
    }
}

/// Bilinear resize with pixel-centre alignment.
///
/// Output pixel `(i, j)` samples the source at `((i + 0.5) * sx - 0.5, (j + 0.5) * sy - 0.5)`,
/// clamped to the source grid, so every output value is a convex combination of inputs.
pub fn resize(img: &GrayImage, target_w: usize, target_h: usize) -> GrayImage {
    assert!(target_w >= 1 && target_h >= 1, "resize target must be at least 1x1");
    if target_w == img.width && target_h == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / target_w as f64;
    let sy = img.height as f64 / target_h as f64;
    let axis = |i: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..target_w).map(|x| axis(x, sx, img.width)).collect();
    let mut pixels = Vec::with_capacity(target_w * target_h);
    for y in 0..target_h {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for &(x0, x1, fx) in &cols {
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bot = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            pixels.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    GrayImage {
        width: target_w,
        height: target_h,
        pixels,
    }
}

/// Ground-truth and predicted class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Distended,
    NonDistended,
    /// Class-agnostic recess, produced only by single-class detection.
    Recess,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Distended => "Distended",
            Label::NonDistended => "NonDistended",
            Label::Recess => "Recess",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: Label,
    pub confidence: f64,
}
