//! Axis-aligned box arithmetic.
//!
//! Boxes are stored COCO style as `(x, y, w, h)` with real-valued
//! coordinates. Every other module measures objects through
//! [`SizeMeasure`], which defaults to the side of the equal-area square.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Checked constructor: rejects negative or non-finite extents.
    pub fn try_new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite box [{x}, {y}, {w}, {h}]"
            )));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative box extent [{x}, {y}, {w}, {h}]"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x: x1,
            y: y1,
            w: (x2 - x1).max(0.0),
            h: (y2 - y1).max(0.0),
        }
    }

    /// Box of the given size centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Side of the square with the same area.
    #[inline]
    pub fn side(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// True if `other` lies entirely inside `self` (shared edges allowed).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x && self.y <= other.y && other.x2() <= self.x2() && other.y2() <= self.y2()
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        self.x <= px && px <= self.x2() && self.y <= py && py <= self.y2()
    }

    /// Multiplies all four fields by `factor`.
    pub fn scale(&self, factor: f64) -> Result<BBox> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(self.scale_unchecked(factor))
    }

    #[inline]
    pub(crate) fn scale_unchecked(&self, factor: f64) -> BBox {
        BBox {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }

    /// Intersection with `[0, width] x [0, height]`. A disjoint box collapses
    /// to a zero-area box at the clamped position.
    pub fn clip(&self, size: ImageSize) -> BBox {
        let (wmax, hmax) = (size.width as f64, size.height as f64);
        let x1 = self.x.clamp(0.0, wmax);
        let y1 = self.y.clamp(0.0, hmax);
        let x2 = self.x2().clamp(0.0, wmax);
        let y2 = self.y2().clamp(0.0, hmax);
        BBox::from_corners(x1, y1, x2, y2)
    }

    /// Lexicographic order on `(x, y, w, h)`; the tie-breaker used wherever
    /// scores are equal.
    pub fn cmp_coords(&self, other: &BBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::try_new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Raster dimensions of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawImageSize")]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct RawImageSize {
    width: u32,
    height: u32,
}

impl TryFrom<RawImageSize> for ImageSize {
    type Error = Error;

    fn try_from(raw: RawImageSize) -> Result<Self> {
        ImageSize::new(raw.width, raw.height)
    }
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn shorter(&self) -> u32 {
        self.width.min(self.height)
    }

    pub fn longer(&self) -> u32 {
        self.width.max(self.height)
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// How an object's "size" is measured for validity ranges.
///
/// Validity bounds such as `[0, 80]` are quoted in pixels; `Side` reads them
/// as side lengths of the equal-area square, `Area` as square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMeasure {
    #[default]
    Side,
    Area,
}

impl SizeMeasure {
    #[inline]
    pub fn measure(self, b: &BBox) -> f64 {
        match self {
            SizeMeasure::Side => b.side(),
            SizeMeasure::Area => b.area(),
        }
    }
}
