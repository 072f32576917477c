//! Image pyramid planning.
//!
//! A [`ResolutionSpec`] is a `(shorter side, max side)` target. The rescale
//! factor for an image is the largest isotropic factor that satisfies both
//! bounds, so one of them is always tight.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, ImageSize};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ResolutionSpec {
    pub shorter: u32,
    pub max_side: u32,
}

#[derive(Deserialize)]
struct RawSpec {
    shorter: u32,
    max_side: u32,
}

impl TryFrom<RawSpec> for ResolutionSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        ResolutionSpec::new(raw.shorter, raw.max_side)
    }
}

impl ResolutionSpec {
    pub fn new(shorter: u32, max_side: u32) -> Result<Self> {
        if shorter == 0 || shorter > max_side {
            return Err(Error::InvalidArgument(format!(
                "resolution spec needs 0 < shorter <= max_side, got ({shorter}, {max_side})"
            )));
        }
        Ok(Self { shorter, max_side })
    }

    pub const fn new_unchecked(shorter: u32, max_side: u32) -> Self {
        Self { shorter, max_side }
    }

    /// The three training and inference resolutions used by default.
    pub fn default_pyramid() -> Vec<ResolutionSpec> {
        vec![
            ResolutionSpec::new_unchecked(480, 800),
            ResolutionSpec::new_unchecked(800, 1200),
            ResolutionSpec::new_unchecked(1400, 2000),
        ]
    }
}

impl fmt::Display for ResolutionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.shorter, self.max_side)
    }
}

impl FromStr for ResolutionSpec {
    type Err = Error;

    /// Parses `800x1200` or `800,1200`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse resolution spec {s:?}"));
        let (a, b) = s
            .trim()
            .trim_start_matches('(')
            .trim_end_matches(')')
            .split_once(['x', 'X', ','])
            .ok_or_else(bad)?;
        let shorter = a.trim().parse().map_err(|_| bad())?;
        let max_side = b.trim().parse().map_err(|_| bad())?;
        ResolutionSpec::new(shorter, max_side)
    }
}

/// Largest isotropic factor keeping the shorter side within
/// `spec.shorter` and the longer side within `spec.max_side`.
pub fn scale_factor(image: ImageSize, spec: ResolutionSpec) -> f64 {
    let by_shorter = spec.shorter as f64 / image.shorter() as f64;
    let by_longer = spec.max_side as f64 / image.longer() as f64;
    by_shorter.min(by_longer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    #[serde(flatten)]
    pub spec: ResolutionSpec,
    pub factor: f64,
    pub scaled_width: u32,
    pub scaled_height: u32,
}

impl PyramidLevel {
    pub fn scaled_size(&self) -> ImageSize {
        ImageSize {
            width: self.scaled_width,
            height: self.scaled_height,
        }
    }

    /// Maps a box from the original frame into this level.
    pub fn to_level(&self, b: &BBox) -> BBox {
        b.scale_unchecked(self.factor)
    }

    /// Maps a box from this level back into the original frame.
    pub fn to_original(&self, b: &BBox) -> BBox {
        b.scale_unchecked(1.0 / self.factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidPlan {
    pub image: ImageSize,
    pub levels: Vec<PyramidLevel>,
}

impl PyramidPlan {
    pub fn level(&self, spec: ResolutionSpec) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.spec == spec)
    }
}

/// One level per spec, ordered by ascending shorter-side target.
pub fn build_plan(image: ImageSize, specs: &[ResolutionSpec]) -> Result<PyramidPlan> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument(
            "pyramid needs at least one resolution spec".into(),
        ));
    }
    let mut specs = specs.to_vec();
    specs.sort_unstable();
    specs.dedup();
    let levels = specs
        .into_iter()
        .map(|spec| {
            let factor = scale_factor(image, spec);
            let scaled = |d: u32| ((d as f64 * factor).round() as u32).max(1);
            PyramidLevel {
                spec,
                factor,
                scaled_width: scaled(image.width),
                scaled_height: scaled(image.height),
            }
        })
        .collect();
    Ok(PyramidPlan { image, levels })
}
