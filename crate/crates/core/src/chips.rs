//! Randomized greedy chip sampling.
//!
//! Each round draws random chip positions, keeps the one covering the most
//! still-uncovered targets and repeats until every coverable target is inside
//! some chip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::geometry::{BBox, ImageSize};
use crate::par::prelude::*;
use crate::pyramid::{build_plan, ResolutionSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coverage {
    /// The whole box lies inside the chip.
    #[default]
    FullContainment,
    /// The box center lies inside the chip.
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    pub chip_size: u32,
    pub candidates_per_round: usize,
    /// Targets must have scaled side strictly below this.
    pub cover_side_max: Option<f64>,
    /// Targets must have original side at most this.
    pub original_side_max: Option<f64>,
    pub coverage: Coverage,
    /// Slide each random candidate to the corners of the region that keeps
    /// its covered targets, keeping the best.
    pub tighten: bool,
    pub rng_seed: u64,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            chip_size: 1000,
            candidates_per_round: 50,
            cover_side_max: None,
            original_side_max: Some(80.0),
            coverage: Coverage::FullContainment,
            tighten: true,
            rng_seed: 0,
        }
    }
}

impl ChipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chip_size == 0 {
            return Err(Error::Config("chip_size must be >= 1".into()));
        }
        if self.candidates_per_round == 0 {
            return Err(Error::Config("candidates_per_round must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether an object is a cover target. `factor` maps original to scaled.
    pub fn is_target(&self, scaled: &BBox, factor: f64) -> bool {
        let side = scaled.side();
        self.cover_side_max.is_none_or(|m| side < m)
            && self.original_side_max.is_none_or(|m| side / factor <= m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ChipSet {
    pub chips: Vec<BBox>,
    /// Target ids inside each chip, parallel to `chips`.
    pub covered: Vec<Vec<u64>>,
    /// Targets no chip position can cover.
    pub excluded: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    w: u32,
    h: u32,
    max_x: u32,
    max_y: u32,
}

impl Placement {
    fn new(image: ImageSize, chip_size: u32) -> Self {
        let w = chip_size.min(image.width);
        let h = chip_size.min(image.height);
        Self {
            w,
            h,
            max_x: image.width - w,
            max_y: image.height - h,
        }
    }

    fn chip(&self, x: u32, y: u32) -> BBox {
        BBox::new(x as f64, y as f64, self.w as f64, self.h as f64)
    }
}

/// Integer interval of chip origins along one axis covering `[lo, hi]`.
fn feasible(lo: f64, hi: f64, len: u32, max: u32, coverage: Coverage) -> Option<(u32, u32)> {
    let (from, to) = match coverage {
        Coverage::FullContainment => ((hi - len as f64).ceil(), lo.floor()),
        Coverage::Center => {
            let c = (lo + hi) / 2.0;
            ((c - len as f64).ceil(), c.floor())
        }
    };
    let from = from.max(0.0);
    let to = to.min(max as f64);
    (from <= to).then_some((from as u32, to as u32))
}

fn covers(chip: &BBox, b: &BBox, coverage: Coverage) -> bool {
    match coverage {
        Coverage::FullContainment => chip.contains(b),
        Coverage::Center => {
            let (cx, cy) = b.center();
            chip.contains_point(cx, cy)
        }
    }
}

struct Target {
    id: u64,
    bbox: BBox,
    xs: (u32, u32),
    ys: (u32, u32),
}

fn count(targets: &[Target], chip: &BBox, coverage: Coverage) -> usize {
    targets
        .iter()
        .filter(|t| covers(chip, &t.bbox, coverage))
        .count()
}

/// Best of the four placements reached by sliding the chip as far as its
/// covered targets allow along each axis. Coverage never shrinks.
fn tightened(
    targets: &[Target],
    place: &Placement,
    x: u32,
    y: u32,
    coverage: Coverage,
) -> (usize, u32, u32) {
    let chip = place.chip(x, y);
    let inside: Vec<&Target> = targets
        .iter()
        .filter(|t| covers(&chip, &t.bbox, coverage))
        .collect();
    if inside.is_empty() {
        return (0, x, y);
    }
    let lo_x = inside.iter().map(|t| t.xs.0).max().unwrap_or(x);
    let hi_x = inside.iter().map(|t| t.xs.1).min().unwrap_or(x);
    let lo_y = inside.iter().map(|t| t.ys.0).max().unwrap_or(y);
    let hi_y = inside.iter().map(|t| t.ys.1).min().unwrap_or(y);
    let mut best = (inside.len(), x, y);
    for (cx, cy) in [(lo_x, lo_y), (lo_x, hi_y), (hi_x, lo_y), (hi_x, hi_y)] {
        let n = count(targets, &place.chip(cx, cy), coverage);
        if n > best.0 || (n == best.0 && (cx, cy) < (best.1, best.2)) {
            best = (n, cx, cy);
        }
    }
    best
}

/// Greedy chip cover of `objects` (ids and boxes in the scaled frame).
pub fn sample_chips(
    objects: &[(u64, BBox)],
    image: ImageSize,
    cfg: &ChipConfig,
    rng: &mut impl Rng,
) -> ChipSet {
    let place = Placement::new(image, cfg.chip_size);
    let mut set = ChipSet::default();
    let mut remaining: Vec<Target> = Vec::new();
    for &(id, b) in objects {
        let b = b.clip(image);
        let xs = feasible(b.x, b.x2(), place.w, place.max_x, cfg.coverage);
        let ys = feasible(b.y, b.y2(), place.h, place.max_y, cfg.coverage);
        match (xs, ys) {
            (Some(xs), Some(ys)) => remaining.push(Target {
                id,
                bbox: b,
                xs,
                ys,
            }),
            _ => {
                log::warn!(
                    "object {id} ({:.1}x{:.1}) cannot fit in a {}x{} chip",
                    b.w,
                    b.h,
                    place.w,
                    place.h
                );
                set.excluded.push(id);
            }
        }
    }
    let all: Vec<(u64, BBox)> = remaining.iter().map(|t| (t.id, t.bbox)).collect();

    while !remaining.is_empty() {
        let mut best: Option<(usize, u32, u32)> = None;
        for _ in 0..cfg.candidates_per_round {
            let x = rng.random_range(0..image.width).min(place.max_x);
            let y = rng.random_range(0..image.height).min(place.max_y);
            let (n, x, y) = if cfg.tighten {
                tightened(&remaining, &place, x, y, cfg.coverage)
            } else {
                (count(&remaining, &place.chip(x, y), cfg.coverage), x, y)
            };
            let better = match best {
                None => true,
                Some((bn, bx, by)) => n > bn || (n == bn && (x, y) < (bx, by)),
            };
            if better {
                best = Some((n, x, y));
            }
        }
        let (x, y) = match best {
            Some((n, x, y)) if n > 0 => (x, y),
            _ => {
                let t = &remaining[0];
                let (cx, cy) = t.bbox.center();
                let snap = |c: f64, len: u32, (lo, hi): (u32, u32)| {
                    (c - len as f64 / 2.0).round().clamp(lo as f64, hi as f64) as u32
                };
                (snap(cx, place.w, t.xs), snap(cy, place.h, t.ys))
            }
        };
        let chip = place.chip(x, y);
        remaining.retain(|t| !covers(&chip, &t.bbox, cfg.coverage));
        set.covered.push(
            all.iter()
                .filter(|(_, b)| covers(&chip, b, cfg.coverage))
                .map(|&(id, _)| id)
                .collect(),
        );
        set.chips.push(chip);
    }
    set
}

/// Fraction of the image area inside at least one chip.
pub fn chip_efficiency(chips: &[BBox], image: ImageSize) -> f64 {
    union_area(chips) / image.area()
}

/// Exact area of a union of boxes by coordinate compression.
pub fn union_area(boxes: &[BBox]) -> f64 {
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x, b.x2()]).collect();
    let mut ys: Vec<f64> = boxes.iter().flat_map(|b| [b.y, b.y2()]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (mx, my) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
            if boxes.iter().any(|b| b.contains_point(mx, my)) {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

/// Random stream for one image, independent of processing order.
pub fn image_rng(base_seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(image_id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageChips {
    pub image_id: u64,
    pub targets: usize,
    #[serde(flatten)]
    pub set: ChipSet,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChipSummary {
    pub images: usize,
    pub images_with_targets: usize,
    pub chips: usize,
    /// Mean over images with at least one target.
    pub mean_chips_per_image: Option<f64>,
    pub mean_chips_all_images: Option<f64>,
    pub excluded_objects: usize,
}

impl ChipSummary {
    pub fn from_images(images: &[ImageChips]) -> Self {
        let with_targets = images.iter().filter(|i| i.targets > 0).count();
        let chips: usize = images.iter().map(|i| i.set.chips.len()).sum();
        Self {
            images: images.len(),
            images_with_targets: with_targets,
            chips,
            mean_chips_per_image: (with_targets > 0).then(|| chips as f64 / with_targets as f64),
            mean_chips_all_images: (!images.is_empty()).then(|| chips as f64 / images.len() as f64),
            excluded_objects: images.iter().map(|i| i.set.excluded.len()).sum(),
        }
    }
}

/// Chips for every image of a dataset rescaled to `spec`. Crowd regions are
/// never targets. Output is ordered by image id.
pub fn sample_dataset_chips(
    ds: &Dataset,
    spec: ResolutionSpec,
    cfg: &ChipConfig,
) -> Result<Vec<ImageChips>> {
    cfg.validate()?;
    let grouped = ds.grouped();
    grouped
        .par_iter()
        .map(|(img, anns)| {
            let plan = build_plan(img.size(), &[spec])?;
            let level = &plan.levels[0];
            let targets: Vec<(u64, BBox)> = anns
                .iter()
                .filter(|a| !a.iscrowd)
                .map(|a| (a.id, level.to_level(&a.bbox)))
                .filter(|(_, b)| cfg.is_target(b, level.factor))
                .collect();
            let scaled = level.scaled_size();
            let set = sample_chips(&targets, scaled, cfg, &mut image_rng(cfg.rng_seed, img.id));
            Ok(ImageChips {
                image_id: img.id,
                targets: targets.len(),
                efficiency: chip_efficiency(&set.chips, scaled),
                set,
            })
        })
        .collect()
}
