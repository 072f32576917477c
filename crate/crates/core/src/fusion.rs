//! Detection fusion: greedy NMS, soft-NMS, cross-scale merging and ensemble
//! averaging over shared proposals.
//!
//! Everything here is deterministic: equal scores are ordered by box
//! coordinates, and partitions are processed in `(image, category)` order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::filter::{SnipConfig, Stage};
use crate::geometry::{iou, BBox};
use crate::par::prelude::*;
use crate::pyramid::{PyramidPlan, ResolutionSpec};
use crate::{Error, Result};

/// A scored, classified box. Serializes as one COCO results record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
    /// Pyramid level the detection came from, when known.
    #[serde(skip)]
    pub source_level: Option<ResolutionSpec>,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u64, bbox: BBox, score: f64) -> Self {
        Self {
            image_id,
            category_id,
            bbox,
            score,
            source_level: None,
        }
    }
}

/// Descending score, then ascending `(x, y, w, h)`.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.cmp_coords(&b.bbox))
}

/// Greedy NMS over one `(image, category)` group. Output is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMethod {
    Linear,
    Gaussian,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftNmsParams {
    pub method: DecayMethod,
    pub sigma: f64,
    pub iou_threshold: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        Self {
            method: DecayMethod::Gaussian,
            sigma: 0.5,
            iou_threshold: 0.3,
            score_floor: 0.001,
        }
    }
}

impl SoftNmsParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Config(format!(
                "soft-NMS sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "soft-NMS iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!(
                "soft-NMS score_floor must lie in [0, 1), got {}",
                self.score_floor
            )));
        }
        Ok(())
    }

    /// Multiplier applied to a score overlapping the pivot by `overlap`.
    #[inline]
    pub fn decay(&self, overlap: f64) -> f64 {
        match self.method {
            DecayMethod::Linear if overlap > self.iou_threshold => 1.0 - overlap,
            DecayMethod::Linear => 1.0,
            DecayMethod::Gaussian => (-(overlap * overlap) / self.sigma).exp(),
            DecayMethod::Hard if overlap > self.iou_threshold => 0.0,
            DecayMethod::Hard => 1.0,
        }
    }
}

/// Soft-NMS over one `(image, category)` group: repeatedly promotes the best
/// remaining detection and decays the rest against it. Survivors keep their
/// decayed scores and come out in promotion order.
pub fn soft_nms(dets: &[Detection], p: &SoftNmsParams) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets
        .iter()
        .filter(|d| d.score >= p.score_floor)
        .cloned()
        .collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len())
            .min_by(|&i, &j| rank_order(&pool[i], &pool[j]).then(i.cmp(&j)))
            .expect("non-empty pool");
        let pivot = pool.remove(best);
        pool.retain_mut(|d| {
            d.score *= p.decay(iou(&pivot.bbox, &d.bbox));
            d.score >= p.score_floor
        });
        out.push(pivot);
    }
    out
}

/// Groups detections by `(image, category)`.
pub fn partition(dets: Vec<Detection>) -> BTreeMap<(u64, u64), Vec<Detection>> {
    let mut groups: BTreeMap<(u64, u64), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups
            .entry((d.image_id, d.category_id))
            .or_default()
            .push(d);
    }
    groups
}

/// Applies soft-NMS independently to every `(image, category)` group.
pub fn soft_nms_grouped(dets: Vec<Detection>, p: &SoftNmsParams) -> Vec<Detection> {
    let groups: Vec<Vec<Detection>> = partition(dets).into_values().collect();
    let fused: Vec<Vec<Detection>> = groups.par_iter().map(|g| soft_nms(g, p)).collect();
    fused.into_iter().flatten().collect()
}

/// Classic NMS applied independently to every `(image, category)` group.
pub fn nms_grouped(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let groups: Vec<Vec<Detection>> = partition(dets).into_values().collect();
    let kept: Vec<Vec<Detection>> = groups.par_iter().map(|g| nms(g, iou_threshold)).collect();
    kept.into_iter().flatten().collect()
}

/// Maps each level's detections to the original frame, keeps only those
/// valid at their level and pools the rest through soft-NMS.
pub fn fuse_scales(
    per_level: &BTreeMap<ResolutionSpec, Vec<Detection>>,
    plan: &PyramidPlan,
    cfg: &SnipConfig,
    p: &SoftNmsParams,
) -> Result<Vec<Detection>> {
    let pooled = rescale_and_filter(per_level, plan, cfg)?;
    Ok(soft_nms_grouped(pooled, p))
}

fn rescale_and_filter(
    per_level: &BTreeMap<ResolutionSpec, Vec<Detection>>,
    plan: &PyramidPlan,
    cfg: &SnipConfig,
) -> Result<Vec<Detection>> {
    let mut pooled = Vec::new();
    for (&spec, dets) in per_level {
        let level = plan.level(spec).ok_or_else(|| {
            Error::Config(format!(
                "detections given for level {spec} which is not in the pyramid plan"
            ))
        })?;
        let range = cfg.range(Stage::Rcn, spec)?;
        for d in dets {
            let bbox = level.to_original(&d.bbox);
            if range.contains(cfg.size_of(&bbox)) {
                pooled.push(Detection {
                    bbox,
                    source_level: Some(spec),
                    ..d.clone()
                });
            }
        }
    }
    Ok(pooled)
}

/// Multi-image version of [`fuse_scales`]: `plans` maps image id to that
/// image's pyramid. Output is ordered by image, then category.
pub fn fuse_images(
    per_level: &BTreeMap<ResolutionSpec, Vec<Detection>>,
    plans: &BTreeMap<u64, PyramidPlan>,
    cfg: &SnipConfig,
    p: &SoftNmsParams,
) -> Result<Vec<Detection>> {
    let mut per_image: BTreeMap<u64, BTreeMap<ResolutionSpec, Vec<Detection>>> = BTreeMap::new();
    for (&spec, dets) in per_level {
        for d in dets {
            per_image
                .entry(d.image_id)
                .or_default()
                .entry(spec)
                .or_default()
                .push(d.clone());
        }
    }
    let jobs: Vec<(u64, BTreeMap<ResolutionSpec, Vec<Detection>>)> =
        per_image.into_iter().collect();
    let fused: Vec<Result<Vec<Detection>>> = jobs
        .par_iter()
        .map(|(image_id, levels)| {
            let plan = plans
                .get(image_id)
                .ok_or_else(|| Error::Integrity(format!("no pyramid plan for image {image_id}")))?;
            fuse_scales(levels, plan, cfg, p)
        })
        .collect();
    let mut out = Vec::new();
    for r in fused {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-RoI prediction carrying a full class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoredRoi {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_scores: BTreeMap<u64, f64>,
}

/// Order-independent mean: sorting first makes the float sum identical for
/// any permutation of the inputs.
fn symmetric_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

fn mean_box(boxes: impl Iterator<Item = BBox> + Clone) -> BBox {
    BBox::new(
        symmetric_mean(boxes.clone().map(|b| b.x).collect()),
        symmetric_mean(boxes.clone().map(|b| b.y).collect()),
        symmetric_mean(boxes.clone().map(|b| b.w).collect()),
        symmetric_mean(boxes.map(|b| b.h).collect()),
    )
}

fn check_aligned<T>(per_model: &[Vec<T>]) -> Result<usize> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Alignment("ensemble needs at least one model".into()))?;
    for (m, preds) in per_model.iter().enumerate() {
        if preds.len() != first.len() {
            return Err(Error::Alignment(format!(
                "model {m} reports {} predictions, model 0 reports {}",
                preds.len(),
                first.len()
            )));
        }
    }
    Ok(first.len())
}

/// Averages scores and boxes of models that scored the same proposals, index
/// by index. Categories must agree across models.
pub fn ensemble_average(per_model: &[Vec<Detection>]) -> Result<Vec<Detection>> {
    let n = check_aligned(per_model)?;
    (0..n)
        .map(|i| {
            let head = &per_model[0][i];
            for (m, preds) in per_model.iter().enumerate() {
                let d = &preds[i];
                if d.category_id != head.category_id || d.image_id != head.image_id {
                    return Err(Error::Alignment(format!(
                        "proposal {i}: model {m} has (image {}, category {}) but model 0 has (image {}, category {})",
                        d.image_id, d.category_id, head.image_id, head.category_id
                    )));
                }
            }
            Ok(Detection {
                bbox: mean_box(per_model.iter().map(|p| p[i].bbox)),
                score: symmetric_mean(per_model.iter().map(|p| p[i].score).collect()),
                ..head.clone()
            })
        })
        .collect()
}

/// Like [`ensemble_average`], but each model reports a class distribution;
/// the output takes the argmax of the averaged distribution (lowest category
/// id on ties) and that class's averaged score.
pub fn ensemble_average_class_scores(per_model: &[Vec<ClassScoredRoi>]) -> Result<Vec<Detection>> {
    let n = check_aligned(per_model)?;
    let models = per_model.len();
    (0..n)
        .map(|i| {
            let head = &per_model[0][i];
            let mut classes: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for preds in per_model {
                let roi = &preds[i];
                if roi.image_id != head.image_id {
                    return Err(Error::Alignment(format!(
                        "proposal {i} refers to different images across models"
                    )));
                }
                for (&c, &s) in &roi.class_scores {
                    classes.entry(c).or_default().push(s);
                }
            }
            let mut best: Option<(u64, f64)> = None;
            for (c, mut scores) in classes {
                // a class missing from some model counts as score 0 there
                scores.resize(models, 0.0);
                let mean = symmetric_mean(scores);
                if best.is_none_or(|(_, b)| mean > b) {
                    best = Some((c, mean));
                }
            }
            let (category_id, score) =
                best.ok_or_else(|| Error::Alignment(format!("proposal {i} has no class scores")))?;
            Ok(Detection::new(
                head.image_id,
                category_id,
                mean_box(per_model.iter().map(|p| p[i].bbox)),
                score,
            ))
        })
        .collect()
}

/// Maps a box predicted on a horizontally flipped image back to the
/// unflipped frame.
pub fn unflip(b: &BBox, image_width: u32) -> BBox {
    BBox::new(image_width as f64 - b.x - b.w, b.y, b.w, b.h)
}
