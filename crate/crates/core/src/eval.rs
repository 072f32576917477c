//! COCO-protocol detection and proposal metrics.
//!
//! Detection AP follows pycocotools: per image and category the top 100
//! detections are greedily matched in score order, crowd ground truths absorb
//! matches without counting, and precision is interpolated at 101 recall
//! points. Undefined metrics are `None`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Dataset};
use crate::fusion::{rank_order, Detection};
use crate::geometry::{iou, BBox};
use crate::par::prelude::*;
use crate::{Error, Result};

pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`, computed as numpy's `linspace` does.
pub fn iou_thresholds() -> Vec<f64> {
    let step = 0.45 / 9.0;
    (0..10).map(|i| i as f64 * step + 0.5).collect()
}

fn recall_thresholds() -> Vec<f64> {
    let step = 1.0 / 100.0;
    (0..RECALL_POINTS).map(|i| i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeBins {
    /// Area edges between small/medium and medium/large.
    pub area_edges: [f64; 2],
    /// Side-length edges for proposal recall bins.
    pub side_edges: Vec<f64>,
}

impl Default for SizeBins {
    fn default() -> Self {
        Self {
            area_edges: [32.0 * 32.0, 96.0 * 96.0],
            side_edges: vec![25.0, 50.0, 100.0],
        }
    }
}

impl SizeBins {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.area_edges;
        if !(0.0 < a && a < b) {
            return Err(Error::Config(
                "area edges must satisfy 0 < small < large".into(),
            ));
        }
        if self.side_edges.iter().any(|&e| e.is_nan() || e <= 0.0)
            || self.side_edges.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "side edges must be positive and increasing".into(),
            ));
        }
        Ok(())
    }

    /// `[all, small, medium, large]` area ranges, inclusive at both ends.
    fn area_ranges(&self) -> [(f64, f64); 4] {
        let [a, b] = self.area_edges;
        [(0.0, 1e10), (0.0, a), (a, b), (b, 1e10)]
    }

    /// Index of the half-open side bin holding `side`.
    pub fn side_bin(&self, side: f64) -> usize {
        self.side_edges.iter().take_while(|&&e| side >= e).count()
    }

    pub fn side_bin_labels(&self) -> Vec<String> {
        let mut lo = 0.0;
        let mut out = Vec::new();
        for &e in &self.side_edges {
            out.push(format!("{lo}-{e}"));
            lo = e;
        }
        out.push(format!(">{lo}"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: BTreeMap<u64, Option<f64>>,
}

pub const REPORT_COLUMNS: [&str; 6] = ["AP", "AP50", "AP75", "APs", "APm", "APl"];

pub fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", v * 100.0))
}

impl EvalReport {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.ap,
            self.ap50,
            self.ap75,
            self.ap_small,
            self.ap_medium,
            self.ap_large,
        ]
    }
}

/// Per-image, per-category, per-area matching outcome.
struct ImageEval {
    /// Kept detections in rank order: (score, box, image id).
    dets: Vec<(f64, BBox, u64)>,
    /// `matched[t][d]`, `ignored[t][d]`.
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    valid_gts: usize,
}

fn crowd_aware_iou(d: &BBox, g: &BBox, crowd: bool) -> f64 {
    if !crowd {
        return iou(d, g);
    }
    let area = d.area();
    if area <= 0.0 {
        0.0
    } else {
        d.intersection_area(g) / area
    }
}

fn evaluate_image(
    gts: &[&Annotation],
    dets: &[&Detection],
    range: (f64, f64),
    thresholds: &[f64],
) -> ImageEval {
    let outside = |a: f64| a < range.0 || a > range.1;
    let mut gts: Vec<(&Annotation, bool)> = gts
        .iter()
        .map(|g| (*g, g.iscrowd || outside(g.area)))
        .collect();
    gts.sort_by_key(|&(_, ignore)| ignore);
    let mut dets = dets.to_vec();
    dets.sort_by(|a, b| rank_order(a, b));
    dets.truncate(MAX_DETS);

    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            gts.iter()
                .map(|(g, _)| crowd_aware_iou(&d.bbox, &g.bbox, g.iscrowd))
                .collect()
        })
        .collect();

    let mut matched = vec![vec![false; dets.len()]; thresholds.len()];
    let mut ignored = vec![vec![false; dets.len()]; thresholds.len()];
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gts.len()];
        for (di, d) in dets.iter().enumerate() {
            let mut best_iou = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, &(g, g_ignore)) in gts.iter().enumerate() {
                if gt_taken[gi] && !g.iscrowd {
                    continue;
                }
                if let Some(mi) = m {
                    if !gts[mi].1 && g_ignore {
                        break;
                    }
                }
                if ious[di][gi] < best_iou {
                    continue;
                }
                best_iou = ious[di][gi];
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    matched[ti][di] = true;
                    ignored[ti][di] = gts[gi].1;
                    gt_taken[gi] = true;
                }
                None => ignored[ti][di] = outside(d.bbox.area()),
            }
        }
    }
    ImageEval {
        dets: dets.iter().map(|d| (d.score, d.bbox, d.image_id)).collect(),
        matched,
        ignored,
        valid_gts: gts.iter().filter(|(_, ig)| !ig).count(),
    }
}

/// Interpolated precision at each recall point, per threshold; `None` when
/// there is no valid ground truth.
fn accumulate(evals: &[ImageEval], thresholds: &[f64]) -> Option<Vec<Vec<f64>>> {
    let npig: usize = evals.iter().map(|e| e.valid_gts).sum();
    if npig == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = evals
        .iter()
        .enumerate()
        .flat_map(|(ei, e)| (0..e.dets.len()).map(move |di| (ei, di)))
        .collect();
    order.sort_by(|&(ea, da), &(eb, db)| {
        let (sa, ba, ia) = evals[ea].dets[da];
        let (sb, bb, ib) = evals[eb].dets[db];
        sb.total_cmp(&sa)
            .then_with(|| ba.cmp_coords(&bb))
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });
    let rec_thrs = recall_thresholds();
    let per_t = (0..thresholds.len())
        .map(|ti| {
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut rc = Vec::new();
            let mut pr = Vec::new();
            for &(ei, di) in &order {
                if evals[ei].ignored[ti][di] {
                    continue;
                }
                if evals[ei].matched[ti][di] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                rc.push(tp as f64 / npig as f64);
                pr.push(tp as f64 / (tp + fp) as f64);
            }
            for i in (1..pr.len()).rev() {
                if pr[i] > pr[i - 1] {
                    pr[i - 1] = pr[i];
                }
            }
            rec_thrs
                .iter()
                .map(|&r| {
                    let idx = rc.partition_point(|&v| v < r);
                    pr.get(idx).copied().unwrap_or(0.0)
                })
                .collect()
        })
        .collect();
    Some(per_t)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Precision tables for one area range: category → `[threshold][recall point]`.
fn precision_tables(
    ds: &Dataset,
    dets: &[Detection],
    range: (f64, f64),
    thresholds: &[f64],
) -> BTreeMap<u64, Option<Vec<Vec<f64>>>> {
    let mut gts_by: BTreeMap<(u64, u64), Vec<&Annotation>> = BTreeMap::new();
    for a in &ds.annotations {
        gts_by
            .entry((a.category_id, a.image_id))
            .or_default()
            .push(a);
    }
    let mut dets_by: BTreeMap<(u64, u64), Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        dets_by
            .entry((d.category_id, d.image_id))
            .or_default()
            .push(d);
    }
    let categories: BTreeSet<u64> = ds.categories.iter().map(|c| c.id).collect();
    let jobs: Vec<u64> = categories.into_iter().collect();
    let tables: Vec<(u64, Option<Vec<Vec<f64>>>)> = jobs
        .par_iter()
        .map(|&cat| {
            let keys: BTreeSet<u64> = gts_by
                .range((cat, 0)..=(cat, u64::MAX))
                .map(|(k, _)| k.1)
                .chain(dets_by.range((cat, 0)..=(cat, u64::MAX)).map(|(k, _)| k.1))
                .collect();
            let evals: Vec<ImageEval> = keys
                .into_iter()
                .map(|img| {
                    let g = gts_by.get(&(cat, img)).map_or(&[][..], Vec::as_slice);
                    let d = dets_by.get(&(cat, img)).map_or(&[][..], Vec::as_slice);
                    evaluate_image(g, d, range, thresholds)
                })
                .collect();
            (cat, accumulate(&evals, thresholds))
        })
        .collect();
    tables.into_iter().collect()
}

fn average(tables: &BTreeMap<u64, Option<Vec<Vec<f64>>>>, t: Option<usize>) -> Option<f64> {
    mean(tables.values().flatten().flat_map(|per_t| {
        per_t
            .iter()
            .enumerate()
            .filter(move |(ti, _)| t.is_none_or(|t| t == *ti))
            .flat_map(|(_, row)| row.iter().copied())
    }))
}

pub fn evaluate_detections(
    ds: &Dataset,
    dets: &[Detection],
    bins: &SizeBins,
) -> Result<EvalReport> {
    bins.validate()?;
    ds.check_results(dets)?;
    let thresholds = iou_thresholds();
    let [all, small, medium, large] = bins
        .area_ranges()
        .map(|r| precision_tables(ds, dets, r, &thresholds));
    Ok(EvalReport {
        ap: average(&all, None),
        ap50: average(&all, Some(0)),
        ap75: average(&all, Some(5)),
        ap_small: average(&small, None),
        ap_medium: average(&medium, None),
        ap_large: average(&large, None),
        per_class: all
            .iter()
            .map(|(&cat, t)| {
                (
                    cat,
                    t.as_ref()
                        .and_then(|per_t| mean(per_t.iter().flatten().copied())),
                )
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub ar: Option<f64>,
    pub ar50: Option<f64>,
    pub ar75: Option<f64>,
    pub bins: Vec<String>,
    pub recall_at_50: Vec<Option<f64>>,
    pub budget: usize,
    pub total_gt: usize,
}

/// Class-agnostic proposal recall. Each image keeps its top `budget`
/// proposals; a ground truth is recalled at `t` if any kept proposal overlaps
/// it with IoU ≥ t. Crowd regions are not counted.
pub fn evaluate_proposals(
    ds: &Dataset,
    proposals: &[Detection],
    budget: usize,
    bins: &SizeBins,
) -> Result<RecallReport> {
    if budget == 0 {
        return Err(Error::InvalidArgument(
            "proposal budget must be >= 1".into(),
        ));
    }
    bins.validate()?;
    ds.check_results(proposals)?;
    let thresholds = iou_thresholds();
    let mut by_image: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for p in proposals {
        by_image.entry(p.image_id).or_default().push(p);
    }
    let grouped = ds.grouped();
    // per ground truth: (side, best IoU)
    let best: Vec<Vec<(f64, f64)>> = grouped
        .par_iter()
        .map(|(img, anns)| {
            let mut props = by_image.get(&img.id).cloned().unwrap_or_default();
            props.sort_by(|a, b| rank_order(a, b));
            props.truncate(budget);
            anns.iter()
                .filter(|a| !a.iscrowd)
                .map(|a| {
                    let b = props
                        .iter()
                        .map(|p| iou(&p.bbox, &a.bbox))
                        .fold(0.0, f64::max);
                    (a.bbox.side(), b)
                })
                .collect()
        })
        .collect();
    let best: Vec<(f64, f64)> = best.into_iter().flatten().collect();
    let total = best.len();
    let recall_at = |t: f64, filter: &dyn Fn(f64) -> bool| -> Option<f64> {
        let pool: Vec<&(f64, f64)> = best.iter().filter(|(s, _)| filter(*s)).collect();
        (!pool.is_empty())
            .then(|| pool.iter().filter(|(_, v)| *v >= t).count() as f64 / pool.len() as f64)
    };
    let per_t: Vec<Option<f64>> = thresholds
        .iter()
        .map(|&t| recall_at(t, &|_| true))
        .collect();
    let n_bins = bins.side_edges.len() + 1;
    Ok(RecallReport {
        ar: mean(per_t.iter().flatten().copied()).filter(|_| total > 0),
        ar50: per_t[0],
        ar75: per_t[5],
        bins: bins.side_bin_labels(),
        recall_at_50: (0..n_bins)
            .map(|b| recall_at(0.5, &|s| bins.side_bin(s) == b))
            .collect(),
        budget,
        total_gt: total,
    })
}
