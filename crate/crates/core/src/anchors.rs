//! Dense anchor grids and ground-truth matching statistics.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::geometry::{iou, BBox, ImageSize};
use crate::par::prelude::*;
use crate::pyramid::{scale_factor, ResolutionSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Anchor sides in pixels (side of the equal-area square).
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    pub stride: u32,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 16,
        }
    }
}

impl AnchorConfig {
    /// Seven-scale variant used for the improved proposal network.
    pub fn improved() -> Self {
        Self {
            scales: vec![16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be >= 1".into()));
        }
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config(
                "anchor scales and aspect ratios must be non-empty".into(),
            ));
        }
        if self.scales.iter().any(|&s| s.is_nan() || s <= 0.0)
            || self.scales.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "anchor scales must be positive and strictly increasing".into(),
            ));
        }
        if self
            .aspect_ratios
            .iter()
            .any(|&r| !(r > 0.0 && r.is_finite()))
        {
            return Err(Error::Config("aspect ratios must be positive".into()));
        }
        Ok(())
    }

    /// `(w, h)` of every anchor shape, scale-major.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        self.scales
            .iter()
            .flat_map(|&s| {
                self.aspect_ratios.iter().map(move |&r| {
                    let root = r.sqrt();
                    (s * root, s / root)
                })
            })
            .collect()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Anchor grid over one (scaled) image.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    stride: f64,
    cols: usize,
    rows: usize,
    shapes: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn new(cfg: &AnchorConfig, image: ImageSize) -> Self {
        Self {
            stride: cfg.stride as f64,
            cols: (image.width / cfg.stride) as usize,
            rows: (image.height / cfg.stride) as usize,
            shapes: cfg.shapes(),
        }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows * self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn center(&self, cell: usize) -> f64 {
        cell as f64 * self.stride + self.stride / 2.0
    }

    /// Cell whose center is closest to `coord`, clamped to the grid.
    fn nearest(&self, coord: f64, cells: usize) -> usize {
        let raw = ((coord - self.stride / 2.0) / self.stride).round();
        raw.clamp(0.0, (cells - 1) as f64) as usize
    }

    /// Every anchor, row-major over cells, then scale, then ratio.
    pub fn anchors(&self) -> Vec<BBox> {
        let mut out = Vec::with_capacity(self.len());
        for row in 0..self.rows {
            for col in 0..self.cols {
                let (cx, cy) = (self.center(col), self.center(row));
                out.extend(
                    self.shapes
                        .iter()
                        .map(|&(w, h)| BBox::centered(cx, cy, w, h)),
                );
            }
        }
        out
    }

    /// Best IoU between `gt` and any anchor of the grid.
    ///
    /// For fixed anchor and box sizes the overlap along each axis only
    /// shrinks as the centers move apart, so per shape the best anchor sits at
    /// the grid cell nearest the box center.
    pub fn max_iou(&self, gt: &BBox) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let (gx, gy) = gt.center();
        let cx = self.center(self.nearest(gx, self.cols));
        let cy = self.center(self.nearest(gy, self.rows));
        self.shapes
            .iter()
            .map(|&(w, h)| iou(gt, &BBox::centered(cx, cy, w, h)))
            .fold(0.0, f64::max)
    }
}

pub fn generate_anchors(cfg: &AnchorConfig, image: ImageSize) -> Vec<BBox> {
    AnchorGrid::new(cfg, image).anchors()
}

pub const HISTOGRAM_BINS: usize = 10;

/// How well ground truths are covered by anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub total_gt: usize,
    pub thresholds: Vec<f64>,
    /// Number of ground truths whose best anchor IoU reaches each threshold.
    pub matched: Vec<usize>,
    /// Best anchor IoU of every ground truth, in input order.
    pub max_ious: Vec<f64>,
}

impl MatchReport {
    pub fn from_max_ious(max_ious: Vec<f64>, thresholds: &[f64]) -> Self {
        let matched = thresholds
            .iter()
            .map(|&t| max_ious.iter().filter(|&&v| v >= t).count())
            .collect();
        Self {
            total_gt: max_ious.len(),
            thresholds: thresholds.to_vec(),
            matched,
            max_ious,
        }
    }

    /// Matched fraction per threshold; `None` when there are no ground truths.
    pub fn fractions(&self) -> Vec<Option<f64>> {
        self.matched
            .iter()
            .map(|&m| (self.total_gt > 0).then(|| m as f64 / self.total_gt as f64))
            .collect()
    }

    pub fn fraction_at(&self, threshold: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|&t| t == threshold)?;
        self.fractions()[i]
    }

    /// Fraction of ground truths per tenth of best-IoU.
    pub fn histogram(&self) -> Vec<f64> {
        let mut counts = vec![0usize; HISTOGRAM_BINS];
        for &v in &self.max_ious {
            counts[((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        let n = self.total_gt.max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// Concatenates two reports over the same thresholds.
    pub fn merge(mut self, other: MatchReport) -> Result<MatchReport> {
        if self.thresholds != other.thresholds {
            return Err(Error::InvalidArgument(
                "cannot merge match reports with different thresholds".into(),
            ));
        }
        self.total_gt += other.total_gt;
        for (a, b) in self.matched.iter_mut().zip(other.matched) {
            *a += b;
        }
        self.max_ious.extend(other.max_ious);
        Ok(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let fractions: serde_json::Map<String, serde_json::Value> = self
            .thresholds
            .iter()
            .zip(self.fractions())
            .map(|(t, f)| {
                (
                    format!("{t}"),
                    f.map_or(serde_json::Value::Null, serde_json::Value::from),
                )
            })
            .collect();
        serde_json::json!({
            "total_gt": self.total_gt,
            "fractions": fractions,
            "histogram": self.histogram(),
        })
    }
}

/// Brute-force statistics: every ground truth against every anchor.
pub fn match_stats(gts: &[BBox], anchors: &[BBox], thresholds: &[f64]) -> MatchReport {
    let max_ious = gts
        .iter()
        .map(|g| anchors.iter().map(|a| iou(g, a)).fold(0.0, f64::max))
        .collect();
    MatchReport::from_max_ious(max_ious, thresholds)
}

/// Matching statistics over a whole dataset with every image rescaled to
/// `spec`. Crowd annotations are skipped.
pub fn dataset_match_stats(
    ds: &Dataset,
    spec: ResolutionSpec,
    cfg: &AnchorConfig,
    thresholds: &[f64],
) -> MatchReport {
    let grouped = ds.grouped();
    let per_image: Vec<Vec<f64>> = grouped
        .par_iter()
        .map(|(img, anns)| {
            let size = img.size();
            let factor = scale_factor(size, spec);
            let scaled = ImageSize {
                width: ((size.width as f64 * factor).round() as u32).max(1),
                height: ((size.height as f64 * factor).round() as u32).max(1),
            };
            let grid = AnchorGrid::new(cfg, scaled);
            anns.iter()
                .filter(|a| !a.iscrowd)
                .map(|a| grid.max_iou(&a.bbox.scale_unchecked(factor)))
                .collect()
        })
        .collect();
    MatchReport::from_max_ious(per_image.into_iter().flatten().collect(), thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn size(w: u32, h: u32) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    #[test]
    fn single_cell_anchor() {
        let cfg = AnchorConfig {
            scales: vec![32.0],
            aspect_ratios: vec![1.0],
            stride: 16,
        };
        assert_eq!(
            generate_anchors(&cfg, size(16, 16)),
            vec![BBox::new(-8.0, -8.0, 32.0, 32.0)]
        );
    }

    #[test]
    fn default_grid_count() {
        assert_eq!(
            generate_anchors(&AnchorConfig::default(), size(800, 1200)).len(),
            56_250
        );
    }

    #[test]
    fn ratio_shapes() {
        let shapes = AnchorConfig::default().shapes();
        assert!(shapes.contains(&(32.0, 32.0)));
        for (w, h) in shapes {
            let side = (w * h).sqrt();
            assert!(AnchorConfig::default()
                .scales
                .iter()
                .any(|s| (s - side).abs() < 1e-9));
        }
    }

    #[test]
    fn config_validation() {
        assert!(AnchorConfig::default().validate().is_ok());
        assert!(AnchorConfig::improved().validate().is_ok());
        let bad = AnchorConfig {
            scales: vec![64.0, 32.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AnchorConfig {
            stride: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn match_examples() {
        let anchors = generate_anchors(&AnchorConfig::default(), size(64, 64));
        let report = match_stats(&[anchors[3]], &anchors, &[0.5, 0.7]);
        assert_eq!(report.max_ious, vec![1.0]);
        assert_eq!(report.fractions(), vec![Some(1.0), Some(1.0)]);

        let tiny = BBox::new(100.0, 100.0, 1.0, 1.0);
        let grid = AnchorGrid::new(&AnchorConfig::default(), size(800, 1200));
        let best = grid.max_iou(&tiny);
        // bounded by the area ratio against the smallest anchor
        assert!(best <= 1.0 / (32.0 * 32.0) + 1e-12);
        assert!(best < 0.01);
        let report = MatchReport::from_max_ious(vec![best], &[0.5, 0.7]);
        assert_eq!(report.matched, vec![0, 0]);

        let empty = match_stats(&[], &anchors, &[0.5, 0.7]);
        assert_eq!(empty.total_gt, 0);
        assert_eq!(empty.fractions(), vec![None, None]);
        assert_eq!(empty.to_json()["fractions"]["0.5"], serde_json::Value::Null);
    }

    #[test]
    fn report_json_layout() {
        let r = MatchReport::from_max_ious(vec![0.95, 0.6, 0.1], &[0.5, 0.7]);
        let v = r.to_json();
        assert_eq!(v["total_gt"], 3);
        assert!((v["fractions"]["0.5"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((v["fractions"]["0.7"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(v["histogram"].as_array().unwrap().len(), HISTOGRAM_BINS);
    }

    fn arb_gt() -> impl Strategy<Value = BBox> {
        (
            -20.0..300.0f64,
            -20.0..300.0f64,
            0.5..400.0f64,
            0.5..400.0f64,
        )
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn fast_max_iou_equals_brute_force(gt in arb_gt(), w in 16u32..320, h in 16u32..320) {
            let cfg = AnchorConfig::default();
            let grid = AnchorGrid::new(&cfg, size(w, h));
            let brute = match_stats(&[gt], &grid.anchors(), &[0.5]).max_ious[0];
            prop_assert!((grid.max_iou(&gt) - brute).abs() < 1e-12, "fast {} brute {}", grid.max_iou(&gt), brute);
        }

        #[test]
        fn fractions_non_increasing(ious in prop::collection::vec(0.0..1.0f64, 1..50)) {
            let r = MatchReport::from_max_ious(ious, &[0.1, 0.3, 0.5, 0.7, 0.9]);
            let f: Vec<f64> = r.fractions().into_iter().map(Option::unwrap).collect();
            prop_assert!(f.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn more_scales_never_hurt(gt in arb_gt()) {
            let img = size(256, 256);
            let base = AnchorGrid::new(&AnchorConfig::default(), img).max_iou(&gt);
            let more = AnchorGrid::new(&AnchorConfig::improved(), img).max_iou(&gt);
            prop_assert!(more >= base);
        }

        #[test]
        fn anchor_order_irrelevant(gts in prop::collection::vec(arb_gt(), 1..5), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let anchors = generate_anchors(&AnchorConfig::default(), size(96, 96));
            let mut shuffled = anchors.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(match_stats(&gts, &anchors, &[0.5, 0.7]), match_stats(&gts, &shuffled, &[0.5, 0.7]));
        }

        #[test]
        fn merge_is_concatenation(a in prop::collection::vec(0.0..1.0f64, 0..20), b in prop::collection::vec(0.0..1.0f64, 0..20)) {
            let th = [0.5, 0.7];
            let merged = MatchReport::from_max_ious(a.clone(), &th).merge(MatchReport::from_max_ious(b.clone(), &th)).unwrap();
            let whole = MatchReport::from_max_ious(a.into_iter().chain(b).collect(), &th);
            prop_assert_eq!(merged, whole);
        }
    }
}
