//! Scale-validity decisions per pyramid level.
//!
//! Every decision is made on the object's size in the original image, never
//! on its size after rescaling. Ranges are closed at both ends.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Annotation;
use crate::fusion::Detection;
use crate::geometry::{iou, BBox, SizeMeasure};
use crate::pyramid::{PyramidLevel, ResolutionSpec};
use crate::{Error, Result};

/// Closed interval `[lo, hi]` of original-image object sizes; `hi` may be
/// infinite. Serializes as `{"lo", "hi"}` with `hi: null` when unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRange", into = "RawRange")]
pub struct ValidRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    lo: f64,
    hi: Option<f64>,
}

impl TryFrom<RawRange> for ValidRange {
    type Error = Error;

    fn try_from(raw: RawRange) -> Result<Self> {
        ValidRange::new(raw.lo, raw.hi.unwrap_or(f64::INFINITY))
    }
}

impl From<ValidRange> for RawRange {
    fn from(r: ValidRange) -> Self {
        RawRange {
            lo: r.lo,
            hi: r.hi.is_finite().then_some(r.hi),
        }
    }
}

impl ValidRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo < hi) || lo.is_nan() || hi.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "valid range needs 0 <= lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded_above(lo: f64) -> Result<Self> {
        Self::new(lo, f64::INFINITY)
    }

    #[inline]
    pub fn contains(&self, size: f64) -> bool {
        self.lo <= size && size <= self.hi
    }

    pub fn classify(&self, size: f64) -> Reason {
        if size < self.lo {
            Reason::BelowRange
        } else if size > self.hi {
            Reason::AboveRange
        } else {
            Reason::InRange
        }
    }
}

impl fmt::Display for ValidRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.hi.is_infinite() {
            write!(f, "[{}, inf]", self.lo)
        } else {
            write!(f, "[{}, {}]", self.lo, self.hi)
        }
    }
}

/// Whether `b` (original frame) has a side length inside `r`.
pub fn box_validity(b: &BBox, r: &ValidRange) -> bool {
    r.contains(SizeMeasure::Side.measure(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    InRange,
    BelowRange,
    AboveRange,
    NearInvalidGt,
}

impl Reason {
    pub fn is_valid(self) -> bool {
        self == Reason::InRange
    }
}

/// Auditable record of one validity decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub id: u64,
    pub level: String,
    pub side: f64,
    pub valid: bool,
    pub reason: Reason,
}

/// Per-level ranges are keyed by their resolution spec.
pub type LevelRanges = BTreeMap<ResolutionSpec, ValidRange>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnipConfig {
    #[serde(with = "level_ranges_serde")]
    pub rcn_ranges: LevelRanges,
    #[serde(with = "level_ranges_serde")]
    pub rpn_ranges: LevelRanges,
    pub anchor_invalidate_iou: f64,
    pub proposal_label_iou: f64,
    pub size_measure: SizeMeasure,
}

impl Default for SnipConfig {
    fn default() -> Self {
        let [low, mid, high] = default_specs();
        let rcn: LevelRanges = [
            (high, ValidRange { lo: 0.0, hi: 80.0 }),
            (
                mid,
                ValidRange {
                    lo: 40.0,
                    hi: 160.0,
                },
            ),
            (
                low,
                ValidRange {
                    lo: 120.0,
                    hi: f64::INFINITY,
                },
            ),
        ]
        .into_iter()
        .collect();
        let mut rpn = rcn.clone();
        rpn.insert(mid, ValidRange { lo: 0.0, hi: 160.0 });
        Self {
            rcn_ranges: rcn,
            rpn_ranges: rpn,
            anchor_invalidate_iou: 0.3,
            proposal_label_iou: 0.5,
            size_measure: SizeMeasure::Side,
        }
    }
}

fn default_specs() -> [ResolutionSpec; 3] {
    [
        ResolutionSpec::new_unchecked(480, 800),
        ResolutionSpec::new_unchecked(800, 1200),
        ResolutionSpec::new_unchecked(1400, 2000),
    ]
}

/// Which network's ranges a decision uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rcn,
    Rpn,
}

impl SnipConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("anchor_invalidate_iou", self.anchor_invalidate_iou),
            ("proposal_label_iou", self.proposal_label_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn ranges(&self, stage: Stage) -> &LevelRanges {
        match stage {
            Stage::Rcn => &self.rcn_ranges,
            Stage::Rpn => &self.rpn_ranges,
        }
    }

    pub fn range(&self, stage: Stage, level: ResolutionSpec) -> Result<ValidRange> {
        self.ranges(stage)
            .get(&level)
            .copied()
            .ok_or_else(|| Error::Config(format!("no {stage:?} validity range for level {level}")))
    }

    /// Object size of `b` under the configured measure.
    pub fn size_of(&self, b: &BBox) -> f64 {
        self.size_measure.measure(b)
    }

    pub fn is_valid(&self, stage: Stage, level: ResolutionSpec, b: &BBox) -> Result<bool> {
        Ok(self.range(stage, level)?.contains(self.size_of(b)))
    }

    pub fn verdict(
        &self,
        stage: Stage,
        level: ResolutionSpec,
        id: u64,
        b: &BBox,
    ) -> Result<ValidityVerdict> {
        let size = self.size_of(b);
        let reason = self.range(stage, level)?.classify(size);
        Ok(ValidityVerdict {
            id,
            level: level.to_string(),
            side: b.side(),
            valid: reason.is_valid(),
            reason,
        })
    }
}

/// Label assigned to one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalLabel {
    /// Category of the best-overlapping ground truth, `None` for background.
    pub category: Option<u64>,
    pub gt_index: Option<usize>,
    pub max_iou: f64,
    /// Whether the proposal participates in training at this level.
    pub valid: bool,
}

/// Labels proposals against all ground truths and flags which ones are
/// valid at `level`. Out-of-range ground truths still assign labels; only the
/// valid flag depends on the ranges.
pub fn label_proposals(
    proposals: &[BBox],
    gts: &[Annotation],
    level: ResolutionSpec,
    cfg: &SnipConfig,
) -> Result<Vec<ProposalLabel>> {
    let range = cfg.range(Stage::Rcn, level)?;
    Ok(proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, gt) in gts.iter().enumerate() {
                let v = iou(p, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let (gt_index, max_iou) = match best {
                Some((i, v)) if v >= cfg.proposal_label_iou => (Some(i), v),
                Some((_, v)) => (None, v),
                None => (None, 0.0),
            };
            ProposalLabel {
                category: gt_index.map(|i| gts[i].category_id),
                gt_index,
                max_iou,
                valid: range.contains(cfg.size_of(p)),
            }
        })
        .collect())
}

/// `mask[i]` is true when anchor `i` overlaps some invalid ground truth by
/// strictly more than `cfg.anchor_invalidate_iou`. Both inputs are in the
/// level's scaled frame.
pub fn invalidate_anchors(anchors: &[BBox], invalid_gts: &[BBox], cfg: &SnipConfig) -> Vec<bool> {
    anchors
        .iter()
        .map(|a| {
            invalid_gts
                .iter()
                .any(|g| iou(a, g) > cfg.anchor_invalidate_iou)
        })
        .collect()
}

/// Ground truths (original frame) that are invalid for RPN training at
/// `level`, mapped into the level's scaled frame.
pub fn invalid_gts_for_level(
    gts: &[BBox],
    level: &PyramidLevel,
    cfg: &SnipConfig,
) -> Result<Vec<BBox>> {
    let range = cfg.range(Stage::Rpn, level.spec)?;
    Ok(gts
        .iter()
        .filter(|g| !range.contains(cfg.size_of(g)))
        .map(|g| level.to_level(g))
        .collect())
}

/// Keeps detections (original frame) that are valid at `level`, in order.
pub fn filter_detections(
    dets: &[Detection],
    level: ResolutionSpec,
    cfg: &SnipConfig,
) -> Result<Vec<Detection>> {
    let range = cfg.range(Stage::Rcn, level)?;
    Ok(dets
        .iter()
        .filter(|d| range.contains(cfg.size_of(&d.bbox)))
        .cloned()
        .collect())
}

mod level_ranges_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        shorter: u32,
        max_side: u32,
        lo: f64,
        /// `null` encodes an unbounded range.
        hi: Option<f64>,
    }

    pub fn serialize<S: Serializer>(
        ranges: &LevelRanges,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = ranges
            .iter()
            .map(|(spec, r)| Entry {
                shorter: spec.shorter,
                max_side: spec.max_side,
                lo: r.lo,
                hi: r.hi.is_finite().then_some(r.hi),
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<LevelRanges, D::Error> {
        use serde::de::Error as _;
        let entries = Vec::<Entry>::deserialize(d)?;
        let mut out = LevelRanges::new();
        for e in entries {
            let spec = ResolutionSpec::new(e.shorter, e.max_side).map_err(D::Error::custom)?;
            let range =
                ValidRange::new(e.lo, e.hi.unwrap_or(f64::INFINITY)).map_err(D::Error::custom)?;
            if out.insert(spec, range).is_some() {
                return Err(D::Error::custom(format!(
                    "duplicate range for level {spec}"
                )));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LOW: ResolutionSpec = ResolutionSpec::new_unchecked(480, 800);
    const MID: ResolutionSpec = ResolutionSpec::new_unchecked(800, 1200);
    const HIGH: ResolutionSpec = ResolutionSpec::new_unchecked(1400, 2000);

    fn square(side: f64) -> BBox {
        BBox::new(10.0, 10.0, side, side)
    }

    fn gt(id: u64, category: u64, b: BBox) -> Annotation {
        Annotation {
            id,
            image_id: 1,
            category_id: category,
            bbox: b,
            area: b.area(),
            iscrowd: false,
        }
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection::new(1, 1, b, score)
    }

    #[test]
    fn box_validity_examples() {
        let cfg = SnipConfig::default();
        let r = |l| cfg.range(Stage::Rcn, l).unwrap();
        assert!(box_validity(&square(60.0), &r(HIGH)));
        assert!(!box_validity(&square(100.0), &r(HIGH)));
        assert!(box_validity(&square(100.0), &r(MID)));
        assert!(box_validity(&square(130.0), &r(LOW)));
    }

    #[test]
    fn rpn_defaults() {
        let cfg = SnipConfig::default();
        assert_eq!(
            cfg.range(Stage::Rpn, MID).unwrap(),
            ValidRange::new(0.0, 160.0).unwrap()
        );
        assert_eq!(
            cfg.range(Stage::Rpn, HIGH).unwrap(),
            cfg.range(Stage::Rcn, HIGH).unwrap()
        );
    }

    #[test]
    fn coverage_sweep() {
        let cfg = SnipConfig::default();
        for side in 0..=500 {
            let b = square(side as f64);
            let n = cfg
                .rcn_ranges
                .keys()
                .filter(|&&l| cfg.is_valid(Stage::Rcn, l, &b).unwrap())
                .count();
            assert!(n >= 1, "side {side} valid nowhere");
            let overlap = (40..=80).contains(&side) || (120..=160).contains(&side);
            assert_eq!(n == 2, overlap, "side {side} valid at {n} levels");
        }
    }

    #[test]
    fn label_proposals_examples() {
        let cfg = SnipConfig::default();
        let in_range = square(50.0);
        let gts = vec![gt(1, 7, in_range)];
        let out = label_proposals(&[in_range], &gts, HIGH, &cfg).unwrap();
        assert_eq!(out[0].category, Some(7));
        assert!(out[0].valid);

        // side-200 proposal with IoU 0.9 to a GT
        let prop = BBox::new(0.0, 0.0, 200.0, 200.0);
        let big_gt = BBox::new(0.0, 0.0, 200.0, 180.0);
        assert!((iou(&prop, &big_gt) - 0.9).abs() < 1e-12);
        let out = label_proposals(&[prop], &[gt(2, 3, big_gt)], HIGH, &cfg).unwrap();
        assert_eq!(out[0].category, Some(3));
        assert!(!out[0].valid);

        // max IoU 0.2, side 50
        let g = BBox::new(0.0, 0.0, 50.0, 50.0);
        let p = BBox::new(100.0 / 3.0, 0.0, 50.0, 50.0);
        assert!((iou(&p, &g) - 0.2).abs() < 1e-12);
        let out = label_proposals(&[p], &[gt(3, 1, g)], HIGH, &cfg).unwrap();
        assert_eq!(out[0].category, None);
        assert!(out[0].valid);

        let unknown = ResolutionSpec::new(600, 1000).unwrap();
        assert!(matches!(
            label_proposals(&[p], &[], unknown, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn anchor_invalidation_is_strict() {
        let cfg = SnipConfig::default();
        let g = BBox::new(0.0, 0.0, 100.0, 100.0);
        // width w overlapping fully inside g: iou = w/100
        let at = |v: f64| BBox::new(0.0, 0.0, 100.0 * v, 100.0);
        let mask = invalidate_anchors(&[at(0.35), at(0.3)], &[g], &cfg);
        assert_eq!(mask, vec![true, false]);
        assert_eq!(invalidate_anchors(&[at(0.9)], &[], &cfg), vec![false]);
    }

    #[test]
    fn invalid_gts_are_scaled() {
        let cfg = SnipConfig::default();
        let level = PyramidLevel {
            spec: HIGH,
            factor: 2.0,
            scaled_width: 10,
            scaled_height: 10,
        };
        let gts = [square(60.0), square(100.0)];
        let invalid = invalid_gts_for_level(&gts, &level, &cfg).unwrap();
        assert_eq!(invalid, vec![square(100.0).scale(2.0).unwrap()]);
    }

    #[test]
    fn filter_detection_examples() {
        let cfg = SnipConfig::default();
        let d = vec![det(square(150.0), 0.9)];
        assert_eq!(filter_detections(&d, MID, &cfg).unwrap().len(), 1);
        assert!(filter_detections(&d, HIGH, &cfg).unwrap().is_empty());
        assert!(filter_detections(&[], HIGH, &cfg).unwrap().is_empty());
        let keep = vec![
            det(square(10.0), 0.1),
            det(square(500.0), 0.5),
            det(square(20.0), 0.3),
        ];
        let out = filter_detections(&keep, HIGH, &cfg).unwrap();
        assert_eq!(
            out.iter().map(|d| d.score).collect::<Vec<_>>(),
            vec![0.1, 0.3]
        );
    }

    #[test]
    fn area_measure_is_a_policy_switch() {
        let cfg = SnipConfig {
            size_measure: SizeMeasure::Area,
            ..SnipConfig::default()
        };
        // 8x8 box has area 64: valid at [0, 80] by area, 9x9 (81) is not
        assert!(cfg.is_valid(Stage::Rcn, HIGH, &square(8.0)).unwrap());
        assert!(!cfg.is_valid(Stage::Rcn, HIGH, &square(9.0)).unwrap());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SnipConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""hi":null"#));
        let back: SnipConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = r#"{"rcn_ranges":[{"shorter":800,"max_side":1200,"lo":50,"hi":10}]}"#;
        assert!(serde_json::from_str::<SnipConfig>(bad).is_err());
        let bad = SnipConfig {
            anchor_invalidate_iou: 1.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn verdict_reasons() {
        let cfg = SnipConfig::default();
        let v = cfg.verdict(Stage::Rcn, MID, 4, &square(10.0)).unwrap();
        assert_eq!((v.valid, v.reason), (false, Reason::BelowRange));
        let v = cfg.verdict(Stage::Rcn, MID, 4, &square(200.0)).unwrap();
        assert_eq!(v.reason, Reason::AboveRange);
        assert_eq!(v.level, "800x1200");
        let line = serde_json::to_string(&cfg.verdict(Stage::Rcn, MID, 4, &square(50.0)).unwrap())
            .unwrap();
        assert_eq!(
            line,
            r#"{"id":4,"level":"800x1200","side":50.0,"valid":true,"reason":"in-range"}"#
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..300.0f64, 0.0..300.0f64, 1.0..200.0f64, 1.0..200.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn validity_is_one_interval(level_idx in 0usize..3) {
            let cfg = SnipConfig::default();
            let level = *cfg.rcn_ranges.keys().nth(level_idx).unwrap();
            let flags: Vec<bool> = (0..600).map(|s| cfg.is_valid(Stage::Rcn, level, &square(s as f64 * 0.5)).unwrap()).collect();
            let switches = flags.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert!(switches <= 2);
            if switches == 2 {
                prop_assert!(!flags[0]);
            }
        }

        #[test]
        fn labels_ignore_ranges(props in prop::collection::vec(arb_box(), 1..10),
                                gts in prop::collection::vec(arb_box(), 0..6),
                                lo in 0.0..100.0f64, width in 1.0..100.0f64) {
            let gts: Vec<Annotation> = gts.into_iter().enumerate().map(|(i, b)| gt(i as u64, i as u64 % 3, b)).collect();
            let default = SnipConfig::default();
            let mut custom = default.clone();
            custom.rcn_ranges.insert(HIGH, ValidRange::new(lo, lo + width).unwrap());
            let a = label_proposals(&props, &gts, HIGH, &default).unwrap();
            let b = label_proposals(&props, &gts, HIGH, &custom).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.category, y.category);
                prop_assert_eq!(x.gt_index, y.gt_index);
            }
        }

        #[test]
        fn anchor_mask_monotone(anchors in prop::collection::vec(arb_box(), 1..20),
                                gts in prop::collection::vec(arb_box(), 0..5), extra in arb_box()) {
            let cfg = SnipConfig::default();
            let before = invalidate_anchors(&anchors, &gts, &cfg);
            let mut more = gts.clone();
            more.push(extra);
            let after = invalidate_anchors(&anchors, &more, &cfg);
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(!b || *a);
            }
        }
    }
}
