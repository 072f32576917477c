//! COCO instances and results ingestion, plus relative-scale statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::fusion::Detection;
use crate::geometry::{BBox, ImageSize};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

impl ImageRecord {
    pub fn size(&self) -> ImageSize {
        ImageSize {
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    #[serde(default)]
    pub name: String,
}

/// Ground-truth instance. `area` is the COCO area field (mask area when the
/// source had masks), falling back to `w * h` when absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub area: f64,
    #[serde(serialize_with = "ser_crowd")]
    pub iscrowd: bool,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: BBox,
    #[serde(default)]
    area: Option<f64>,
    #[serde(default, deserialize_with = "de_crowd")]
    iscrowd: bool,
}

impl<'de> Deserialize<'de> for Annotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawAnnotation::deserialize(d)?;
        Ok(Annotation {
            id: raw.id,
            image_id: raw.image_id,
            category_id: raw.category_id,
            area: raw.area.unwrap_or_else(|| raw.bbox.area()),
            bbox: raw.bbox,
            iscrowd: raw.iscrowd,
        })
    }
}

fn ser_crowd<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(*v as u8)
}

fn de_crowd<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u64),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::Bool(b) => b,
        Flag::Int(i) => i != 0,
    })
}

#[derive(Deserialize)]
struct RawDataset {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<Annotation>,
    #[serde(default)]
    categories: Vec<Category>,
}

/// Cross-referenced COCO instances file.
#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(skip)]
    image_index: HashMap<u64, usize>,
    #[serde(skip)]
    by_image: BTreeMap<u64, Vec<usize>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.annotations == other.annotations
            && self.categories == other.categories
    }
}

fn describe_ids(ids: &BTreeSet<u64>) -> String {
    let shown: Vec<String> = ids.iter().take(8).map(u64::to_string).collect();
    let more = if ids.len() > 8 {
        format!(" (+{} more)", ids.len() - 8)
    } else {
        String::new()
    };
    format!("{}{more}", shown.join(", "))
}

impl Dataset {
    /// Builds and cross-references a dataset; dangling or duplicate ids fail.
    pub fn from_parts(
        images: Vec<ImageRecord>,
        annotations: Vec<Annotation>,
        categories: Vec<Category>,
    ) -> Result<Self> {
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Integrity(format!("image {} has zero size", img.id)));
            }
            if image_index.insert(img.id, i).is_some() {
                return Err(Error::Integrity(format!("duplicate image id {}", img.id)));
            }
        }
        let category_ids: BTreeSet<u64> = categories.iter().map(|c| c.id).collect();
        if category_ids.len() != categories.len() {
            return Err(Error::Integrity("duplicate category ids".into()));
        }

        let mut missing_images = BTreeSet::new();
        let mut missing_categories = BTreeSet::new();
        let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, ann) in annotations.iter().enumerate() {
            if !image_index.contains_key(&ann.image_id) {
                missing_images.insert(ann.image_id);
            }
            if !category_ids.contains(&ann.category_id) {
                missing_categories.insert(ann.category_id);
            }
            by_image.entry(ann.image_id).or_default().push(i);
        }
        if !missing_images.is_empty() {
            return Err(Error::Integrity(format!(
                "annotations reference missing image ids: {}",
                describe_ids(&missing_images)
            )));
        }
        if !missing_categories.is_empty() {
            return Err(Error::Integrity(format!(
                "annotations reference missing category ids: {}",
                describe_ids(&missing_categories)
            )));
        }
        Ok(Self {
            images,
            annotations,
            categories,
            image_index,
            by_image,
        })
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawDataset =
            serde_json::from_str(text).map_err(|e| parse_error(text, origin, &e))?;
        Self::from_parts(raw.images, raw.annotations, raw.categories)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn image_size(&self, id: u64) -> Option<ImageSize> {
        self.image(id).map(ImageRecord::size)
    }

    pub fn has_category(&self, id: u64) -> bool {
        self.categories.iter().any(|c| c.id == id)
    }

    /// Annotations of one image, in file order.
    pub fn annotations_of(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.annotations[i])
    }

    /// Images sorted by id, each with its annotations.
    pub fn grouped(&self) -> Vec<(&ImageRecord, Vec<&Annotation>)> {
        let mut images: Vec<&ImageRecord> = self.images.iter().collect();
        images.sort_by_key(|img| img.id);
        images
            .into_iter()
            .map(|img| (img, self.annotations_of(img.id).collect()))
            .collect()
    }

    /// Soft invariant violations: boxes overrunning their image by more than
    /// 2 px, and areas disagreeing with `w * h` by more than 50%.
    pub fn soft_violations(&self) -> Vec<String> {
        const OVERRUN_PX: f64 = 2.0;
        let mut out = Vec::new();
        for ann in &self.annotations {
            let Some(img) = self.image(ann.image_id) else {
                continue;
            };
            let b = &ann.bbox;
            if b.x < -OVERRUN_PX
                || b.y < -OVERRUN_PX
                || b.x2() > img.width as f64 + OVERRUN_PX
                || b.y2() > img.height as f64 + OVERRUN_PX
            {
                out.push(format!("annotation {} overruns image {}", ann.id, img.id));
            }
            if !ann.iscrowd {
                if ann.area <= 0.0 {
                    out.push(format!("annotation {} has non-positive area", ann.id));
                } else if (ann.area - b.area()).abs() / ann.area > 0.5 {
                    out.push(format!(
                        "annotation {} area {} far from box area {}",
                        ann.id,
                        ann.area,
                        b.area()
                    ));
                }
            }
        }
        out
    }

    /// Checks that every detection refers to a known image and category.
    pub fn check_results(&self, dets: &[Detection]) -> Result<()> {
        let mut missing_images = BTreeSet::new();
        let mut missing_categories = BTreeSet::new();
        let categories: BTreeSet<u64> = self.categories.iter().map(|c| c.id).collect();
        for d in dets {
            if !self.image_index.contains_key(&d.image_id) {
                missing_images.insert(d.image_id);
            }
            if !categories.contains(&d.category_id) {
                missing_categories.insert(d.category_id);
            }
        }
        if !missing_images.is_empty() {
            return Err(Error::Integrity(format!(
                "detections reference unknown image ids: {}",
                describe_ids(&missing_images)
            )));
        }
        if !missing_categories.is_empty() {
            return Err(Error::Integrity(format!(
                "detections reference unknown category ids: {}",
                describe_ids(&missing_categories)
            )));
        }
        Ok(())
    }
}

fn parse_error(text: &str, origin: &Path, e: &serde_json::Error) -> Error {
    // serde_json reports 1-based line and column
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    Error::Parse {
        path: origin.to_path_buf(),
        offset: offset.min(text.len()),
        message: e.to_string(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    Dataset::from_json_str(&read(path)?, path)
}

/// Parses a COCO results array. Scores must lie in `[0, 1]`.
pub fn parse_results(text: &str, origin: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> =
        serde_json::from_str(text).map_err(|e| parse_error(text, origin, &e))?;
    if let Some((i, d)) = dets
        .iter()
        .enumerate()
        .find(|(_, d)| !(0.0..=1.0).contains(&d.score))
    {
        return Err(Error::Integrity(format!(
            "detection #{i} on image {} has score {} outside [0, 1]",
            d.image_id, d.score
        )));
    }
    Ok(dets)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    parse_results(&read(path)?, path)
}

pub fn results_to_json(dets: &[Detection]) -> String {
    serde_json::to_string(dets).expect("detections serialize")
}

/// Which area a relative scale is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    #[default]
    AnnotationArea,
    BoxArea,
}

pub const HISTOGRAM_BINS: usize = 100;
const SCALE_TOLERANCE: f64 = 1e-6;

/// Distribution of `sqrt(object area / image area)` over non-crowd
/// instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleStats {
    pub count: usize,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    /// Sorted relative scales, clamped to `(0, 1]`.
    #[serde(skip)]
    pub scales: Vec<f64>,
    /// Fraction of instances per bin over `[0, 1]`.
    pub histogram: Vec<f64>,
    /// Annotations whose relative scale exceeded 1 or whose area was not
    /// positive; they are clamped or skipped and listed here.
    pub violations: Vec<u64>,
}

impl ScaleStats {
    pub fn quantile(&self, p: f64) -> f64 {
        quantile_sorted(&self.scales, p)
    }
}

/// Empirical quantile: the midpoint of `{x : F(x) = p}` when the empirical
/// CDF is flat at `p`, otherwise the first order statistic reaching `p`.
/// Depends only on the empirical distribution, so duplicating a sample
/// leaves every quantile unchanged.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let n = sorted.len();
    let g = p.clamp(0.0, 1.0) * n as f64;
    let k = g.round();
    if (g - k).abs() <= 1e-9 * n as f64 {
        let k = k as usize;
        if k == 0 {
            return sorted[0];
        }
        if k >= n {
            return sorted[n - 1];
        }
        return (sorted[k - 1] + sorted[k]) / 2.0;
    }
    sorted[(g.ceil() as usize).clamp(1, n) - 1]
}

pub fn scale_stats(ds: &Dataset, source: ScaleSource) -> Result<ScaleStats> {
    let mut scales = Vec::new();
    let mut violations = Vec::new();
    for ann in ds.annotations.iter().filter(|a| !a.iscrowd) {
        let Some(img) = ds.image(ann.image_id) else {
            continue;
        };
        let area = match source {
            ScaleSource::AnnotationArea => ann.area,
            ScaleSource::BoxArea => ann.bbox.area(),
        };
        if area <= 0.0 {
            violations.push(ann.id);
            continue;
        }
        let rel = (area / img.size().area()).sqrt();
        if rel > 1.0 + SCALE_TOLERANCE {
            violations.push(ann.id);
        }
        scales.push(rel.min(1.0));
    }
    if scales.is_empty() {
        return Err(Error::EmptyStats);
    }
    scales.sort_by(f64::total_cmp);

    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &s in &scales {
        let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    let n = scales.len() as f64;
    Ok(ScaleStats {
        count: scales.len(),
        median: quantile_sorted(&scales, 0.5),
        p10: quantile_sorted(&scales, 0.1),
        p90: quantile_sorted(&scales, 0.9),
        histogram: counts.into_iter().map(|c| c as f64 / n).collect(),
        scales,
        violations,
    })
}
