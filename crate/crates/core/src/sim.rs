//! Synthetic resolution-quality detector for comparing training protocols.
//!
//! Classification quality peaks when an object's projected side matches the
//! pre-training resolution and falls off as a Gaussian in log-side. A
//! protocol observes every instance at its training resolutions; valid
//! observations build a per-size-bucket competence that rewards seeing many
//! instances, penalizes training on poor-quality (badly scaled) views, and
//! penalizes a quality gap between the training and test views of a bucket.
//! The model is a stand-in, so only orderings between protocols are meaningful.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::filter::{SnipConfig, Stage, ValidRange};
use crate::geometry::ImageSize;
use crate::par::prelude::*;
use crate::pyramid::{scale_factor, ResolutionSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityModel {
    pub pretrain_side: f64,
    pub peak_quality: f64,
    /// Decay per squared log-ratio below the pre-training side.
    pub low_rate: f64,
    /// Decay per squared log-ratio above the pre-training side.
    pub high_rate: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        Self::cnn_b()
    }
}

impl QualityModel {
    /// Network pre-trained at full resolution.
    pub fn cnn_b() -> Self {
        Self {
            pretrain_side: 224.0,
            peak_quality: 0.9,
            low_rate: 0.25,
            high_rate: 0.25,
        }
    }

    /// Network trained on low-resolution inputs: lower, earlier peak.
    pub fn cnn_s() -> Self {
        Self {
            pretrain_side: 48.0,
            peak_quality: 0.8,
            ..Self::cnn_b()
        }
    }

    /// Full-resolution network fine-tuned on upsampled low-resolution inputs.
    pub fn cnn_b_ft() -> Self {
        Self {
            low_rate: 0.1,
            ..Self::cnn_b()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cnn-b" => Ok(Self::cnn_b()),
            "cnn-s" => Ok(Self::cnn_s()),
            "cnn-b-ft" => Ok(Self::cnn_b_ft()),
            other => Err(Error::Config(format!(
                "unknown quality preset {other:?} (cnn-b, cnn-s, cnn-b-ft)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pretrain_side > 0.0 && self.pretrain_side.is_finite()) {
            return Err(Error::Config("pretrain_side must be positive".into()));
        }
        if !(self.peak_quality > 0.0 && self.peak_quality <= 1.0) {
            return Err(Error::Config("peak_quality must be in (0, 1]".into()));
        }
        if !(self.low_rate >= 0.0 && self.high_rate >= 0.0) {
            return Err(Error::Config("decay rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn quality(&self, projected_side: f64) -> f64 {
        if projected_side <= 0.0 {
            return if self.low_rate == 0.0 {
                self.peak_quality
            } else {
                0.0
            };
        }
        let l = (projected_side / self.pretrain_side).ln();
        let rate = if l < 0.0 {
            self.low_rate
        } else {
            self.high_rate
        };
        self.peak_quality * (-rate * l * l).exp()
    }
}

/// One object: its image and its side in original pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub image: ImageSize,
    pub side: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub instances: usize,
    /// Median of side / sqrt(image area).
    pub median_scale: f64,
    /// Standard deviation of the log relative scale.
    pub log_sigma: f64,
    pub image: ImageSize,
    /// Share of images in portrait orientation.
    pub portrait_fraction: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        // sigma fits the 10th/90th percentiles 0.024 and 0.472 around the median
        Self {
            instances: 5000,
            median_scale: 0.106,
            log_sigma: 1.162,
            image: ImageSize {
                width: 640,
                height: 480,
            },
            portrait_fraction: 0.3,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config(
                "population needs at least one instance".into(),
            ));
        }
        if !(self.median_scale > 0.0 && self.median_scale <= 1.0)
            || self.log_sigma.is_nan()
            || self.log_sigma < 0.0
        {
            return Err(Error::Config(
                "population scale parameters out of range".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.portrait_fraction) {
            return Err(Error::Config("portrait_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Log-normal relative scales, clamped to at most 1.
pub fn synthesize_population(cfg: &PopulationConfig, seed: u64) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = LogNormal::new(cfg.median_scale.ln(), cfg.log_sigma)
        .map_err(|e| Error::Config(format!("bad scale distribution: {e}")))?;
    let landscape = cfg.image;
    let portrait = ImageSize {
        width: landscape.height,
        height: landscape.width,
    };
    Ok((0..cfg.instances)
        .map(|_| {
            let image = if rng.random_bool(cfg.portrait_fraction) {
                portrait
            } else {
                landscape
            };
            let rel: f64 = dist.sample(&mut rng).min(1.0);
            Instance {
                image,
                side: rel * image.area().sqrt(),
            }
        })
        .collect())
}

/// Non-crowd instances of a dataset with positive area.
pub fn population_from_dataset(ds: &Dataset) -> Vec<Instance> {
    ds.grouped()
        .into_iter()
        .flat_map(|(img, anns)| {
            anns.into_iter()
                .filter(|a| !a.iscrowd && a.bbox.area() > 0.0)
                .map(move |a| Instance {
                    image: img.size(),
                    side: a.bbox.side(),
                })
        })
        .collect()
}

/// A resolution and the original-side range admitted there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub spec: ResolutionSpec,
    #[serde(default)]
    pub range: Option<ValidRange>,
}

impl Gate {
    fn open(spec: ResolutionSpec) -> Self {
        Self { spec, range: None }
    }

    fn admits(&self, side: f64) -> bool {
        self.range.is_none_or(|r| r.contains(side))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub name: String,
    pub train: Vec<Gate>,
    /// Each test instance is scored at the best admitting gate.
    pub test: Vec<Gate>,
}

impl Protocol {
    /// The five protocols compared for small-object detection, built from
    /// `[low, mid, high]` resolutions and the matching SNIP ranges.
    pub fn small_object_protocols_with(
        specs: [ResolutionSpec; 3],
        snip_ranges: [ValidRange; 3],
        small_limit: f64,
    ) -> Result<Vec<Protocol>> {
        let [_, mid, high] = specs;
        let lt = ValidRange::new(0.0, small_limit)?;
        let snip: Vec<Gate> = specs
            .iter()
            .zip(snip_ranges)
            .map(|(&spec, r)| Gate {
                spec,
                range: Some(r),
            })
            .collect();
        let test_high = vec![Gate::open(high)];
        let p = |name: &str, train: Vec<Gate>, test: Vec<Gate>| Protocol {
            name: name.to_string(),
            train,
            test,
        };
        Ok(vec![
            p("800_all", vec![Gate::open(mid)], test_high.clone()),
            p("1400_all", vec![Gate::open(high)], test_high.clone()),
            p(
                "1400_lt80",
                vec![Gate {
                    spec: high,
                    range: Some(lt),
                }],
                test_high.clone(),
            ),
            p(
                "MST",
                specs.iter().map(|&s| Gate::open(s)).collect(),
                test_high,
            ),
            p("SNIP", snip.clone(), snip),
        ])
    }

    /// [`Protocol::small_object_protocols_with`] at the default pyramid and RCN ranges of `cfg`.
    pub fn small_object_protocols(cfg: &SnipConfig) -> Result<Vec<Protocol>> {
        let specs: [ResolutionSpec; 3] = ResolutionSpec::default_pyramid()
            .try_into()
            .expect("default pyramid has three levels");
        let ranges = [
            cfg.range(Stage::Rcn, specs[0])?,
            cfg.range(Stage::Rcn, specs[1])?,
            cfg.range(Stage::Rcn, specs[2])?,
        ];
        Self::small_object_protocols_with(specs, ranges, 80.0)
    }

    pub fn validate(&self, known: &[ResolutionSpec]) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Config(format!(
                "protocol {} needs train and test resolutions",
                self.name
            )));
        }
        for g in self.train.iter().chain(&self.test) {
            if !known.contains(&g.spec) {
                return Err(Error::Config(format!(
                    "protocol {} references unknown resolution {}",
                    self.name, g.spec
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompetenceModel {
    /// Diminishing-returns curvature of instance coverage.
    pub kappa: f64,
    /// Penalty on mean badness of training views.
    pub beta: f64,
    /// Penalty on the train/test quality gap within a bucket.
    pub beta_bucket: f64,
    /// Original-side edges between small/medium and medium/large.
    pub bucket_edges: [f64; 2],
}

impl Default for CompetenceModel {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            beta: 0.5,
            beta_bucket: 0.25,
            bucket_edges: [32.0, 96.0],
        }
    }
}

impl CompetenceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.beta >= 0.0 && self.beta_bucket >= 0.0) {
            return Err(Error::Config(
                "competence model needs kappa > 0 and non-negative penalties".into(),
            ));
        }
        let [a, b] = self.bucket_edges;
        if !(0.0 < a && a < b) {
            return Err(Error::Config(
                "bucket edges must satisfy 0 < small < large".into(),
            ));
        }
        Ok(())
    }

    fn bucket(&self, side: f64) -> usize {
        self.bucket_edges.iter().take_while(|&&e| side >= e).count()
    }

    fn coverage_gain(&self, v: f64) -> f64 {
        (1.0 - (-self.kappa * v).exp()) / (1.0 - (-self.kappa).exp())
    }
}

pub const BUCKETS: [&str; 3] = ["small", "medium", "large"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolScore {
    pub name: String,
    /// Small-object score.
    pub score: Option<f64>,
    /// Scores per bucket, in [`BUCKETS`] order.
    pub buckets: Vec<Option<f64>>,
    /// Fraction of instances used in training at least once.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub instances: usize,
    pub protocols: Vec<ProtocolScore>,
}

impl SimReport {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.protocols
            .iter()
            .find(|p| p.name == name)
            .and_then(|p| p.score)
    }
}

impl fmt::Display for SimReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", v * 100.0));
        write!(f, "{:<12}", "")?;
        for p in &self.protocols {
            write!(f, "{:>10}", p.name)?;
        }
        writeln!(f)?;
        let mut rows = vec![(
            "small".to_string(),
            self.protocols.iter().map(|p| p.score).collect::<Vec<_>>(),
        )];
        for (b, name) in BUCKETS.iter().enumerate().skip(1) {
            rows.push((
                name.to_string(),
                self.protocols.iter().map(|p| p.buckets[b]).collect(),
            ));
        }
        for (label, values) in rows {
            write!(f, "{label:<12}")?;
            for v in values {
                write!(f, "{:>10}", pct(v))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct Factors(BTreeMap<(ImageSize, ResolutionSpec), f64>);

impl Factors {
    fn new(pop: &[Instance], specs: impl Iterator<Item = ResolutionSpec> + Clone) -> Self {
        let mut map = BTreeMap::new();
        for inst in pop {
            for spec in specs.clone() {
                map.entry((inst.image, spec))
                    .or_insert_with(|| scale_factor(inst.image, spec));
            }
        }
        Self(map)
    }

    fn get(&self, image: ImageSize, spec: ResolutionSpec) -> f64 {
        self.0[&(image, spec)]
    }
}

pub fn simulate_protocol(
    pop: &[Instance],
    proto: &Protocol,
    qm: &QualityModel,
    cm: &CompetenceModel,
) -> Result<ProtocolScore> {
    if pop.is_empty() {
        return Err(Error::InvalidArgument(
            "simulation needs a non-empty population".into(),
        ));
    }
    qm.validate()?;
    cm.validate()?;
    let factors = Factors::new(pop, proto.train.iter().chain(&proto.test).map(|g| g.spec));
    let n = pop.len() as f64;
    let k = proto.train.len() as f64;
    let peak = qm.peak_quality;

    let q_test: Vec<f64> = pop
        .iter()
        .map(|inst| {
            proto
                .test
                .iter()
                .filter(|g| g.admits(inst.side))
                .map(|g| qm.quality(inst.side * factors.get(inst.image, g.spec)))
                .fold(0.0, f64::max)
        })
        .collect();

    let mut used = vec![false; pop.len()];
    let mut badness = 0.0;
    let mut gap = [0.0f64; 3];
    let mut trained = [false; 3];
    let mut bucket_sizes = [0usize; 3];
    for (i, inst) in pop.iter().enumerate() {
        let b = cm.bucket(inst.side);
        bucket_sizes[b] += 1;
        for g in proto.train.iter().filter(|g| g.admits(inst.side)) {
            let q = qm.quality(inst.side * factors.get(inst.image, g.spec));
            used[i] = true;
            trained[b] = true;
            badness += 1.0 - q / peak;
            gap[b] += (q - q_test[i]).abs() / peak;
        }
    }
    let coverage = used.iter().filter(|&&u| u).count() as f64 / n;
    let h = badness / (n * k);
    let gain = cm.coverage_gain(coverage);
    let competence: Vec<f64> = (0..3)
        .map(|b| {
            if !trained[b] {
                return 0.0;
            }
            let m = gap[b] / (bucket_sizes[b] as f64 * k);
            gain * (-cm.beta * h - cm.beta_bucket * m).exp()
        })
        .collect();

    let mut sums = [0.0f64; 3];
    for (inst, q) in pop.iter().zip(&q_test) {
        let b = cm.bucket(inst.side);
        sums[b] += competence[b] * q;
    }
    let buckets: Vec<Option<f64>> = (0..3)
        .map(|b| (bucket_sizes[b] > 0).then(|| (sums[b] / bucket_sizes[b] as f64).clamp(0.0, 1.0)))
        .collect();
    Ok(ProtocolScore {
        name: proto.name.clone(),
        score: buckets[0],
        buckets,
        coverage,
    })
}

/// Runs every protocol on one population. Protocols must only reference
/// resolutions in `known`.
pub fn simulate(
    pop: &[Instance],
    protocols: &[Protocol],
    qm: &QualityModel,
    cm: &CompetenceModel,
    known: &[ResolutionSpec],
) -> Result<SimReport> {
    for p in protocols {
        p.validate(known)?;
    }
    let scores: Vec<Result<ProtocolScore>> = protocols
        .par_iter()
        .map(|p| simulate_protocol(pop, p, qm, cm))
        .collect();
    Ok(SimReport {
        instances: pop.len(),
        protocols: scores.into_iter().collect::<Result<_>>()?,
    })
}
