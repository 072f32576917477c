use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snip_core::anchors::{dataset_match_stats, AnchorConfig};
use snip_core::chips::{sample_dataset_chips, ChipConfig};
use snip_core::dataset::{Annotation, Category, Dataset, ImageRecord};
use snip_core::eval::{evaluate_detections, SizeBins};
use snip_core::fusion::{nms_grouped, soft_nms_grouped, Detection, SoftNmsParams};
use snip_core::par;
use snip_core::{BBox, ResolutionSpec};

fn synthetic(images: u64, per_image: usize, seed: u64) -> (Dataset, Vec<Detection>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anns = Vec::new();
    let mut dets = Vec::new();
    for image_id in 1..=images {
        for _ in 0..per_image {
            let side = (rng.random_range(2.0f64..6.0)).exp();
            let bbox = BBox::new(
                rng.random_range(0.0..640.0 - side),
                rng.random_range(0.0..480.0 - side),
                side,
                side,
            );
            let category_id = rng.random_range(1..=5);
            anns.push(Annotation {
                id: anns.len() as u64 + 1,
                image_id,
                category_id,
                bbox,
                area: bbox.area(),
                iscrowd: false,
            });
            for _ in 0..4 {
                let j = side * 0.2;
                let b = BBox::new(
                    bbox.x + rng.random_range(-j..j),
                    bbox.y + rng.random_range(-j..j),
                    side,
                    side,
                );
                dets.push(Detection::new(
                    image_id,
                    category_id,
                    b,
                    rng.random_range(0.0..1.0),
                ));
            }
        }
    }
    let images = (1..=images)
        .map(|id| ImageRecord {
            id,
            width: 640,
            height: 480,
            file_name: String::new(),
        })
        .collect();
    let cats = (1..=5)
        .map(|id| Category {
            id,
            name: String::new(),
        })
        .collect();
    (Dataset::from_parts(images, anns, cats).unwrap(), dets)
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = rayon::current_num_threads();
    [("rayon-all".to_string(), n), ("rayon-1".to_string(), 1)]
        .into_iter()
        .map(|(name, threads)| {
            (
                name,
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap(),
            )
        })
        .collect()
}

fn run_in<T: Send>(pool: &str, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        thread_local! {
            static POOLS: Vec<(String, rayon::ThreadPool)> = pools();
        }
        POOLS.with(|ps| {
            ps.iter()
                .find(|(n, _)| n == pool)
                .map(|(_, p)| p.install(f))
                .unwrap()
        })
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = pool;
        f()
    }
}

fn pool_names() -> Vec<String> {
    #[cfg(feature = "parallel")]
    {
        pools().into_iter().map(|(n, _)| n).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec!["sequential".to_string()]
    }
}

fn kernels(c: &mut Criterion) {
    let (ds, dets) = synthetic(200, 20, 1);
    let bins = SizeBins::default();
    let anchors = AnchorConfig::default();
    let chip_cfg = ChipConfig::default();
    let spec_800 = ResolutionSpec::new(800, 1200).unwrap();
    let spec_1400 = ResolutionSpec::new(1400, 2000).unwrap();
    let soft = SoftNmsParams::default();

    let mut g = c.benchmark_group(format!("kernels/{}", par::MODE));
    g.sample_size(10);
    for pool in pool_names() {
        g.bench_with_input(BenchmarkId::new("nms", &pool), &pool, |b, p| {
            b.iter(|| run_in(p, || nms_grouped(black_box(dets.clone()), 0.5)))
        });
        g.bench_with_input(BenchmarkId::new("soft_nms", &pool), &pool, |b, p| {
            b.iter(|| run_in(p, || soft_nms_grouped(black_box(dets.clone()), &soft)))
        });
        g.bench_with_input(BenchmarkId::new("anchor_stats", &pool), &pool, |b, p| {
            b.iter(|| {
                run_in(p, || {
                    dataset_match_stats(black_box(&ds), spec_800, &anchors, &[0.5, 0.7])
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("eval", &pool), &pool, |b, p| {
            b.iter(|| {
                run_in(p, || {
                    evaluate_detections(black_box(&ds), &dets, &bins).unwrap()
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("chips", &pool), &pool, |b, p| {
            b.iter(|| {
                run_in(p, || {
                    sample_dataset_chips(black_box(&ds), spec_1400, &chip_cfg).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
