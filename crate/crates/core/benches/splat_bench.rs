//! Forward/backward throughput benchmarks.
//!
//! Build with the default `parallel` feature for the rayon path or with
//! `--no-default-features` for the sequential fallback; group names carry the
//! execution flavor so both runs can be compared side by side. The parallel
//! build additionally sweeps pinned pool sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;
use splat_core::backward::backward_pass;
use splat_core::exec;
use splat_core::forward::{rasterize, ShadingMode};
use splat_core::loss::smape;
use splat_core::regularize::{build_neighbor_graph, compute_frames, repulsion_loss_with_frames};
use splat_core::synth;
use splat_core::{Camera, OptimizationConfig};

fn flavor() -> &'static str {
    if exec::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn thread_counts() -> Vec<usize> {
    if exec::is_parallel() {
        vec![1, 2, 4, 0] // 0 = library default
    } else {
        vec![0]
    }
}

fn scene() -> (splat_core::PointCloud, Camera, OptimizationConfig) {
    let mut cloud = synth::sphere(Vector3::zeros(), 1.0, 5000);
    cloud.assign_sigma_heuristic();
    let camera = Camera::look_at(
        Vector3::new(0.0, 0.0, 4.0),
        Vector3::zeros(),
        256.0,
        256,
        256,
    )
    .unwrap();
    (cloud, camera, OptimizationConfig::default())
}

fn bench_rasterize(c: &mut Criterion) {
    let (cloud, camera, cfg) = scene();
    let mut group = c.benchmark_group(format!("rasterize/{}", flavor()));
    group.sample_size(20);
    for threads in thread_counts() {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("threads-{threads}")),
            &threads,
            |b, &threads| {
                b.iter(|| {
                    exec::with_threads(threads, || {
                        rasterize(&cloud, &camera, ShadingMode::DiffuseThreeSunRgb, &cfg).unwrap()
                    })
                })
            },
        );
    }
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let (cloud, camera, cfg) = scene();
    let mode = ShadingMode::DiffuseThreeSunRgb;
    let (image, cache) = rasterize(&cloud, &camera, mode, &cfg).unwrap();
    // Loss against a shifted reference so pixel gradients are non-trivial.
    let shifted = Camera::look_at(
        Vector3::new(0.4, 0.1, 4.0),
        Vector3::zeros(),
        256.0,
        256,
        256,
    )
    .unwrap();
    let (reference, _) = rasterize(&cloud, &shifted, mode, &cfg).unwrap();
    let (_, grad) = smape(&image.planes, &reference.planes).unwrap();

    let mut group = c.benchmark_group(format!("backward/{}", flavor()));
    group.sample_size(10);
    for threads in thread_counts() {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("threads-{threads}")),
            &threads,
            |b, &threads| {
                b.iter(|| {
                    exec::with_threads(threads, || {
                        backward_pass(
                            &cloud,
                            std::slice::from_ref(&camera),
                            mode,
                            std::slice::from_ref(&cache),
                            std::slice::from_ref(&grad),
                            &cfg,
                        )
                        .unwrap()
                    })
                })
            },
        );
    }
    group.finish();
}

fn bench_regularizers(c: &mut Criterion) {
    let (cloud, _, cfg) = scene();
    let mut group = c.benchmark_group(format!("regularizers/{}", flavor()));
    group.sample_size(20);
    for threads in thread_counts() {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("threads-{threads}")),
            &threads,
            |b, &threads| {
                b.iter(|| {
                    exec::with_threads(threads, || {
                        let graph = build_neighbor_graph(&cloud, &cfg).unwrap();
                        let frames = compute_frames(&cloud, &graph);
                        repulsion_loss_with_frames(&cloud, &graph, &frames)
                    })
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_rasterize, bench_backward, bench_regularizers);
criterion_main!(benches);
