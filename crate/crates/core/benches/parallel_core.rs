//! Single-worker versus default rayon pool on the hot kernels.
//!
//! Build with `--no-default-features` to time the sequential fallback; the
//! group names carry the active backend.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use led_core::camera::{generate_virtual_cameras, sample_noise_instance, ParameterSpace};
use led_core::network::{LedNetwork, NetworkConfig};
use led_core::noise::{synthesize_noisy, SensorLevels};
use led_core::ops::conv3x3;
use led_core::par::{gemm, MatRef};
use led_core::rng::{domain, stream};
use led_core::training::procedural_scene;
use led_core::Tensor;
use rand::Rng;

const BACKEND: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::current_num_threads();
    [(1, "1-thread".to_string()), (default, format!("default-{default}"))]
        .into_iter()
        .map(|(n, label)| (label, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect()
}

fn random(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, domain::INIT, 0);
    let n = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64_slice(dims, &v).unwrap()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("gemm/{BACKEND}"));
    let (m, k, n) = (512, 288, 1024);
    let a = random(&[m * k], 1);
    let b = random(&[k * n], 2);
    let mut out = vec![0f32; m * n];
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("512x288x1024", label), |bench| {
            pool.install(|| {
                bench.iter(|| {
                    gemm(
                        MatRef::row_major(a.data(), m, k),
                        MatRef::row_major(b.data(), k, n),
                        0.0,
                        &mut out,
                    )
                })
            })
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("conv3x3/{BACKEND}"));
    let x = random(&[2, 32, 64, 64], 3);
    let w = random(&[32, 32, 3, 3], 4);
    let b = random(&[32], 5);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("2x32x64x64", label), |bench| {
            pool.install(|| bench.iter(|| conv3x3(&x, &w, &b, None).unwrap()))
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("forward/{BACKEND}"));
    group.sample_size(10);
    let cfg = NetworkConfig { base_width: 16, stages: 4, ..NetworkConfig::default() };
    let net = LedNetwork::<f32>::build(cfg, 5, &mut stream(0, domain::INIT, 0)).unwrap();
    let x = random(&[1, 4, 128, 128], 6);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("multi-branch", &label), |bench| {
            pool.install(|| bench.iter(|| net.forward(&x, Some(0)).unwrap()))
        });
    }
    let deployed = net.deploy_branch(0).unwrap();
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("deployed", &label), |bench| {
            pool.install(|| bench.iter(|| deployed.forward(&x, None).unwrap()))
        });
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("synthesis/{BACKEND}"));
    let cams = generate_virtual_cameras(5, &ParameterSpace::default()).unwrap();
    let clean = procedural_scene::<f32>(256, 256, 0, 0);
    let levels = SensorLevels::default();
    let inst = sample_noise_instance(&cams[0], 100.0, &mut stream(0, domain::SYNTH, 0)).unwrap();
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("256x256", label), |bench| {
            pool.install(|| {
                bench.iter(|| synthesize_noisy(&clean, &inst, &levels, &mut stream(0, domain::SYNTH, 1)).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_forward, bench_synthesis);
criterion_main!(benches);
