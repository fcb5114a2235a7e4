//! Sequential against data-parallel execution for the three batched
//! workloads: batch prediction, training gradients and seed sweeps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use parastep::engines::Denoiser;
use parastep::numerics::{draw_normal, RngStream, StreamPurpose};
use parastep::par::{self, Execution};
use parastep::predictor::{
    loss_and_grad_examples, make_examples, predict_batch_with, Activation, Dataset, PredictorWeights,
};
use parastep::schedule::{NoiseSchedule, Sampler, SigmaMode};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (PredictorWeights, Sampler) {
    let w = PredictorWeights::init(2, 16, &[64, 64], Activation::Silu, 7).unwrap();
    (
        w,
        Sampler::Ddpm(NoiseSchedule::ddpm_default(50, SigmaMode::Posterior).unwrap()),
    )
}

fn forward_batch(c: &mut Criterion) {
    let (w, s) = setup();
    let mut g = c.benchmark_group("forward_batch");
    for n in [64, 1024] {
        let mut rng = RngStream::for_purpose(1, StreamPurpose::InitialSample, 0);
        let xs: Vec<_> = (0..n).map(|_| draw_normal(&mut rng, 2)).collect();
        let ts: Vec<_> = (0..n).map(|i| s.step(1 + i % 50).unwrap()).collect();
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| black_box(predict_batch_with(&w, exec, &xs, &ts).unwrap()))
            });
        }
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let (w, s) = setup();
    let mut g = c.benchmark_group("loss_and_grad");
    for n in [128, 1024] {
        let mut rng = RngStream::for_purpose(2, StreamPurpose::DataBatch, 0);
        let x0s = Dataset::Gauss8.sample(&mut rng, n);
        let examples = make_examples(&x0s, &s, &mut rng).unwrap();
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| black_box(loss_and_grad_examples(&w, &examples, exec).unwrap()))
            });
        }
    }
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let (w, s) = setup();
    let d = Denoiser::new(&w, &s);
    let mut g = c.benchmark_group("seed_sweep");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 64), |b| {
            b.iter(|| black_box(par::try_map_range(exec, 64, |i| d.parastep(i as u64, 5, 4)).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, forward_batch, gradients, seed_sweep);
criterion_main!(benches);
