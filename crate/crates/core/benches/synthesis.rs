use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dada_core::data::{generate_toy_dataset, ToySpec};
use dada_core::denoiser::{Denoiser, DenoiserArch};
use dada_core::detector::{ToyDetector, ToyDetectorArch};
use dada_core::experiment::JobInputs;
use dada_core::inpaint::{batch_synthesize, BatchConfig};
use dada_core::par::Execution;
use dada_core::schedule::ScheduleConfig;

fn batch_synthesis(c: &mut Criterion) {
    let spec = ToySpec {
        size: 16,
        ..ToySpec::default()
    };
    let items = generate_toy_dataset(8, 1, &spec).unwrap();
    let refs: Vec<_> = items.iter().collect();
    let inputs = JobInputs::new(&refs);
    let jobs = inputs.jobs();
    let den = Denoiser::new(
        DenoiserArch {
            channels: 3,
            base_width: 8,
            temb_dim: 16,
        },
        1,
    );
    let det = ToyDetector::new(
        ToyDetectorArch {
            width: 8,
            ..ToyDetectorArch::for_size(16)
        },
        2,
    );
    let sched = ScheduleConfig::rescaled(10).build().unwrap();
    let mut group = c.benchmark_group("batch_synthesize");
    group.sample_size(10);
    for (name, execution) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        let cfg = BatchConfig {
            execution,
            ..BatchConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| batch_synthesize(&jobs, cfg, &den, &det, &sched))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_synthesis);
criterion_main!(benches);
