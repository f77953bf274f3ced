//! Sequential vs rayon execution of the data-parallel stages: subject
//! generation, eval-mode trunk features, per-subject prediction and saliency
//! rows. Build with `--no-default-features` to see the fallback path alone.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lpcl::model::{ArchConfig, Mode, ModelParams, Variant};
use lpcl::parallel::{self, Exec};
use lpcl::saliency::saliency_matrix;
use lpcl::synth::{generate_subject, SynthConfig};
use lpcl::training::{predict, trunk_cache, Inputs};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn setup() -> (SynthConfig, ModelParams) {
    let cfg = SynthConfig {
        n_control: 8,
        n_positive: 8,
        ..SynthConfig::default()
    };
    let arch = ArchConfig {
        channels: vec![4, 8, 16, 32],
        ..ArchConfig::default()
    };
    (cfg, ModelParams::init(Variant::CnnRnnLp, &arch, 7).unwrap())
}

fn bench(c: &mut Criterion) {
    let (cfg, params) = setup();
    let subjects: Vec<_> = (0..cfg.n_subjects())
        .map(|i| generate_subject(&cfg, i))
        .collect();
    let mut g = c.benchmark_group("parallel_vs_sequential");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("generate", name), &exec, |b, &e| {
            b.iter(|| parallel::map_range(e, cfg.n_subjects(), |i| generate_subject(&cfg, i)))
        });
        g.bench_with_input(BenchmarkId::new("trunk_cache", name), &exec, |b, &e| {
            b.iter(|| trunk_cache(&params, &subjects, e).unwrap())
        });
        let inputs: Vec<Inputs> = subjects
            .iter()
            .map(|s| Inputs::Volumes(&s.volumes))
            .collect();
        g.bench_with_input(BenchmarkId::new("predict", name), &exec, |b, &e| {
            b.iter(|| predict(&params, &subjects, &inputs, e).unwrap())
        });
        let longest = subjects.iter().max_by_key(|s| s.visits()).unwrap();
        g.bench_with_input(BenchmarkId::new("saliency", name), &exec, |b, &e| {
            b.iter(|| {
                saliency_matrix(&params, &longest.id, &longest.volumes, Mode::Eval, e).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
