use std::f64::consts::FRAC_PI_2;
use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rdctl::feasibility::{sector_sweep, SearchOptions, SweepConfig, TheoremId};
use rdctl::spectral::ReducedPlant;
use rdctl::sturm_liouville::{boundary_traces, OperatorSpec};
use rdctl::synthesis::{observer_bound_study, synthesize, SynthesisOptions};
use rdctl::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn reference() -> OperatorSpec {
    OperatorSpec::new(FRAC_PI_2, 0.0, 1.0, -3.0, 4.0).expect("spec")
}

fn traces(c: &mut Criterion) {
    let spec = reference();
    let mut group = c.benchmark_group("boundary_traces_4096");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(boundary_traces(&spec, 1, 4096, exec).expect("traces")))
        });
    }
    group.finish();
}

fn p_norm(c: &mut Criterion) {
    let plant =
        ReducedPlant::prepare(&reference(), 60, 1 << 15, Execution::Parallel).expect("plant");
    let gains = synthesize(
        &plant.spec,
        &plant.basis,
        &plant.lifting,
        &SynthesisOptions::repro(),
    )
    .expect("gains");
    let mut group = c.benchmark_group("p_norm_n2_to_40");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(
                    observer_bound_study(
                        &plant.spec,
                        &plant.basis,
                        &plant.lifting,
                        &plant.tail,
                        &gains,
                        2..=40,
                        exec,
                    )
                    .expect("study"),
                )
            })
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    // Small observer keeps one sample to a few seconds.
    let cfg = SweepConfig {
        theta1: FRAC_PI_2,
        theta2: 0.0,
        p: 1.0,
        q_tildes: vec![-3.0, -5.0, -7.0],
        n: 8,
        synthesis: SynthesisOptions::repro(),
        phi_deriv_bound: 9.02,
        theorem: TheoremId::T3H1Sector,
        n_modes: 20,
        tail_modes: 1 << 16,
    };
    let opts = SearchOptions::default();
    let mut group = c.benchmark_group("sector_sweep_n8");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sector_sweep(&cfg, &opts, exec).expect("sweep")))
        });
    }
    group.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .measurement_time(Duration::from_secs(5))
        .warm_up_time(Duration::from_secs(1))
}

criterion_group! {
    name = benches;
    config = config();
    targets = traces, p_norm, sweep
}
criterion_main!(benches);
