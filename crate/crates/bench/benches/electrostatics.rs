use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use np3m_bench::periodic_system;
use np3m_core::ewald::{ewald_components, tune_params};
use np3m_core::p3m::p3m_total;
use np3m_core::{ChargeAssignment, P3mSettings};

fn ewald_vs_p3m(c: &mut Criterion) {
    let mut group = c.benchmark_group("coulomb");
    group.sample_size(20);
    for atoms in [16, 64, 256] {
        let box_length = 20.0 * (atoms as f64 / 16.0).cbrt();
        let sys = periodic_system(atoms, box_length, 1);
        let params = tune_params(&sys, 1e-6).unwrap();
        group.bench_with_input(BenchmarkId::new("ewald", atoms), &sys, |b, s| {
            b.iter(|| ewald_components(s, &params).unwrap().total)
        });
        let settings = P3mSettings::new([16; 3], ChargeAssignment::new(3).unwrap());
        group.bench_with_input(BenchmarkId::new("p3m", atoms), &sys, |b, s| {
            b.iter(|| p3m_total(s, &params, &settings).unwrap().total)
        });
    }
    group.finish();
}

criterion_group!(benches, ewald_vs_p3m);
criterion_main!(benches);
