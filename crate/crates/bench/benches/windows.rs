use chrono::Duration;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use washy::scheduler::{enumerate_windows, window_energy};
use washy::LaundryRequest;
use washy_bench::{clear_days, cloudy_days, start};

fn enumerate(c: &mut Criterion) {
    let now = start() + Duration::hours(7);
    let req = LaundryRequest::new(1000.0, 90).unwrap();
    let mut group = c.benchmark_group("enumerate_windows");
    for (name, series) in [("hourly", clear_days()), ("15min", cloudy_days(15))] {
        for step in [15, 1] {
            group.bench_with_input(BenchmarkId::new(name, format!("step{step}")), &step, |b, &step| {
                b.iter(|| enumerate_windows(black_box(&series), &req, now, step).unwrap());
            });
        }
    }
    group.finish();
}

fn energy(c: &mut Criterion) {
    let series = cloudy_days(15);
    let at = start() + Duration::minutes(10 * 60 + 7);
    c.bench_function("window_energy/240min", |b| {
        b.iter(|| window_energy(black_box(&series), black_box(at), 240));
    });
}

criterion_group!(benches, enumerate, energy);
criterion_main!(benches);
