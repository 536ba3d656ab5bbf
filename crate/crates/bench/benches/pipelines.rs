//! End-to-end pipeline benchmarks: discrete identification, the
//! nonparametric two-stage fit, and the fractional-imputation MLE.

use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mnar_core::data::Pattern;
use mnar_core::discrete::{recover_joint, solve_xi, DiscreteJoint};
use mnar_core::estimators::parametric::{fit_mle_fractional, FiConfig, ParamModelSpec};
use mnar_core::estimators::{nonpara_tau_with, NonparaConfig};
use mnar_core::sim::{generate_scenario_a, generate_scenario_b};
use mnar_core::smooth::TuningStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_discrete(c: &mut Criterion) {
    // ternary X, five outcome levels, one incomplete pattern
    let levels = vec![vec![0.0, 1.0, 2.0]];
    let y_levels = vec![0.0, 1.0, 2.0, 3.0, 4.0];
    let q = 3;
    let k = 5;
    let mut f_axy = Vec::with_capacity(2 * q * k);
    for i in 0..2 * q * k {
        f_axy.push(1.0 + ((i * 7919) % 23) as f64);
    }
    let tot: f64 = f_axy.iter().sum();
    for v in f_axy.iter_mut() {
        *v /= tot;
    }
    let mut mech = BTreeMap::new();
    mech.insert(Pattern::complete(1), vec![0.6; 2 * q]);
    mech.insert(Pattern::new(vec![0]), vec![0.4; 2 * q]);
    let joint = DiscreteJoint::from_mechanism(levels, y_levels, &f_axy, &mech).unwrap();
    c.bench_function("discrete_solve_recover", |b| {
        b.iter(|| {
            let xi = solve_xi(black_box(&joint), 1e-10).unwrap();
            recover_joint(&joint, &xi).unwrap()
        })
    });
}

fn bench_nonpara(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = generate_scenario_a(400, &mut rng);
    let cfg = NonparaConfig::default();
    c.bench_function("nonpara_fit_n400", |b| {
        b.iter(|| {
            let mut tuning = TuningStore::default();
            nonpara_tau_with(black_box(&g.data), &cfg, &mut tuning).unwrap()
        })
    });
    let mut tuning = TuningStore::default();
    nonpara_tau_with(&g.data, &cfg, &mut tuning).unwrap();
    tuning.freeze();
    c.bench_function("nonpara_refit_frozen_n400", |b| {
        b.iter(|| {
            let mut t = tuning.clone();
            nonpara_tau_with(black_box(&g.data), &cfg, &mut t).unwrap()
        })
    });
}

fn bench_parametric(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = generate_scenario_b(800, &mut rng);
    let spec = ParamModelSpec::infer(&g.data);
    let cfg = FiConfig { m: 100, max_iter: 500, ..FiConfig::default() };
    let mut group = c.benchmark_group("parametric");
    group.sample_size(10);
    group.bench_function("fi_fit_n800_m100", |b| {
        b.iter(|| fit_mle_fractional(black_box(&g.data), &spec, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_discrete, bench_nonpara, bench_parametric);
criterion_main!(benches);
