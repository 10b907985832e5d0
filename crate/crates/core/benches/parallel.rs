use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use smoothgeo::attacks::{pgd_attack, AttackConfig, AttackKind};
use smoothgeo::attribution::{attribute_class, AttributionConfig, Method};
use smoothgeo::geometry::{estimate_attribution_robustness, estimate_local_lipschitz, BallSpec, NetQoi, Norm};
use smoothgeo::metrics::GridGeometry;
use smoothgeo::nn::{Activation, Network, QuantityOfInterest};
use smoothgeo::par;

fn net() -> Network {
    Network::random(&[64, 32, 10], Activation::Relu, 7).unwrap()
}

fn input(seed: u64) -> Vec<f64> {
    (0..64).map(|i| ((i as u64 * 37 + seed * 11) % 17) as f64 / 17.0).collect()
}

fn estimators(c: &mut Criterion) {
    let net = net();
    let x = input(0);
    let ball = BallSpec::new(x.clone(), 0.05, Norm::L2).unwrap();
    let field = NetQoi::at(&net, QuantityOfInterest::default(), &x).unwrap();
    let cfg = AttributionConfig { sg_samples: 16, ..Default::default() };
    let class = net.predict(&x).unwrap();
    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        let run = |f: &mut dyn FnMut()| if parallel { f() } else { par::sequential(|| f()) };
        group.bench_function(BenchmarkId::new("lipschitz_2048", label), |b| {
            b.iter(|| run(&mut || drop(estimate_local_lipschitz(&field, &ball, 2048, 1).unwrap())))
        });
        group.bench_function(BenchmarkId::new("sg_robustness_64", label), |b| {
            b.iter(|| {
                run(&mut || {
                    let attr = |z: &[f64]| attribute_class(&net, z, Method::SmoothGrad, &cfg, class).unwrap().scores;
                    drop(estimate_attribution_robustness(attr, &ball, 64, 1).unwrap())
                })
            })
        });
    }
    group.finish();
}

fn batch_attacks(c: &mut Criterion) {
    let net = net();
    let inputs: Vec<Vec<f64>> = (0..8).map(input).collect();
    let geom = GridGeometry::Grid { height: 8, width: 8 };
    let cfg = AttackConfig { steps: 10, ..AttackConfig::new(AttackKind::TopK, 8.0 / 255.0, Method::Saliency, geom) };
    let mut group = c.benchmark_group("batch_attacks");
    group.sample_size(10);
    let batch = || par::map(inputs.len(), |i| pgd_attack(&net, &inputs[i], &cfg).unwrap());
    group.bench_function("topk_sm_8_inputs/parallel", |b| b.iter(batch));
    group.bench_function("topk_sm_8_inputs/sequential", |b| b.iter(|| par::sequential(batch)));
    group.finish();
}

criterion_group!(benches, estimators, batch_attacks);
criterion_main!(benches);
