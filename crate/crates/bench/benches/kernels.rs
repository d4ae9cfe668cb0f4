use criterion::{black_box, criterion_group, criterion_main, Criterion};
use feinn::adapt::kelly_indicator;
use feinn::assembly::{assemble_gram, assemble_system, NormKind};
use feinn::linalg::SpdFactor;
use feinn::training::{interpolate_net, LossContext, LossMode};
use feinn::{Mlp, Problem};
use feinn_bench::fixture;

fn assembly(c: &mut Criterion) {
    let f = fixture(Problem::arc_wavefront(), 2);
    c.bench_function("assemble_system arc k=2", |b| b.iter(|| assemble_system(&f.trial, &f.test, |x, y| f.problem.source(x, y), &f.lift).unwrap()));
    let gram = assemble_gram(&f.test);
    c.bench_function("factor gram arc k=2", |b| b.iter(|| SpdFactor::factor(black_box(&gram)).unwrap()));
}

fn network(c: &mut Criterion) {
    let net = Mlp::new(&[2, 50, 50, 50, 50, 1], 0).unwrap();
    let pts: Vec<(f64, f64)> = (0..1024).map(|i| ((i % 32) as f64 / 31.0, (i / 32) as f64 / 31.0)).collect();
    c.bench_function("forward 1024 points", |b| b.iter(|| net.forward(black_box(&pts))));
    let cot = vec![1.0; pts.len()];
    c.bench_function("vjp 1024 points", |b| b.iter(|| net.vjp(black_box(&pts), &cot).unwrap()));
    c.bench_function("spatial_derivs 1024 points", |b| b.iter(|| net.spatial_derivs(black_box(&pts))));
}

fn losses(c: &mut Criterion) {
    let f = fixture(Problem::arc_wavefront(), 2);
    let net = Mlp::new(&[2, 50, 50, 50, 50, 1], 0).unwrap();
    for mode in [LossMode::DiscreteL1, LossMode::Preconditioned(NormKind::W11)] {
        let ctx = LossContext::new(f.trial.clone(), f.test.clone(), f.sys.clone(), mode).unwrap();
        c.bench_function(&format!("loss+grad {}", mode.label()), |b| b.iter(|| ctx.loss(black_box(&net)).unwrap()));
    }
    let total = interpolate_net(&net, &f.lift);
    c.bench_function("kelly indicator arc k=2", |b| b.iter(|| kelly_indicator(black_box(&total)).unwrap()));
}

criterion_group!(benches, assembly, network, losses);
criterion_main!(benches);
