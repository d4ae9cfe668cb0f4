use std::sync::Arc;

use feinn::adapt::{adaptive_feinn, adaptive_fem, fem_solve, uniform_fem, FemConfig, IndicatorKind};
use feinn::assembly::{fe_error_norms, NormKind};
use feinn::report::{aggregate, write_aggregate, ErrorSource};
use feinn::training::{LossMode, OptimConfig};
use feinn::{AdaptConfig, ForestMesh, Mlp, Problem, Schedule};

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let net = Mlp::new(&[2, 7, 5, 1], 42).unwrap();
    let mut buf = Vec::new();
    net.save(&mut buf).unwrap();
    assert!(buf.starts_with(b"feinn-mlp 1\n"));
    let back = Mlp::load(&buf[..]).unwrap();
    let pts: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.021 - 0.5, 0.3 - i as f64 * 0.013)).collect();
    let a = net.forward(&pts);
    let b = back.forward(&pts);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(Mlp::load(&b"feinn-mlp 9\n"[..]).is_err());
}

#[test]
fn quadratic_is_solved_exactly() {
    let p = Problem::poly_smoke(2);
    for petrov in [false, true] {
        let sol = fem_solve(&p, Arc::new(p.initial_mesh()), 2, petrov).unwrap();
        let (l2, h1) = fe_error_norms(&sol, |x, y| p.exact(x, y));
        assert!(l2 < 1e-10 && h1 < 1e-9, "petrov={petrov}: {l2} {h1}");
    }
    let h = uniform_fem(&p, 2, 1, 1).unwrap();
    assert_eq!(h.steps.len(), 1);
    assert!(h.steps[0].feinn_h1 < 1e-9);
}

#[test]
fn adaptive_fem_refines_toward_the_corner() {
    let p = Problem::fichera_lshape();
    let init = ForestMesh::new(p.coarse.clone()).refine_uniform(1).unwrap();
    let out = adaptive_fem(&p, init, &FemConfig::new(1, IndicatorKind::Kelly, 3), |_| {}).unwrap();
    let h = &out.history;
    assert_eq!(h.steps.len(), 4);
    assert!(h.steps.windows(2).all(|w| w[1].feinn_h1 < w[0].feinn_h1));
    let mesh = out.solution.space().mesh();
    let top = mesh.max_level();
    assert!(mesh.leaves_touching(0.0, 0.0).iter().any(|&l| mesh.leaf(l).level == top));
    let mut csv = Vec::new();
    h.write_fem_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
}

#[test]
fn small_feinn_run_is_reproducible() {
    let p = Problem::poly_smoke(2);
    let mut cfg = AdaptConfig::for_problem(&p);
    cfg.order = 2;
    cfg.max_steps = 2;
    cfg.indicator = IndicatorKind::Network;
    cfg.loss = LossMode::Preconditioned(NormKind::W12);
    cfg.schedule = Schedule::constant(20);
    cfg.optim = OptimConfig::default();
    let arch = [2, 6, 6, 1];
    let run = |seed| adaptive_feinn(&p, Mlp::new(&arch, seed).unwrap(), p.initial_mesh(), &cfg, |_| {}).unwrap();
    let a = run(3);
    let b = run(3);
    assert_eq!(a.history, b.history);
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(a.history.steps.len(), 3);
    assert_eq!(a.history.marks.len(), 2);
    let c = run(4);
    let rows = aggregate(&[a.history.clone(), c.history], ErrorSource::Nn);
    assert_eq!(rows.len(), 3);
    let mut out = Vec::new();
    write_aggregate(&rows, ErrorSource::Nn, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("step,dofs_median,nn_l2_median"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn uniform_rates_follow_the_order() {
    let mut seen = vec![];
    for k in [2usize, 4] {
        let p = Problem::smooth(k as u32);
        let h = uniform_fem(&p, k, 2, 4).unwrap();
        // DOFs grow like h⁻², so the h-rate is −2× the DOF slope
        let rate = -2.0 * feinn::report::slopes(&h).feinn_h1;
        assert!((rate - k as f64).abs() <= 0.1 * k as f64, "k={k}: {rate}");
        seen.push(rate);
    }
    assert!(seen[1] > seen[0] + 1.0);
}
