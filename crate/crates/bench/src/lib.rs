//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use feinn::assembly::assemble_system;
use feinn::{FEFunction, FESpace, LinearSystem, Problem};

/// Spaces, lifting and system of a problem on its initial mesh.
pub struct Fixture {
    pub problem: Problem,
    pub trial: Arc<FESpace>,
    pub test: Arc<FESpace>,
    pub lift: FEFunction,
    pub sys: LinearSystem,
}

pub fn fixture(problem: Problem, k: usize) -> Fixture {
    let mesh = Arc::new(problem.initial_mesh());
    let trial = Arc::new(FESpace::with_dirichlet_boundary(mesh, k).expect("space"));
    let test = Arc::new(trial.linearized().expect("linearized space"));
    let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| problem.u(x, y));
    let sys = assemble_system(&trial, &test, |x, y| problem.source(x, y), &lift).expect("assembly");
    Fixture { problem, trial, test, lift, sys }
}
