//! Quadrature, Petrov-Galerkin assembly of the Poisson system, Gram and mass
//! matrices, integral norms of FE functions and error norms.
//!
//! Rows of assembled operators are indexed by free test DOFs and columns by
//! free trial DOFs. Dirichlet trial values are moved to the right-hand side;
//! Dirichlet test functions are dropped.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::linalg::SparseMat;
use crate::mesh::ForestMesh;
use crate::space::{tensor_eval, Dof, FEFunction, FESpace, PointEval, SpaceError, TensorEval};

/// Tensor Gauss-Legendre rule on the reference square `[0,1]²`.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on `[0, 1]`, ascending.
pub fn gauss_legendre_1d(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(q >= 1);
    let mut x = vec![0.0; q];
    let mut w = vec![0.0; q];
    for i in 0..q {
        let mut z = (PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=q {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            if q == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = q as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[q - 1 - i] = 0.5 * (1.0 + z);
        w[q - 1 - i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

impl QuadRule {
    /// `q` points per direction; exact for polynomials of degree `2q − 1`
    /// in each variable.
    pub fn gauss(q: usize) -> Self {
        let (x, w) = gauss_legendre_1d(q);
        let mut points = Vec::with_capacity(q * q);
        let mut weights = Vec::with_capacity(q * q);
        for j in 0..q {
            for i in 0..q {
                points.push((x[i], x[j]));
                weights.push(w[i] * w[j]);
            }
        }
        QuadRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Assembled Petrov-Galerkin system `A u = f̄` on free DOFs.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    /// rows: free test DOFs, columns: free trial DOFs
    pub a: SparseMat,
    /// `ℓ(ψ_i) − a(ū_h, ψ_i)`
    pub rhs: Vec<f64>,
}

impl LinearSystem {
    /// `A u − f̄`.
    pub fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut r = self.a.spmv(false, u).expect("trial dimension");
        r.iter_mut().zip(&self.rhs).for_each(|(ri, fi)| *ri -= fi);
        r
    }
}

/// Sums `(index, value)` contributions in an order that does not depend on
/// the order they were produced in.
fn deterministic_sum(n: usize, mut contrib: Vec<(usize, f64)>) -> Vec<f64> {
    contrib.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out = vec![0.0; n];
    for (i, v) in contrib {
        out[i] += v;
    }
    out
}

/// Trial cell containing a test cell (both spaces live on the same mesh).
fn trial_cell_for(trial: &FESpace, test: &FESpace, test_cell: usize) -> usize {
    let c = test.cells()[test_cell];
    let (x, y) = c.rect.center();
    trial.cell_in_leaf(c.leaf, x, y).expect("test cell inside its leaf")
}

fn check_pair(trial: &FESpace, test: &FESpace) -> Result<(), SpaceError> {
    if !Arc::ptr_eq(trial.mesh(), test.mesh()) && trial.mesh().leaves() != test.mesh().leaves() {
        return Err(SpaceError::MeshMismatch);
    }
    if trial.subdivision() > test.subdivision() || !test.subdivision().is_multiple_of(trial.subdivision()) {
        return Err(SpaceError::MeshMismatch);
    }
    Ok(())
}

/// Basis data of one space at the quadrature points of one test cell, in
/// physical gradients.
struct CellBasis {
    value: Vec<Vec<f64>>,
    gx: Vec<Vec<f64>>,
    gy: Vec<Vec<f64>>,
}

fn cell_basis(space: &FESpace, cell: usize, points: &[(f64, f64)]) -> CellBasis {
    let rect = space.cells()[cell].rect;
    let mut out = CellBasis { value: vec![], gx: vec![], gy: vec![] };
    for &(x, y) in points {
        let (s, t) = rect.to_reference(x, y);
        let TensorEval { value, ds, dt } = tensor_eval(space.basis(), s, t);
        out.value.push(value);
        out.gx.push(ds.iter().map(|v| v / rect.wx).collect());
        out.gy.push(dt.iter().map(|v| v / rect.wy).collect());
    }
    out
}

/// Assembles `A[i,j] = ∫ ∇φ_j·∇ψ_i` and `f̄_i = ∫ f ψ_i − ∫ ∇ū_h·∇ψ_i`
/// with `q = k + 1` Gauss points per direction on every test cell.
pub fn assemble_system<F>(trial: &FESpace, test: &FESpace, f: F, lifting: &FEFunction) -> Result<LinearSystem, SpaceError>
where
    F: Fn(f64, f64) -> f64,
{
    check_pair(trial, test)?;
    let quad = QuadRule::gauss(trial.cell_order() + 1);
    let mut triplets = Vec::new();
    let mut rhs = Vec::new();
    let mut lift_cache: Option<(usize, Vec<f64>)> = None;
    for tc in 0..test.num_cells() {
        let trc = trial_cell_for(trial, test, tc);
        let rect = test.cells()[tc].rect;
        let jac = rect.wx * rect.wy;
        let pts: Vec<(f64, f64)> = quad.points.iter().map(|&(s, t)| rect.from_reference(s, t)).collect();
        let tb = cell_basis(test, tc, &pts);
        let ub = cell_basis(trial, trc, &pts);
        let (nt, nu) = (test.nodes_per_cell(), trial.nodes_per_cell());
        let mut k = vec![0.0; nt * nu];
        let mut load = vec![0.0; nt];
        for (qi, &(x, y)) in pts.iter().enumerate() {
            let w = quad.weights[qi] * jac;
            let fv = f(x, y);
            for a in 0..nt {
                let (gxa, gya) = (tb.gx[qi][a], tb.gy[qi][a]);
                load[a] += w * fv * tb.value[qi][a];
                for b in 0..nu {
                    k[a * nu + b] += w * (gxa * ub.gx[qi][b] + gya * ub.gy[qi][b]);
                }
            }
        }
        let lift = match &lift_cache {
            Some((c, v)) if *c == trc => v.clone(),
            _ => {
                let v = lifting.cell_values(trc);
                lift_cache = Some((trc, v.clone()));
                v
            }
        };
        let test_nodes = test.cell_nodes(tc);
        let trial_nodes = trial.cell_nodes(trc);
        for a in 0..nt {
            let ka: f64 = (0..nu).map(|b| k[a * nu + b] * lift[b]).sum();
            for &(dt, ca) in test.expansion(test_nodes[a]) {
                let Dof::Free(i) = dt else { continue };
                rhs.push((i, ca * (load[a] - ka)));
                for b in 0..nu {
                    for &(du, cb) in trial.expansion(trial_nodes[b]) {
                        if let Dof::Free(j) = du {
                            triplets.push((i, j, ca * cb * k[a * nu + b]));
                        }
                    }
                }
            }
        }
    }
    Ok(LinearSystem { a: SparseMat::from_triplets(test.num_free(), trial.num_free(), triplets), rhs: deterministic_sum(test.num_free(), rhs) })
}

/// Gram matrix of the `H¹₀` inner product on the free DOFs of `space`.
pub fn assemble_gram(space: &FESpace) -> SparseMat {
    let zero = FEFunction::zero(Arc::new(space.clone()));
    assemble_system(space, space, |_, _| 0.0, &zero).expect("same space").a
}

/// Mass matrix `∫ ψ_j ψ_i` on free DOFs.
pub fn assemble_mass(space: &FESpace) -> SparseMat {
    let quad = QuadRule::gauss(space.cell_order() + 1);
    let mut triplets = Vec::new();
    let n = space.nodes_per_cell();
    for c in 0..space.num_cells() {
        let rect = space.cells()[c].rect;
        let jac = rect.wx * rect.wy;
        let pts: Vec<(f64, f64)> = quad.points.iter().map(|&(s, t)| rect.from_reference(s, t)).collect();
        let b = cell_basis(space, c, &pts);
        let nodes = space.cell_nodes(c);
        for a in 0..n {
            for bb in 0..n {
                let m: f64 = (0..pts.len()).map(|q| quad.weights[q] * jac * b.value[q][a] * b.value[q][bb]).sum();
                for &(da, ca) in space.expansion(nodes[a]) {
                    for &(db, cb) in space.expansion(nodes[bb]) {
                        if let (Dof::Free(i), Dof::Free(j)) = (da, db) {
                            triplets.push((i, j, ca * cb * m));
                        }
                    }
                }
            }
        }
    }
    SparseMat::from_triplets(space.num_free(), space.num_free(), triplets)
}

/// Integral norms of FE functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// `∫|f|`
    L1,
    /// `(∫f²)^½`
    L2,
    /// `∫|∇f|`
    W11,
    /// `(∫|∇f|²)^½`
    W12,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [NormKind::L1, NormKind::L2, NormKind::W11, NormKind::W12];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::L1 => "L1",
            NormKind::L2 => "L2",
            NormKind::W11 => "W11",
            NormKind::W12 => "W12",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Some(NormKind::L1),
            "L2" => Some(NormKind::L2),
            "W11" => Some(NormKind::W11),
            "W12" => Some(NormKind::W12),
            _ => None,
        }
    }
}

/// Precomputed reference basis at the nodes of a quadrature rule; valid for
/// every cell of a space since all cells are affine images of `[0,1]²`.
pub struct ReferenceQuad {
    pub quad: QuadRule,
    pub evals: Vec<TensorEval>,
}

impl ReferenceQuad {
    pub fn new(space: &FESpace, q: usize) -> Self {
        let quad = QuadRule::gauss(q);
        let evals = quad.points.iter().map(|&(s, t)| tensor_eval(space.basis(), s, t)).collect();
        ReferenceQuad { quad, evals }
    }
}

/// Norm of `f` with `q = p + 2` Gauss points per direction per cell, where
/// `p` is the cell polynomial degree.
pub fn integrate_norm(f: &FEFunction, which: NormKind) -> f64 {
    norm_with_gradient(f, which, 0.0, false).0
}

/// Norm of `f` and, when `with_grad`, its derivative with respect to the
/// free DOFs. The `W11` integrand is smoothed as `√(|∇f|² + eps²)` in the
/// derivative only.
pub fn norm_with_gradient(f: &FEFunction, which: NormKind, eps: f64, with_grad: bool) -> (f64, Vec<f64>) {
    let space = f.space().clone();
    let rq = ReferenceQuad::new(&space, space.cell_order() + 2);
    let n = space.nodes_per_cell();
    let mut total = 0.0;
    // derivative of the raw integral ∫ g(f), before the outer square root
    let mut grad_contrib: Vec<(usize, f64)> = Vec::new();
    for c in 0..space.num_cells() {
        let rect = space.cells()[c].rect;
        let jac = rect.wx * rect.wy;
        let local = f.cell_values(c);
        let mut dlocal = vec![0.0; n];
        for (qi, te) in rq.evals.iter().enumerate() {
            let w = rq.quad.weights[qi] * jac;
            let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
            for l in 0..n {
                v += local[l] * te.value[l];
                gx += local[l] * te.ds[l];
                gy += local[l] * te.dt[l];
            }
            gx /= rect.wx;
            gy /= rect.wy;
            match which {
                NormKind::L1 => {
                    total += w * v.abs();
                    if with_grad && v != 0.0 {
                        let s = v.signum();
                        (0..n).for_each(|l| dlocal[l] += w * s * te.value[l]);
                    }
                }
                NormKind::L2 => {
                    total += w * v * v;
                    if with_grad {
                        (0..n).for_each(|l| dlocal[l] += 2.0 * w * v * te.value[l]);
                    }
                }
                NormKind::W11 => {
                    let m = (gx * gx + gy * gy).sqrt();
                    total += w * m;
                    if with_grad {
                        let ms = (gx * gx + gy * gy + eps * eps).sqrt();
                        if ms > 0.0 {
                            (0..n).for_each(|l| dlocal[l] += w * (gx * te.ds[l] / rect.wx + gy * te.dt[l] / rect.wy) / ms);
                        }
                    }
                }
                NormKind::W12 => {
                    total += w * (gx * gx + gy * gy);
                    if with_grad {
                        (0..n).for_each(|l| dlocal[l] += 2.0 * w * (gx * te.ds[l] / rect.wx + gy * te.dt[l] / rect.wy));
                    }
                }
            }
        }
        if with_grad {
            for (l, &v) in space.cell_nodes(c).iter().enumerate() {
                for &(d, coef) in space.expansion(v) {
                    if let Dof::Free(i) = d {
                        grad_contrib.push((i, coef * dlocal[l]));
                    }
                }
            }
        }
    }
    let value = match which {
        NormKind::L1 | NormKind::W11 => total,
        NormKind::L2 | NormKind::W12 => total.sqrt(),
    };
    let mut grad = Vec::new();
    if with_grad {
        grad = deterministic_sum(space.num_free(), grad_contrib);
        if matches!(which, NormKind::L2 | NormKind::W12) {
            // d√I = dI / (2√I)
            let s = if value > 0.0 { 0.5 / value } else { 0.0 };
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    (value, grad)
}

/// Per-leaf squared `L²` and `H¹` error contributions of `identified`
/// against `exact`, with `q` Gauss points per direction on every leaf.
pub fn leaf_errors<I, E>(mesh: &ForestMesh, q: usize, identified: I, exact: E) -> Vec<(f64, f64)>
where
    I: Fn(usize, &[(f64, f64)]) -> Vec<PointEval>,
    E: Fn(f64, f64) -> PointEval,
{
    let quad = QuadRule::gauss(q);
    (0..mesh.num_leaves())
        .map(|leaf| {
            let rect = mesh.leaf_box(leaf);
            let jac = rect.wx * rect.wy;
            let pts: Vec<(f64, f64)> = quad.points.iter().map(|&(s, t)| rect.from_reference(s, t)).collect();
            let id = identified(leaf, &pts);
            let (mut l2, mut h1) = (0.0, 0.0);
            for (qi, (&(x, y), e)) in pts.iter().zip(&id).enumerate() {
                let u = exact(x, y);
                let w = quad.weights[qi] * jac;
                let dv = u.value - e.value;
                let (dx, dy) = (u.grad.0 - e.grad.0, u.grad.1 - e.grad.1);
                l2 += w * dv * dv;
                h1 += w * (dv * dv + dx * dx + dy * dy);
            }
            (l2, h1)
        })
        .collect()
}

/// `(e_L2, e_H1)` of `identified` against `exact`.
pub fn error_norms<I, E>(mesh: &ForestMesh, q: usize, identified: I, exact: E) -> (f64, f64)
where
    I: Fn(usize, &[(f64, f64)]) -> Vec<PointEval>,
    E: Fn(f64, f64) -> PointEval,
{
    let parts = leaf_errors(mesh, q, identified, exact);
    let l2: f64 = parts.iter().map(|p| p.0).sum();
    let h1: f64 = parts.iter().map(|p| p.1).sum();
    (l2.sqrt(), h1.sqrt())
}

/// Error norms of an FE function with `q = k + 3`.
pub fn fe_error_norms<E>(f: &FEFunction, exact: E) -> (f64, f64)
where
    E: Fn(f64, f64) -> PointEval,
{
    let q = f.space().order() + 3;
    error_norms(f.space().mesh(), q, |leaf, pts| f.eval_leaf(leaf, pts).expect("points in leaf"), exact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SpdFactor;
    use crate::mesh::CoarseMesh;
    use crate::space::FESpace;

    fn unit(levels: u32) -> Arc<ForestMesh> {
        Arc::new(ForestMesh::new(CoarseMesh::unit_square()).refine_uniform(levels).unwrap())
    }

    fn hanging_mesh() -> Arc<ForestMesh> {
        let m = unit(1);
        let bl = m.locate(0.1, 0.1).unwrap();
        let m = m.adapt(&[bl], &[]).unwrap();
        let c = m.locate(0.3, 0.3).unwrap();
        Arc::new(m.adapt(&[c], &[]).unwrap())
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        for q in 1..=9 {
            let (x, w) = gauss_legendre_1d(q);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for d in 0..2 * q {
                let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(d as i32)).sum();
                assert!((s - 1.0 / (d as f64 + 1.0)).abs() < 1e-14, "q={q} d={d}");
            }
        }
        let r = QuadRule::gauss(3);
        assert_eq!(r.len(), 9);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    /// Element stiffness of the four bilinear shape functions on the unit
    /// square by brute-force midpoint summation.
    fn q1_stiffness_oracle() -> [[f64; 4]; 4] {
        let n = 400;
        let h = 1.0 / n as f64;
        let grads = |x: f64, y: f64| -> [(f64, f64); 4] { [(-(1.0 - y), -(1.0 - x)), (1.0 - y, -x), (-y, 1.0 - x), (y, x)] };
        let mut k = [[0.0; 4]; 4];
        for i in 0..n {
            for j in 0..n {
                let g = grads((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                for a in 0..4 {
                    for b in 0..4 {
                        k[a][b] += h * h * (g[a].0 * g[b].0 + g[a].1 * g[b].1);
                    }
                }
            }
        }
        k
    }

    #[test]
    fn q1_element_matrix_matches_oracle() {
        let oracle = q1_stiffness_oracle();
        // midpoint rule error is O(h²) ≈ 1e-6 here
        assert!((oracle[0][0] - 2.0 / 3.0).abs() < 1e-5);
        assert!((oracle[0][1] + 1.0 / 6.0).abs() < 1e-5);
        assert!((oracle[0][3] + 1.0 / 3.0).abs() < 1e-5);
        // all-free space on the unit square: no Dirichlet nodes
        let s = FESpace::new(unit(0), 1, |_, _| false).unwrap();
        let z = FEFunction::zero(Arc::new(s.clone()));
        let sys = assemble_system(&s, &s, |_, _| 0.0, &z).unwrap();
        let nodes = s.cell_nodes(0);
        for a in 0..4 {
            for b in 0..4 {
                let (crate::space::DofClass::Free(i), crate::space::DofClass::Free(j)) = (s.class(nodes[a]), s.class(nodes[b])) else { panic!() };
                let exact = match (a, b) {
                    _ if a == b => 2.0 / 3.0,
                    (0, 3) | (3, 0) | (1, 2) | (2, 1) => -1.0 / 3.0,
                    _ => -1.0 / 6.0,
                };
                assert!((sys.a.get(i, j) - exact).abs() < 1e-15);
                assert!((sys.a.get(i, j) - oracle[a][b]).abs() < 1e-5);
            }
        }
    }

    fn solve_petrov(trial: &Arc<FESpace>, test: &FESpace, f: impl Fn(f64, f64) -> f64, g: impl Fn(f64, f64) -> f64) -> FEFunction {
        let lift = FEFunction::lift_dirichlet(trial.clone(), &g);
        let sys = assemble_system(trial, test, f, &lift).unwrap();
        let x = crate::linalg::cgnr_solve(&sys.a, &sys.rhs, 1e-14, 100_000).unwrap().x;
        lift.with_free(x)
    }

    #[test]
    fn affine_solution_reproduced() {
        for k in 1..=3 {
            let trial = Arc::new(FESpace::with_dirichlet_boundary(hanging_mesh(), k).unwrap());
            let test = trial.linearized().unwrap();
            let u = solve_petrov(&trial, &test, |_, _| 0.0, |x, y| x + y);
            for v in 0..trial.num_nodes() {
                let (x, y) = trial.node(v);
                assert!((u.node_value(v) - (x + y)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn petrov_galerkin_consistency_for_polynomials() {
        // w = x²y + y² (degree 3 in total, ≤ 2 per direction): −Δw = −2y − 2
        let w = |x: f64, y: f64| x * x * y + y * y;
        let trial = Arc::new(FESpace::with_dirichlet_boundary(hanging_mesh(), 2).unwrap());
        let test = trial.linearized().unwrap();
        let lift = FEFunction::lift_dirichlet(trial.clone(), w);
        let sys = assemble_system(&trial, &test, |_, y| -2.0 * y - 2.0, &lift).unwrap();
        let wi = FEFunction::interpolate(trial.clone(), w);
        let r = sys.residual(wi.free());
        let scale = sys.rhs.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        assert!(r.iter().all(|v| v.abs() < 1e-13 * scale), "{r:?}");
    }

    #[test]
    fn gram_is_spd_and_matches_self_assembly() {
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let trial = FESpace::with_dirichlet_boundary(hanging_mesh(), 3).unwrap();
        let test = trial.linearized().unwrap();
        let b = assemble_gram(&test);
        let d = b.to_dense();
        for i in 0..d.len() {
            for j in 0..d.len() {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
        for _ in 0..100 {
            let x: Vec<f64> = (0..d.len()).map(|_| next()).collect();
            let bx = b.spmv(false, &x).unwrap();
            assert!(x.iter().zip(&bx).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        }
        let zero = FEFunction::zero(Arc::new(test.clone()));
        let again = assemble_system(&test, &test, |_, _| 0.0, &zero).unwrap().a;
        assert_eq!(again, b);
        let f = SpdFactor::factor(&b).unwrap();
        let rhs: Vec<f64> = (0..d.len()).map(|_| next()).collect();
        let x = f.solve(&rhs).unwrap();
        let r: f64 = b.spmv(false, &x).unwrap().iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(r <= 1e-10 * nb);
    }

    #[test]
    fn norms_of_simple_functions() {
        let s = Arc::new(FESpace::with_dirichlet_boundary(unit(2), 1).unwrap());
        let one = FEFunction::interpolate(s.clone(), |_, _| 1.0);
        assert!((integrate_norm(&one, NormKind::L1) - 1.0).abs() < 1e-14);
        assert!((integrate_norm(&one, NormKind::L2) - 1.0).abs() < 1e-14);
        assert!(integrate_norm(&one, NormKind::W11).abs() < 1e-14);
        assert!(integrate_norm(&one, NormKind::W12).abs() < 1e-14);
        let x = FEFunction::interpolate(s, |x, _| x);
        assert!((integrate_norm(&x, NormKind::L2) - (1.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((integrate_norm(&x, NormKind::W12) - 1.0).abs() < 1e-14);
        assert!((integrate_norm(&x, NormKind::W11) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        let trial = FESpace::with_dirichlet_boundary(hanging_mesh(), 2).unwrap();
        let test = Arc::new(trial.linearized().unwrap());
        let free: Vec<f64> = (0..test.num_free()).map(|i| ((i * 7 + 3) as f64 * 0.37).sin()).collect();
        let f = FEFunction::new(test.clone(), free.clone(), vec![0.0; test.num_dirichlet()]);
        for which in NormKind::ALL {
            let (_, g) = norm_with_gradient(&f, which, 0.0, true);
            for i in [0, free.len() / 2, free.len() - 1] {
                let h = 1e-6;
                let mut p = free.clone();
                p[i] += h;
                let mut m = free.clone();
                m[i] -= h;
                let fp = integrate_norm(&f.with_free(p), which);
                let fm = integrate_norm(&f.with_free(m), which);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * g[i].abs().max(1.0), "{which:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn l2_norm_matches_mass_matrix() {
        let trial = FESpace::with_dirichlet_boundary(hanging_mesh(), 2).unwrap();
        let test = Arc::new(trial.linearized().unwrap());
        let r: Vec<f64> = (0..test.num_free()).map(|i| (i as f64 * 1.3).cos()).collect();
        let f = FEFunction::new(test.clone(), r.clone(), vec![0.0; test.num_dirichlet()]);
        let m = assemble_mass(&test);
        let mr = m.spmv(false, &r).unwrap();
        let quad: f64 = r.iter().zip(&mr).map(|(a, b)| a * b).sum();
        let v = integrate_norm(&f, NormKind::L2);
        assert!((v * v - quad).abs() < 1e-12 * quad.max(1.0));
    }

    #[test]
    fn error_norms_of_exact_and_zero() {
        let mesh = unit(2);
        let exact = |x: f64, y: f64| PointEval {
            value: (PI * x).sin() * (PI * y).sin(),
            grad: (PI * (PI * x).cos() * (PI * y).sin(), PI * (PI * x).sin() * (PI * y).cos()),
        };
        let (l2, h1) = error_norms(&mesh, 6, |_, p| p.iter().map(|&(x, y)| exact(x, y)).collect(), exact);
        assert!(l2 < 1e-14 && h1 < 1e-14);
        let zero = |_: usize, p: &[(f64, f64)]| vec![PointEval { value: 0.0, grad: (0.0, 0.0) }; p.len()];
        let (l2, _) = error_norms(&mesh, 8, zero, exact);
        assert!((l2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_error_rate() {
        let exact = |x: f64, y: f64| PointEval {
            value: (PI * x).sin() * (PI * y).sin(),
            grad: (PI * (PI * x).cos() * (PI * y).sin(), PI * (PI * x).sin() * (PI * y).cos()),
        };
        for k in 1..=3usize {
            let errs: Vec<f64> = (2..5)
                .map(|l| {
                    let s = Arc::new(FESpace::with_dirichlet_boundary(unit(l), k).unwrap());
                    let f = FEFunction::interpolate(s, |x, y| exact(x, y).value);
                    fe_error_norms(&f, exact).1
                })
                .collect();
            let slope = (errs[2] / errs[1]).ln() / 0.5f64.ln();
            assert!((slope - k as f64).abs() < 0.15 * k as f64, "k={k} slope={slope}");
        }
    }

    #[test]
    fn assembly_quadrature_is_exact() {
        let trial = FESpace::with_dirichlet_boundary(hanging_mesh(), 3).unwrap();
        let test = trial.linearized().unwrap();
        let zero = FEFunction::zero(Arc::new(trial.clone()));
        let a = assemble_system(&trial, &test, |_, _| 0.0, &zero).unwrap().a;
        // brute-force the same entries with a much finer rule
        let fine = {
            let quad = QuadRule::gauss(trial.order() + 3);
            let mut t = Vec::new();
            for tc in 0..test.num_cells() {
                let trc = trial_cell_for(&trial, &test, tc);
                let rect = test.cells()[tc].rect;
                let pts: Vec<(f64, f64)> = quad.points.iter().map(|&(s, t)| rect.from_reference(s, t)).collect();
                let tb = cell_basis(&test, tc, &pts);
                let ub = cell_basis(&trial, trc, &pts);
                for a in 0..4 {
                    for b in 0..trial.nodes_per_cell() {
                        let v: f64 = (0..pts.len())
                            .map(|q| quad.weights[q] * rect.wx * rect.wy * (tb.gx[q][a] * ub.gx[q][b] + tb.gy[q][a] * ub.gy[q][b]))
                            .sum();
                        for &(dt, ca) in test.expansion(test.cell_nodes(tc)[a]) {
                            for &(du, cb) in trial.expansion(trial.cell_nodes(trc)[b]) {
                                if let (Dof::Free(i), Dof::Free(j)) = (dt, du) {
                                    t.push((i, j, ca * cb * v));
                                }
                            }
                        }
                    }
                }
            }
            SparseMat::from_triplets(test.num_free(), trial.num_free(), t)
        };
        let (da, df) = (a.to_dense(), fine.to_dense());
        let scale = da.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (ra, rf) in da.iter().zip(&df) {
            for (x, y) in ra.iter().zip(rf) {
                assert!((x - y).abs() < 1e-13 * scale);
            }
        }
    }
}
