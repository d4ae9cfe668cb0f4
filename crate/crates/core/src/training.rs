//! FEINN losses and their parameter gradients, quasi-Newton minimization and
//! the last-layer least-squares solve.

use std::sync::Arc;

use log::warn;
use thiserror::Error;

use crate::assembly::{norm_with_gradient, LinearSystem, NormKind};
use crate::linalg::{cgnr_solve, DenseOp, LinalgError, LinearOperator, Ridge, SpdFactor};
use crate::neural::{Mlp, NeuralError};
use crate::space::{FEFunction, FESpace};

/// Smoothing of `|∇r_h|` in the `W11` derivative.
pub const W11_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("preconditioned loss requested but no Gram factorization was built")]
    MissingPreconditioner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// `‖A u − f̄‖_ℓ1`
    DiscreteL1,
    /// `‖r_h‖_X` with `B r⃗ = A u − f̄`
    Preconditioned(NormKind),
}

impl LossMode {
    pub fn is_preconditioned(self) -> bool {
        matches!(self, LossMode::Preconditioned(_))
    }

    pub fn label(self) -> String {
        match self {
            LossMode::DiscreteL1 => "l1".into(),
            LossMode::Preconditioned(n) => format!("precond_{}", n.name()),
        }
    }
}

/// Everything a loss evaluation needs on a fixed mesh.
pub struct LossContext {
    pub trial: Arc<FESpace>,
    pub test: Arc<FESpace>,
    pub sys: LinearSystem,
    pub mode: LossMode,
    gram: Option<SpdFactor>,
    points: Vec<(f64, f64)>,
}

impl LossContext {
    /// Factorizes the test-space Gram matrix when the mode needs it.
    pub fn new(trial: Arc<FESpace>, test: Arc<FESpace>, sys: LinearSystem, mode: LossMode) -> Result<Self, TrainError> {
        let gram = match mode {
            LossMode::Preconditioned(_) => Some(SpdFactor::factor(&crate::assembly::assemble_gram(&test))?),
            LossMode::DiscreteL1 => None,
        };
        let points = trial.free_coords();
        Ok(LossContext { trial, test, sys, mode, gram, points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Loss value and its derivative with respect to the free trial DOFs.
    pub fn evaluate_dofs(&self, u: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        let r = self.sys.residual(u);
        match self.mode {
            LossMode::DiscreteL1 => {
                let value = r.iter().map(|v| v.abs()).sum();
                let s: Vec<f64> = r.iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }).collect();
                Ok((value, self.sys.a.spmv(true, &s)?))
            }
            LossMode::Preconditioned(which) => {
                let gram = self.gram.as_ref().ok_or(TrainError::MissingPreconditioner)?;
                let rv = gram.solve(&r)?;
                let rh = FEFunction::new(self.test.clone(), rv, vec![0.0; self.test.num_dirichlet()]);
                let (value, w) = norm_with_gradient(&rh, which, W11_EPS, true);
                let bw = gram.solve(&w)?;
                Ok((value, self.sys.a.spmv(true, &bw)?))
            }
        }
    }

    /// Riesz representative `r_h` of the residual of `u`.
    pub fn riesz_residual(&self, u: &[f64]) -> Result<FEFunction, TrainError> {
        let gram = self.gram.as_ref().ok_or(TrainError::MissingPreconditioner)?;
        let rv = gram.solve(&self.sys.residual(u))?;
        Ok(FEFunction::new(self.test.clone(), rv, vec![0.0; self.test.num_dirichlet()]))
    }

    /// Loss of a network and its gradient over `θ`.
    pub fn loss(&self, net: &Mlp) -> Result<(f64, Vec<f64>), TrainError> {
        let cache = net.forward_cached(&self.points);
        let (value, gu) = self.evaluate_dofs(&cache.output())?;
        Ok((value, net.backward(&cache, &gu)?))
    }

    pub fn loss_value(&self, net: &Mlp) -> Result<f64, TrainError> {
        Ok(self.evaluate_dofs(&dof_vector(net, &self.trial))?.0)
    }
}

/// `u_h[i] = N(x_i)` at the free trial nodes.
pub fn dof_vector(net: &Mlp, trial: &FESpace) -> Vec<f64> {
    net.forward(&trial.free_coords())
}

/// Interpolation of the network plus the Dirichlet lifting.
pub fn interpolate_net(net: &Mlp, lifting: &FEFunction) -> FEFunction {
    lifting.with_free(dof_vector(net, lifting.space()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Lbfgs {
        memory: usize,
    },
    /// Dense inverse-Hessian BFGS; intended for small parameter counts.
    Bfgs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub method: Method,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_evals: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { max_iters: 100, method: Method::Lbfgs { memory: 30 }, grad_tol: 1e-12, c1: 1e-4, c2: 0.9, max_line_evals: 25 }
    }
}

impl OptimConfig {
    pub fn with_iters(max_iters: usize) -> Self {
        OptimConfig { max_iters, ..Default::default() }
    }
}

/// Per-iteration snapshot handed to observers.
pub struct IterInfo<'a> {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub theta: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// accepted steps
    pub iterations: usize,
    /// loss before the first step, then after every accepted step
    pub loss_trace: Vec<f64>,
    /// Euclidean gradient norm, aligned with `loss_trace`
    pub grad_norm_trace: Vec<f64>,
    pub theta: Vec<f64>,
    pub line_search_failures: usize,
    pub evaluations: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("initial loss recorded")
    }

    /// `iter,loss,grad_norm` rows.
    pub fn write_trace<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,loss,grad_norm")?;
        for (i, (l, g)) in self.loss_trace.iter().zip(&self.grad_norm_trace).enumerate() {
            writeln!(w, "{i},{l:e},{g:e}")?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + alpha * d).collect()
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

enum Search {
    Wolfe(Trial),
    /// budget exhausted; best step with sufficient decrease
    Armijo(Trial),
    Failed,
}

fn armijo_fallback(best: Option<Trial>) -> Search {
    best.map_or(Search::Failed, Search::Armijo)
}

/// Strong Wolfe line search (bracketing then zoom).
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(f: &mut F, x: &[f64], d: &[f64], f0: f64, d0: f64, alpha1: f64, cfg: &OptimConfig, evals: &mut usize) -> Result<Search, TrainError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
{
    let mut eval = |alpha: f64, evals: &mut usize| -> Result<Trial, TrainError> {
        *evals += 1;
        let (fv, g) = f(&axpy(x, alpha, d))?;
        let dphi = dot(&g, d);
        Ok(Trial { alpha, f: fv, g, dphi })
    };
    let mut budget = cfg.max_line_evals;
    let mut prev = Trial { alpha: 0.0, f: f0, g: vec![], dphi: d0 };
    let mut alpha = alpha1;
    let (mut lo, mut hi);
    let mut first = true;
    let mut best: Option<Trial> = None;
    let note = |best: &mut Option<Trial>, t: &Trial| {
        if t.f.is_finite() && t.f < f0 && t.f <= f0 + cfg.c1 * t.alpha * d0 && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial { alpha: t.alpha, f: t.f, g: t.g.clone(), dphi: t.dphi });
        }
    };
    loop {
        if budget == 0 {
            return Ok(armijo_fallback(best));
        }
        budget -= 1;
        let cur = eval(alpha, evals)?;
        note(&mut best, &cur);
        if !cur.f.is_finite() {
            // step into overflow: shrink
            alpha *= 0.1;
            continue;
        }
        if cur.f > f0 + cfg.c1 * cur.alpha * d0 || (!first && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if cur.dphi.abs() <= -cfg.c2 * d0 {
            return Ok(Search::Wolfe(cur));
        }
        if cur.dphi >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        first = false;
        alpha = cur.alpha * 2.0;
        prev = cur;
    }
    // zoom
    while budget > 0 {
        budget -= 1;
        let (a, b) = (lo.alpha, hi.alpha);
        let width = (b - a).abs();
        if width < 1e-16 * a.abs().max(1e-300) {
            break;
        }
        // cubic interpolation, safeguarded towards bisection
        let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a - b);
        let disc = d1 * d1 - lo.dphi * hi.dphi;
        let mut t = f64::NAN;
        if disc >= 0.0 && hi.g.len() == x.len() {
            let d2 = disc.sqrt() * (b - a).signum();
            t = b - (b - a) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
        }
        let (mn, mx) = (a.min(b), a.max(b));
        if !t.is_finite() || t < mn + 0.1 * width || t > mx - 0.1 * width {
            t = 0.5 * (a + b);
        }
        let cur = eval(t, evals)?;
        note(&mut best, &cur);
        if !cur.f.is_finite() || cur.f > f0 + cfg.c1 * t * d0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.dphi.abs() <= -cfg.c2 * d0 {
                return Ok(Search::Wolfe(cur));
            }
            if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
    }
    Ok(armijo_fallback(best))
}

/// New iterate, its loss and its gradient.
type Accepted = (Vec<f64>, f64, Vec<f64>);

/// Armijo backtracking along `−g`.
fn steepest_backtrack<F>(f: &mut F, x: &[f64], g: &[f64], f0: f64, c1: f64, evals: &mut usize) -> Result<Option<Accepted>, TrainError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
{
    let gg = dot(g, g);
    let mut alpha = 1.0 / gg.sqrt().max(1.0);
    for _ in 0..60 {
        let xn = axpy(x, -alpha, g);
        *evals += 1;
        let (fv, gn) = f(&xn)?;
        if fv.is_finite() && fv < f0 && fv <= f0 - c1 * alpha * gg {
            return Ok(Some((xn, fv, gn)));
        }
        alpha *= 0.5;
    }
    Ok(None)
}

enum Memory {
    Limited { m: usize, s: Vec<Vec<f64>>, y: Vec<Vec<f64>> },
    Dense { h: Option<Vec<f64>>, n: usize },
}

impl Memory {
    fn new(method: Method, n: usize) -> Self {
        match method {
            Method::Lbfgs { memory } => Memory::Limited { m: memory.max(1), s: vec![], y: vec![] },
            Method::Bfgs => Memory::Dense { h: None, n },
        }
    }

    fn clear(&mut self) {
        match self {
            Memory::Limited { s, y, .. } => {
                s.clear();
                y.clear();
            }
            Memory::Dense { h, .. } => *h = None,
        }
    }

    fn update(&mut self, s_new: Vec<f64>, y_new: Vec<f64>) {
        let sy = dot(&s_new, &y_new);
        if sy.is_nan() || sy <= 1e-16 * norm(&s_new) * norm(&y_new) {
            return;
        }
        match self {
            Memory::Limited { m, s, y } => {
                if s.len() == *m {
                    s.remove(0);
                    y.remove(0);
                }
                s.push(s_new);
                y.push(y_new);
            }
            Memory::Dense { h, n } => {
                let n = *n;
                let rho = 1.0 / sy;
                let hm = h.get_or_insert_with(|| {
                    let gamma = sy / dot(&y_new, &y_new);
                    let mut m = vec![0.0; n * n];
                    (0..n).for_each(|i| m[i * n + i] = gamma);
                    m
                });
                // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
                let hy: Vec<f64> = (0..n).map(|i| dot(&hm[i * n..(i + 1) * n], &y_new)).collect();
                let yhy = dot(&y_new, &hy);
                for i in 0..n {
                    for j in 0..n {
                        hm[i * n + j] += -rho * (s_new[i] * hy[j] + hy[i] * s_new[j]) + (rho * rho * yhy + rho) * s_new[i] * s_new[j];
                    }
                }
            }
        }
    }

    /// `−H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        match self {
            Memory::Limited { s, y, .. } => {
                let k = s.len();
                let mut q = g.to_vec();
                let mut alpha = vec![0.0; k];
                for i in (0..k).rev() {
                    let rho = 1.0 / dot(&y[i], &s[i]);
                    alpha[i] = rho * dot(&s[i], &q);
                    q.iter_mut().zip(&y[i]).for_each(|(qj, yj)| *qj -= alpha[i] * yj);
                }
                if k > 0 {
                    let gamma = dot(&s[k - 1], &y[k - 1]) / dot(&y[k - 1], &y[k - 1]);
                    q.iter_mut().for_each(|v| *v *= gamma);
                }
                for i in 0..k {
                    let rho = 1.0 / dot(&y[i], &s[i]);
                    let beta = rho * dot(&y[i], &q);
                    q.iter_mut().zip(&s[i]).for_each(|(qj, sj)| *qj += (alpha[i] - beta) * sj);
                }
                q.iter_mut().for_each(|v| *v = -*v);
                q
            }
            Memory::Dense { h: None, .. } => g.iter().map(|v| -v).collect(),
            Memory::Dense { h: Some(h), n } => (0..*n).map(|i| -dot(&h[i * n..(i + 1) * n], g)).collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Memory::Limited { s, .. } => s.is_empty(),
            Memory::Dense { h, .. } => h.is_none(),
        }
    }
}

/// Quasi-Newton minimization with strong Wolfe line search; only
/// decreasing steps are accepted. `observer` sees the initial point
/// (`iter = 0`) and every accepted iterate.
pub fn minimize<F, O>(mut f: F, theta0: Vec<f64>, cfg: &OptimConfig, mut observer: O) -> Result<TrainReport, TrainError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
    O: FnMut(&IterInfo),
{
    let mut x = theta0;
    let (mut fx, mut g) = f(&x)?;
    let mut report =
        TrainReport { iterations: 0, loss_trace: vec![fx], grad_norm_trace: vec![norm(&g)], theta: vec![], line_search_failures: 0, evaluations: 1 };
    observer(&IterInfo { iter: 0, loss: fx, grad_norm: norm(&g), theta: &x });
    let mut mem = Memory::new(cfg.method, x.len());
    for iter in 1..=cfg.max_iters {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.grad_tol {
            break;
        }
        let mut d = mem.direction(&g);
        let mut d0 = dot(&g, &d);
        if d0.is_nan() || d0 >= 0.0 {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            d0 = -dot(&g, &g);
        }
        let alpha1 = if mem.is_empty() { 1.0 / norm(&g).max(1.0) } else { 1.0 };
        let step = strong_wolfe(&mut f, &x, &d, fx, d0, alpha1, cfg, &mut report.evaluations)?;
        let (xn, fnew, gn) = match step {
            Search::Wolfe(t) if t.f < fx => (axpy(&x, t.alpha, &d), t.f, t.g),
            Search::Armijo(t) => {
                report.line_search_failures += 1;
                (axpy(&x, t.alpha, &d), t.f, t.g)
            }
            _ => {
                report.line_search_failures += 1;
                match steepest_backtrack(&mut f, &x, &g, fx, cfg.c1, &mut report.evaluations)? {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        mem.update(s, y);
        x = xn;
        fx = fnew;
        g = gn;
        report.iterations = iter;
        report.loss_trace.push(fx);
        report.grad_norm_trace.push(norm(&g));
        observer(&IterInfo { iter, loss: fx, grad_norm: norm(&g), theta: &x });
    }
    report.theta = x;
    Ok(report)
}

/// [`minimize`] with L-BFGS of the given memory.
pub fn lbfgs_minimize<F>(f: F, theta0: Vec<f64>, iters: usize, memory: usize) -> Result<TrainReport, TrainError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
{
    let cfg = OptimConfig { max_iters: iters, method: Method::Lbfgs { memory }, ..Default::default() };
    minimize(f, theta0, &cfg, |_| {})
}

/// Trains `net` on `ctx` and returns the trained network with its report.
pub fn train<O: FnMut(&IterInfo)>(net: &Mlp, ctx: &LossContext, cfg: &OptimConfig, observer: O) -> Result<(Mlp, TrainReport), TrainError> {
    let template = net.clone();
    let report = minimize(
        |theta| {
            let n = template.with_params(theta)?;
            ctx.loss(&n)
        },
        net.params(),
        cfg,
        observer,
    )?;
    let trained = net.with_params(&report.theta)?;
    Ok((trained, report))
}

/// Outcome of [`last_layer_solve`].
#[derive(Debug, Clone)]
pub struct LastLayerReport {
    pub residual_before: f64,
    pub residual_after: f64,
    pub regularized: bool,
}

fn l2_residual(sys: &LinearSystem, u: &[f64]) -> f64 {
    norm(&sys.residual(u))
}

/// Replaces the last-layer weights and bias by the minimizer of
/// `‖A Φ w − f̄‖₂` with the hidden layers frozen. Keeps the old
/// parameters if the solve does not reduce the residual.
pub fn last_layer_solve(net: &Mlp, sys: &LinearSystem, trial: &FESpace) -> Result<(Mlp, LastLayerReport), TrainError> {
    let points = trial.free_coords();
    let cache = net.forward_cached(&points);
    let before = l2_residual(sys, &cache.output());
    let phi = cache.last_hidden();
    let (n, m) = (phi.nrows(), phi.ncols() + 1);
    // columns of AΦ, including the constant column for the bias
    let mut aphi = vec![0.0; LinearOperator::nrows(&sys.a) * m];
    let mut col = vec![0.0; n];
    for c in 0..m {
        for i in 0..n {
            col[i] = if c + 1 == m { 1.0 } else { phi[[i, c]] };
        }
        let ac = sys.a.spmv(false, &col)?;
        for (i, v) in ac.into_iter().enumerate() {
            aphi[i * m + c] = v;
        }
    }
    let op = DenseOp { nrows: LinearOperator::nrows(&sys.a), ncols: m, data: aphi };
    let maxit = 50 * m;
    let mut regularized = false;
    let w = match cgnr_solve(&op, &sys.rhs, 1e-12, maxit) {
        Ok(rep) => rep.x,
        Err(_) => {
            warn!("last-layer system is rank deficient or ill-conditioned; using ridge 1e-10");
            regularized = true;
            let ridge = Ridge { inner: &op, lambda: 1e-10 };
            let mut b = sys.rhs.clone();
            b.resize(ridge.nrows(), 0.0);
            match cgnr_solve(&ridge, &b, 1e-12, maxit) {
                Ok(rep) => rep.x,
                Err(_) => {
                    // best effort: plain CGLS iterate count cap
                    cgnr_solve(&ridge, &b, 1e-6, 10 * maxit).map(|r| r.x).unwrap_or_else(|_| vec![])
                }
            }
        }
    };
    let mut theta = net.params();
    if w.len() == m {
        let off = net.last_layer_offset();
        theta[off..].copy_from_slice(&w);
    }
    let candidate = net.with_params(&theta)?;
    let after = l2_residual(sys, &dof_vector(&candidate, trial));
    if after <= before {
        Ok((candidate, LastLayerReport { residual_before: before, residual_after: after, regularized }))
    } else {
        Ok((net.clone(), LastLayerReport { residual_before: before, residual_after: before, regularized }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_mass, assemble_system};
    use crate::mesh::{CoarseMesh, ForestMesh};
    use crate::problems::Problem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn context(levels: u32, k: usize, mode: LossMode, p: &Problem) -> LossContext {
        let mesh = Arc::new(ForestMesh::new(p.coarse.clone()).refine_uniform(levels).unwrap());
        let trial = Arc::new(FESpace::with_dirichlet_boundary(mesh, k).unwrap());
        let test = Arc::new(trial.linearized().unwrap());
        let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| p.u(x, y));
        let sys = assemble_system(&trial, &test, |x, y| p.source(x, y), &lift).unwrap();
        LossContext::new(trial, test, sys, mode).unwrap()
    }

    fn small_net(seed: u64) -> Mlp {
        Mlp::new(&[2, 8, 8, 1], seed).unwrap()
    }

    #[test]
    fn l1_arithmetic_and_zero_net() {
        let p = Problem::poly_smoke(2);
        let ctx = context(1, 1, LossMode::DiscreteL1, &p);
        let zero = Mlp::from_params(&[2, 3, 1], &[0.0; 13]).unwrap();
        assert!(dof_vector(&zero, &ctx.trial).iter().all(|&v| v == 0.0));
        let (v, _) = ctx.loss(&zero).unwrap();
        let expect: f64 = ctx.sys.rhs.iter().map(|v| v.abs()).sum();
        assert!((v - expect).abs() < 1e-14);
        // r = (1, −2, 3)
        let r = [1.0f64, -2.0, 3.0];
        assert_eq!(r.iter().map(|v| v.abs()).sum::<f64>(), 6.0);
        let constant = Mlp::from_params(&[2, 1, 1], &[0.0, 0.0, 0.0, 0.0, 2.5]).unwrap();
        assert!(dof_vector(&constant, &ctx.trial).iter().all(|&v| v == 2.5));
    }

    fn check_gradient(ctx: &LossContext, net: &Mlp, tol: f64) {
        let (_, g) = ctx.loss(net).unwrap();
        let theta = net.params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..theta.len());
            let mut p = theta.clone();
            p[i] += eps;
            let mut m = theta.clone();
            m[i] -= eps;
            let fp = ctx.loss_value(&net.with_params(&p).unwrap()).unwrap();
            let fm = ctx.loss_value(&net.with_params(&m).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((fd - g[i]).abs() <= tol * scale, "{:?} {i}: fd {fd} vs {}", ctx.mode, g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = Problem::arc_wavefront();
        for mode in [
            LossMode::DiscreteL1,
            LossMode::Preconditioned(NormKind::L2),
            LossMode::Preconditioned(NormKind::W12),
            LossMode::Preconditioned(NormKind::W11),
            LossMode::Preconditioned(NormKind::L1),
        ] {
            let ctx = context(2, 2, mode, &p);
            check_gradient(&ctx, &small_net(1), 1e-5);
        }
    }

    #[test]
    fn l2_value_matches_mass_matrix() {
        let p = Problem::arc_wavefront();
        let ctx = context(2, 2, LossMode::Preconditioned(NormKind::L2), &p);
        let net = small_net(2);
        let u = dof_vector(&net, &ctx.trial);
        let rh = ctx.riesz_residual(&u).unwrap();
        let m = assemble_mass(&ctx.test);
        let mr = m.spmv(false, rh.free()).unwrap();
        let quad: f64 = dot(rh.free(), &mr);
        let (v, _) = ctx.evaluate_dofs(&u).unwrap();
        assert!((v * v - quad).abs() <= 1e-12 * quad);
        // W12: value² = r⃗ᵀ B r⃗ = r⃗ᵀ (A u − f̄)
        let ctx = context(2, 2, LossMode::Preconditioned(NormKind::W12), &p);
        let rh = ctx.riesz_residual(&u).unwrap();
        let (v, _) = ctx.evaluate_dofs(&u).unwrap();
        let rr = dot(rh.free(), &ctx.sys.residual(&u));
        assert!((v * v - rr).abs() <= 1e-12 * rr);
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let p = Problem::poly_smoke(2);
        for mode in [LossMode::DiscreteL1, LossMode::Preconditioned(NormKind::L2)] {
            let ctx = context(2, 2, mode, &p);
            let u = crate::linalg::cgnr_solve(&ctx.sys.a, &ctx.sys.rhs, 1e-14, 10_000).unwrap().x;
            let (v, _) = ctx.evaluate_dofs(&vec![0.0; u.len()]).unwrap();
            assert!(v > 0.0);
            let (v, _) = ctx.evaluate_dofs(&u).unwrap();
            assert!(v < 1e-10, "{mode:?}: {v}");
        }
    }

    #[test]
    fn quadratic_converges() {
        let target: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let t = target.clone();
        let rep = lbfgs_minimize(
            move |x| {
                let d: Vec<f64> = x.iter().zip(&t).map(|(a, b)| a - b).collect();
                Ok((0.5 * dot(&d, &d), d))
            },
            vec![0.0; 10],
            20,
            30,
        )
        .unwrap();
        assert!(rep.iterations <= 20);
        for (a, b) in rep.theta.iter().zip(&target) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(rep.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn rosenbrock_converges() {
        for method in [Method::Lbfgs { memory: 30 }, Method::Bfgs] {
            let cfg = OptimConfig { max_iters: 200, method, ..Default::default() };
            let rep = minimize(rosenbrock, vec![-1.2, 1.0], &cfg, |_| {}).unwrap();
            assert!((rep.theta[0] - 1.0).abs() < 1e-8 && (rep.theta[1] - 1.0).abs() < 1e-8, "{method:?} {:?}", rep.theta);
            assert!(rep.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn observer_sees_every_iterate() {
        let mut seen = vec![];
        let cfg = OptimConfig::with_iters(5);
        let rep = minimize(rosenbrock, vec![-1.2, 1.0], &cfg, |info| seen.push((info.iter, info.loss))).unwrap();
        assert_eq!(seen.len(), rep.loss_trace.len());
        assert_eq!(seen[0].0, 0);
        let mut buf = Vec::new();
        rep.write_trace(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("iter,loss,grad_norm\n0,"));
    }

    #[test]
    fn training_reduces_loss() {
        let p = Problem::poly_smoke(2);
        let ctx = context(2, 2, LossMode::Preconditioned(NormKind::W12), &p);
        let net = small_net(3);
        let (trained, rep) = train(&net, &ctx, &OptimConfig::with_iters(50), |_| {}).unwrap();
        assert!(rep.final_loss() < 0.1 * rep.loss_trace[0]);
        assert_eq!(ctx.loss_value(&trained).unwrap(), rep.final_loss());
    }

    #[test]
    fn last_layer_never_increases_residual() {
        let p = Problem::arc_wavefront();
        let ctx = context(2, 1, LossMode::DiscreteL1, &p);
        for seed in 0..5 {
            let net = small_net(seed);
            let (_, rep) = last_layer_solve(&net, &ctx.sys, &ctx.trial).unwrap();
            assert!(rep.residual_after <= rep.residual_before);
        }
    }

    #[test]
    fn last_layer_reaches_fe_solution_with_spanning_features() {
        // 4×4 k=1 mesh: 9 interior free DOFs
        let mesh = Arc::new(ForestMesh::new(CoarseMesh::unit_square()).refine_uniform(2).unwrap());
        let trial = Arc::new(FESpace::with_dirichlet_boundary(mesh, 1).unwrap());
        assert_eq!(trial.num_free(), 9);
        let test = Arc::new(trial.linearized().unwrap());
        let p = Problem::arc_wavefront();
        let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| p.u(x, y));
        let sys = assemble_system(&trial, &test, |x, y| p.source(x, y), &lift).unwrap();
        // one steep ridge per free node direction: features are independent at the nodes
        let mut theta = vec![];
        for j in 0..9 {
            let a = j as f64 * 0.7;
            theta.extend([3.0 * a.cos(), 3.0 * a.sin()]);
        }
        theta.extend((0..9).map(|j| 0.3 * j as f64 - 1.2));
        theta.extend([0.0; 10]);
        let net = Mlp::from_params(&[2, 9, 1], &theta).unwrap();
        let (solved, rep) = last_layer_solve(&net, &sys, &trial).unwrap();
        assert!(rep.residual_after < 1e-8, "{rep:?}");
        assert!(l2_residual(&sys, &dof_vector(&solved, &trial)) < 1e-8);
    }
}
