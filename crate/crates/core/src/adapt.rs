//! Error indicators, fixed-fraction marking, the adaptive FEINN loop and the
//! FEM baselines.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::assembly::{assemble_system, gauss_legendre_1d, leaf_errors, QuadRule};
use crate::linalg::{cgnr_solve, LinalgError, SpdFactor};
use crate::mesh::{ForestMesh, MeshError, NeighborKind, Segment};
use crate::neural::Mlp;
use crate::problems::{Problem, Schedule};
use crate::space::{FEFunction, FESpace, PointEval, SpaceError};
use crate::training::{interpolate_net, last_layer_solve, train, LossContext, LossMode, OptimConfig, TrainError, TrainReport};

/// Gauss points per direction of the network indicator.
pub const NETWORK_QUAD: usize = 8;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("mesh lost 2:1 balance after adaptation step {0}")]
    Unbalanced(usize),
    #[error("indicator {0} is not available for this run")]
    Indicator(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndicatorKind {
    Kelly,
    Network,
    Real,
}

impl IndicatorKind {
    pub fn name(self) -> &'static str {
        match self {
            IndicatorKind::Kelly => "kelly",
            IndicatorKind::Network => "network",
            IndicatorKind::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kelly" => Some(IndicatorKind::Kelly),
            "network" => Some(IndicatorKind::Network),
            "real" => Some(IndicatorKind::Real),
            _ => None,
        }
    }
}

/// Points and weights of a Gauss rule on a segment.
fn segment_rule(a: (f64, f64), b: (f64, f64), q: usize) -> Vec<((f64, f64), f64)> {
    let (t, w) = gauss_legendre_1d(q);
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    t.iter().zip(&w).map(|(&t, &w)| ((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), w * len)).collect()
}

/// Kelly indicator `ζ_K = (Σ_F h_K/24 ∫_F ⟦∂u/∂n⟧²)^½` over interior faces.
pub fn kelly_indicator(total: &FEFunction) -> Result<Vec<f64>, AdaptError> {
    let space = total.space();
    let mesh = space.mesh();
    let q = space.order() + 2;
    let mut out = Vec::with_capacity(mesh.num_leaves());
    for k in 0..mesh.num_leaves() {
        let c_f = mesh.h(k) / 24.0;
        let mut sum = 0.0;
        for nb in mesh.face_neighbors(k)? {
            let n = nb.face.normal();
            // pieces of the face, each shared with exactly one neighbor leaf
            let pieces: Vec<(usize, Segment)> = match nb.kind {
                NeighborKind::Boundary => continue,
                NeighborKind::SameLevel | NeighborKind::Coarser => vec![(nb.leaves[0], nb.segment)],
                NeighborKind::Finer => nb.leaves.iter().map(|&l| (l, mesh.face_segment(l, nb.face.opposite()))).collect(),
            };
            for (other, seg) in pieces {
                let rule = segment_rule(seg.0, seg.1, q);
                let pts: Vec<(f64, f64)> = rule.iter().map(|r| r.0).collect();
                let mine = total.eval_leaf(k, &pts)?;
                let theirs = total.eval_leaf(other, &pts)?;
                for ((a, b), (_, w)) in mine.iter().zip(&theirs).zip(&rule) {
                    let jump = (a.grad.0 - b.grad.0) * n.0 + (a.grad.1 - b.grad.1) * n.1;
                    sum += w * jump * jump;
                }
            }
        }
        out.push((c_f * sum).sqrt());
    }
    Ok(out)
}

/// Network indicator `ζ_K = ‖Δu_N + f‖_{L²(K)}` on the raw network.
pub fn network_indicator<F: Fn(f64, f64) -> f64>(net: &Mlp, mesh: &ForestMesh, f: F) -> Vec<f64> {
    let quad = QuadRule::gauss(NETWORK_QUAD);
    let per = quad.len();
    let chunk = 256;
    let mut out = Vec::with_capacity(mesh.num_leaves());
    let leaves: Vec<usize> = (0..mesh.num_leaves()).collect();
    for block in leaves.chunks(chunk) {
        let mut pts = Vec::with_capacity(block.len() * per);
        for &l in block {
            let r = mesh.leaf_box(l);
            pts.extend(quad.points.iter().map(|&(s, t)| r.from_reference(s, t)));
        }
        let d = net.spatial_derivs(&pts);
        for (bi, &l) in block.iter().enumerate() {
            let r = mesh.leaf_box(l);
            let mut s = 0.0;
            for qi in 0..per {
                let p = bi * per + qi;
                let res = d[p].lap + f(pts[p].0, pts[p].1);
                s += quad.weights[qi] * r.area() * res * res;
            }
            out.push(s.sqrt());
        }
    }
    out
}

/// Real indicator `ζ_K = ‖total − u‖_{L²(K)}` with `q = k + 3`.
pub fn real_indicator<E: Fn(f64, f64) -> PointEval>(total: &FEFunction, exact: E) -> Vec<f64> {
    let q = total.space().order() + 3;
    leaf_errors(total.space().mesh(), q, |l, p| total.eval_leaf(l, p).expect("points in leaf"), exact).into_iter().map(|(l2, _)| l2.sqrt()).collect()
}

/// `⌈δ·n⌉`, robust to `δ·n` landing a rounding error above an integer.
pub fn fraction_count(delta: f64, n: usize) -> usize {
    let x = delta * n as f64;
    let c = (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize;
    c.min(n)
}

/// Fixed-fraction marking. Leaves are ranked by descending indicator with
/// ties broken by ascending id; the top `⌈δ_r·#T⌉` are refined and the
/// bottom `⌈δ_c·#T⌉`, minus any refined leaf, coarsened.
pub fn mark(ind: &[f64], delta_r: f64, delta_c: f64) -> (Vec<usize>, Vec<usize>) {
    let n = ind.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ind[b].total_cmp(&ind[a]).then(a.cmp(&b)));
    let nr = fraction_count(delta_r, n);
    let nc = fraction_count(delta_c, n);
    let mut refine: Vec<usize> = order[..nr].to_vec();
    let mut coarsen: Vec<usize> = order[n - nc..].iter().copied().filter(|l| !refine.contains(l)).collect();
    refine.sort_unstable();
    coarsen.sort_unstable();
    (refine, coarsen)
}

/// FE solve on a fixed mesh; Galerkin with an SPD factorization or
/// Petrov-Galerkin against the linearized test space with CGNR.
pub fn fem_solve(problem: &Problem, mesh: Arc<ForestMesh>, k: usize, petrov: bool) -> Result<FEFunction, AdaptError> {
    let trial = Arc::new(FESpace::with_dirichlet_boundary(mesh, k)?);
    let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| problem.u(x, y));
    if trial.num_free() == 0 {
        return Ok(lift);
    }
    let x = if petrov {
        let test = trial.linearized()?;
        let sys = assemble_system(&trial, &test, |x, y| problem.source(x, y), &lift)?;
        cgnr_solve(&sys.a, &sys.rhs, 1e-12, 20 * trial.num_free() + 1000)?.x
    } else {
        let sys = assemble_system(&trial, &trial, |x, y| problem.source(x, y), &lift)?;
        SpdFactor::factor(&sys.a)?.solve(&sys.rhs)?
    };
    Ok(lift.with_free(x))
}

/// One row of an adaptive run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub leaves: usize,
    pub dofs: usize,
    pub iters: usize,
    pub loss: f64,
    /// errors of the identified FE function (interpolated NN plus lifting,
    /// or the FE solution in FEM runs)
    pub feinn_l2: f64,
    pub feinn_h1: f64,
    /// errors of the raw network; NaN in FEM runs
    pub nn_l2: f64,
    pub nn_h1: f64,
    pub fem_l2: Option<f64>,
    pub fem_h1: Option<f64>,
}

/// Marking outcome of one adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkRecord {
    pub step: usize,
    pub leaves: usize,
    pub refined: usize,
    pub coarsened: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptHistory {
    pub steps: Vec<StepRecord>,
    pub marks: Vec<MarkRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

impl AdaptHistory {
    /// `step,leaves,dofs,iters,loss,feinn_l2,feinn_h1,nn_l2,nn_h1`, with
    /// `fem_l2,fem_h1` appended when baseline errors were recorded.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let with_fem = self.steps.iter().any(|s| s.fem_h1.is_some());
        write!(w, "step,leaves,dofs,iters,loss,feinn_l2,feinn_h1,nn_l2,nn_h1")?;
        writeln!(w, "{}", if with_fem { ",fem_l2,fem_h1" } else { "" })?;
        for s in &self.steps {
            write!(w, "{},{},{},{},{:e},{:e},{:e},{:e},{:e}", s.step, s.leaves, s.dofs, s.iters, s.loss, s.feinn_l2, s.feinn_h1, s.nn_l2, s.nn_h1)?;
            if with_fem {
                write!(w, ",{},{}", fmt_opt(s.fem_l2), fmt_opt(s.fem_h1))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// `step,leaves,dofs,fem_l2,fem_h1` for FEM-only runs.
    pub fn write_fem_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,leaves,dofs,fem_l2,fem_h1")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{:e},{:e}", s.step, s.leaves, s.dofs, s.feinn_l2, s.feinn_h1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub refine_fraction: f64,
    pub coarsen_fraction: f64,
    /// adaptation steps; the history has `max_steps + 1` rows
    pub max_steps: usize,
    pub indicator: IndicatorKind,
    pub order: usize,
    pub loss: LossMode,
    pub schedule: Schedule,
    /// upper bound on iterations per step, applied after the schedule
    pub iteration_cap: Option<usize>,
    pub optim: OptimConfig,
    /// run the last-layer solve before training on every mesh
    pub last_layer: bool,
    /// also record Galerkin FEM errors on every mesh
    pub compare_fem: bool,
}

impl AdaptConfig {
    /// Defaults for a problem: `δ_r = 0.15`, `δ_c = 0.01`, 7 steps, order 4,
    /// Kelly indicator, discrete ℓ1 loss, the problem's schedule.
    pub fn for_problem(problem: &Problem) -> Self {
        AdaptConfig {
            refine_fraction: 0.15,
            coarsen_fraction: 0.01,
            max_steps: 7,
            indicator: IndicatorKind::Kelly,
            order: 4,
            loss: LossMode::DiscreteL1,
            schedule: problem.schedule.clone(),
            iteration_cap: None,
            optim: OptimConfig::default(),
            last_layer: false,
            compare_fem: false,
        }
    }

    /// Training iterations at `step` on a mesh with `dofs` free DOFs.
    /// Preconditioned runs use a quarter of each band, half on the last step.
    pub fn iterations(&self, step: usize, dofs: usize) -> usize {
        let base = self.schedule.iterations(dofs);
        let n = if self.loss.is_preconditioned() {
            if step == self.max_steps {
                base.div_ceil(2)
            } else {
                base.div_ceil(4)
            }
        } else {
            base
        };
        self.iteration_cap.map_or(n, |c| n.min(c))
    }
}

/// Snapshot passed to step observers after errors are recorded and
/// (except on the last step) marking is done.
pub struct StepState<'a> {
    pub step: usize,
    pub mesh: &'a Arc<ForestMesh>,
    pub total: &'a FEFunction,
    pub net: Option<&'a Mlp>,
    pub report: Option<&'a TrainReport>,
    pub indicator: Option<&'a [f64]>,
    pub refine: &'a [usize],
    pub coarsen: &'a [usize],
    pub record: &'a StepRecord,
}

pub struct FeinnOutcome {
    pub net: Mlp,
    pub mesh: Arc<ForestMesh>,
    pub history: AdaptHistory,
}

fn nn_errors(net: &Mlp, problem: &Problem, mesh: &ForestMesh, q: usize) -> (f64, f64) {
    crate::assembly::error_norms(
        mesh,
        q,
        |_, pts| net.spatial_derivs(pts).into_iter().map(|d| PointEval { value: d.value, grad: d.grad }).collect(),
        |x, y| problem.exact(x, y),
    )
}

fn adapt_mesh(mesh: &ForestMesh, refine: &[usize], coarsen: &[usize], step: usize) -> Result<Arc<ForestMesh>, AdaptError> {
    let next = mesh.adapt(refine, coarsen)?;
    if !next.is_balanced() {
        return Err(AdaptError::Unbalanced(step));
    }
    Ok(Arc::new(next))
}

/// Train → estimate → mark → adapt, warm-starting the network across steps.
pub fn adaptive_feinn<O>(problem: &Problem, net: Mlp, mesh: ForestMesh, cfg: &AdaptConfig, mut observer: O) -> Result<FeinnOutcome, AdaptError>
where
    O: FnMut(&StepState),
{
    let mut mesh = Arc::new(mesh);
    let mut net = net;
    let mut history = AdaptHistory::default();
    for step in 0..=cfg.max_steps {
        let trial = Arc::new(FESpace::with_dirichlet_boundary(mesh.clone(), cfg.order)?);
        let test = Arc::new(trial.linearized()?);
        let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| problem.u(x, y));
        let sys = assemble_system(&trial, &test, |x, y| problem.source(x, y), &lift)?;
        if cfg.last_layer {
            net = last_layer_solve(&net, &sys, &trial)?.0;
        }
        let ctx = LossContext::new(trial.clone(), test, sys, cfg.loss)?;
        let iters = cfg.iterations(step, trial.num_free());
        let optim = OptimConfig { max_iters: iters, ..cfg.optim };
        let (trained, report) = train(&net, &ctx, &optim, |_| {})?;
        net = trained;
        let total = interpolate_net(&net, &lift);
        let q = cfg.order + 3;
        let (feinn_l2, feinn_h1) = crate::assembly::fe_error_norms(&total, |x, y| problem.exact(x, y));
        let (nn_l2, nn_h1) = nn_errors(&net, problem, &mesh, q);
        let (fem_l2, fem_h1) = if cfg.compare_fem {
            let fem = fem_solve(problem, mesh.clone(), cfg.order, false)?;
            let (a, b) = crate::assembly::fe_error_norms(&fem, |x, y| problem.exact(x, y));
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let record = StepRecord {
            step,
            leaves: mesh.num_leaves(),
            dofs: trial.num_free(),
            iters: report.iterations,
            loss: report.final_loss(),
            feinn_l2,
            feinn_h1,
            nn_l2,
            nn_h1,
            fem_l2,
            fem_h1,
        };
        history.steps.push(record.clone());
        if step == cfg.max_steps {
            observer(&StepState {
                step,
                mesh: &mesh,
                total: &total,
                net: Some(&net),
                report: Some(&report),
                indicator: None,
                refine: &[],
                coarsen: &[],
                record: &record,
            });
            break;
        }
        let ind = match cfg.indicator {
            IndicatorKind::Kelly => kelly_indicator(&total)?,
            IndicatorKind::Network => network_indicator(&net, &mesh, |x, y| problem.source(x, y)),
            IndicatorKind::Real => real_indicator(&total, |x, y| problem.exact(x, y)),
        };
        let (refine, coarsen) = mark(&ind, cfg.refine_fraction, cfg.coarsen_fraction);
        history.marks.push(MarkRecord { step, leaves: mesh.num_leaves(), refined: refine.len(), coarsened: coarsen.len() });
        observer(&StepState {
            step,
            mesh: &mesh,
            total: &total,
            net: Some(&net),
            report: Some(&report),
            indicator: Some(&ind),
            refine: &refine,
            coarsen: &coarsen,
            record: &record,
        });
        mesh = adapt_mesh(&mesh, &refine, &coarsen, step)?;
    }
    Ok(FeinnOutcome { net, mesh, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemConfig {
    pub order: usize,
    pub indicator: IndicatorKind,
    pub refine_fraction: f64,
    pub coarsen_fraction: f64,
    pub max_steps: usize,
    pub petrov: bool,
}

impl FemConfig {
    pub fn new(order: usize, indicator: IndicatorKind, max_steps: usize) -> Self {
        FemConfig { order, indicator, refine_fraction: 0.15, coarsen_fraction: 0.01, max_steps, petrov: false }
    }
}

pub struct FemOutcome {
    pub solution: FEFunction,
    pub history: AdaptHistory,
}

fn fem_record(problem: &Problem, sol: &FEFunction, step: usize) -> StepRecord {
    let (l2, h1) = crate::assembly::fe_error_norms(sol, |x, y| problem.exact(x, y));
    StepRecord {
        step,
        leaves: sol.space().mesh().num_leaves(),
        dofs: sol.space().num_free(),
        iters: 0,
        loss: 0.0,
        feinn_l2: l2,
        feinn_h1: h1,
        nn_l2: f64::NAN,
        nn_h1: f64::NAN,
        fem_l2: Some(l2),
        fem_h1: Some(h1),
    }
}

/// Solve → estimate → mark → adapt with the FE solution in place of the
/// trained network.
pub fn adaptive_fem<O>(problem: &Problem, mesh: ForestMesh, cfg: &FemConfig, mut observer: O) -> Result<FemOutcome, AdaptError>
where
    O: FnMut(&StepState),
{
    let mut mesh = Arc::new(mesh);
    let mut history = AdaptHistory::default();
    loop {
        let step = history.steps.len();
        let sol = fem_solve(problem, mesh.clone(), cfg.order, cfg.petrov)?;
        let record = fem_record(problem, &sol, step);
        history.steps.push(record.clone());
        if step == cfg.max_steps {
            observer(&StepState {
                step,
                mesh: &mesh,
                total: &sol,
                net: None,
                report: None,
                indicator: None,
                refine: &[],
                coarsen: &[],
                record: &record,
            });
            return Ok(FemOutcome { solution: sol, history });
        }
        let ind = match cfg.indicator {
            IndicatorKind::Kelly => kelly_indicator(&sol)?,
            IndicatorKind::Real => real_indicator(&sol, |x, y| problem.exact(x, y)),
            IndicatorKind::Network => return Err(AdaptError::Indicator("network")),
        };
        let (refine, coarsen) = mark(&ind, cfg.refine_fraction, cfg.coarsen_fraction);
        history.marks.push(MarkRecord { step, leaves: mesh.num_leaves(), refined: refine.len(), coarsened: coarsen.len() });
        observer(&StepState {
            step,
            mesh: &mesh,
            total: &sol,
            net: None,
            report: None,
            indicator: Some(&ind),
            refine: &refine,
            coarsen: &coarsen,
            record: &record,
        });
        mesh = adapt_mesh(&mesh, &refine, &coarsen, step)?;
    }
}

/// Galerkin FEM on `levels` successive uniform refinements of the initial
/// mesh (row `i` uses `initial_levels + i`).
pub fn uniform_fem(problem: &Problem, order: usize, initial_levels: u32, steps: usize) -> Result<AdaptHistory, AdaptError> {
    let base = ForestMesh::new(problem.coarse.clone());
    let mut history = AdaptHistory::default();
    for step in 0..steps {
        let mesh = Arc::new(base.refine_uniform(initial_levels + step as u32)?);
        let sol = fem_solve(problem, mesh, order, false)?;
        history.steps.push(fem_record(problem, &sol, step));
    }
    Ok(history)
}
