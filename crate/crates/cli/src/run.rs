use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use feinn::adapt::{adaptive_feinn, adaptive_fem, uniform_fem, AdaptError, StepState};
use feinn::assembly::{assemble_system, fe_error_norms, NormKind};
use feinn::neural::NeuralError;
use feinn::report::{aggregate, loglog_slope, write_aggregate, write_convergence_table, ErrorSource};
use feinn::space::SpaceError;
use feinn::training::{interpolate_net, train, LossContext, LossMode, OptimConfig, TrainError};
use feinn::{AdaptConfig, AdaptHistory, FEFunction, FESpace, FemConfig, Mlp, Problem};
use log::info;
use thiserror::Error;

use crate::config::{ConfigError, Mode, RunConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Files written by a run, in creation order.
#[derive(Debug, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.into(), source })?;
        Ok(Out { dir: dir.into(), files: vec![] })
    }

    /// Creates `name` below the output directory and hands a buffered
    /// writer to `body`.
    fn write<F>(&mut self, name: &str, body: F) -> Result<(), RunError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), RunError>,
    {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| RunError::Io { path: parent.into(), source })?;
        }
        let io = |source| RunError::Io { path: path.clone(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        body(&mut w)?;
        w.flush().map_err(io)?;
        self.files.push(path);
        Ok(())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.into(), source }
}

/// Runs the configured experiment and writes its artifacts to `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let mut out = Out::new(&cfg.out)?;
    let problem = cfg.build_problem();
    info!("problem {} mode {:?} order {}", problem.name, cfg.mode, cfg.order);
    match cfg.mode {
        Mode::FeinnAdaptive => {
            run_feinn_seed(cfg, &problem, cfg.seeds[0], &mut out)?;
        }
        Mode::SeedStudy => {
            let mut histories = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                histories.push(run_feinn_seed(cfg, &problem, seed, &mut out)?);
            }
            for src in [ErrorSource::Feinn, ErrorSource::Nn] {
                let rows = aggregate(&histories, src);
                let name = format!("aggregate_{}.csv", src.prefix());
                let path = cfg.out.join(&name);
                out.write(&name, |w| write_aggregate(&rows, src, w).map_err(io_err(&path)))?;
            }
        }
        Mode::FemAdaptive => run_fem_adaptive(cfg, &problem, &mut out)?,
        Mode::FemUniform => {
            let levels = cfg.initial_levels.unwrap_or(problem.initial_levels);
            let h = uniform_fem(&problem, cfg.order, levels, cfg.uniform_steps)?;
            write_fem_history(&h, &mut out)?;
        }
        Mode::NormStudy => run_norm_study(cfg, &problem, &mut out)?,
    }
    Ok(RunSummary { files: out.files })
}

fn adapt_config(cfg: &RunConfig, problem: &Problem) -> AdaptConfig {
    let mut a = AdaptConfig::for_problem(problem);
    a.refine_fraction = cfg.refine_fraction;
    a.coarsen_fraction = cfg.coarsen_fraction;
    a.max_steps = cfg.max_steps;
    a.indicator = cfg.indicator;
    a.order = cfg.order;
    a.loss = cfg.loss_mode();
    a.iteration_cap = cfg.iteration_cap;
    a.optim = OptimConfig { method: cfg.method(), ..OptimConfig::default() };
    a.last_layer = cfg.last_layer;
    a.compare_fem = cfg.compare_fem;
    a
}

fn write_mesh_and_trace(state: &StepState, prefix: &str, out: &mut Out) -> Result<(), RunError> {
    let name = format!("{prefix}mesh_step{}.txt", state.step);
    let path = out.dir.join(&name);
    out.write(&name, |w| state.mesh.write_leaves(w).map_err(io_err(&path)))?;
    if let Some(rep) = state.report {
        let name = format!("{prefix}trace_step{}.csv", state.step);
        let path = out.dir.join(&name);
        out.write(&name, |w| rep.write_trace(w).map_err(io_err(&path)))?;
    }
    Ok(())
}

fn write_matrix(trial: Arc<FESpace>, test: &FESpace, problem: &Problem, name: &str, out: &mut Out) -> Result<(), RunError> {
    let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| problem.u(x, y));
    let sys = assemble_system(&trial, test, |x, y| problem.source(x, y), &lift)?;
    let path = out.dir.join(name);
    out.write(name, |w| sys.a.write_coo(w).map_err(io_err(&path)))
}

fn run_feinn_seed(cfg: &RunConfig, problem: &Problem, seed: u64, out: &mut Out) -> Result<AdaptHistory, RunError> {
    let prefix = format!("seed{seed}/");
    let acfg = adapt_config(cfg, problem);
    let net = Mlp::new(&problem.arch, seed)?;
    let mut pending: Vec<Result<(), RunError>> = vec![];
    let mut final_total = None;
    let outcome = adaptive_feinn(problem, net, problem.initial_mesh(), &acfg, |s| {
        let r = s.record;
        info!(
            "seed {seed} step {} leaves {} dofs {} iters {} loss {:e} feinn_h1 {:e} nn_h1 {:e}",
            r.step, r.leaves, r.dofs, r.iters, r.loss, r.feinn_h1, r.nn_h1
        );
        pending.push(write_mesh_and_trace(s, &prefix, out));
        if s.step == acfg.max_steps {
            final_total = Some(s.total.clone());
        }
    })?;
    pending.into_iter().collect::<Result<Vec<_>, _>>()?;
    let h = outcome.history;
    let path = out.dir.join(format!("{prefix}history.csv"));
    out.write(&format!("{prefix}history.csv"), |w| h.write_csv(w).map_err(io_err(&path)))?;
    let path = out.dir.join(format!("{prefix}convergence.txt"));
    out.write(&format!("{prefix}convergence.txt"), |w| write_convergence_table(&h, w).map_err(io_err(&path)))?;
    out.write(&format!("{prefix}checkpoint.txt"), |w| outcome.net.save(w).map_err(RunError::from))?;
    if let Some(total) = final_total {
        let path = out.dir.join(format!("{prefix}solution.txt"));
        out.write(&format!("{prefix}solution.txt"), |w| total.write_samples(cfg.sample_density, w).map_err(io_err(&path)))?;
    }
    if cfg.export_matrix {
        let trial = Arc::new(FESpace::with_dirichlet_boundary(outcome.mesh.clone(), cfg.order)?);
        let test = trial.linearized()?;
        write_matrix(trial, &test, problem, &format!("{prefix}matrix.txt"), out)?;
    }
    Ok(h)
}

fn write_fem_history(h: &AdaptHistory, out: &mut Out) -> Result<(), RunError> {
    let path = out.dir.join("history.csv");
    out.write("history.csv", |w| h.write_fem_csv(w).map_err(io_err(&path)))?;
    let dofs: Vec<f64> = h.steps.iter().map(|s| s.dofs as f64).collect();
    let l2: Vec<f64> = h.steps.iter().map(|s| s.feinn_l2).collect();
    let h1: Vec<f64> = h.steps.iter().map(|s| s.feinn_h1).collect();
    let path = out.dir.join("convergence.txt");
    out.write("convergence.txt", |w| {
        h.write_fem_csv(&mut *w).map_err(io_err(&path))?;
        writeln!(w, "# slope vs dofs: fem_l2={:.4} fem_h1={:.4}", loglog_slope(&dofs, &l2), loglog_slope(&dofs, &h1)).map_err(io_err(&path))
    })
}

fn run_fem_adaptive(cfg: &RunConfig, problem: &Problem, out: &mut Out) -> Result<(), RunError> {
    let fcfg = FemConfig {
        order: cfg.order,
        indicator: cfg.indicator,
        refine_fraction: cfg.refine_fraction,
        coarsen_fraction: cfg.coarsen_fraction,
        max_steps: cfg.max_steps,
        petrov: cfg.petrov,
    };
    let mut pending = vec![];
    let outcome = adaptive_fem(problem, problem.initial_mesh(), &fcfg, |s| {
        info!("step {} leaves {} dofs {} fem_h1 {:e}", s.step, s.record.leaves, s.record.dofs, s.record.feinn_h1);
        pending.push(write_mesh_and_trace(s, "", out));
    })?;
    pending.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_fem_history(&outcome.history, out)?;
    let path = out.dir.join("solution.txt");
    out.write("solution.txt", |w| outcome.solution.write_samples(cfg.sample_density, w).map_err(io_err(&path)))?;
    if cfg.export_matrix {
        let trial = outcome.solution.space().clone();
        let test = if cfg.petrov { trial.linearized()? } else { (*trial).clone() };
        write_matrix(trial, &test, problem, "matrix.txt", out)?;
    }
    Ok(())
}

/// Trains from the same initial network on the initial mesh with the
/// discrete ℓ1 loss and every preconditioned norm.
fn run_norm_study(cfg: &RunConfig, problem: &Problem, out: &mut Out) -> Result<(), RunError> {
    let mesh = Arc::new(problem.initial_mesh());
    let trial = Arc::new(FESpace::with_dirichlet_boundary(mesh, cfg.order)?);
    let test = Arc::new(trial.linearized()?);
    let lift = FEFunction::lift_dirichlet(trial.clone(), |x, y| problem.u(x, y));
    let sys = assemble_system(&trial, &test, |x, y| problem.source(x, y), &lift)?;
    let net = Mlp::new(&problem.arch, cfg.seeds[0])?;
    let optim = OptimConfig { max_iters: cfg.train_iters, method: cfg.method(), ..OptimConfig::default() };
    let modes = std::iter::once(LossMode::DiscreteL1).chain(NormKind::ALL.iter().map(|&n| LossMode::Preconditioned(n)));
    for mode in modes {
        let ctx = LossContext::new(trial.clone(), test.clone(), sys.clone(), mode)?;
        let mut errors = vec![];
        let last = cfg.train_iters;
        let (_, rep) = train(&net, &ctx, &optim, |it| {
            if it.iter % cfg.error_every == 0 || it.iter == last {
                if let Ok(n) = net.with_params(it.theta) {
                    let (l2, h1) = fe_error_norms(&interpolate_net(&n, &lift), |x, y| problem.exact(x, y));
                    errors.push((it.iter, l2, h1));
                }
            }
        })?;
        if errors.last().map(|e| e.0) != Some(rep.iterations) {
            let n = net.with_params(&rep.theta)?;
            let (l2, h1) = fe_error_norms(&interpolate_net(&n, &lift), |x, y| problem.exact(x, y));
            errors.push((rep.iterations, l2, h1));
        }
        let label = mode.label();
        info!("{label}: {} iterations, loss {:e}, feinn_h1 {:e}", rep.iterations, rep.final_loss(), errors.last().map_or(f64::NAN, |e| e.2));
        let name = format!("trace_{label}.csv");
        let path = out.dir.join(&name);
        out.write(&name, |w| rep.write_trace(w).map_err(io_err(&path)))?;
        let name = format!("errors_{label}.csv");
        let path = out.dir.join(&name);
        out.write(&name, |w| {
            writeln!(w, "iter,feinn_l2,feinn_h1").map_err(io_err(&path))?;
            for (i, l2, h1) in &errors {
                writeln!(w, "{i},{l2:e},{h1:e}").map_err(io_err(&path))?;
            }
            Ok(())
        })?;
    }
    Ok(())
}
