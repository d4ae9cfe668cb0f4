//! Manufactured Poisson problems `−Δu = f` with `u = g` on the whole
//! boundary: exact solutions, sources, domains and default settings.

use std::f64::consts::PI;

use crate::mesh::{CoarseMesh, ForestMesh};
use crate::neural::Jet2;
use crate::space::PointEval;

/// Training iteration bands selected by DOF milestones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub milestones: Vec<usize>,
    pub iters: Vec<usize>,
}

impl Schedule {
    pub fn new(milestones: Vec<usize>, iters: Vec<usize>) -> Self {
        assert_eq!(iters.len(), milestones.len() + 1, "one band per interval");
        assert!(milestones.windows(2).all(|w| w[0] < w[1]), "milestones must increase");
        Schedule { milestones, iters }
    }

    pub fn constant(iters: usize) -> Self {
        Schedule { milestones: vec![], iters: vec![iters] }
    }

    /// Band for a DOF count: `iters[i]` where `i` is the number of
    /// milestones not exceeding `dofs`.
    pub fn iterations(&self, dofs: usize) -> usize {
        self.iters[self.milestones.iter().filter(|&&m| dofs >= m).count()]
    }

    /// Every band divided by `factor`, rounding up.
    pub fn scaled_down(&self, factor: usize) -> Self {
        Schedule { milestones: self.milestones.clone(), iters: self.iters.iter().map(|i| i.div_ceil(factor)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    ArcWavefront,
    Fichera,
    /// `u = x^k + y^k`
    PolySmoke(u32),
    /// `u = x^k + y^k + sin(πx) sin(πy)`
    Smooth(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub kind: ProblemKind,
    pub name: String,
    pub coarse: CoarseMesh,
    pub initial_levels: u32,
    pub arch: Vec<usize>,
    pub schedule: Schedule,
}

const DEFAULT_ARCH: [usize; 6] = [2, 50, 50, 50, 50, 1];

/// Angle convention for the L-shape: `θ ∈ [−π/2, π]`, so the removed
/// quadrant is never reached and `y = −0.0` on the reentrant edge maps to π.
fn lshape_angle(x: f64, y: f64) -> f64 {
    let t = y.atan2(x);
    if t < -PI / 2.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

/// `atan2` on jets; the value follows [`lshape_angle`], derivatives are those
/// of any smooth branch.
fn jet_angle(x: Jet2, y: Jet2) -> Jet2 {
    let branch = if x.v.abs() >= y.v.abs() { (y / x).atan() } else { -(x / y).atan() };
    Jet2 { v: lshape_angle(x.v, y.v), ..branch }
}

impl Problem {
    pub fn arc_wavefront() -> Self {
        Problem {
            kind: ProblemKind::ArcWavefront,
            name: "arc_wavefront".into(),
            coarse: CoarseMesh::unit_square(),
            initial_levels: 3,
            arch: DEFAULT_ARCH.to_vec(),
            schedule: Schedule::new(vec![5000, 10000], vec![500, 1000, 1500]),
        }
    }

    pub fn fichera_lshape() -> Self {
        Problem {
            kind: ProblemKind::Fichera,
            name: "fichera".into(),
            coarse: CoarseMesh::l_shape(),
            initial_levels: 4,
            arch: DEFAULT_ARCH.to_vec(),
            schedule: Schedule::new(vec![10000, 20000], vec![3000, 4000, 5000]),
        }
    }

    pub fn poly_smoke(k: u32) -> Self {
        assert!(k >= 1);
        Problem {
            kind: ProblemKind::PolySmoke(k),
            name: "poly_smoke".into(),
            coarse: CoarseMesh::unit_square(),
            initial_levels: 2,
            arch: DEFAULT_ARCH.to_vec(),
            schedule: Schedule::constant(500),
        }
    }

    pub fn smooth(k: u32) -> Self {
        Problem { kind: ProblemKind::Smooth(k), name: "smooth".into(), ..Problem::poly_smoke(k) }
    }

    /// Looks a problem up by name; `k` parameterizes the polynomial problems.
    pub fn by_name(name: &str, k: u32) -> Option<Self> {
        match name {
            "arc_wavefront" | "arc" => Some(Problem::arc_wavefront()),
            "fichera" | "fichera_lshape" | "lshape" => Some(Problem::fichera_lshape()),
            "poly_smoke" => Some(Problem::poly_smoke(k.max(1))),
            "smooth" => Some(Problem::smooth(k.max(1))),
            _ => None,
        }
    }

    pub fn initial_mesh(&self) -> ForestMesh {
        ForestMesh::new(self.coarse.clone()).refine_uniform(self.initial_levels).expect("uniform refinement")
    }

    /// Exact solution as a jet in `(x, y)`.
    pub fn jet(&self, x: f64, y: f64) -> Jet2 {
        let (jx, jy) = (Jet2::x(x), Jet2::y(y));
        match self.kind {
            ProblemKind::ArcWavefront => {
                let r = ((jx + 0.05) * (jx + 0.05) + (jy + 0.05) * (jy + 0.05)).sqrt();
                ((r - 0.7) * 100.0).atan()
            }
            ProblemKind::Fichera => {
                if x == 0.0 && y == 0.0 {
                    return Jet2::constant(0.0);
                }
                let r = (jx * jx + jy * jy).sqrt();
                let t = jet_angle(jx, jy);
                r.powf(2.0 / 3.0) * ((t + PI / 2.0) * (2.0 / 3.0)).sin()
            }
            ProblemKind::PolySmoke(k) => jx.powi(k as i32) + jy.powi(k as i32),
            ProblemKind::Smooth(k) => jx.powi(k as i32) + jy.powi(k as i32) + (jx * PI).sin() * (jy * PI).sin(),
        }
    }

    pub fn u(&self, x: f64, y: f64) -> f64 {
        self.jet(x, y).v
    }

    pub fn exact(&self, x: f64, y: f64) -> PointEval {
        let j = self.jet(x, y);
        PointEval { value: j.v, grad: (j.g[0], j.g[1]) }
    }

    /// `f = −Δu`; exactly zero for the harmonic L-shape solution.
    pub fn source(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            ProblemKind::Fichera => 0.0,
            _ => -self.jet(x, y).lap,
        }
    }
}

/// Two-neuron tanh construction `f_m(x) = tanh(m·(tanh(m x + m/4) + tanh(−m x + m/4)))`:
/// hidden weights `[m, −m]`, hidden biases `m/4`, output layer `[m, m]`
/// with zero bias, followed by an outer tanh.
pub fn tanh_hat_emulation(m: f64) -> impl Fn(f64) -> f64 {
    assert!(m > 0.0);
    move |x: f64| (m * ((m * x + m / 4.0).tanh() + (-m * x + m / 4.0).tanh())).tanh()
}

/// Unit hat on `[−1, 1]`.
pub fn unit_hat(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Sampled sup-distance between `f` and the unit hat at `n` equispaced
/// points of `[−1, 1]`.
pub fn hat_distance(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    (0..n)
        .map(|i| {
            let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            (f(x) - unit_hat(x)).abs()
        })
        .fold(0.0, f64::max)
}
