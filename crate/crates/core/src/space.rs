//! Continuous Lagrange spaces on forest meshes.
//!
//! Nodes live on an integer lattice per tree (`order · 2^MAX_LEVEL` points
//! per tree side), which makes node identification across leaves and trees
//! exact. Nodes on a fine face next to a coarser leaf are *hanging*: their
//! value is never stored but expanded through multi-point constraints onto
//! the coarse side.
//!
//! The same builder produces two flavors of space:
//!
//! * the order-`k` trial space, one cell per leaf;
//! * the linearized test space, where every leaf is split into `k × k`
//!   bilinear sub-cells whose vertices are exactly the trial nodes.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{Face, ForestMesh, MeshError, NeighborKind, Rect, MAX_LEVEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("polynomial order must be at least 1")]
    ZeroOrder,
    #[error("hanging node {0} lies on the Dirichlet boundary")]
    HangingOnBoundary(usize),
    #[error("test space dimension {test} differs from trial dimension {trial}")]
    DimensionMismatch { trial: usize, test: usize },
    #[error("spaces are built on different meshes")]
    MeshMismatch,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Classification of a node; the payload indexes the class-local numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DofClass {
    Free(usize),
    Dirichlet(usize),
    Hanging(usize),
}

/// A stored degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dof {
    Free(usize),
    Dirichlet(usize),
}

/// Equispaced 1D Lagrange basis of degree `p` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lagrange1d {
    nodes: Vec<f64>,
}

impl Lagrange1d {
    pub fn new(p: usize) -> Self {
        Lagrange1d { nodes: (0..=p).map(|i| i as f64 / p as f64).collect() }
    }

    pub fn degree(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn value(&self, i: usize, t: f64) -> f64 {
        let ti = self.nodes[i];
        self.nodes.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &tj)| (t - tj) / (ti - tj)).product()
    }

    pub fn derivative(&self, i: usize, t: f64) -> f64 {
        let ti = self.nodes[i];
        let mut sum = 0.0;
        for (m, &tm) in self.nodes.iter().enumerate() {
            if m == i {
                continue;
            }
            let mut prod = 1.0 / (ti - tm);
            for (j, &tj) in self.nodes.iter().enumerate() {
                if j != i && j != m {
                    prod *= (t - tj) / (ti - tj);
                }
            }
            sum += prod;
        }
        sum
    }

    /// Values and derivatives of all basis functions at `t`.
    pub fn eval_all(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.nodes.len();
        ((0..n).map(|i| self.value(i, t)).collect(), (0..n).map(|i| self.derivative(i, t)).collect())
    }
}

/// Tensor-product basis values and reference gradients at one point,
/// indexed by local node `i + j (p+1)`.
#[derive(Debug, Clone)]
pub struct TensorEval {
    pub value: Vec<f64>,
    pub ds: Vec<f64>,
    pub dt: Vec<f64>,
}

pub fn tensor_eval(basis: &Lagrange1d, s: f64, t: f64) -> TensorEval {
    let (vs, dvs) = basis.eval_all(s);
    let (vt, dvt) = basis.eval_all(t);
    let n = vs.len();
    let mut out = TensorEval { value: vec![0.0; n * n], ds: vec![0.0; n * n], dt: vec![0.0; n * n] };
    for j in 0..n {
        for i in 0..n {
            let l = i + j * n;
            out.value[l] = vs[i] * vt[j];
            out.ds[l] = dvs[i] * vt[j];
            out.dt[l] = vs[i] * dvt[j];
        }
    }
    out
}

/// Integration cell of a space: a leaf (trial) or a sub-cell of a leaf (test).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceCell {
    pub leaf: usize,
    pub rect: Rect,
}

/// Lagrange space with hanging-node constraints and Dirichlet classification.
#[derive(Debug, Clone)]
pub struct FESpace {
    mesh: Arc<ForestMesh>,
    /// lattice points per leaf side (the trial order)
    lattice: usize,
    /// polynomial degree on each cell
    cell_order: usize,
    /// sub-cells per leaf side
    subdivision: usize,
    basis: Lagrange1d,
    cells: Vec<SpaceCell>,
    cell_nodes: Vec<usize>,
    nodes: Vec<(f64, f64)>,
    classes: Vec<DofClass>,
    free_nodes: Vec<usize>,
    dirichlet_nodes: Vec<usize>,
    hanging_nodes: Vec<usize>,
    /// per node: expansion onto stored DOFs
    expansion: Vec<Vec<(Dof, f64)>>,
    /// per hanging node: direct masters (node ids) and coefficients
    constraints: Vec<Vec<(usize, f64)>>,
    /// key of every node on the tree lattice
    keys: Vec<(u32, i64, i64)>,
}

type NodeKey = (u32, i64, i64);

impl FESpace {
    /// Order-`k` space; boundary nodes satisfying `dirichlet` are Dirichlet.
    pub fn new<P>(mesh: Arc<ForestMesh>, k: usize, dirichlet: P) -> Result<Self, SpaceError>
    where
        P: Fn(f64, f64) -> bool,
    {
        if k == 0 {
            return Err(SpaceError::ZeroOrder);
        }
        Self::build(mesh, k, k, &dirichlet)
    }

    /// Order-`k` space with the whole boundary Dirichlet.
    pub fn with_dirichlet_boundary(mesh: Arc<ForestMesh>, k: usize) -> Result<Self, SpaceError> {
        Self::new(mesh, k, |_, _| true)
    }

    /// The linearized test space of `self`: every leaf split into `k × k`
    /// bilinear sub-cells whose vertices coincide with the trial nodes.
    pub fn linearized(&self) -> Result<FESpace, SpaceError> {
        let test = Self::build_with_classes(self, 1)?;
        if test.num_free() != self.num_free() || test.num_dirichlet() != self.num_dirichlet() {
            return Err(SpaceError::DimensionMismatch { trial: self.num_free(), test: test.num_free() });
        }
        debug_assert_eq!(test.keys, self.keys);
        Ok(test)
    }

    fn build(mesh: Arc<ForestMesh>, lattice: usize, cell_order: usize, dirichlet: &dyn Fn(f64, f64) -> bool) -> Result<Self, SpaceError> {
        let mut s = Self::skeleton(mesh, lattice, cell_order, None);
        s.classify(Some(dirichlet), None)?;
        Ok(s)
    }

    fn build_with_classes(trial: &FESpace, cell_order: usize) -> Result<Self, SpaceError> {
        let mut s = Self::skeleton(trial.mesh.clone(), trial.lattice, cell_order, Some(trial));
        s.classify(None, Some(trial))?;
        Ok(s)
    }

    fn skeleton(mesh: Arc<ForestMesh>, lattice: usize, cell_order: usize, seed: Option<&FESpace>) -> Self {
        let subdivision = lattice / cell_order;
        debug_assert_eq!(subdivision * cell_order, lattice);
        let denom = lattice as i64 * (1i64 << MAX_LEVEL);
        let np = cell_order + 1;
        let mut index: HashMap<NodeKey, usize> = HashMap::new();
        let mut keys = Vec::new();
        let mut nodes = Vec::new();
        if let Some(t) = seed {
            keys = t.keys.clone();
            nodes = t.nodes.clone();
            index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        }
        let mut cells = Vec::new();
        let mut cell_nodes = Vec::new();
        let roots = mesh.coarse().cells().to_vec();
        for leaf in 0..mesh.num_leaves() {
            let c = mesh.leaf(leaf);
            let scale = 1i64 << (MAX_LEVEL - c.level);
            let rect = mesh.leaf_box(leaf);
            let (sw, sh) = (rect.wx / subdivision as f64, rect.wy / subdivision as f64);
            for b in 0..subdivision {
                for a in 0..subdivision {
                    cells.push(SpaceCell { leaf, rect: Rect::new(rect.x0 + a as f64 * sw, rect.y0 + b as f64 * sh, sw, sh) });
                    for j in 0..np {
                        for i in 0..np {
                            let lx = c.ix as i64 * lattice as i64 + (a * cell_order + i) as i64;
                            let ly = c.iy as i64 * lattice as i64 + (b * cell_order + j) as i64;
                            let key = mesh.canonical_lattice_point(c.root, lx * scale, ly * scale, denom);
                            let id = *index.entry(key).or_insert_with(|| {
                                let r = &roots[key.0 as usize];
                                let x = r.x0 + r.wx * (key.1 as f64 / denom as f64);
                                let y = r.y0 + r.wy * (key.2 as f64 / denom as f64);
                                nodes.push((x, y));
                                keys.push(key);
                                nodes.len() - 1
                            });
                            cell_nodes.push(id);
                        }
                    }
                }
            }
        }
        let n = nodes.len();
        FESpace {
            mesh,
            lattice,
            cell_order,
            subdivision,
            basis: Lagrange1d::new(cell_order),
            cells,
            cell_nodes,
            nodes,
            classes: vec![DofClass::Free(usize::MAX); n],
            free_nodes: vec![],
            dirichlet_nodes: vec![],
            hanging_nodes: vec![],
            expansion: vec![],
            constraints: vec![],
            keys,
        }
    }

    /// Local node indices (within a cell) on a cell face, ordered along it.
    fn face_local(&self, face: Face) -> Vec<usize> {
        let np = self.cell_order + 1;
        (0..np)
            .map(|m| match face {
                Face::Left => m * np,
                Face::Right => np - 1 + m * np,
                Face::Bottom => m,
                Face::Top => m + (np - 1) * np,
            })
            .collect()
    }

    /// Cells of `leaf` touching `face`, ordered along it.
    fn leaf_face_cells(&self, leaf: usize, face: Face) -> Vec<usize> {
        let s = self.subdivision;
        let base = leaf * s * s;
        (0..s)
            .map(|m| {
                base + match face {
                    Face::Left => m * s,
                    Face::Right => s - 1 + m * s,
                    Face::Bottom => m,
                    Face::Top => m + (s - 1) * s,
                }
            })
            .collect()
    }

    /// Nodes of `leaf` along `face`, ordered along it (lattice + 1 nodes).
    fn leaf_face_nodes(&self, leaf: usize, face: Face) -> Vec<usize> {
        let np = self.cell_order + 1;
        let mut out = Vec::with_capacity(self.lattice + 1);
        let local = self.face_local(face);
        for (ci, cell) in self.leaf_face_cells(leaf, face).into_iter().enumerate() {
            for (m, &l) in local.iter().enumerate() {
                if ci > 0 && m == 0 {
                    continue;
                }
                out.push(self.cell_nodes[cell * np * np + l]);
            }
        }
        out
    }

    fn classify(&mut self, dirichlet: Option<&dyn Fn(f64, f64) -> bool>, given: Option<&FESpace>) -> Result<(), SpaceError> {
        let n = self.nodes.len();
        let mesh = self.mesh.clone();
        let mut hanging: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        let mut on_boundary = vec![false; n];
        let lat = self.lattice;
        for leaf in 0..mesh.num_leaves() {
            for face in Face::ALL {
                let nb = mesh.face_neighbor(leaf, face);
                match nb.kind {
                    NeighborKind::Boundary => {
                        for v in self.leaf_face_nodes(leaf, face) {
                            on_boundary[v] = true;
                        }
                    }
                    NeighborKind::Coarser => {
                        let coarse = nb.leaves[0];
                        let fine_cell = mesh.leaf(leaf);
                        // position of the fine face within the coarse face
                        let along = if face.is_vertical() { fine_cell.iy } else { fine_cell.ix };
                        let offset = (along & 1) as usize;
                        let fine_nodes = self.leaf_face_nodes(leaf, face);
                        let coarse_face = face.opposite();
                        let coarse_cells = self.leaf_face_cells(coarse, coarse_face);
                        let coarse_local = self.face_local(coarse_face);
                        let np = self.cell_order + 1;
                        for (j, &v) in fine_nodes.iter().enumerate() {
                            let pos = offset * lat + j; // in fine lattice units along the coarse face
                            if pos.is_multiple_of(2) || hanging.contains_key(&v) {
                                continue;
                            }
                            // parameter along the coarse face in coarse-lattice units
                            let u = pos as f64 / 2.0;
                            let seg = ((pos / 2) / self.cell_order).min(self.subdivision - 1);
                            let t = (u - (seg * self.cell_order) as f64) / self.cell_order as f64;
                            let cell = coarse_cells[seg];
                            let masters = coarse_local
                                .iter()
                                .enumerate()
                                .map(|(m, &l)| (self.cell_nodes[cell * np * np + l], self.basis.value(m, t)))
                                .filter(|&(_, c)| c != 0.0)
                                .collect();
                            hanging.insert(v, masters);
                        }
                    }
                    _ => {}
                }
            }
        }

        let (classes, free_nodes, dirichlet_nodes, hanging_nodes) = match given {
            Some(t) => {
                // same nodes, same numbering; only the constraint weights differ
                if t.hanging_nodes.iter().any(|v| !hanging.contains_key(v)) || t.hanging_nodes.len() != hanging.len() {
                    return Err(SpaceError::DimensionMismatch { trial: t.num_hanging(), test: hanging.len() });
                }
                (t.classes.clone(), t.free_nodes.clone(), t.dirichlet_nodes.clone(), t.hanging_nodes.clone())
            }
            None => {
                let mut classes = vec![DofClass::Free(usize::MAX); n];
                let mut free_nodes = Vec::new();
                let mut dirichlet_nodes = Vec::new();
                let mut hanging_nodes = Vec::new();
                // number in order of first appearance in the cell traversal
                let mut seen = vec![false; n];
                let order: Vec<usize> = self.cell_nodes.iter().copied().filter(|&v| !std::mem::replace(&mut seen[v], true)).collect();
                for v in order {
                    classes[v] = if hanging.contains_key(&v) {
                        if on_boundary[v] {
                            return Err(SpaceError::HangingOnBoundary(v));
                        }
                        hanging_nodes.push(v);
                        DofClass::Hanging(hanging_nodes.len() - 1)
                    } else if on_boundary[v] && dirichlet.is_none_or(|p| p(self.nodes[v].0, self.nodes[v].1)) {
                        dirichlet_nodes.push(v);
                        DofClass::Dirichlet(dirichlet_nodes.len() - 1)
                    } else {
                        free_nodes.push(v);
                        DofClass::Free(free_nodes.len() - 1)
                    };
                }
                (classes, free_nodes, dirichlet_nodes, hanging_nodes)
            }
        };

        let constraints: Vec<Vec<(usize, f64)>> = hanging_nodes.iter().map(|v| hanging[v].clone()).collect();
        // expansion onto stored dofs, resolving chained constraints
        let mut expansion: Vec<Vec<(Dof, f64)>> = vec![Vec::new(); n];
        fn expand(v: usize, classes: &[DofClass], constraints: &[Vec<(usize, f64)>], out: &mut Vec<(Dof, f64)>, coef: f64, depth: usize) {
            assert!(depth < 64, "cyclic hanging-node constraints");
            match classes[v] {
                DofClass::Free(i) => out.push((Dof::Free(i), coef)),
                DofClass::Dirichlet(i) => out.push((Dof::Dirichlet(i), coef)),
                DofClass::Hanging(h) => {
                    for &(m, c) in &constraints[h] {
                        expand(m, classes, constraints, out, coef * c, depth + 1);
                    }
                }
            }
        }
        for (v, e) in expansion.iter_mut().enumerate() {
            let mut raw = Vec::new();
            expand(v, &classes, &constraints, &mut raw, 1.0, 0);
            raw.sort_by_key(|a| a.0);
            for (d, c) in raw {
                match e.last_mut() {
                    Some(last) if last.0 == d => last.1 += c,
                    _ => e.push((d, c)),
                }
            }
        }
        self.classes = classes;
        self.free_nodes = free_nodes;
        self.dirichlet_nodes = dirichlet_nodes;
        self.hanging_nodes = hanging_nodes;
        self.constraints = constraints;
        self.expansion = expansion;
        Ok(())
    }

    pub fn mesh(&self) -> &Arc<ForestMesh> {
        &self.mesh
    }

    /// Order of the trial space this space belongs to (lattice density).
    pub fn order(&self) -> usize {
        self.lattice
    }

    /// Polynomial degree per cell direction (1 for the linearized space).
    pub fn cell_order(&self) -> usize {
        self.cell_order
    }

    pub fn subdivision(&self) -> usize {
        self.subdivision
    }

    pub fn is_linearized(&self) -> bool {
        self.cell_order == 1 && self.lattice > 1
    }

    pub fn basis(&self) -> &Lagrange1d {
        &self.basis
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[SpaceCell] {
        &self.cells
    }

    pub fn nodes_per_cell(&self) -> usize {
        (self.cell_order + 1) * (self.cell_order + 1)
    }

    pub fn cell_nodes(&self, cell: usize) -> &[usize] {
        let n = self.nodes_per_cell();
        &self.cell_nodes[cell * n..(cell + 1) * n]
    }

    /// Cells belonging to a leaf.
    pub fn leaf_cells(&self, leaf: usize) -> std::ops::Range<usize> {
        let s2 = self.subdivision * self.subdivision;
        leaf * s2..(leaf + 1) * s2
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, v: usize) -> (f64, f64) {
        self.nodes[v]
    }

    pub fn class(&self, v: usize) -> DofClass {
        self.classes[v]
    }

    pub fn num_free(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn num_dirichlet(&self) -> usize {
        self.dirichlet_nodes.len()
    }

    pub fn num_hanging(&self) -> usize {
        self.hanging_nodes.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet_nodes
    }

    pub fn hanging_nodes(&self) -> &[usize] {
        &self.hanging_nodes
    }

    /// Coordinates of the free nodes, in free-DOF order.
    pub fn free_coords(&self) -> Vec<(f64, f64)> {
        self.free_nodes.iter().map(|&v| self.nodes[v]).collect()
    }

    /// Direct masters of the `h`-th hanging node.
    pub fn constraint(&self, h: usize) -> &[(usize, f64)] {
        &self.constraints[h]
    }

    /// Expansion of a node onto stored DOFs.
    pub fn expansion(&self, v: usize) -> &[(Dof, f64)] {
        &self.expansion[v]
    }

    /// Cell containing the point within `leaf`.
    pub fn cell_in_leaf(&self, leaf: usize, x: f64, y: f64) -> Result<usize, SpaceError> {
        let rect = self.mesh.leaf_box(leaf);
        if !rect.contains(x, y) {
            return Err(MeshError::PointOutsideLeaf(x, y, leaf).into());
        }
        let (s, t) = rect.to_reference(x, y);
        let n = self.subdivision;
        let a = ((s * n as f64).floor().max(0.0) as usize).min(n - 1);
        let b = ((t * n as f64).floor().max(0.0) as usize).min(n - 1);
        Ok(leaf * n * n + a + b * n)
    }

    /// Whether two spaces share the node lattice of one mesh.
    pub fn same_nodes(&self, other: &FESpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh) && self.keys == other.keys
    }
}

/// Function in an [`FESpace`]; hanging values are derived on demand.
#[derive(Debug, Clone)]
pub struct FEFunction {
    space: Arc<FESpace>,
    free: Vec<f64>,
    dirichlet: Vec<f64>,
}

/// Value and gradient at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEval {
    pub value: f64,
    pub grad: (f64, f64),
}

impl FEFunction {
    pub fn new(space: Arc<FESpace>, free: Vec<f64>, dirichlet: Vec<f64>) -> Self {
        assert_eq!(free.len(), space.num_free());
        assert_eq!(dirichlet.len(), space.num_dirichlet());
        FEFunction { space, free, dirichlet }
    }

    pub fn zero(space: Arc<FESpace>) -> Self {
        let (nf, nd) = (space.num_free(), space.num_dirichlet());
        Self::new(space, vec![0.0; nf], vec![0.0; nd])
    }

    /// Interpolation: free and Dirichlet DOFs take the values of `g` at their
    /// nodes; hanging nodes follow from the constraints.
    pub fn interpolate<G: Fn(f64, f64) -> f64>(space: Arc<FESpace>, g: G) -> Self {
        let free = space.free_nodes.iter().map(|&v| g(space.nodes[v].0, space.nodes[v].1)).collect();
        let dirichlet = space.dirichlet_nodes.iter().map(|&v| g(space.nodes[v].0, space.nodes[v].1)).collect();
        Self::new(space, free, dirichlet)
    }

    /// Dirichlet lifting: `g` on Dirichlet nodes, zero elsewhere.
    pub fn lift_dirichlet<G: Fn(f64, f64) -> f64>(space: Arc<FESpace>, g: G) -> Self {
        let free = vec![0.0; space.num_free()];
        let dirichlet = space.dirichlet_nodes.iter().map(|&v| g(space.nodes[v].0, space.nodes[v].1)).collect();
        Self::new(space, free, dirichlet)
    }

    /// Same Dirichlet values as `self`, new free values.
    pub fn with_free(&self, free: Vec<f64>) -> Self {
        Self::new(self.space.clone(), free, self.dirichlet.clone())
    }

    pub fn space(&self) -> &Arc<FESpace> {
        &self.space
    }

    pub fn free(&self) -> &[f64] {
        &self.free
    }

    pub fn dirichlet(&self) -> &[f64] {
        &self.dirichlet
    }

    pub fn dof(&self, d: Dof) -> f64 {
        match d {
            Dof::Free(i) => self.free[i],
            Dof::Dirichlet(i) => self.dirichlet[i],
        }
    }

    pub fn node_value(&self, v: usize) -> f64 {
        self.space.expansion(v).iter().map(|&(d, c)| c * self.dof(d)).sum()
    }

    /// Local coefficient vector of a cell.
    pub fn cell_values(&self, cell: usize) -> Vec<f64> {
        self.space.cell_nodes(cell).iter().map(|&v| self.node_value(v)).collect()
    }

    /// Evaluates at physical points inside `cell`, with precomputed local values.
    pub fn eval_cell_with(&self, cell: usize, local: &[f64], x: f64, y: f64) -> PointEval {
        let rect = self.space.cells[cell].rect;
        let (s, t) = rect.to_reference(x, y);
        let te = tensor_eval(&self.space.basis, s, t);
        let mut out = PointEval { value: 0.0, grad: (0.0, 0.0) };
        for (l, &u) in local.iter().enumerate() {
            out.value += u * te.value[l];
            out.grad.0 += u * te.ds[l];
            out.grad.1 += u * te.dt[l];
        }
        out.grad.0 /= rect.wx;
        out.grad.1 /= rect.wy;
        out
    }

    /// Values and gradients at points inside one leaf.
    pub fn eval_leaf(&self, leaf: usize, points: &[(f64, f64)]) -> Result<Vec<PointEval>, SpaceError> {
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        points
            .iter()
            .map(|&(x, y)| {
                let cell = self.space.cell_in_leaf(leaf, x, y)?;
                let local = cache.entry(cell).or_insert_with(|| self.cell_values(cell));
                Ok(self.eval_cell_with(cell, local, x, y))
            })
            .collect()
    }

    /// Evaluation at an arbitrary point of the domain.
    pub fn eval_point(&self, x: f64, y: f64) -> Option<PointEval> {
        let leaf = self.space.mesh.locate(x, y)?;
        self.eval_leaf(leaf, &[(x, y)]).ok().map(|v| v[0])
    }

    /// Writes `x y value` on an `n × n` grid of points per leaf.
    pub fn write_samples<W: Write>(&self, n: usize, mut w: W) -> io::Result<()> {
        writeln!(w, "# x y value")?;
        let mesh = self.space.mesh.clone();
        for leaf in 0..mesh.num_leaves() {
            let r = mesh.leaf_box(leaf);
            let pts: Vec<(f64, f64)> = (0..n)
                .flat_map(|j| {
                    (0..n).map(move |i| {
                        let d = (n.max(2) - 1) as f64;
                        r.from_reference(i as f64 / d, j as f64 / d)
                    })
                })
                .collect();
            let ev = self.eval_leaf(leaf, &pts).expect("sample points lie in the leaf");
            for (p, e) in pts.iter().zip(ev) {
                writeln!(w, "{:.17e} {:.17e} {:.17e}", p.0, p.1, e.value)?;
            }
        }
        Ok(())
    }
}

/// Largest relative two-sided jump of `f` over `samples` interior points of
/// every interior face (including hanging faces). The scale is
/// `max(|left|, |right|, 1)`.
pub fn max_face_jump(f: &FEFunction, samples: usize) -> f64 {
    let mesh = f.space().mesh().clone();
    let mut worst = 0.0f64;
    for leaf in 0..mesh.num_leaves() {
        for face in [Face::Right, Face::Top, Face::Left, Face::Bottom] {
            let nb = mesh.face_neighbor(leaf, face);
            if nb.kind == NeighborKind::Boundary {
                continue;
            }
            let ((x0, y0), (x1, y1)) = nb.segment;
            for m in 0..samples {
                let t = (m as f64 + 0.5) / samples as f64 * 0.999 + 0.0005;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                let other = nb.leaves.iter().copied().find(|&o| mesh.leaf_box(o).contains(x, y)).expect("face point lies in a neighbor");
                let a = f.eval_leaf(leaf, &[(x, y)]).unwrap()[0].value;
                let b = f.eval_leaf(other, &[(x, y)]).unwrap()[0].value;
                let scale = a.abs().max(b.abs()).max(1.0);
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::CoarseMesh;

    fn unit(levels: u32) -> Arc<ForestMesh> {
        Arc::new(ForestMesh::new(CoarseMesh::unit_square()).refine_uniform(levels).unwrap())
    }

    /// 2×2 mesh with its bottom-left leaf refined once.
    fn one_hanging_face() -> Arc<ForestMesh> {
        let m = unit(1);
        let bl = m.locate(0.1, 0.1).unwrap();
        Arc::new(m.adapt(&[bl], &[]).unwrap())
    }

    #[test]
    fn lagrange_partition_of_unity_and_kronecker() {
        for p in 1..=4 {
            let b = Lagrange1d::new(p);
            for i in 0..=p {
                for j in 0..=p {
                    let v = b.value(i, j as f64 / p as f64);
                    assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
                }
            }
            let t = 0.37;
            let s: f64 = (0..=p).map(|i| b.value(i, t)).sum();
            let ds: f64 = (0..=p).map(|i| b.derivative(i, t)).sum();
            assert!((s - 1.0).abs() < 1e-14 && ds.abs() < 1e-12);
            // derivative against central differences
            for i in 0..=p {
                let fd = (b.value(i, t + 1e-6) - b.value(i, t - 1e-6)) / 2e-6;
                assert!((fd - b.derivative(i, t)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn conforming_q1_counts() {
        let s = FESpace::with_dirichlet_boundary(unit(1), 1).unwrap();
        assert_eq!(s.num_nodes(), 9);
        assert_eq!(s.num_hanging(), 0);
        assert_eq!(s.num_free(), 1);
        assert_eq!(s.num_dirichlet(), 8);
    }

    #[test]
    fn q1_hanging_nodes_have_midpoint_constraints() {
        let s = FESpace::with_dirichlet_boundary(one_hanging_face(), 1).unwrap();
        assert_eq!(s.num_nodes(), 14);
        assert_eq!(s.num_hanging(), 2);
        for h in 0..2 {
            let c = s.constraint(h);
            assert_eq!(c.len(), 2);
            assert!(c.iter().all(|&(_, w)| (w - 0.5).abs() < 1e-15));
            let v = s.hanging_nodes()[h];
            let (x, y) = s.node(v);
            let (a, b) = (s.node(c[0].0), s.node(c[1].0));
            assert!(((a.0 + b.0) / 2.0 - x).abs() < 1e-15 && ((a.1 + b.1) / 2.0 - y).abs() < 1e-15);
        }
    }

    #[test]
    fn q2_hanging_coefficients_are_quadratic_trace() {
        let s = FESpace::with_dirichlet_boundary(one_hanging_face(), 2).unwrap();
        let b = Lagrange1d::new(2);
        assert!(s.num_hanging() > 0);
        for h in 0..s.num_hanging() {
            let c = s.constraint(h);
            let sum: f64 = c.iter().map(|p| p.1).sum();
            assert!((sum - 1.0).abs() < 1e-14);
            // hanging node parameter along the coarse edge [0, 0.5] or its mirror
            let (x, y) = s.node(s.hanging_nodes()[h]);
            let t = if (x - 0.5).abs() < 1e-14 { y / 0.5 } else { x / 0.5 };
            let mut expect: Vec<f64> = (0..3).map(|i| b.value(i, t)).filter(|v| *v != 0.0).collect();
            let mut got: Vec<f64> = c.iter().map(|p| p.1).collect();
            expect.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            for (e, g) in expect.iter().zip(&got) {
                assert!((e - g).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linearized_test_space_matches_trial_nodes() {
        let mesh = unit(0);
        let trial = FESpace::with_dirichlet_boundary(mesh.clone(), 2).unwrap();
        let test = trial.linearized().unwrap();
        assert_eq!(test.num_cells(), 4);
        assert_eq!(test.num_nodes(), 9);
        for v in 0..9 {
            assert_eq!(test.node(v), trial.node(v));
        }
        for k in 1..=4 {
            let trial = FESpace::with_dirichlet_boundary(one_hanging_face(), k).unwrap();
            let test = trial.linearized().unwrap();
            assert_eq!(test.num_free(), trial.num_free());
            assert_eq!(test.num_hanging(), trial.num_hanging());
            for v in 0..trial.num_nodes() {
                assert_eq!(trial.class(v), test.class(v));
            }
            // test-space constraints are linear: at most two masters
            for h in 0..test.num_hanging() {
                assert!(test.constraint(h).len() <= 2);
            }
        }
        let trial = FESpace::with_dirichlet_boundary(one_hanging_face(), 1).unwrap();
        let test = trial.linearized().unwrap();
        assert_eq!(test.num_cells(), trial.num_cells());
        assert_eq!(test.cell_nodes, trial.cell_nodes);
    }

    #[test]
    fn constants_interpolate_exactly_across_hanging_faces() {
        for k in 1..=4 {
            let s = Arc::new(FESpace::with_dirichlet_boundary(one_hanging_face(), k).unwrap());
            let f = FEFunction::interpolate(s.clone(), |_, _| 3.5);
            for v in 0..s.num_nodes() {
                assert!((f.node_value(v) - 3.5).abs() < 1e-14);
            }
            let e = f.eval_point(0.37, 0.61).unwrap();
            assert!((e.value - 3.5).abs() < 1e-13);
            assert!(e.grad.0.abs() < 1e-12 && e.grad.1.abs() < 1e-12);
        }
    }

    #[test]
    fn linear_x_has_unit_gradient() {
        let s = Arc::new(FESpace::with_dirichlet_boundary(one_hanging_face(), 1).unwrap());
        let f = FEFunction::interpolate(s, |x, _| x);
        for &(x, y) in &[(0.1, 0.2), (0.7, 0.3), (0.26, 0.24), (0.9, 0.9)] {
            let e = f.eval_point(x, y).unwrap();
            assert!((e.grad.0 - 1.0).abs() < 1e-13 && e.grad.1.abs() < 1e-13);
        }
    }

    #[test]
    fn point_outside_leaf_is_error() {
        let s = Arc::new(FESpace::with_dirichlet_boundary(unit(1), 1).unwrap());
        let f = FEFunction::zero(s);
        assert!(f.eval_leaf(0, &[(0.9, 0.9)]).is_err());
    }

    #[test]
    fn polynomials_reproduced_with_hanging_nodes() {
        let mesh = one_hanging_face();
        let inner = mesh.locate(0.2, 0.2).unwrap();
        let mesh = Arc::new(mesh.adapt(&[inner], &[]).unwrap());
        for k in 1..=4 {
            let s = Arc::new(FESpace::with_dirichlet_boundary(mesh.clone(), k).unwrap());
            let p = move |x: f64, y: f64| (1.0 + x).powi(k as i32) * (0.5 - y).powi(k as i32) + x - 2.0 * y;
            let f = FEFunction::interpolate(s, p);
            for i in 0..50 {
                let x = (i as f64 * 0.6180339887).fract();
                let y = (i as f64 * 0.4142135623 + 0.1).fract();
                let e = f.eval_point(x, y).unwrap();
                assert!((e.value - p(x, y)).abs() < 1e-12, "k={k} at ({x},{y})");
            }
            assert!(max_face_jump(&f, 7) < 1e-12);
        }
    }

    #[test]
    fn lifting_is_zero_on_free_nodes() {
        let s = Arc::new(FESpace::with_dirichlet_boundary(unit(2), 2).unwrap());
        let f = FEFunction::lift_dirichlet(s.clone(), |x, y| x + y);
        assert!(f.free().iter().all(|&v| v == 0.0));
        for (i, &v) in s.dirichlet_nodes().iter().enumerate() {
            let (x, y) = s.node(v);
            assert_eq!(f.dirichlet()[i], x + y);
        }
        let z = FEFunction::lift_dirichlet(s, |_, _| 0.0);
        assert!(z.dirichlet().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l_shape_nodes_are_shared_between_trees() {
        let m = Arc::new(ForestMesh::new(CoarseMesh::l_shape()).refine_uniform(1).unwrap());
        let s = FESpace::with_dirichlet_boundary(m, 1).unwrap();
        // 3 trees × 3×3 vertices minus shared edges (2 edges × 3 vertices) plus the shared origin once
        assert_eq!(s.num_nodes(), 21);
        assert_eq!(s.num_free(), 5);
    }

    #[test]
    fn partial_dirichlet_predicate() {
        let s = FESpace::new(unit(1), 1, |x, _| x == 0.0).unwrap();
        assert_eq!(s.num_dirichlet(), 3);
        assert_eq!(s.num_free(), 6);
        assert_eq!(FESpace::new(unit(1), 0, |_, _| true).unwrap_err(), SpaceError::ZeroOrder);
    }

    #[test]
    fn sample_export() {
        let s = Arc::new(FESpace::with_dirichlet_boundary(unit(1), 1).unwrap());
        let f = FEFunction::interpolate(s, |x, y| x * y);
        let mut buf = Vec::new();
        f.write_samples(3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 9);
    }
}
