//! Forest-of-quadtrees meshes.
//!
//! A [`CoarseMesh`] of axis-aligned rectangles is the macro level; every
//! coarse cell is the root of a quadtree that is refined with the 1:4 rule.
//! Leaves are addressed by `(root, level, ix, iy)` so neighbor lookups are
//! exact integer arithmetic. Meshes are immutable: [`ForestMesh::adapt`] and
//! [`ForestMesh::refine_uniform`] return new meshes.
//!
//! Every mesh handed out by this module satisfies 2:1 balance across edges.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

/// Deepest quadtree level a leaf may have.
pub const MAX_LEVEL: u8 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("only two-dimensional meshes are supported (got dimension {0})")]
    Dimension(usize),
    #[error("coarse cell {0} has non-positive extent")]
    DegenerateCell(usize),
    #[error("coarse cells {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("coarse cells {0} and {1} touch along a partial edge")]
    NonConforming(usize, usize),
    #[error("unknown leaf id {0}")]
    UnknownLeaf(usize),
    #[error("refinement beyond level {MAX_LEVEL}")]
    TooDeep,
    #[error("point ({0}, {1}) is outside leaf {2}")]
    PointOutsideLeaf(f64, f64, usize),
}

/// Axis-aligned rectangle `[x0, x0+wx] × [y0, y0+wy]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub wx: f64,
    pub wy: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, wx: f64, wy: f64) -> Self {
        Rect { x0, y0, wx, wy }
    }
    pub fn x1(&self) -> f64 {
        self.x0 + self.wx
    }
    pub fn y1(&self) -> f64 {
        self.y0 + self.wy
    }
    pub fn area(&self) -> f64 {
        self.wx * self.wy
    }
    pub fn center(&self) -> (f64, f64) {
        (self.x0 + 0.5 * self.wx, self.y0 + 0.5 * self.wy)
    }
    /// Closed containment with a relative slack of `1e-12` of the extents.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (ex, ey) = (1e-12 * self.wx, 1e-12 * self.wy);
        x >= self.x0 - ex && x <= self.x1() + ex && y >= self.y0 - ey && y <= self.y1() + ey
    }
    /// Reference coordinates in `[0,1]²`.
    pub fn to_reference(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.wx, (y - self.y0) / self.wy)
    }
    pub fn from_reference(&self, s: f64, t: f64) -> (f64, f64) {
        (self.x0 + s * self.wx, self.y0 + t * self.wy)
    }
    pub fn touches_point(&self, x: f64, y: f64) -> bool {
        self.contains(x, y)
    }
}

/// Leaf faces, in the fixed order used throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    Left = 0,
    Right = 1,
    Bottom = 2,
    Top = 3,
}

impl Face {
    pub const ALL: [Face; 4] = [Face::Left, Face::Right, Face::Bottom, Face::Top];

    pub fn opposite(self) -> Face {
        match self {
            Face::Left => Face::Right,
            Face::Right => Face::Left,
            Face::Bottom => Face::Top,
            Face::Top => Face::Bottom,
        }
    }

    /// Outward unit normal.
    pub fn normal(self) -> (f64, f64) {
        match self {
            Face::Left => (-1.0, 0.0),
            Face::Right => (1.0, 0.0),
            Face::Bottom => (0.0, -1.0),
            Face::Top => (0.0, 1.0),
        }
    }

    /// True for faces of constant x.
    pub fn is_vertical(self) -> bool {
        matches!(self, Face::Left | Face::Right)
    }
}

/// Conforming macro mesh of axis-aligned rectangles.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMesh {
    cells: Vec<Rect>,
    neighbors: Vec<[Option<usize>; 4]>,
}

impl CoarseMesh {
    pub fn new(cells: Vec<Rect>) -> Result<Self, MeshError> {
        for (i, c) in cells.iter().enumerate() {
            if !(c.wx > 0.0 && c.wy > 0.0) {
                return Err(MeshError::DegenerateCell(i));
            }
        }
        let mut neighbors = vec![[None; 4]; cells.len()];
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let (a, b) = (&cells[i], &cells[j]);
                let ox = a.x1().min(b.x1()) - a.x0.max(b.x0);
                let oy = a.y1().min(b.y1()) - a.y0.max(b.y0);
                if ox > 0.0 && oy > 0.0 {
                    return Err(MeshError::Overlap(i, j));
                }
                if ox == 0.0 && oy > 0.0 {
                    if a.y0 != b.y0 || a.y1() != b.y1() {
                        return Err(MeshError::NonConforming(i, j));
                    }
                    if a.x1() == b.x0 {
                        neighbors[i][Face::Right as usize] = Some(j);
                        neighbors[j][Face::Left as usize] = Some(i);
                    } else {
                        neighbors[i][Face::Left as usize] = Some(j);
                        neighbors[j][Face::Right as usize] = Some(i);
                    }
                } else if oy == 0.0 && ox > 0.0 {
                    if a.x0 != b.x0 || a.x1() != b.x1() {
                        return Err(MeshError::NonConforming(i, j));
                    }
                    if a.y1() == b.y0 {
                        neighbors[i][Face::Top as usize] = Some(j);
                        neighbors[j][Face::Bottom as usize] = Some(i);
                    } else {
                        neighbors[i][Face::Bottom as usize] = Some(j);
                        neighbors[j][Face::Top as usize] = Some(i);
                    }
                }
            }
        }
        Ok(CoarseMesh { cells, neighbors })
    }

    /// Builds a coarse mesh from `(lower corner, extents)` pairs of any
    /// dimension; anything but two dimensions is rejected.
    pub fn from_boxes(boxes: &[(Vec<f64>, Vec<f64>)]) -> Result<Self, MeshError> {
        let mut cells = Vec::with_capacity(boxes.len());
        for (lo, ext) in boxes {
            if lo.len() != 2 || ext.len() != 2 {
                return Err(MeshError::Dimension(lo.len().max(ext.len())));
            }
            cells.push(Rect::new(lo[0], lo[1], ext[0], ext[1]));
        }
        Self::new(cells)
    }

    pub fn unit_square() -> Self {
        Self::new(vec![Rect::new(0.0, 0.0, 1.0, 1.0)]).unwrap()
    }

    /// `[-1,1]² \ [-1,0]²` as three unit squares.
    pub fn l_shape() -> Self {
        Self::new(vec![Rect::new(0.0, -1.0, 1.0, 1.0), Rect::new(0.0, 0.0, 1.0, 1.0), Rect::new(-1.0, 0.0, 1.0, 1.0)]).unwrap()
    }

    pub fn cells(&self) -> &[Rect] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn neighbor(&self, cell: usize, face: Face) -> Option<usize> {
        self.neighbors[cell][face as usize]
    }

    pub fn area(&self) -> f64 {
        self.cells.iter().map(Rect::area).sum()
    }
}

/// Quadtree cell address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub root: u32,
    pub level: u8,
    pub ix: u32,
    pub iy: u32,
}

impl Cell {
    pub fn root(root: usize) -> Self {
        Cell { root: root as u32, level: 0, ix: 0, iy: 0 }
    }

    pub fn parent(&self) -> Option<Cell> {
        (self.level > 0).then(|| Cell { root: self.root, level: self.level - 1, ix: self.ix >> 1, iy: self.iy >> 1 })
    }

    /// Children in lexicographic order `(0,0), (1,0), (0,1), (1,1)`.
    pub fn children(&self) -> [Cell; 4] {
        let (l, x, y) = (self.level + 1, self.ix << 1, self.iy << 1);
        let c = |dx, dy| Cell { root: self.root, level: l, ix: x + dx, iy: y + dy };
        [c(0, 0), c(1, 0), c(0, 1), c(1, 1)]
    }

    /// The two children touching `face`, ordered along the face.
    pub fn children_on(&self, face: Face) -> [Cell; 2] {
        let ch = self.children();
        match face {
            Face::Left => [ch[0], ch[2]],
            Face::Right => [ch[1], ch[3]],
            Face::Bottom => [ch[0], ch[1]],
            Face::Top => [ch[2], ch[3]],
        }
    }

    fn morton(&self) -> u64 {
        let shift = MAX_LEVEL - self.level;
        let (x, y) = ((self.ix as u64) << shift, (self.iy as u64) << shift);
        let mut m = 0u64;
        for b in 0..MAX_LEVEL as u64 {
            m |= ((x >> b) & 1) << (2 * b) | ((y >> b) & 1) << (2 * b + 1);
        }
        m
    }
}

/// Relation of a leaf to what lies across one of its faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborKind {
    Boundary,
    SameLevel,
    Coarser,
    Finer,
}

/// Face endpoints `((x0, y0), (x1, y1))`.
pub type Segment = ((f64, f64), (f64, f64));

#[derive(Debug, Clone, PartialEq)]
pub struct FaceNeighbor {
    pub face: Face,
    pub kind: NeighborKind,
    /// Empty for boundary, one id for same-level/coarser, two for finer
    /// (ordered along the face).
    pub leaves: Vec<usize>,
    /// End points of the face of the queried leaf.
    pub segment: Segment,
}

fn across(coarse: &CoarseMesh, cell: &Cell, face: Face) -> Option<Cell> {
    let n = 1u32 << cell.level;
    let mut c = *cell;
    match face {
        Face::Left if c.ix > 0 => c.ix -= 1,
        Face::Right if c.ix + 1 < n => c.ix += 1,
        Face::Bottom if c.iy > 0 => c.iy -= 1,
        Face::Top if c.iy + 1 < n => c.iy += 1,
        _ => {
            let root = coarse.neighbor(cell.root as usize, face)?;
            c.root = root as u32;
            match face {
                Face::Left => c.ix = n - 1,
                Face::Right => c.ix = 0,
                Face::Bottom => c.iy = n - 1,
                Face::Top => c.iy = 0,
            }
        }
    }
    Some(c)
}

enum Lookup {
    Leaf(usize),
    /// Inside the given (coarser) leaf.
    Inside(usize),
    Subdivided,
}

/// Forest of quadtrees; its leaves form the active partition.
#[derive(Debug, Clone)]
pub struct ForestMesh {
    coarse: Arc<CoarseMesh>,
    leaves: Vec<Cell>,
    index: HashMap<Cell, usize>,
}

impl PartialEq for ForestMesh {
    fn eq(&self, other: &Self) -> bool {
        self.coarse == other.coarse && self.leaves == other.leaves
    }
}

impl ForestMesh {
    pub fn new(coarse: CoarseMesh) -> Self {
        let leaves = (0..coarse.len()).map(Cell::root).collect();
        Self::from_cells(Arc::new(coarse), leaves)
    }

    fn from_cells(coarse: Arc<CoarseMesh>, mut leaves: Vec<Cell>) -> Self {
        leaves.sort_by_key(|c| (c.root, c.morton()));
        let index = leaves.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        ForestMesh { coarse, leaves, index }
    }

    pub fn coarse(&self) -> &CoarseMesh {
        &self.coarse
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> &[Cell] {
        &self.leaves
    }

    pub fn leaf(&self, id: usize) -> Cell {
        self.leaves[id]
    }

    pub fn find(&self, cell: &Cell) -> Option<usize> {
        self.index.get(cell).copied()
    }

    pub fn cell_box(&self, cell: &Cell) -> Rect {
        let r = &self.coarse.cells[cell.root as usize];
        let n = (1u64 << cell.level) as f64;
        let (wx, wy) = (r.wx / n, r.wy / n);
        Rect::new(r.x0 + cell.ix as f64 * wx, r.y0 + cell.iy as f64 * wy, wx, wy)
    }

    pub fn leaf_box(&self, id: usize) -> Rect {
        self.cell_box(&self.leaves[id])
    }

    /// Characteristic size `h_K` (longest side).
    pub fn h(&self, id: usize) -> f64 {
        let b = self.leaf_box(id);
        b.wx.max(b.wy)
    }

    pub fn max_level(&self) -> u8 {
        self.leaves.iter().map(|c| c.level).max().unwrap_or(0)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_leaves()).map(|i| self.leaf_box(i).area()).sum()
    }

    /// Same-level cell across `face`, possibly in a neighboring tree.
    pub fn across(&self, cell: &Cell, face: Face) -> Option<Cell> {
        across(&self.coarse, cell, face)
    }

    fn lookup_in(set: &HashMap<Cell, usize>, cell: &Cell) -> Lookup {
        if let Some(&i) = set.get(cell) {
            return Lookup::Leaf(i);
        }
        let mut p = cell.parent();
        while let Some(a) = p {
            if let Some(&i) = set.get(&a) {
                return Lookup::Inside(i);
            }
            p = a.parent();
        }
        Lookup::Subdivided
    }

    pub fn face_segment(&self, id: usize, face: Face) -> Segment {
        let b = self.leaf_box(id);
        match face {
            Face::Left => ((b.x0, b.y0), (b.x0, b.y1())),
            Face::Right => ((b.x1(), b.y0), (b.x1(), b.y1())),
            Face::Bottom => ((b.x0, b.y0), (b.x1(), b.y0)),
            Face::Top => ((b.x0, b.y1()), (b.x1(), b.y1())),
        }
    }

    pub fn face_neighbor(&self, id: usize, face: Face) -> FaceNeighbor {
        let cell = self.leaves[id];
        let segment = self.face_segment(id, face);
        let (kind, leaves) = match self.across(&cell, face) {
            None => (NeighborKind::Boundary, vec![]),
            Some(nb) => match Self::lookup_in(&self.index, &nb) {
                Lookup::Leaf(i) => (NeighborKind::SameLevel, vec![i]),
                Lookup::Inside(i) => (NeighborKind::Coarser, vec![i]),
                Lookup::Subdivided => {
                    let ch = nb.children_on(face.opposite());
                    let ids = ch.iter().map(|c| self.find(c).expect("2:1 balance violated")).collect();
                    (NeighborKind::Finer, ids)
                }
            },
        };
        FaceNeighbor { face, kind, leaves, segment }
    }

    /// The four face neighbors in [`Face::ALL`] order.
    pub fn face_neighbors(&self, id: usize) -> Result<[FaceNeighbor; 4], MeshError> {
        if id >= self.leaves.len() {
            return Err(MeshError::UnknownLeaf(id));
        }
        Ok(Face::ALL.map(|f| self.face_neighbor(id, f)))
    }

    /// Leaf containing the point, searching all trees.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        (0..self.leaves.len()).find(|&i| self.leaf_box(i).contains(x, y))
    }

    /// True when every pair of edge-adjacent leaves differs by at most one level.
    pub fn is_balanced(&self) -> bool {
        self.leaves.iter().all(|c| !Self::violates_balance(&self.index, &self.coarse, c))
    }

    fn violates_balance(set: &HashMap<Cell, usize>, coarse: &CoarseMesh, cell: &Cell) -> bool {
        Face::ALL.iter().any(|&f| match across(coarse, cell, f) {
            None => false,
            Some(nb) => match Self::lookup_in(set, &nb) {
                Lookup::Subdivided => nb.children_on(f.opposite()).iter().any(|c| matches!(Self::lookup_in(set, c), Lookup::Subdivided)),
                _ => false,
            },
        })
    }

    /// Every leaf replaced by its `4^levels` descendants.
    pub fn refine_uniform(&self, levels: u32) -> Result<ForestMesh, MeshError> {
        let mut cells = self.leaves.clone();
        for _ in 0..levels {
            if cells.iter().any(|c| c.level >= MAX_LEVEL) {
                return Err(MeshError::TooDeep);
            }
            cells = cells.iter().flat_map(|c| c.children()).collect();
        }
        Ok(Self::from_cells(self.coarse.clone(), cells))
    }

    /// Refines `refine` leaves, collapses sibling groups entirely contained in
    /// `coarsen`, and closes the result under 2:1 balance. Refinement (explicit
    /// or balance-induced) wins over coarsening.
    pub fn adapt(&self, refine: &[usize], coarsen: &[usize]) -> Result<ForestMesh, MeshError> {
        for &i in refine.iter().chain(coarsen) {
            if i >= self.leaves.len() {
                return Err(MeshError::UnknownLeaf(i));
            }
        }
        if refine.is_empty() && coarsen.is_empty() {
            return Ok(self.clone());
        }
        let refine_set: BTreeSet<usize> = refine.iter().copied().collect();
        let mut set: HashMap<Cell, usize> = HashMap::with_capacity(self.leaves.len() * 2);
        for (i, c) in self.leaves.iter().enumerate() {
            if refine_set.contains(&i) {
                if c.level >= MAX_LEVEL {
                    return Err(MeshError::TooDeep);
                }
                for ch in c.children() {
                    set.insert(ch, 0);
                }
            } else {
                set.insert(*c, 0);
            }
        }

        // balance closure
        loop {
            let mut to_refine: Vec<Cell> = set.keys().filter(|c| Self::violates_balance(&set, &self.coarse, c)).copied().collect();
            if to_refine.is_empty() {
                break;
            }
            to_refine.sort();
            for c in to_refine {
                set.remove(&c);
                for ch in c.children() {
                    set.insert(ch, 0);
                }
            }
        }

        // sibling groups fully marked for coarsening
        let coarsen_set: BTreeSet<usize> = coarsen.iter().copied().filter(|i| !refine_set.contains(i)).collect();
        let mut groups: BTreeMap<Cell, usize> = BTreeMap::new();
        for &i in &coarsen_set {
            if let Some(p) = self.leaves[i].parent() {
                *groups.entry(p).or_default() += 1;
            }
        }
        for (parent, count) in groups {
            if count != 4 || !parent.children().iter().all(|c| set.contains_key(c)) {
                continue;
            }
            // collapsing must not put the parent next to leaves two levels finer
            let blocked = Face::ALL.iter().any(|&f| match across(&self.coarse, &parent, f) {
                None => false,
                Some(nb) => match Self::lookup_in(&set, &nb) {
                    Lookup::Subdivided => nb.children_on(f.opposite()).iter().any(|c| matches!(Self::lookup_in(&set, c), Lookup::Subdivided)),
                    _ => false,
                },
            });
            if blocked {
                continue;
            }
            for c in parent.children() {
                set.remove(&c);
            }
            set.insert(parent, 0);
        }
        Ok(Self::from_cells(self.coarse.clone(), set.into_keys().collect()))
    }

    /// Leaf ids whose closed box contains the given point.
    pub fn leaves_touching(&self, x: f64, y: f64) -> Vec<usize> {
        (0..self.leaves.len()).filter(|&i| self.leaf_box(i).touches_point(x, y)).collect()
    }

    /// Canonical representative of a point on the integer lattice of size
    /// `denom` per tree. Points on tree boundaries are shared between trees;
    /// the representative is the one in the lowest-numbered tree.
    pub fn canonical_lattice_point(&self, root: u32, x: i64, y: i64, denom: i64) -> (u32, i64, i64) {
        let mut best = (root, x, y);
        let mut seen: HashSet<(u32, i64, i64)> = HashSet::new();
        let mut stack = vec![(root, x, y)];
        while let Some(p) = stack.pop() {
            if !seen.insert(p) {
                continue;
            }
            if p < best {
                best = p;
            }
            let (r, px, py) = p;
            let r_us = r as usize;
            let mut push = |face: Face, nx: i64, ny: i64| {
                if let Some(nr) = self.coarse.neighbor(r_us, face) {
                    stack.push((nr as u32, nx, ny));
                }
            };
            if px == 0 {
                push(Face::Left, denom, py);
            }
            if px == denom {
                push(Face::Right, 0, py);
            }
            if py == 0 {
                push(Face::Bottom, px, denom);
            }
            if py == denom {
                push(Face::Top, px, 0);
            }
        }
        best
    }

    /// Writes one leaf per line as `root level ix iy x0 y0 h`.
    pub fn write_leaves<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# root level ix iy x0 y0 h")?;
        for (i, c) in self.leaves.iter().enumerate() {
            let b = self.leaf_box(i);
            writeln!(w, "{} {} {} {} {:.17e} {:.17e} {:.17e}", c.root, c.level, c.ix, c.iy, b.x0, b.y0, self.h(i))?;
        }
        Ok(())
    }
}
