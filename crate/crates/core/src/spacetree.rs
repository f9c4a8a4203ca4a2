//! Space-tree geometry: refinement factors, exact integer grid coordinates,
//! grid hulls, the global tree used for initial generation, linearization,
//! partitioning and a brute-force neighbor oracle.
//!
//! A grid at depth `d` with index `(x, y, z)` covers the box
//! `origin + extent * [x, x+1] / r_x^d` (and likewise for y and z), so face
//! adjacency reduces to integer comparison.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Direction, GridUid, PositionHash, Rank};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("refinement factor {0:?} must be in 1..=8 per axis with at least 2 children")]
    Factor([u8; 3]),
    #[error("grid is already refined")]
    AlreadyRefined,
    #[error("depth {depth} exceeds the maximum depth {max_depth}")]
    DepthLimit { depth: u8, max_depth: u8 },
    #[error("cannot give every one of {ranks} ranks a grid: only {grids} grids")]
    TooFewGrids { grids: usize, ranks: usize },
    #[error("rank count must be positive")]
    NoRanks,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Children per axis of one subdivision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RefinementFactor([u8; 3]);

impl RefinementFactor {
    pub const BISECTION: RefinementFactor = RefinementFactor([2, 2, 2]);

    pub fn new(rx: u8, ry: u8, rz: u8) -> Result<Self, TreeError> {
        let f = [rx, ry, rz];
        if f.iter().any(|&r| !(1..=8).contains(&r)) || f.iter().map(|&r| r as u32).product::<u32>() < 2 {
            return Err(TreeError::Factor(f));
        }
        Ok(RefinementFactor(f))
    }

    pub fn per_axis(self) -> [u8; 3] {
        self.0
    }

    pub fn axis(self, axis: usize) -> u8 {
        self.0[axis]
    }

    /// `r_x * r_y * r_z`.
    pub fn children(self) -> usize {
        self.0.iter().map(|&r| r as usize).product()
    }

    /// Dense child slot for a position, `i` fastest.
    pub fn slot(self, hash: PositionHash) -> Option<usize> {
        let [i, j, k] = hash.ijk();
        let [rx, ry, rz] = self.0;
        (i < rx && j < ry && k < rz).then(|| (k as usize * ry as usize + j as usize) * rx as usize + i as usize)
    }

    pub fn position(self, slot: usize) -> PositionHash {
        let [rx, ry, _] = self.0.map(|r| r as usize);
        let i = slot % rx;
        let j = (slot / rx) % ry;
        let k = slot / (rx * ry);
        PositionHash::new(i as u8, j as u8, k as u8).expect("slot within factor")
    }

    /// All child positions in slot order.
    pub fn positions(self) -> impl Iterator<Item = PositionHash> {
        (0..self.children()).map(move |s| self.position(s))
    }

    /// Number of grids per axis at `depth`.
    pub fn cells_at(self, depth: u8) -> [u64; 3] {
        self.0.map(|r| (r as u64).pow(depth as u32))
    }

    /// Deepest level whose per-axis counts fit in 64 bits.
    pub fn depth_limit(self) -> u8 {
        let r = *self.0.iter().max().unwrap() as u64;
        let mut d = 0u8;
        while (r).checked_pow(d as u32 + 1).is_some() && d < 60 {
            d += 1;
        }
        d
    }

    /// Face position of `pos` mirrored across the axis of `dir`: the partner
    /// of a subgrid on the neighbouring grid's touching face.
    pub fn mirror(self, pos: PositionHash, axis: usize) -> PositionHash {
        let mut ijk = pos.ijk();
        ijk[axis] = self.0[axis] - 1 - ijk[axis];
        PositionHash::new(ijk[0], ijk[1], ijk[2]).expect("mirrored position in range")
    }

    /// Positions touching the face `dir` of the parent, in slot order.
    pub fn face_positions(self, dir: Direction) -> Vec<PositionHash> {
        let axis = dir.axis().expect("face direction");
        let layer = if dir.is_positive() { self.0[axis] - 1 } else { 0 };
        self.positions().filter(|p| p.ijk()[axis] == layer).collect()
    }
}

impl Default for RefinementFactor {
    fn default() -> Self {
        RefinementFactor::BISECTION
    }
}

/// Exact location of a grid: depth plus integer index per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub depth: u8,
    pub index: [u64; 3],
}

impl GridCoord {
    pub const ROOT: GridCoord = GridCoord {
        depth: 0,
        index: [0; 3],
    };

    pub fn child(&self, factor: RefinementFactor, pos: PositionHash) -> GridCoord {
        let ijk = pos.ijk();
        let mut index = self.index;
        for a in 0..3 {
            index[a] = index[a] * factor.axis(a) as u64 + ijk[a] as u64;
        }
        GridCoord {
            depth: self.depth + 1,
            index,
        }
    }

    pub fn parent(&self, factor: RefinementFactor) -> Option<GridCoord> {
        (self.depth > 0).then(|| {
            let index = std::array::from_fn(|a| self.index[a] / factor.axis(a) as u64);
            GridCoord {
                depth: self.depth - 1,
                index,
            }
        })
    }

    /// Position inside the super-grid; the root sits at position zero.
    pub fn position(&self, factor: RefinementFactor) -> PositionHash {
        if self.depth == 0 {
            return PositionHash::ROOT;
        }
        let p = std::array::from_fn::<u8, 3, _>(|a| (self.index[a] % factor.axis(a) as u64) as u8);
        PositionHash::new(p[0], p[1], p[2]).expect("factor <= 8")
    }

    /// Same-depth coordinate across face `dir`, if inside the domain.
    pub fn neighbor(&self, factor: RefinementFactor, dir: Direction) -> Option<GridCoord> {
        let axis = dir.axis()?;
        let n = factor.cells_at(self.depth)[axis];
        let mut index = self.index;
        if dir.is_positive() {
            if index[axis] + 1 >= n {
                return None;
            }
            index[axis] += 1;
        } else {
            index[axis] = index[axis].checked_sub(1)?;
        }
        Some(GridCoord {
            depth: self.depth,
            index,
        })
    }

    /// Face shared with `other`, seen from `self`. Pure integer test.
    pub fn shared_face(&self, other: &GridCoord) -> Option<Direction> {
        if self.depth != other.depth {
            return None;
        }
        let mut found = None;
        for a in 0..3 {
            let (s, o) = (self.index[a], other.index[a]);
            if s == o {
                continue;
            }
            if found.is_some() {
                return None;
            }
            if o == s + 1 {
                found = Some(Direction::face(a, true));
            } else if s == o + 1 {
                found = Some(Direction::face(a, false));
            } else {
                return None;
            }
        }
        found
    }
}

/// Physical extent of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub factor: RefinementFactor,
    pub max_depth: u8,
    /// Cells per grid along each axis; identical for every grid.
    pub cells_per_grid: [u32; 3],
}

impl DomainSpec {
    pub fn unit_cube(factor: RefinementFactor, max_depth: u8) -> Self {
        DomainSpec {
            origin: [0.0; 3],
            extent: [1.0; 3],
            factor,
            max_depth,
            cells_per_grid: [16; 3],
        }
    }

    pub fn bbox(&self, coord: &GridCoord) -> BBox {
        let n = self.factor.cells_at(coord.depth);
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            let h = self.extent[a] / n[a] as f64;
            min[a] = self.origin[a] + h * coord.index[a] as f64;
            max[a] = self.origin[a] + h * (coord.index[a] + 1) as f64;
        }
        BBox { min, max }
    }

    /// Per-grid simulation blob: the bounding box as six little-endian f64.
    pub fn geometry_blob(&self, coord: &GridCoord) -> Vec<u8> {
        let b = self.bbox(coord);
        b.min.iter().chain(&b.max).flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BBox {
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }
}

/// Topological record of a grid; simulation data travels as an opaque blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridHull {
    pub uid: GridUid,
    pub coord: GridCoord,
    pub parent: Option<GridUid>,
    /// Empty for a leaf, otherwise one slot per child position. A slot is
    /// cleared when that child is deleted; the last deletion empties the vector.
    pub children: Vec<Option<GridUid>>,
    pub neighbors: [Option<GridUid>; 6],
    pub payload: Vec<u8>,
}

impl GridHull {
    pub fn new(uid: GridUid, coord: GridCoord, parent: Option<GridUid>) -> Self {
        GridHull {
            uid,
            coord,
            parent,
            children: Vec::new(),
            neighbors: [None; 6],
            payload: Vec::new(),
        }
    }

    pub fn depth(&self) -> u8 {
        self.coord.depth
    }

    pub fn is_refined(&self) -> bool {
        !self.children.is_empty()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn neighbor(&self, dir: Direction) -> Option<GridUid> {
        dir.face_index().and_then(|f| self.neighbors[f])
    }

    pub fn set_neighbor(&mut self, dir: Direction, uid: Option<GridUid>) {
        let f = dir.face_index().expect("face direction");
        self.neighbors[f] = uid;
    }

    pub fn child(&self, factor: RefinementFactor, pos: PositionHash) -> Option<GridUid> {
        factor.slot(pos).and_then(|s| self.children.get(s).copied().flatten())
    }

    /// Every UID this grid refers to.
    pub fn links(&self) -> impl Iterator<Item = GridUid> + '_ {
        self.neighbors
            .iter()
            .flatten()
            .chain(self.parent.iter())
            .chain(self.children.iter().flatten())
            .copied()
    }

    /// Drops empty child vectors after deletions.
    pub fn normalize_children(&mut self) {
        if self.children.iter().all(Option::is_none) {
            self.children.clear();
        }
    }
}

/// Creates the `r_x * r_y * r_z` children of `parent` with sibling links set.
///
/// `alloc` assigns a UID for each child position, in slot order.
pub fn subdivide<E>(
    parent: &mut GridHull,
    factor: RefinementFactor,
    mut alloc: impl FnMut(PositionHash) -> Result<GridUid, E>,
) -> Result<Vec<GridHull>, E>
where
    E: From<TreeError>,
{
    if parent.is_refined() {
        return Err(TreeError::AlreadyRefined.into());
    }
    let mut children = Vec::with_capacity(factor.children());
    for pos in factor.positions() {
        let uid = alloc(pos)?;
        children.push(GridHull::new(uid, parent.coord.child(factor, pos), Some(parent.uid)));
    }
    let uids: Vec<GridUid> = children.iter().map(|c| c.uid).collect();
    for (slot, child) in children.iter_mut().enumerate() {
        let ijk = factor.position(slot).ijk();
        for dir in Direction::FACES {
            let axis = dir.axis().unwrap();
            let step: i16 = if dir.is_positive() { 1 } else { -1 };
            let n = ijk[axis] as i16 + step;
            if n < 0 || n >= factor.axis(axis) as i16 {
                continue;
            }
            let mut p = ijk;
            p[axis] = n as u8;
            let s = factor
                .slot(PositionHash::new(p[0], p[1], p[2]).expect("position in range"))
                .unwrap();
            child.set_neighbor(dir, Some(uids[s]));
        }
    }
    parent.children = uids.into_iter().map(Some).collect();
    Ok(children)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Morton,
    DepthFirst,
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub coord: GridCoord,
    pub hash: PositionHash,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// Global hull tree built on the master before distribution.
#[derive(Debug, Clone)]
pub struct SpaceTree {
    spec: DomainSpec,
    nodes: Vec<TreeNode>,
}

impl SpaceTree {
    pub fn new(spec: DomainSpec) -> Self {
        SpaceTree {
            spec,
            nodes: vec![TreeNode {
                coord: GridCoord::ROOT,
                hash: PositionHash::ROOT,
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    /// Full tree refined uniformly down to `depth`.
    pub fn build_uniform(spec: DomainSpec, depth: u8) -> Result<Self, TreeError> {
        if depth > spec.max_depth || depth > spec.factor.depth_limit() {
            return Err(TreeError::DepthLimit {
                depth,
                max_depth: spec.max_depth,
            });
        }
        let mut tree = SpaceTree::new(spec);
        tree.nodes.reserve(uniform_grid_count(spec.factor, depth) as usize);
        let mut level = vec![0];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(level.len() * spec.factor.children());
            for id in level {
                next.extend(tree.refine(id)?);
            }
            level = next;
        }
        Ok(tree)
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn factor(&self) -> RefinementFactor {
        self.spec.factor
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        0
    }

    /// Adaptive refinement of one leaf.
    pub fn refine(&mut self, id: NodeId) -> Result<Range<NodeId>, TreeError> {
        let node = &self.nodes[id];
        if !node.children.is_empty() {
            return Err(TreeError::AlreadyRefined);
        }
        if node.coord.depth >= self.spec.max_depth {
            return Err(TreeError::DepthLimit {
                depth: node.coord.depth + 1,
                max_depth: self.spec.max_depth,
            });
        }
        let coord = node.coord;
        let factor = self.spec.factor;
        let start = self.nodes.len();
        for pos in factor.positions() {
            self.nodes.push(TreeNode {
                coord: coord.child(factor, pos),
                hash: pos,
                parent: Some(id),
                children: Vec::new(),
            });
        }
        let range = start..self.nodes.len();
        self.nodes[id].children = range.clone().collect();
        Ok(range)
    }

    /// Every node exactly once, ordered along the chosen curve.
    ///
    /// Morton compares the per-level bit-interleaved position digits of the
    /// root-to-node paths, parents before their descendants. DepthFirst is a
    /// preorder walk with children in slot order.
    pub fn linearize(&self, scheme: Scheme) -> Vec<NodeId> {
        match scheme {
            Scheme::DepthFirst => {
                let mut out = Vec::with_capacity(self.nodes.len());
                let mut stack = vec![self.root()];
                while let Some(id) = stack.pop() {
                    out.push(id);
                    stack.extend(self.nodes[id].children.iter().rev());
                }
                out
            }
            Scheme::Morton => {
                let factor = self.spec.factor;
                let mut keyed: Vec<(Vec<u16>, NodeId)> = (0..self.nodes.len())
                    .map(|id| (self.morton_path(id, factor), id))
                    .collect();
                keyed.sort();
                keyed.into_iter().map(|(_, id)| id).collect()
            }
        }
    }

    fn morton_path(&self, mut id: NodeId, factor: RefinementFactor) -> Vec<u16> {
        let mut path = Vec::with_capacity(self.nodes[id].coord.depth as usize);
        while let Some(parent) = self.nodes[id].parent {
            path.push(interleave_digit(self.nodes[id].hash, factor));
            id = parent;
        }
        path.reverse();
        path
    }

    /// Brute-force face adjacency over all same-depth pairs.
    pub fn neighbor_oracle(&self) -> Vec<[Option<NodeId>; 6]> {
        let coords: Vec<(NodeId, GridCoord)> = self.nodes.iter().enumerate().map(|(i, n)| (i, n.coord)).collect();
        let map = neighbor_oracle(&coords);
        (0..self.nodes.len()).map(|i| map[&i]).collect()
    }

    /// Coordinate lookup table for indexed neighbor queries.
    pub fn coord_index(&self) -> HashMap<GridCoord, NodeId> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.coord, i)).collect()
    }
}

/// Bit-interleaved digit of a child position: for each bit plane from the
/// most significant down, emit the z, y, x bits.
fn interleave_digit(pos: PositionHash, factor: RefinementFactor) -> u16 {
    let [i, j, k] = pos.ijk();
    let bits = factor
        .per_axis()
        .iter()
        .map(|&r| 8 - (r.max(1) - 1).leading_zeros() as u16)
        .max()
        .unwrap_or(0);
    let mut d = 0u16;
    for b in (0..bits).rev() {
        d = (d << 1) | ((k >> b) & 1) as u16;
        d = (d << 1) | ((j >> b) & 1) as u16;
        d = (d << 1) | ((i >> b) & 1) as u16;
    }
    d
}

/// `sum_{l=0..=depth} (r_x r_y r_z)^l`.
pub fn uniform_grid_count(factor: RefinementFactor, depth: u8) -> u64 {
    let c = factor.children() as u64;
    (0..=depth as u32).map(|l| c.pow(l)).sum()
}

/// Contiguous, balanced slices: sizes differ by at most one, larger first.
pub fn partition(len: usize, ranks: usize) -> Result<Vec<Range<usize>>, TreeError> {
    if ranks == 0 {
        return Err(TreeError::NoRanks);
    }
    if len < ranks {
        return Err(TreeError::TooFewGrids { grids: len, ranks });
    }
    let base = len / ranks;
    let extra = len % ranks;
    let mut start = 0;
    Ok((0..ranks)
        .map(|r| {
            let size = base + usize::from(r < extra);
            let range = start..start + size;
            start += size;
            range
        })
        .collect())
}

/// O(n^2) same-depth face-adjacency oracle over arbitrary keyed coordinates.
pub fn neighbor_oracle<K>(grids: &[(K, GridCoord)]) -> HashMap<K, [Option<K>; 6]>
where
    K: Copy + Eq + std::hash::Hash,
{
    let mut out: HashMap<K, [Option<K>; 6]> = grids.iter().map(|(k, _)| (*k, [None; 6])).collect();
    for (a, (ka, ca)) in grids.iter().enumerate() {
        for (kb, cb) in &grids[a + 1..] {
            if let Some(dir) = ca.shared_face(cb) {
                out.get_mut(ka).unwrap()[dir as usize] = Some(*kb);
                out.get_mut(kb).unwrap()[dir.opposite() as usize] = Some(*ka);
            }
        }
    }
    out
}

/// Indexed counterpart of [`neighbor_oracle`]: per-grid coordinate lookup.
pub fn indexed_neighbors<K: Copy>(
    coord: &GridCoord,
    factor: RefinementFactor,
    index: &HashMap<GridCoord, K>,
) -> [Option<K>; 6] {
    Direction::FACES.map(|d| coord.neighbor(factor, d).and_then(|c| index.get(&c).copied()))
}

/// One line of a topology dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DumpRecord {
    Rank(RankRecord),
    Grid(GridRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub rank: Rank,
    pub factor: RefinementFactor,
    pub next_gid: u32,
    pub remote_ranks: Vec<Rank>,
}

/// Grid line; `index` and `depth` give the integer bounding box
/// `[index, index + 1] / factor^depth`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRecord {
    pub uid: u64,
    pub depth: u8,
    pub index: [u64; 3],
    pub parent: Option<u64>,
    pub children: Vec<Option<u64>>,
    pub neighbors: [Option<u64>; 6],
    pub payload_len: usize,
}

impl From<&GridHull> for GridRecord {
    fn from(h: &GridHull) -> Self {
        GridRecord {
            uid: h.uid.bits(),
            depth: h.coord.depth,
            index: h.coord.index,
            parent: h.parent.map(GridUid::bits),
            children: h.children.iter().map(|c| c.map(GridUid::bits)).collect(),
            neighbors: h.neighbors.map(|n| n.map(GridUid::bits)),
            payload_len: h.payload.len(),
        }
    }
}

impl GridRecord {
    pub fn uid(&self) -> GridUid {
        GridUid::from_bits(self.uid)
    }

    pub fn coord(&self) -> GridCoord {
        GridCoord {
            depth: self.depth,
            index: self.index,
        }
    }
}
