//! The box Λ_n = {−n,…,n}^d as a cell complex, its exterior derivative, and
//! the coarse L-block structure used by the expansion.
//!
//! Index conventions are fixed so that test vectors and face assignment are
//! reproducible:
//!
//! * vertices are ordered lexicographically by coordinates (axis 0 most
//!   significant);
//! * edges are ordered by `(base vertex, direction)`, the base being the
//!   endpoint with the smaller coordinate;
//! * plaquettes are ordered by `(base vertex, i, j)` with `i < j`.

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{guard, invalid, Result};

pub type Coord = Vec<i64>;

/// An oriented nearest-neighbour edge `base → base + e_dir`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub base: Coord,
    pub dir: usize,
}

impl Edge {
    pub fn head(&self) -> Coord {
        let mut h = self.base.clone();
        h[self.dir] += 1;
        h
    }
}

/// A unit square with boundary `e1 + e2 − e3 − e4` (counter-clockwise in the
/// `(i, j)` plane starting from the base vertex).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plaquette {
    pub base: Coord,
    pub plane: (usize, usize),
    pub edges: [usize; 4],
}

impl Plaquette {
    pub const SIGNS: [f64; 4] = [1.0, 1.0, -1.0, -1.0];
}

/// The indexed complex for Λ_n. Immutable after construction.
#[derive(Debug, Clone)]
pub struct LatticeDomain {
    d: usize,
    n: i64,
    edges: Vec<Edge>,
    plaquettes: Vec<Plaquette>,
    /// `edge_lookup[vertex * d + dir]` is the edge leaving `vertex` in `+dir`.
    edge_lookup: Vec<Option<usize>>,
    edge_plaquettes: Vec<Vec<(usize, f64)>>,
}

/// Real values on the edges of a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct OneForm {
    pub values: Vec<f64>,
}

impl OneForm {
    pub fn zeros(dom: &LatticeDomain) -> Self {
        Self { values: vec![0.0; dom.edge_count()] }
    }

    pub fn constant(dom: &LatticeDomain, c: f64) -> Self {
        Self { values: vec![c; dom.edge_count()] }
    }

    /// The discrete gradient `θ_(u,v) = f(v) − f(u)` of a vertex function.
    pub fn gradient(dom: &LatticeDomain, f: &[f64]) -> Self {
        let values = dom
            .edges()
            .iter()
            .map(|e| f[dom.vertex_index(&e.head()).unwrap()] - f[dom.vertex_index(&e.base).unwrap()])
            .collect();
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn build_domain(d: usize, n: i64) -> Result<LatticeDomain> {
    if d < 2 {
        return Err(invalid(format!("dimension must be at least 2, got {d}")));
    }
    if n < 1 {
        return Err(invalid(format!("radius must be at least 1, got {n}")));
    }
    let side = (2 * n + 1) as usize;
    let nv = side.pow(d as u32);
    let mut edges = Vec::new();
    let mut edge_lookup = vec![None; nv * d];
    for v in 0..nv {
        let x = vertex_coord(v, d, n);
        for dir in 0..d {
            if x[dir] < n {
                edge_lookup[v * d + dir] = Some(edges.len());
                edges.push(Edge { base: x.clone(), dir });
            }
        }
    }
    let mut plaquettes = Vec::new();
    let mut edge_plaquettes = vec![Vec::new(); edges.len()];
    for v in 0..nv {
        let x = vertex_coord(v, d, n);
        for i in 0..d {
            for j in (i + 1)..d {
                if x[i] >= n || x[j] >= n {
                    continue;
                }
                let mut xi = x.clone();
                xi[i] += 1;
                let mut xj = x.clone();
                xj[j] += 1;
                let vi = vertex_linear(&xi, d, n);
                let vj = vertex_linear(&xj, d, n);
                let e = [
                    edge_lookup[v * d + i].unwrap(),
                    edge_lookup[vi * d + j].unwrap(),
                    edge_lookup[vj * d + i].unwrap(),
                    edge_lookup[v * d + j].unwrap(),
                ];
                let p = plaquettes.len();
                for (k, &ek) in e.iter().enumerate() {
                    edge_plaquettes[ek].push((p, Plaquette::SIGNS[k]));
                }
                plaquettes.push(Plaquette { base: x.clone(), plane: (i, j), edges: e });
            }
        }
    }
    Ok(LatticeDomain { d, n, edges, plaquettes, edge_lookup, edge_plaquettes })
}

fn vertex_coord(mut v: usize, d: usize, n: i64) -> Coord {
    let side = (2 * n + 1) as usize;
    let mut x = vec![0i64; d];
    for k in (0..d).rev() {
        x[k] = (v % side) as i64 - n;
        v /= side;
    }
    x
}

fn vertex_linear(x: &[i64], d: usize, n: i64) -> usize {
    let side = (2 * n + 1) as usize;
    (0..d).fold(0usize, |acc, k| acc * side + (x[k] + n) as usize)
}

impl LatticeDomain {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> i64 {
        self.n
    }

    pub fn vertex_count(&self) -> usize {
        ((2 * self.n + 1) as usize).pow(self.d as u32)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn plaquette_count(&self) -> usize {
        self.plaquettes.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn plaquettes(&self) -> &[Plaquette] {
        &self.plaquettes
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    pub fn plaquette(&self, p: usize) -> &Plaquette {
        &self.plaquettes[p]
    }

    /// Plaquettes containing edge `e`, with the orientation sign of `e` in each.
    pub fn plaquettes_of_edge(&self, e: usize) -> &[(usize, f64)] {
        &self.edge_plaquettes[e]
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.d && x.iter().all(|&c| c.abs() <= self.n)
    }

    pub fn vertex_index(&self, x: &[i64]) -> Option<usize> {
        self.contains(x).then(|| vertex_linear(x, self.d, self.n))
    }

    pub fn vertex(&self, v: usize) -> Coord {
        vertex_coord(v, self.d, self.n)
    }

    /// The edge joining `x` and `x + e_dir`, if both lie in the box.
    pub fn edge_index(&self, x: &[i64], dir: usize) -> Option<usize> {
        let v = self.vertex_index(x)?;
        self.edge_lookup[v * self.d + dir]
    }

    /// The edge joining two neighbouring vertices, in either order.
    pub fn edge_between(&self, a: &[i64], b: &[i64]) -> Option<usize> {
        let diff: Vec<i64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let dir = diff.iter().position(|&c| c != 0)?;
        if diff.iter().filter(|&&c| c != 0).count() != 1 || diff[dir].abs() != 1 {
            return None;
        }
        if diff[dir] == 1 {
            self.edge_index(a, dir)
        } else {
            self.edge_index(b, dir)
        }
    }

    /// `dθ_p = θ_e1 + θ_e2 − θ_e3 − θ_e4`.
    pub fn exterior_derivative(&self, theta: &OneForm, p: usize) -> Result<f64> {
        let plaq = self
            .plaquettes
            .get(p)
            .ok_or_else(|| invalid(format!("plaquette {p} out of range")))?;
        self.check_form(theta)?;
        Ok(plaquette_value(&plaq.edges, &theta.values))
    }

    /// `dθ` on every plaquette.
    pub fn d_all(&self, theta: &[f64]) -> Vec<f64> {
        self.plaquettes.iter().map(|p| plaquette_value(&p.edges, theta)).collect()
    }

    pub fn check_form(&self, theta: &OneForm) -> Result<()> {
        if theta.len() != self.edge_count() {
            return Err(invalid(format!(
                "one-form has {} values, domain has {} edges",
                theta.len(),
                self.edge_count()
            )));
        }
        Ok(())
    }

    /// Minimal vertex-graph distance between the endpoints of two edges.
    pub fn graph_distance(&self, x: usize, y: usize) -> i64 {
        let ex = &self.edges[x];
        let ey = &self.edges[y];
        let mut best = i64::MAX;
        for a in [ex.base.clone(), ex.head()] {
            for b in [ey.base.clone(), ey.head()] {
                best = best.min(l1(&a, &b));
            }
        }
        best
    }

    /// Edges with exactly one endpoint in the vertex set `a`.
    pub fn edge_boundary(&self, a: &HashSet<Coord>) -> Vec<usize> {
        (0..self.edge_count())
            .filter(|&e| {
                let ed = &self.edges[e];
                a.contains(&ed.base) != a.contains(&ed.head())
            })
            .collect()
    }
}

#[inline]
pub(crate) fn plaquette_value(edges: &[usize; 4], theta: &[f64]) -> f64 {
    theta[edges[0]] + theta[edges[1]] - theta[edges[2]] - theta[edges[3]]
}

pub(crate) fn l1(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Closed-form counts `(vertices, edges, plaquettes)` for Λ_n in dimension d.
pub fn closed_form_counts(d: usize, n: i64) -> (usize, usize, usize) {
    let s = (2 * n + 1) as usize;
    let m = (2 * n) as usize;
    let v = s.pow(d as u32);
    let e = d * s.pow(d as u32 - 1) * m;
    let p = d * (d - 1) / 2 * s.pow(d as u32 - 2) * m * m;
    (v, e, p)
}

/// A face F(u, v): the edges joining neighbouring blocks `u` and `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Face {
    /// Block with the smaller centre along `axis`.
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
    pub edges: Vec<usize>,
}

/// The L-block partition of Λ_n.
#[derive(Debug, Clone)]
pub struct CoarseBlocking {
    l: i64,
    d: usize,
    /// Coarse coordinates k with block centre `L·k`, in lexicographic order.
    sites: Vec<Coord>,
    block_of_vertex: Vec<usize>,
    block_edges: Vec<Vec<usize>>,
    faces: Vec<Face>,
    /// `Some(block)` for block-interior edges.
    edge_block: Vec<Option<usize>>,
    /// `Some(face)` for face edges.
    edge_face: Vec<Option<usize>>,
    neighbours: Vec<Vec<usize>>,
}

pub fn coarse_structure(dom: &LatticeDomain, l: i64) -> Result<CoarseBlocking> {
    if l < 2 || l % 2 != 0 {
        return Err(invalid(format!("block side must be even and at least 2, got {l}")));
    }
    let d = dom.dim();
    let n = dom.radius();
    let half = l / 2;
    // Block k covers L·k − L/2 ..= L·k + L/2 − 1 along each axis.
    let block_coord = |x: i64| (x + half).div_euclid(l);
    let k_lo = block_coord(-n);
    let k_hi = block_coord(n);
    let per_axis = (k_hi - k_lo + 1) as usize;
    let nb = per_axis.pow(d as u32);
    let mut sites = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut r = b;
        let mut k = vec![0i64; d];
        for a in (0..d).rev() {
            k[a] = (r % per_axis) as i64 + k_lo;
            r /= per_axis;
        }
        sites.push(k);
    }
    let site_linear = |k: &[i64]| -> usize {
        k.iter().fold(0usize, |acc, &c| acc * per_axis + (c - k_lo) as usize)
    };
    let block_of_vertex: Vec<usize> = (0..dom.vertex_count())
        .map(|v| {
            let x = dom.vertex(v);
            let k: Coord = x.iter().map(|&c| block_coord(c)).collect();
            site_linear(&k)
        })
        .collect();

    let mut neighbours = vec![Vec::new(); nb];
    let mut face_index = std::collections::BTreeMap::new();
    for (b, k) in sites.iter().enumerate() {
        for axis in 0..d {
            if k[axis] < k_hi {
                let mut k2 = k.clone();
                k2[axis] += 1;
                let b2 = site_linear(&k2);
                neighbours[b].push(b2);
                neighbours[b2].push(b);
                face_index.insert((b, axis), b2);
            }
        }
    }
    for nbrs in &mut neighbours {
        nbrs.sort_unstable();
    }
    // Faces keyed by (lower block, axis); blocks are lexicographic so this is
    // the (min block centre, axis) order.
    let mut faces: Vec<Face> = face_index
        .iter()
        .map(|(&(lo, axis), &hi)| Face { lo, hi, axis, edges: Vec::new() })
        .collect();
    let face_lookup: std::collections::HashMap<(usize, usize), usize> =
        faces.iter().enumerate().map(|(i, f)| ((f.lo, f.hi), i)).collect();

    let mut block_edges = vec![Vec::new(); nb];
    let mut edge_block = vec![None; dom.edge_count()];
    let mut edge_face = vec![None; dom.edge_count()];
    for (e, edge) in dom.edges().iter().enumerate() {
        let a = block_of_vertex[dom.vertex_index(&edge.base).unwrap()];
        let b = block_of_vertex[dom.vertex_index(&edge.head()).unwrap()];
        if a == b {
            block_edges[a].push(e);
            edge_block[e] = Some(a);
        } else {
            let f = face_lookup[&(a.min(b), a.max(b))];
            faces[f].edges.push(e);
            edge_face[e] = Some(f);
        }
    }
    Ok(CoarseBlocking {
        l,
        d,
        sites,
        block_of_vertex,
        block_edges,
        faces,
        edge_block,
        edge_face,
        neighbours,
    })
}

impl CoarseBlocking {
    pub fn block_side(&self) -> i64 {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn block_count(&self) -> usize {
        self.sites.len()
    }

    /// Coarse coordinate k of block `b`; its centre is `L·k`.
    pub fn site(&self, b: usize) -> &Coord {
        &self.sites[b]
    }

    pub fn sites(&self) -> &[Coord] {
        &self.sites
    }

    pub fn centre(&self, b: usize) -> Coord {
        self.sites[b].iter().map(|&k| k * self.l).collect()
    }

    pub fn block_index(&self, site: &[i64]) -> Option<usize> {
        self.sites.iter().position(|s| s.as_slice() == site)
    }

    pub fn block_of_vertex(&self, v: usize) -> usize {
        self.block_of_vertex[v]
    }

    /// E(Q̃(v)): edges with both endpoints in the truncated block.
    pub fn block_edges(&self, b: usize) -> &[usize] {
        &self.block_edges[b]
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn face(&self, f: usize) -> &Face {
        &self.faces[f]
    }

    pub fn face_between(&self, a: usize, b: usize) -> Option<usize> {
        self.faces
            .iter()
            .position(|f| (f.lo == a && f.hi == b) || (f.lo == b && f.hi == a))
    }

    pub fn edge_block(&self, e: usize) -> Option<usize> {
        self.edge_block[e]
    }

    pub fn edge_face(&self, e: usize) -> Option<usize> {
        self.edge_face[e]
    }

    /// Blocks containing an endpoint of `e` (one block, or the two ends of a face).
    pub fn blocks_of_edge(&self, e: usize) -> (usize, Option<usize>) {
        match (self.edge_block[e], self.edge_face[e]) {
            (Some(b), _) => (b, None),
            (None, Some(f)) => (self.faces[f].lo, Some(self.faces[f].hi)),
            _ => unreachable!("every edge is interior or on a face"),
        }
    }

    pub fn neighbours(&self, b: usize) -> &[usize] {
        &self.neighbours[b]
    }

    pub fn are_neighbours(&self, a: usize, b: usize) -> bool {
        self.neighbours[a].binary_search(&b).is_ok()
    }

    /// ℰ(S): edges with both endpoints in ⋃_{v∈S} Q̃(v).
    pub fn edges_of_set(&self, s: &BTreeSet<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        for e in 0..self.edge_block.len() {
            let (a, b) = self.blocks_of_edge(e);
            if s.contains(&a) && b.is_none_or(|b| s.contains(&b)) {
                out.push(e);
            }
        }
        out
    }

    /// Edges with at least one endpoint in ⋃_{v∈S} Q̃(v): the block edges of S
    /// together with every face incident to S.
    pub fn edges_touching_set(&self, s: &BTreeSet<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        for e in 0..self.edge_block.len() {
            let (a, b) = self.blocks_of_edge(e);
            if s.contains(&a) || b.is_some_and(|b| s.contains(&b)) {
                out.push(e);
            }
        }
        out
    }

    /// P′(S): faces whose two blocks both lie in S.
    pub fn faces_of_set(&self, s: &BTreeSet<usize>) -> Vec<usize> {
        (0..self.faces.len())
            .filter(|&f| s.contains(&self.faces[f].lo) && s.contains(&self.faces[f].hi))
            .collect()
    }

    /// X(Γ): blocks incident to some face of Γ.
    pub fn x_of_faces(&self, gamma: &[usize]) -> BTreeSet<usize> {
        gamma.iter().flat_map(|&f| [self.faces[f].lo, self.faces[f].hi]).collect()
    }

    /// Two block sets touch when their union is connected: they overlap or
    /// contain neighbouring blocks.
    pub fn touching(&self, a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> bool {
        a.iter().any(|&u| b.contains(&u) || self.neighbours[u].iter().any(|v| b.contains(v)))
    }

    pub fn is_connected(&self, s: &BTreeSet<usize>) -> bool {
        let Some(&start) = s.iter().next() else {
            return false;
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbours[u] {
                if s.contains(&v) && seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen.len() == s.len()
    }

    /// Connected components of a block set, each sorted, in order of least element.
    pub fn components(&self, s: &BTreeSet<usize>) -> Vec<BTreeSet<usize>> {
        let mut left = s.clone();
        let mut out = Vec::new();
        while let Some(&start) = left.iter().next() {
            let mut comp = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            left.remove(&start);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbours[u] {
                    if left.remove(&v) {
                        comp.insert(v);
                        queue.push_back(v);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Coarse graph distance (ℓ¹ on coarse coordinates).
    pub fn coarse_distance(&self, a: usize, b: usize) -> i64 {
        l1(&self.sites[a], &self.sites[b])
    }
}

/// Versioned, self-describing summary of a domain and (optionally) its blocking.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainDescriptor {
    pub schema_version: u32,
    pub dimension: usize,
    pub n: i64,
    pub block_side: Option<i64>,
    pub vertices: usize,
    pub edges: usize,
    pub plaquettes: usize,
    pub blocks: Option<usize>,
    pub faces: Option<usize>,
    pub edge_order: String,
    pub plaquette_order: String,
    pub plaquette_orientation: String,
}

pub const DESCRIPTOR_SCHEMA_VERSION: u32 = 1;

pub fn describe(dom: &LatticeDomain, blocking: Option<&CoarseBlocking>) -> DomainDescriptor {
    DomainDescriptor {
        schema_version: DESCRIPTOR_SCHEMA_VERSION,
        dimension: dom.dim(),
        n: dom.radius(),
        block_side: blocking.map(|b| b.block_side()),
        vertices: dom.vertex_count(),
        edges: dom.edge_count(),
        plaquettes: dom.plaquette_count(),
        blocks: blocking.map(|b| b.block_count()),
        faces: blocking.map(|b| b.faces().len()),
        edge_order: "lexicographic (base vertex, direction)".into(),
        plaquette_order: "lexicographic (base vertex, i, j), i < j".into(),
        plaquette_orientation: "e1 + e2 - e3 - e4".into(),
    }
}

pub const MAX_ANIMAL_SIZE: usize = 8;

/// Counts a(k), k = 1..=k_max, of connected subsets of Z^d containing the origin.
///
/// Redelmeier's method enumerates fixed animals whose lexicographically least
/// cell is the origin; each such animal of size k has k translates through the
/// origin.
pub fn enumerate_connected_sets(d: usize, k_max: usize) -> Result<Vec<u64>> {
    if k_max > MAX_ANIMAL_SIZE {
        return Err(guard(format!("k_max = {k_max} exceeds {MAX_ANIMAL_SIZE}")));
    }
    if d < 1 {
        return Err(invalid("dimension must be positive"));
    }
    let mut fixed = vec![0u64; k_max + 1];
    if k_max == 0 {
        return Ok(Vec::new());
    }
    let origin = vec![0i64; d];
    let mut seen: HashSet<Coord> = HashSet::from([origin.clone()]);
    let mut untried = vec![origin];
    let mut size = 0usize;
    redelmeier(d, k_max, &mut untried, &mut seen, &mut size, &mut fixed);
    Ok((1..=k_max).map(|k| fixed[k] * k as u64).collect())
}

fn redelmeier(
    d: usize,
    k_max: usize,
    untried: &mut Vec<Coord>,
    seen: &mut HashSet<Coord>,
    size: &mut usize,
    fixed: &mut [u64],
) {
    while let Some(cell) = untried.pop() {
        *size += 1;
        fixed[*size] += 1;
        if *size < k_max {
            let mut added = Vec::new();
            for a in 0..d {
                for s in [-1i64, 1] {
                    let mut nb = cell.clone();
                    nb[a] += s;
                    if lex_positive(&nb) && !seen.contains(&nb) {
                        seen.insert(nb.clone());
                        added.push(nb);
                    }
                }
            }
            let mut next = untried.clone();
            next.extend(added.iter().cloned());
            redelmeier(d, k_max, &mut next, seen, size, fixed);
            for nb in added {
                seen.remove(&nb);
            }
        }
        *size -= 1;
    }
}

/// Cells the enumeration may use: the origin and everything lexicographically after it.
fn lex_positive(x: &[i64]) -> bool {
    match x.iter().find(|&&c| c != 0) {
        None => true,
        Some(&c) => c > 0,
    }
}
