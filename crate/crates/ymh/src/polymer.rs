//! Hard-core polymer gases on the coarse lattice and their cluster expansion.
//!
//! Polymers are finite connected subsets of Z^d (optionally restricted to a
//! bounded coarse lattice). Two polymers are incompatible when their union is
//! connected, i.e. they overlap or contain neighbouring sites.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{guard, invalid, Result};
use crate::geometry::{CoarseBlocking, Coord};

/// Largest cluster handled by the Ursell function.
pub const MAX_URSELL: usize = 8;
/// Largest support accepted by [`psi_bar`].
pub const MAX_PSI_SUPPORT: usize = 5;
/// Largest support accepted by [`truncated_log_z`].
pub const MAX_EXPANSION_SUPPORT: usize = 12;
/// Largest polymer in the universe used by norms and the KP check.
pub const UNIVERSE_MAX_SIZE: usize = 5;
/// Products of weights below this magnitude are dropped.
pub const UNDERFLOW: f64 = 1e-300;

pub const TABLE_SCHEMA_VERSION: u32 = 1;

fn adjacent(a: &[i64], b: &[i64]) -> bool {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<i64>() == 1
}

/// x ∈ S or x has a neighbour in S.
fn touches_site(sites: &[Coord], x: &[i64]) -> bool {
    sites.iter().any(|s| s.as_slice() == x || adjacent(s, x))
}

fn neighbours(x: &[i64]) -> Vec<Coord> {
    let mut out = Vec::with_capacity(2 * x.len());
    for a in 0..x.len() {
        for s in [-1, 1] {
            let mut y = x.to_vec();
            y[a] += s;
            out.push(y);
        }
    }
    out
}

fn sites_connected(sites: &BTreeSet<Coord>) -> bool {
    let Some(start) = sites.iter().next() else {
        return false;
    };
    let mut seen = BTreeSet::from([start.clone()]);
    let mut stack = vec![start.clone()];
    while let Some(u) = stack.pop() {
        for v in neighbours(&u) {
            if sites.contains(&v) && seen.insert(v.clone()) {
                stack.push(v);
            }
        }
    }
    seen.len() == sites.len()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Coord>", into = "Vec<Coord>")]
pub struct Polymer {
    sites: Vec<Coord>,
}

impl Polymer {
    pub fn new(sites: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let set: BTreeSet<Coord> = sites.into_iter().collect();
        if set.is_empty() {
            return Err(invalid("a polymer needs at least one site"));
        }
        let d = set.iter().next().unwrap().len();
        if d == 0 || set.iter().any(|s| s.len() != d) {
            return Err(invalid("polymer sites must share a positive dimension"));
        }
        if !sites_connected(&set) {
            return Err(invalid(format!("polymer {:?} is not connected", set)));
        }
        Ok(Self { sites: set.into_iter().collect() })
    }

    pub fn singleton(x: Coord) -> Self {
        Self { sites: vec![x] }
    }

    pub fn sites(&self) -> &[Coord] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.sites[0].len()
    }

    pub fn site_set(&self) -> BTreeSet<Coord> {
        self.sites.iter().cloned().collect()
    }

    pub fn touches_site(&self, x: &[i64]) -> bool {
        touches_site(&self.sites, x)
    }

    /// P ∪ Q is connected.
    pub fn touches(&self, other: &Polymer) -> bool {
        other.sites.iter().any(|x| self.touches_site(x))
    }
}

impl TryFrom<Vec<Coord>> for Polymer {
    type Error = crate::Error;
    fn try_from(v: Vec<Coord>) -> Result<Self> {
        Polymer::new(v)
    }
}

impl From<Polymer> for Vec<Coord> {
    fn from(p: Polymer) -> Self {
        p.sites
    }
}

/// The hard-core interaction δ: 0 when P₁ ∪ P₂ is connected, 1 otherwise.
pub fn delta(p1: &Polymer, p2: &Polymer) -> u8 {
    u8::from(!p1.touches(p2))
}

pub fn incompatible(p1: &Polymer, p2: &Polymer) -> bool {
    delta(p1, p2) == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    OracleIntegrated,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub weight: f64,
    pub provenance: Provenance,
}

/// w(P) on finitely many connected polymers; absent polymers have weight 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolymerWeightTable {
    entries: BTreeMap<Polymer, WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    schema_version: u32,
    entries: Vec<TableRow>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    sites: Polymer,
    weight: f64,
    provenance: Provenance,
}

impl PolymerWeightTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Polymer, weight: f64, provenance: Provenance) -> Result<()> {
        if !weight.is_finite() {
            return Err(invalid(format!("weight of {:?} is not finite", p.sites)));
        }
        if let Some(q) = self.entries.keys().next() {
            if q.dim() != p.dim() {
                return Err(invalid("polymers of different dimensions in one table"));
            }
        }
        self.entries.insert(p, WeightEntry { weight, provenance });
        Ok(())
    }

    pub fn weight(&self, p: &Polymer) -> Option<f64> {
        self.entries.get(p).map(|e| e.weight)
    }

    pub fn entry(&self, p: &Polymer) -> Option<&WeightEntry> {
        self.entries.get(p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Polymer, &WeightEntry)> {
        self.entries.iter()
    }

    pub fn polymers(&self) -> impl Iterator<Item = &Polymer> {
        self.entries.keys()
    }

    /// Union of all sites carrying an entry.
    pub fn support(&self) -> BTreeSet<Coord> {
        self.entries.keys().flat_map(|p| p.sites.iter().cloned()).collect()
    }

    /// A copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for e in out.entries.values_mut() {
            e.weight *= factor;
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let file = TableFile {
            schema_version: TABLE_SCHEMA_VERSION,
            entries: self
                .entries
                .iter()
                .map(|(p, e)| TableRow { sites: p.clone(), weight: e.weight, provenance: e.provenance })
                .collect(),
        };
        serde_json::to_value(file).expect("table serialises")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let file: TableFile = serde_json::from_value(v.clone()).map_err(|e| invalid(format!("weight table: {e}")))?;
        if file.schema_version != TABLE_SCHEMA_VERSION {
            return Err(invalid(format!("unsupported table schema_version {}", file.schema_version)));
        }
        let mut t = Self::new();
        for row in file.entries {
            t.insert(row.sites, row.weight, row.provenance)?;
        }
        Ok(t)
    }
}

/// The coarse lattice polymers may live on: all of Z^d, or a finite site set.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLattice {
    dim: usize,
    sites: Option<BTreeSet<Coord>>,
}

impl CoarseLattice {
    pub fn unbounded(dim: usize) -> Self {
        Self { dim, sites: None }
    }

    pub fn bounded(sites: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let sites: BTreeSet<Coord> = sites.into_iter().collect();
        let dim = sites.iter().next().map(Vec::len).ok_or_else(|| invalid("empty coarse lattice"))?;
        if sites.iter().any(|s| s.len() != dim) {
            return Err(invalid("coarse sites of different dimensions"));
        }
        Ok(Self { dim, sites: Some(sites) })
    }

    /// Λ′ of a blocking.
    pub fn from_blocking(blocking: &CoarseBlocking) -> Self {
        Self { dim: blocking.dim(), sites: Some(blocking.sites().iter().cloned().collect()) }
    }

    /// The box {0, …, side − 1}^d.
    pub fn cube(dim: usize, side: i64) -> Result<Self> {
        if side < 1 || dim == 0 {
            return Err(invalid("cube needs positive side and dimension"));
        }
        let mut sites = vec![vec![]];
        for _ in 0..dim {
            sites = sites
                .into_iter()
                .flat_map(|s: Coord| {
                    (0..side).map(move |k| {
                        let mut t = s.clone();
                        t.push(k);
                        t
                    })
                })
                .collect();
        }
        Self::bounded(sites)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dim && self.sites.as_ref().is_none_or(|s| s.contains(x))
    }

    pub fn sites(&self) -> Option<&BTreeSet<Coord>> {
        self.sites.as_ref()
    }
}

/// Every connected P in the lattice with |P| ≤ `max_size` that touches some
/// site of `seeds`, in sorted order.
pub fn connected_subsets_touching(lattice: &CoarseLattice, seeds: &BTreeSet<Coord>, max_size: usize) -> Vec<Polymer> {
    // A polymer touching the seeds contains a site of their closed
    // neighbourhood; grow from each such site.
    let mut starts: BTreeSet<Coord> = BTreeSet::new();
    for s in seeds {
        if lattice.contains(s) {
            starts.insert(s.clone());
        }
        for n in neighbours(s) {
            if lattice.contains(&n) {
                starts.insert(n);
            }
        }
    }
    let mut found: BTreeSet<BTreeSet<Coord>> = BTreeSet::new();
    let mut layer: BTreeSet<BTreeSet<Coord>> = starts.into_iter().map(|s| BTreeSet::from([s])).collect();
    for size in 1..=max_size {
        found.extend(layer.iter().cloned());
        if size == max_size {
            break;
        }
        let mut next = BTreeSet::new();
        for set in &layer {
            for s in set {
                for n in neighbours(s) {
                    if lattice.contains(&n) && !set.contains(&n) {
                        let mut grown = set.clone();
                        grown.insert(n);
                        next.insert(grown);
                    }
                }
            }
        }
        layer = next;
    }
    found.into_iter().map(|s| Polymer { sites: s.into_iter().collect() }).collect()
}

/// An unordered collection of polymers, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    polymers: Vec<Polymer>,
}

impl Cluster {
    pub fn new(mut polymers: Vec<Polymer>) -> Result<Self> {
        if polymers.is_empty() {
            return Err(invalid("a cluster needs at least one polymer"));
        }
        polymers.sort();
        Ok(Self { polymers })
    }

    pub fn polymers(&self) -> &[Polymer] {
        &self.polymers
    }

    pub fn len(&self) -> usize {
        self.polymers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// n_X(P) for each distinct P.
    pub fn multiplicities(&self) -> BTreeMap<&Polymer, usize> {
        let mut m = BTreeMap::new();
        for p in &self.polymers {
            *m.entry(p).or_insert(0) += 1;
        }
        m
    }

    /// Index pairs (i, j), i < j, with δ(P_i, P_j) = 0.
    pub fn incompatibility_graph(&self) -> Vec<(usize, usize)> {
        let n = self.polymers.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if incompatible(&self.polymers[i], &self.polymers[j]) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Non-decomposable: the incompatibility graph is connected.
    pub fn is_connected(&self) -> bool {
        graph_connected(self.polymers.len(), &self.incompatibility_graph())
    }

    pub fn union(&self) -> BTreeSet<Coord> {
        self.polymers.iter().flat_map(|p| p.sites.iter().cloned()).collect()
    }

    fn matrix(&self) -> Vec<Vec<bool>> {
        let n = self.polymers.len();
        let mut m = vec![vec![false; n]; n];
        for (i, j) in self.incompatibility_graph() {
            m[i][j] = true;
            m[j][i] = true;
        }
        m
    }
}

fn graph_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    let mut parts = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            parts -= 1;
        }
    }
    parts == 1
}

/// Σ over connected graphs G on {0..n} of Π_{ij∈G} f_ij with f = δ − 1, by
/// the subset recursion C(S) = F(S) − Σ_{T ∋ min S, T ⊊ S} C(T)·F(S∖T), where
/// F(S) = Π_{i<j∈S} δ_ij is the all-graphs sum.
fn ursell_matrix(incompat: &[Vec<bool>]) -> i64 {
    let n = incompat.len();
    let full = (1usize << n) - 1;
    let mut f = vec![0i64; full + 1];
    for s in 0..=full {
        let mut ok = true;
        'outer: for i in 0..n {
            if s >> i & 1 == 0 {
                continue;
            }
            for j in (i + 1)..n {
                if s >> j & 1 == 1 && incompat[i][j] {
                    ok = false;
                    break 'outer;
                }
            }
        }
        f[s] = i64::from(ok);
    }
    let mut c = vec![0i64; full + 1];
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let mut total = f[s];
        // Proper subsets T of S containing the lowest element.
        let rest = s ^ low;
        let mut sub = rest;
        loop {
            let t = sub | low;
            if t != s {
                total -= c[t] * f[s ^ t];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        c[s] = total;
    }
    c[full]
}

pub fn ursell(x: &Cluster) -> Result<i64> {
    if x.len() > MAX_URSELL {
        return Err(guard(format!("cluster of {} polymers exceeds {MAX_URSELL}", x.len())));
    }
    Ok(ursell_matrix(&x.matrix()))
}

/// The same sum by enumerating subsets of the incompatibility edges and
/// keeping the spanning connected ones. Exponential in the edge count.
pub fn ursell_by_enumeration(x: &Cluster) -> Result<i64> {
    if x.len() > MAX_URSELL {
        return Err(guard(format!("cluster of {} polymers exceeds {MAX_URSELL}", x.len())));
    }
    let edges = x.incompatibility_graph();
    if edges.len() > 24 {
        return Err(guard(format!("{} incompatible pairs is too many to enumerate", edges.len())));
    }
    let n = x.len();
    let mut total = 0i64;
    let mut chosen = Vec::with_capacity(edges.len());
    for mask in 0u32..(1u32 << edges.len()) {
        chosen.clear();
        chosen.extend(edges.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, e)| *e));
        if graph_connected(n, &chosen) {
            total += if chosen.len() % 2 == 0 { 1 } else { -1 };
        }
    }
    Ok(total)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Ψ(X) = Π_P 1/n_X(P)! · Π_{P∈X} w(P) · ursell(X).
pub fn cluster_weight(x: &Cluster, table: &PolymerWeightTable) -> Result<f64> {
    let mut product = 1.0;
    for p in x.polymers() {
        product *= table
            .weight(p)
            .ok_or_else(|| invalid(format!("no weight entry for polymer {:?}", p.sites())))?;
    }
    if product == 0.0 {
        return Ok(0.0);
    }
    let denom: f64 = x.multiplicities().values().map(|&k| factorial(k)).product();
    Ok(product / denom * ursell(x)? as f64)
}

/// Depth-first walk over multisets of table polymers in nondecreasing index
/// order, visiting each multiset of size ≤ n_max whose union stays within
/// `cap` sites.
struct ClusterWalk<'a> {
    polymers: Vec<&'a Polymer>,
    weights: Vec<f64>,
    incompat: Vec<Vec<bool>>,
    n_max: usize,
    cap: usize,
}

impl<'a> ClusterWalk<'a> {
    fn new(candidates: Vec<(&'a Polymer, f64)>, n_max: usize, cap: usize) -> Self {
        let n = candidates.len();
        let mut incompat = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                incompat[i][j] = incompatible(candidates[i].0, candidates[j].0);
            }
        }
        let (polymers, weights) = candidates.into_iter().unzip();
        Self { polymers, weights, incompat, n_max, cap }
    }

    fn run<F: FnMut(usize, f64, &BTreeSet<Coord>)>(&self, visit: &mut F) {
        let mut chosen = Vec::new();
        self.dfs(0, &mut chosen, 1.0, &BTreeSet::new(), visit);
    }

    fn dfs<F: FnMut(usize, f64, &BTreeSet<Coord>)>(
        &self,
        start: usize,
        chosen: &mut Vec<usize>,
        product: f64,
        union: &BTreeSet<Coord>,
        visit: &mut F,
    ) {
        for i in start..self.polymers.len() {
            let p = product * self.weights[i];
            if p.abs() < UNDERFLOW {
                continue;
            }
            let mut u = union.clone();
            u.extend(self.polymers[i].sites.iter().cloned());
            if u.len() > self.cap {
                continue;
            }
            chosen.push(i);
            if let Some(psi) = self.psi(chosen, p) {
                visit(chosen.len(), psi, &u);
            }
            if chosen.len() < self.n_max {
                self.dfs(i, chosen, p, &u, visit);
            }
            chosen.pop();
        }
    }

    /// Ψ of the chosen multiset, or None when it is decomposable.
    fn psi(&self, chosen: &[usize], product: f64) -> Option<f64> {
        let n = chosen.len();
        let m: Vec<Vec<bool>> =
            chosen.iter().map(|&a| chosen.iter().map(|&b| self.incompat[a][b]).collect()).collect();
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).filter(|&(i, j)| m[i][j]).collect();
        if !graph_connected(n, &edges) {
            return None;
        }
        let mut denom = 1.0;
        let mut run = 1;
        for k in 1..=n {
            if k < n && chosen[k] == chosen[k - 1] {
                run += 1;
            } else {
                denom *= factorial(run);
                run = 1;
            }
        }
        Some(product / denom * ursell_matrix(&m) as f64)
    }
}

fn check_n_max(n_max: usize) -> Result<()> {
    if n_max == 0 || n_max > MAX_URSELL {
        return Err(guard(format!("n_max = {n_max} outside 1..={MAX_URSELL}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiBar {
    pub support: Vec<Coord>,
    /// partial[n − 1] = Σ of Ψ over clusters of n polymers with union = support.
    pub partial: Vec<f64>,
    pub total: f64,
}

/// Ψ̄(X) = Σ over clusters with ⋃P_i = X, truncated at n_max polymers.
pub fn psi_bar(support: &BTreeSet<Coord>, table: &PolymerWeightTable, n_max: usize) -> Result<PsiBar> {
    check_n_max(n_max)?;
    if support.is_empty() || support.len() > MAX_PSI_SUPPORT {
        return Err(guard(format!("support of {} sites outside 1..={MAX_PSI_SUPPORT}", support.len())));
    }
    let candidates: Vec<(&Polymer, f64)> = table
        .iter()
        .filter(|(p, _)| p.sites.iter().all(|s| support.contains(s)))
        .map(|(p, e)| (p, e.weight))
        .collect();
    let walk = ClusterWalk::new(candidates, n_max, support.len());
    let mut partial = vec![0.0; n_max];
    walk.run(&mut |n, psi, union| {
        if union == support {
            partial[n - 1] += psi;
        }
    });
    Ok(PsiBar { support: support.iter().cloned().collect(), partial: partial.clone(), total: partial.iter().sum() })
}

/// ‖f‖_r = sup_x Σ_{P touching x} f(P) e^{r|P|} for f = |w| on the entries.
pub fn r_norm(table: &PolymerWeightTable, r: f64) -> f64 {
    r_norm_of(table.iter().map(|(p, e)| (p.sites(), e.weight.abs())), r)
}

/// ‖f‖_r for f given on finitely many site sets (assumed connected).
pub fn r_norm_of<'a>(entries: impl IntoIterator<Item = (&'a [Coord], f64)>, r: f64) -> f64 {
    let entries: Vec<(&[Coord], f64)> = entries.into_iter().collect();
    let mut candidates: BTreeSet<Coord> = BTreeSet::new();
    for (sites, _) in &entries {
        for s in sites.iter() {
            candidates.insert(s.clone());
            candidates.extend(neighbours(s));
        }
    }
    candidates
        .iter()
        .map(|x| {
            entries
                .iter()
                .filter(|(sites, _)| touches_site(sites, x))
                .map(|(sites, f)| f * (r * sites.len() as f64).exp())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Face-set variant: sup over blocks x of Σ_{Γ connected, X(Γ) touches x}
/// f(Γ) e^{r|X(Γ)|}. Face sets whose block set is disconnected are skipped.
pub fn r_norm_faces(blocking: &CoarseBlocking, entries: &[(Vec<usize>, f64)], r: f64) -> f64 {
    let xs: Vec<(BTreeSet<usize>, f64)> = entries
        .iter()
        .map(|(gamma, f)| (blocking.x_of_faces(gamma), *f))
        .filter(|(x, _)| blocking.is_connected(x))
        .collect();
    (0..blocking.block_count())
        .map(|b| {
            let point = BTreeSet::from([b]);
            xs.iter()
                .filter(|(x, _)| blocking.touching(x, &point))
                .map(|(x, f)| f * (r * x.len() as f64).exp())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpReport {
    pub holds: bool,
    pub worst: Option<Polymer>,
    /// min over the universe of |P| − Σ_{P̃ touching P} |w(P̃)| e^{|P̃|}.
    pub margin: f64,
    pub checked: usize,
}

/// Checks Σ_{P̃ touching P} |w(P̃)| e^{|P̃|} ≤ |P| for every connected P of
/// size ≤ 5 in the lattice that touches the table's support.
pub fn kp_condition_check(table: &PolymerWeightTable, lattice: &CoarseLattice) -> KpReport {
    let universe = connected_subsets_touching(lattice, &table.support(), UNIVERSE_MAX_SIZE);
    let mut worst = None;
    let mut margin = f64::INFINITY;
    for p in &universe {
        let lhs: f64 = table
            .iter()
            .filter(|(q, _)| q.touches(p))
            .map(|(q, e)| e.weight.abs() * (q.len() as f64).exp())
            .sum();
        let m = p.len() as f64 - lhs;
        if m < margin {
            margin = m;
            worst = Some(p.clone());
        }
    }
    KpReport { holds: margin >= 0.0, worst, margin, checked: universe.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub n_max: usize,
    pub support_cap: usize,
    pub r: f64,
    /// Σ of Ψ over clusters of exactly n polymers, n = 1..=n_max.
    pub per_n: Vec<f64>,
    /// Σ of |Ψ| over the same clusters.
    pub per_n_abs: Vec<f64>,
    pub total: f64,
    /// |per_n[n_max − 1]|, a proxy for the truncation error.
    pub truncation_proxy: f64,
    /// Largest ratio per_n_abs[n + 1] / per_n_abs[n] over nonzero terms.
    pub max_ratio: Option<f64>,
    pub clusters: usize,
    /// Ψ̄ by support, sorted by support.
    pub psi_bar: Vec<(Vec<Coord>, f64)>,
    /// ‖Ψ̄‖_r of the truncated Ψ̄.
    pub psi_bar_norm: f64,
    /// ‖w‖_{r+2}.
    pub w_norm: f64,
    /// Σ_{n≥1} (2‖w‖_{r+2})^n when 2‖w‖_{r+2} < 1.
    pub envelope: Option<f64>,
    pub envelope_diverges: bool,
}

/// Σ_X Ψ̄(X) over supports of at most `support_cap` sites and clusters of at
/// most `n_max` polymers.
pub fn truncated_log_z(table: &PolymerWeightTable, n_max: usize, support_cap: usize, r: f64) -> Result<Expansion> {
    check_n_max(n_max)?;
    if support_cap == 0 || support_cap > MAX_EXPANSION_SUPPORT {
        return Err(guard(format!("support_cap = {support_cap} outside 1..={MAX_EXPANSION_SUPPORT}")));
    }
    let candidates: Vec<(&Polymer, f64)> = table.iter().map(|(p, e)| (p, e.weight)).collect();
    let walk = ClusterWalk::new(candidates, n_max, support_cap);
    let mut per_n = vec![0.0; n_max];
    let mut per_n_abs = vec![0.0; n_max];
    let mut by_support: BTreeMap<Vec<Coord>, f64> = BTreeMap::new();
    let mut clusters = 0;
    walk.run(&mut |n, psi, union| {
        per_n[n - 1] += psi;
        per_n_abs[n - 1] += psi.abs();
        *by_support.entry(union.iter().cloned().collect()).or_insert(0.0) += psi;
        clusters += 1;
    });
    let max_ratio = per_n_abs
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
    let psi_bar_norm = r_norm_of(by_support.iter().map(|(s, v)| (s.as_slice(), v.abs())), r);
    let w_norm = r_norm(table, r + 2.0);
    let q = 2.0 * w_norm;
    let envelope = (q < 1.0).then(|| q / (1.0 - q));
    Ok(Expansion {
        n_max,
        support_cap,
        r,
        total: per_n.iter().sum(),
        truncation_proxy: per_n[n_max - 1].abs(),
        per_n,
        per_n_abs,
        max_ratio,
        clusters,
        psi_bar: by_support.into_iter().collect(),
        psi_bar_norm,
        w_norm,
        envelope,
        envelope_diverges: q >= 1.0,
    })
}

/// Σ over pairwise compatible subsets of table polymers of Π w(P), the
/// hard-core polymer partition function, by direct enumeration.
pub fn polymer_partition_function(table: &PolymerWeightTable) -> Result<f64> {
    let polys: Vec<(&Polymer, f64)> = table.iter().map(|(p, e)| (p, e.weight)).collect();
    if polys.len() > 20 {
        return Err(guard(format!("{} polymers is too many for direct enumeration", polys.len())));
    }
    let n = polys.len();
    let mut total = 0.0;
    'subsets: for mask in 0u32..(1u32 << n) {
        let mut w = 1.0;
        for i in 0..n {
            if mask >> i & 1 == 0 {
                continue;
            }
            for j in (i + 1)..n {
                if mask >> j & 1 == 1 && incompatible(polys[i].0, polys[j].0) {
                    continue 'subsets;
                }
            }
            w *= polys[i].1;
        }
        total += w;
    }
    Ok(total)
}

/// A random connected polymer of exactly `size` sites grown from `start`
/// inside the lattice, or None when the lattice blocks growth.
pub fn random_polymer<R: Rng + ?Sized>(
    lattice: &CoarseLattice,
    start: Coord,
    size: usize,
    rng: &mut R,
) -> Option<Polymer> {
    let mut set = BTreeSet::from([start]);
    while set.len() < size {
        let frontier: Vec<Coord> = set
            .iter()
            .flat_map(|s| neighbours(s))
            .filter(|n| lattice.contains(n) && !set.contains(n))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        set.insert(frontier.choose(rng)?.clone());
    }
    Some(Polymer { sites: set.into_iter().collect() })
}

/// `count` distinct random polymers of size 1..=max_size in the cube
/// {0..side−1}^d with weights uniform in [−1, 1], rescaled so ‖w‖_r = target.
pub fn random_table(
    dim: usize,
    side: i64,
    count: usize,
    max_size: usize,
    target_norm: f64,
    r: f64,
    seed: u64,
) -> Result<PolymerWeightTable> {
    if max_size == 0 || count == 0 {
        return Err(invalid("random table needs count ≥ 1 and max_size ≥ 1"));
    }
    let lattice = CoarseLattice::cube(dim, side)?;
    let sites: Vec<Coord> = lattice.sites().unwrap().iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = PolymerWeightTable::new();
    let mut attempts = 0;
    while table.len() < count {
        attempts += 1;
        if attempts > 100 * count {
            return Err(invalid("lattice too small for that many distinct polymers"));
        }
        let size = rng.random_range(1..=max_size);
        let start = sites.choose(&mut rng).unwrap().clone();
        if let Some(p) = random_polymer(&lattice, start, size, &mut rng) {
            if table.weight(&p).is_none() {
                let w = rng.random_range(-1.0..=1.0);
                table.insert(p, w, Provenance::Synthetic)?;
            }
        }
    }
    let norm = r_norm(&table, r);
    Ok(if norm > 0.0 { table.scaled(target_norm / norm) } else { table })
}
