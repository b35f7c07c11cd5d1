//! The lattice Proca field and its face-interpolated family.
//!
//! Forms live on the free edges only. With the fixed edges substituted,
//!
//! ```text
//! β·S(θ; s) = ½ θᵀ M(s) θ + b(s)ᵀ θ + c(s)
//! ```
//!
//! and M, b, c are affine in the face parameters s. [`ProcaFamily`] keeps the
//! affine pieces; [`ProcaOperator`] is one member, factorized.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{guard, invalid, numerical, Result};
use crate::geometry::{CoarseBlocking, LatticeDomain, OneForm, Plaquette};
use crate::model::{BlockClassification, ModelParams};
use crate::quadrature::{gauss_legendre_on, tensor_integrate};

/// Largest face set accepted by the derivative routines.
pub const MAX_GAMMA: usize = 3;

/// Upper end of the spectrum of (1/β)·M: (dθ_p)² ≤ 4 Σ_{e∈p} θ_e² and each
/// edge lies in at most 2(d−1) plaquettes.
pub fn spectral_ceiling(d: usize, m: f64) -> f64 {
    m + 8.0 * (d as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpolationMode {
    Standard,
    /// Every plaquette meeting a face between two good blocks is switched off.
    ZeroPlus,
}

/// Face parameters s_F. Faces without an explicit value read as `default`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationParams {
    default: f64,
    values: BTreeMap<usize, f64>,
    mode: InterpolationMode,
}

fn check_unit(v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(invalid(format!("interpolation parameter {v} outside [0, 1]")))
    }
}

impl InterpolationParams {
    pub fn uniform(v: f64) -> Result<Self> {
        Ok(Self { default: check_unit(v)?, values: BTreeMap::new(), mode: InterpolationMode::Standard })
    }

    pub fn ones() -> Self {
        Self { default: 1.0, values: BTreeMap::new(), mode: InterpolationMode::Standard }
    }

    pub fn zero_plus() -> Self {
        Self { default: 0.0, values: BTreeMap::new(), mode: InterpolationMode::ZeroPlus }
    }

    /// s_Γ: the given values on Γ, zero on every other face.
    pub fn restricted(values: &[(usize, f64)]) -> Result<Self> {
        let mut out = Self { default: 0.0, values: BTreeMap::new(), mode: InterpolationMode::Standard };
        for &(f, v) in values {
            out.values.insert(f, check_unit(v)?);
        }
        Ok(out)
    }

    pub fn with(mut self, face: usize, v: f64) -> Result<Self> {
        self.values.insert(face, check_unit(v)?);
        Ok(self)
    }

    pub fn value(&self, face: usize) -> f64 {
        self.values.get(&face).copied().unwrap_or(self.default)
    }

    pub fn mode(&self) -> InterpolationMode {
        self.mode
    }
}

/// How a plaquette enters the interpolated action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaquetteWeight {
    One,
    Zero,
    /// σ_p = s of the k-th parameter face.
    Face(usize),
}

#[derive(Debug, Clone)]
struct Term {
    plaquette: usize,
    /// (free position, sign).
    free: Vec<(usize, f64)>,
    /// Contribution of the fixed edges to dθ_p.
    offset: f64,
    weight: PlaquetteWeight,
}

/// ∂M/∂s_k, ∂b/∂s_k, ∂c/∂s_k, stored on the support of face k's plaquettes.
#[derive(Debug, Clone)]
struct Direction {
    support: Vec<usize>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

/// The affine family s ↦ (M(s), b(s), c(s)).
#[derive(Debug, Clone)]
pub struct ProcaFamily {
    beta: f64,
    m: f64,
    d: usize,
    free: Vec<usize>,
    pos: Vec<Option<usize>>,
    eta: Vec<f64>,
    terms: Vec<Term>,
    faces: Vec<usize>,
    m0: DMatrix<f64>,
    b0: DVector<f64>,
    c0: f64,
    dirs: Vec<Direction>,
}

impl ProcaFamily {
    /// Free boundary conditions on all of Λ_n, σ ≡ 1.
    pub fn free_field(dom: &LatticeDomain, beta: f64, m: f64) -> Result<Self> {
        Self::build(dom, &BTreeSet::new(), None, Vec::new(), beta, m, |_| PlaquetteWeight::One)
    }

    /// The interpolated Gaussian action on the good region of `class`:
    /// edges of ℰ(B) are fixed to `eta`, every other edge is integrated.
    pub fn new(
        dom: &LatticeDomain,
        blocking: &CoarseBlocking,
        class: &BlockClassification,
        params: &ModelParams,
        eta: Option<&OneForm>,
        mode: InterpolationMode,
    ) -> Result<Self> {
        let fixed: BTreeSet<usize> = blocking.edges_of_set(&class.bad).into_iter().collect();
        match mode {
            InterpolationMode::Standard => {
                let faces = blocking.faces_of_set(&class.g1);
                Self::interpolated(dom, blocking, &fixed, eta, faces, params.beta, params.m)
            }
            InterpolationMode::ZeroPlus => {
                let off: BTreeSet<usize> = blocking.faces_of_set(&class.good).into_iter().collect();
                Self::build(dom, &fixed, eta, Vec::new(), params.beta, params.m, |p| {
                    let hits = p.edges.iter().any(|&e| blocking.edge_face(e).is_some_and(|f| off.contains(&f)));
                    if hits {
                        PlaquetteWeight::Zero
                    } else {
                        PlaquetteWeight::One
                    }
                })
            }
        }
    }

    /// σ_p = s_F for the lexicographically least parameter face F holding an
    /// edge of p, and 1 when p meets none of them.
    pub fn interpolated(
        dom: &LatticeDomain,
        blocking: &CoarseBlocking,
        fixed: &BTreeSet<usize>,
        eta: Option<&OneForm>,
        mut faces: Vec<usize>,
        beta: f64,
        m: f64,
    ) -> Result<Self> {
        faces.sort_unstable();
        faces.dedup();
        if let Some(&f) = faces.iter().find(|&&f| f >= blocking.faces().len()) {
            return Err(invalid(format!("face {f} out of range")));
        }
        let slot: BTreeMap<usize, usize> = faces.iter().enumerate().map(|(k, &f)| (f, k)).collect();
        Self::build(dom, fixed, eta, faces, beta, m, |p| {
            p.edges
                .iter()
                .filter_map(|&e| blocking.edge_face(e))
                .filter_map(|f| slot.get(&f).copied())
                .min()
                .map_or(PlaquetteWeight::One, PlaquetteWeight::Face)
        })
    }

    /// General assembly from a per-plaquette weight rule.
    pub fn build<W: Fn(&Plaquette) -> PlaquetteWeight>(
        dom: &LatticeDomain,
        fixed: &BTreeSet<usize>,
        eta: Option<&OneForm>,
        faces: Vec<usize>,
        beta: f64,
        m: f64,
        weight: W,
    ) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0 && m.is_finite() && m > 0.0) {
            return Err(invalid(format!("need β > 0 and m > 0, got β = {beta}, m = {m}")));
        }
        let ne = dom.edge_count();
        let eta_vals = match eta {
            Some(t) => {
                dom.check_form(t)?;
                t.values.clone()
            }
            None => vec![0.0; ne],
        };
        let mut pos = vec![None; ne];
        let mut free = Vec::with_capacity(ne);
        for e in 0..ne {
            if !fixed.contains(&e) {
                pos[e] = Some(free.len());
                free.push(e);
            }
        }
        let mut eta_full = vec![0.0; ne];
        for &e in fixed {
            if e >= ne {
                return Err(invalid(format!("fixed edge {e} out of range")));
            }
            eta_full[e] = eta_vals[e];
        }
        let k = free.len();
        let mut terms = Vec::new();
        for (pi, p) in dom.plaquettes().iter().enumerate() {
            let mut fr = Vec::new();
            let mut offset = 0.0;
            for (&e, &sg) in p.edges.iter().zip(Plaquette::SIGNS.iter()) {
                match pos[e] {
                    Some(i) => fr.push((i, sg)),
                    None => offset += sg * eta_full[e],
                }
            }
            if fr.is_empty() {
                continue;
            }
            let w = weight(p);
            if let PlaquetteWeight::Face(f) = w {
                if f >= faces.len() {
                    return Err(invalid(format!("plaquette weight refers to parameter {f}")));
                }
            }
            terms.push(Term { plaquette: pi, free: fr, offset, weight: w });
        }

        let mut m0 = DMatrix::zeros(k, k);
        let mut b0 = DVector::zeros(k);
        let mut c0 = 0.0;
        for i in 0..k {
            m0[(i, i)] = beta * m;
        }
        let mut supports: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); faces.len()];
        for t in &terms {
            if let PlaquetteWeight::Face(f) = t.weight {
                supports[f].extend(t.free.iter().map(|&(i, _)| i));
            }
        }
        let mut dirs: Vec<Direction> = supports
            .into_iter()
            .map(|s| {
                let n = s.len();
                Direction { support: s.into_iter().collect(), a: DMatrix::zeros(n, n), b: DVector::zeros(n), c: 0.0 }
            })
            .collect();
        for t in &terms {
            match t.weight {
                PlaquetteWeight::Zero => {}
                PlaquetteWeight::One => {
                    for &(i, si) in &t.free {
                        b0[i] += beta * t.offset * si;
                        for &(j, sj) in &t.free {
                            m0[(i, j)] += beta * si * sj;
                        }
                    }
                    c0 += 0.5 * beta * t.offset * t.offset;
                }
                PlaquetteWeight::Face(f) => {
                    let dir = &mut dirs[f];
                    let local: Vec<(usize, f64)> = t
                        .free
                        .iter()
                        .map(|&(i, s)| (dir.support.binary_search(&i).expect("support covers term"), s))
                        .collect();
                    for &(i, si) in &local {
                        dir.b[i] += beta * t.offset * si;
                        for &(j, sj) in &local {
                            dir.a[(i, j)] += beta * si * sj;
                        }
                    }
                    dir.c += 0.5 * beta * t.offset * t.offset;
                }
            }
        }
        Ok(Self { beta, m, d: dom.dim(), free, pos, eta: eta_full, terms, faces, m0, b0, c0, dirs })
    }

    pub fn free_edges(&self) -> &[usize] {
        &self.free
    }

    /// Parameter faces in lexicographic order; `s[k]` belongs to `faces()[k]`.
    pub fn faces(&self) -> &[usize] {
        &self.faces
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mass(&self) -> f64 {
        self.m
    }

    /// `(plaquette, σ_p)` for every plaquette of the action at parameters `s`.
    pub fn plaquette_weights(&self, s: &[f64]) -> Vec<(usize, f64)> {
        self.terms
            .iter()
            .map(|t| {
                let w = match t.weight {
                    PlaquetteWeight::One => 1.0,
                    PlaquetteWeight::Zero => 0.0,
                    PlaquetteWeight::Face(f) => s[f],
                };
                (t.plaquette, w)
            })
            .collect()
    }

    /// Parameter vector from face-keyed values.
    pub fn parameters(&self, s: &InterpolationParams) -> Vec<f64> {
        self.faces.iter().map(|&f| s.value(f)).collect()
    }

    fn slot(&self, face: usize) -> Result<usize> {
        self.faces
            .binary_search(&face)
            .map_err(|_| invalid(format!("face {face} is not an interpolation face")))
    }

    pub fn operator(&self, s: &[f64]) -> Result<ProcaOperator> {
        if s.len() != self.faces.len() {
            return Err(invalid(format!("expected {} face parameters, got {}", self.faces.len(), s.len())));
        }
        for &v in s {
            check_unit(v)?;
        }
        let mut m = self.m0.clone();
        let mut b = self.b0.clone();
        let mut c = self.c0;
        for (dir, &sk) in self.dirs.iter().zip(s) {
            if sk == 0.0 {
                continue;
            }
            for (li, &i) in dir.support.iter().enumerate() {
                b[i] += sk * dir.b[li];
                for (lj, &j) in dir.support.iter().enumerate() {
                    m[(i, j)] += sk * dir.a[(li, lj)];
                }
            }
            c += sk * dir.c;
        }
        ProcaOperator::from_parts(self.beta, self.m, self.d, self.free.clone(), self.pos.clone(), self.eta.clone(), m, b, c)
    }

    /// log Z(s).
    pub fn log_z(&self, s: &[f64]) -> Result<f64> {
        Ok(self.operator(s)?.log_partition())
    }

    fn calculus(&self, s: &[f64]) -> Result<Calculus<'_>> {
        let op = self.operator(s)?;
        let n = op.chol.inverse();
        let nb = &n * &op.linear;
        Ok(Calculus { fam: self, n, b: op.linear, nb })
    }

    fn slots(&self, gamma: &[usize]) -> Result<Vec<usize>> {
        if gamma.len() > MAX_GAMMA {
            return Err(guard(format!("|Γ| = {} exceeds {MAX_GAMMA}", gamma.len())));
        }
        let slots: Vec<usize> = gamma.iter().map(|&f| self.slot(f)).collect::<Result<_>>()?;
        let uniq: BTreeSet<usize> = slots.iter().copied().collect();
        if uniq.len() != slots.len() {
            return Err(invalid("face set has repeated faces"));
        }
        Ok(slots)
    }

    /// ∂^Γ Cov_s(θ_x, θ_y), Γ given as face ids.
    pub fn covariance_derivative(&self, s: &[f64], gamma: &[usize], x: usize, y: usize) -> Result<f64> {
        let slots = self.slots(gamma)?;
        let (px, py) = (self.position(x)?, self.position(y)?);
        let calc = self.calculus(s)?;
        Ok(calc.inverse_derivative_entry(&slots, px, py))
    }

    /// ∂^Γ log Z at s.
    pub fn log_z_derivative(&self, s: &[f64], gamma: &[usize]) -> Result<f64> {
        let slots = self.slots(gamma)?;
        if slots.is_empty() {
            return self.log_z(s);
        }
        let calc = self.calculus(s)?;
        Ok(calc.log_z_derivative(&slots))
    }

    /// W₁(Γ) = ∫_{[0,1]^Γ} ∂^Γ log Z(s_Γ) ds_Γ by tensor Gauss–Legendre,
    /// doubling the node count until two grids agree to `tol`.
    pub fn w1(&self, gamma: &[usize], tol: f64) -> Result<QuadratureValue> {
        let slots = self.slots(gamma)?;
        let dim = slots.len();
        let eval = |nodes: usize| -> Result<f64> {
            let (x, w) = gauss_legendre_on(nodes, 0.0, 1.0);
            let mut err = None;
            let v = tensor_integrate(&x, &w, dim, |pt| {
                let mut s = vec![0.0; self.faces.len()];
                for (&k, &v) in slots.iter().zip(pt) {
                    s[k] = v;
                }
                match self.calculus(&s) {
                    Ok(c) if dim > 0 => c.log_z_derivative(&slots),
                    Ok(_) => self.log_z(&s).unwrap_or(f64::NAN),
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(v),
            }
        };
        if dim == 0 {
            return Ok(QuadratureValue { value: eval(1)?, nodes: 1, refinement_delta: 0.0 });
        }
        let mut nodes = 8;
        let mut prev = eval(nodes)?;
        while nodes < 64 {
            let next = eval(2 * nodes)?;
            let delta = (next - prev).abs();
            nodes *= 2;
            if delta <= tol * next.abs().max(1.0) {
                return Ok(QuadratureValue { value: next, nodes, refinement_delta: delta });
            }
            prev = next;
        }
        Err(numerical(format!("W1 quadrature did not settle to {tol} by {nodes} nodes")))
    }

    fn position(&self, e: usize) -> Result<usize> {
        self.pos
            .get(e)
            .copied()
            .flatten()
            .ok_or_else(|| invalid(format!("edge {e} is not a free edge")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureValue {
    pub value: f64,
    /// Nodes per dimension of the accepted grid.
    pub nodes: usize,
    pub refinement_delta: f64,
}

/// Derivative calculus at a fixed s, with N = M⁻¹ precomputed.
struct Calculus<'a> {
    fam: &'a ProcaFamily,
    n: DMatrix<f64>,
    b: DVector<f64>,
    nb: DVector<f64>,
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn sign(n: usize) -> f64 {
    if n % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl Calculus<'_> {
    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.n[(rows[i], cols[j])])
    }

    /// r · a_{k1} N a_{k2} N ⋯ a_{kn}, where r is a row over the support of k1.
    /// Returns a row over the support of kn.
    fn walk(&self, mut r: DMatrix<f64>, seq: &[usize]) -> DMatrix<f64> {
        let dirs = &self.fam.dirs;
        for (i, &k) in seq.iter().enumerate() {
            r = &r * &dirs[k].a;
            if let Some(&next) = seq.get(i + 1) {
                r = &r * self.block(&dirs[k].support, &dirs[next].support);
            }
        }
        r
    }

    /// (N A_{k1} N ⋯ A_{kn} N)[x, y].
    fn chain_entry(&self, seq: &[usize], x: usize, y: usize) -> f64 {
        let Some(&first) = seq.first() else {
            return self.n[(x, y)];
        };
        let last = *seq.last().unwrap();
        let dirs = &self.fam.dirs;
        let r = self.walk(self.block(&[x], &dirs[first].support), seq);
        (r * self.block(&dirs[last].support, &[y]))[(0, 0)]
    }

    /// ∂^Γ N = (−1)^n Σ_σ N A_σ1 N ⋯ A_σn N, entry (x, y).
    fn inverse_derivative_entry(&self, slots: &[usize], x: usize, y: usize) -> f64 {
        let total: f64 = permutations(slots).iter().map(|p| self.chain_entry(p, x, y)).sum();
        sign(slots.len()) * total
    }

    /// tr(A_{k1} N A_{k2} N ⋯ A_{kn} N).
    fn chain_trace(&self, seq: &[usize]) -> f64 {
        let dirs = &self.fam.dirs;
        let first = &dirs[seq[0]].support;
        let last = &dirs[*seq.last().unwrap()].support;
        let mut r = DMatrix::identity(first.len(), first.len());
        r = self.walk(r, seq);
        (r * self.block(last, first)).trace()
    }

    /// uᵀ N A_{k1} N ⋯ A_{kn} N v, with Nu and Nv given.
    fn chain_quadratic(&self, nu: &DVector<f64>, seq: &[usize], nv: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let Some(&first) = seq.first() else {
            return u.dot(nv);
        };
        let dirs = &self.fam.dirs;
        let last = *seq.last().unwrap();
        let row = DMatrix::from_fn(1, dirs[first].support.len(), |_, j| nu[dirs[first].support[j]]);
        let r = self.walk(row, seq);
        (0..dirs[last].support.len()).map(|j| r[(0, j)] * nv[dirs[last].support[j]]).sum()
    }

    fn scattered_b(&self, k: usize) -> DVector<f64> {
        let dir = &self.fam.dirs[k];
        let mut v = DVector::zeros(self.n.nrows());
        for (li, &i) in dir.support.iter().enumerate() {
            v[i] = dir.b[li];
        }
        v
    }

    /// ∂^Γ log Z for nonempty Γ:
    /// −½ ∂^Γ log det M − ∂^Γ c + ½ ∂^Γ (bᵀ M⁻¹ b).
    fn log_z_derivative(&self, slots: &[usize]) -> f64 {
        let n = slots.len();
        let (head, rest) = (slots[0], &slots[1..]);
        // ∂^Γ log det M = tr(A_head ∂^{rest} N).
        let logdet: f64 = sign(rest.len())
            * permutations(rest)
                .iter()
                .map(|p| {
                    let mut seq = vec![head];
                    seq.extend(p);
                    self.chain_trace(&seq)
                })
                .sum::<f64>();
        let dc = if n == 1 { self.fam.dirs[head].c } else { 0.0 };

        let bk: BTreeMap<usize, (DVector<f64>, DVector<f64>)> = slots
            .iter()
            .map(|&k| {
                let v = self.scattered_b(k);
                let nv = &self.n * &v;
                (k, (v, nv))
            })
            .collect();
        let mut quad = 0.0;
        // Split Γ into (A, B, C) with |A|, |C| ≤ 1: u_A, ∂^B N, u_C.
        let pick = |a: Option<usize>| -> (&DVector<f64>, &DVector<f64>) {
            match a {
                None => (&self.b, &self.nb),
                Some(k) => (&bk[&k].0, &bk[&k].1),
            }
        };
        let choices: Vec<Option<usize>> = std::iter::once(None).chain(slots.iter().map(|&k| Some(k))).collect();
        for &a in &choices {
            for &c in &choices {
                if a.is_some() && a == c {
                    continue;
                }
                let middle: Vec<usize> = slots.iter().copied().filter(|&k| Some(k) != a && Some(k) != c).collect();
                let (u, nu) = pick(a);
                let (_, nv) = pick(c);
                let sum: f64 = permutations(&middle).iter().map(|p| self.chain_quadratic(nu, p, nv, u)).sum();
                quad += sign(middle.len()) * sum;
            }
        }
        -0.5 * logdet - dc + 0.5 * quad
    }
}

/// One factorized member of the family.
#[derive(Debug, Clone)]
pub struct ProcaOperator {
    beta: f64,
    m: f64,
    d: usize,
    free: Vec<usize>,
    pos: Vec<Option<usize>>,
    eta: Vec<f64>,
    precision: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
    chol: Cholesky<f64, Dyn>,
}

impl ProcaOperator {
    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        beta: f64,
        m: f64,
        d: usize,
        free: Vec<usize>,
        pos: Vec<Option<usize>>,
        eta: Vec<f64>,
        precision: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
    ) -> Result<Self> {
        let chol = Cholesky::new(precision.clone())
            .ok_or_else(|| numerical("precision form is not positive definite"))?;
        Ok(Self { beta, m, d, free, pos, eta, precision, linear, constant, chol })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mass(&self) -> f64 {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of integrated edges.
    pub fn size(&self) -> usize {
        self.free.len()
    }

    pub fn free_edges(&self) -> &[usize] {
        &self.free
    }

    pub fn position(&self, e: usize) -> Option<usize> {
        self.pos.get(e).copied().flatten()
    }

    /// M, including the factor β.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn covariance(&self, x: usize, y: usize) -> Result<f64> {
        let px = self.position(x).ok_or_else(|| invalid(format!("edge {x} is not free")))?;
        let py = self.position(y).ok_or_else(|| invalid(format!("edge {y} is not free")))?;
        let mut e = DVector::zeros(self.size());
        e[py] = 1.0;
        Ok(self.chol.solve(&e)[px])
    }

    /// E[θ] on the free edges: −M⁻¹ b.
    pub fn mean(&self) -> DVector<f64> {
        -self.chol.solve(&self.linear)
    }

    /// The conditional mean as a full one-form, fixed edges at their values.
    pub fn conditional_mean(&self) -> OneForm {
        let mu = self.mean();
        let mut values = self.eta.clone();
        for (i, &e) in self.free.iter().enumerate() {
            values[e] = mu[i];
        }
        OneForm { values }
    }

    /// Exact draw θ = μ + L⁻ᵀ z with M = L Lᵀ.
    pub fn sample_with<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> OneForm {
        let k = self.size();
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let l = self.chol.l();
        let x = l.transpose().solve_upper_triangular(&z).expect("Cholesky factor has a positive diagonal");
        let mu = self.mean();
        let mut values = self.eta.clone();
        for (i, &e) in self.free.iter().enumerate() {
            values[e] = mu[i] + x[i];
        }
        OneForm { values }
    }

    pub fn sample(&self, seed: u64) -> OneForm {
        self.sample_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// log ∫ exp(−½θᵀMθ − bᵀθ − c) dθ.
    pub fn log_partition(&self) -> f64 {
        let k = self.size() as f64;
        let quad = self.linear.dot(&self.chol.solve(&self.linear));
        0.5 * k * (2.0 * PI).ln() - 0.5 * self.log_det() - self.constant + 0.5 * quad
    }

    /// Eigenvalues of M/β, ascending.
    pub fn scaled_spectrum(&self) -> Vec<f64> {
        let mut ev: Vec<f64> =
            SymmetricEigen::new(self.precision.clone() / self.beta).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// The Gaussian action for `class` at parameters `s`, with ℰ(B) fixed to `eta`.
pub fn assemble_precision(
    dom: &LatticeDomain,
    blocking: &CoarseBlocking,
    class: &BlockClassification,
    params: &ModelParams,
    s: &InterpolationParams,
    eta: Option<&OneForm>,
) -> Result<ProcaOperator> {
    let fam = ProcaFamily::new(dom, blocking, class, params, eta, s.mode())?;
    fam.operator(&fam.parameters(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W1W2 {
    pub w1_g: QuadratureValue,
    pub w1_full: QuadratureValue,
    pub w2: f64,
}

/// W₁(Γ; G), W₁(Γ; Λ′) and W₂ = W₁(Γ; G) − W₁(Γ; Λ′).
///
/// Both share the interpolation faces P′(G₁); faces outside it stay at 1 in
/// the free-boundary system too, so the two expansions run over one index set.
pub fn w1_w2_weights(
    dom: &LatticeDomain,
    blocking: &CoarseBlocking,
    class: &BlockClassification,
    params: &ModelParams,
    eta: Option<&OneForm>,
    gamma: &[usize],
    tol: f64,
) -> Result<W1W2> {
    let g = ProcaFamily::new(dom, blocking, class, params, eta, InterpolationMode::Standard)?;
    let full = ProcaFamily::interpolated(
        dom,
        blocking,
        &BTreeSet::new(),
        None,
        g.faces().to_vec(),
        params.beta,
        params.m,
    )?;
    let w1_g = g.w1(gamma, tol)?;
    let w1_full = full.w1(gamma, tol)?;
    Ok(W1W2 { w1_g, w1_full, w2: w1_g.value - w1_full.value })
}

/// One row of a covariance scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub dist: i64,
    pub cov: f64,
    pub abs_cov: f64,
    pub fit_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceScan {
    pub rows: Vec<ScanRow>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of log|Cov| against distance.
pub fn covariance_scan(op: &ProcaOperator, dom: &LatticeDomain, pairs: &[(usize, usize)]) -> Result<CovarianceScan> {
    if pairs.len() < 2 {
        return Err(invalid("a decay fit needs at least two pairs"));
    }
    let mut pts = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        let c = op.covariance(x, y)?;
        if c == 0.0 {
            return Err(numerical(format!("covariance of edges {x}, {y} is exactly zero")));
        }
        pts.push((dom.graph_distance(x, y), c));
    }
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.abs().ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ym).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("all pairs are at the same distance"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rows: Vec<ScanRow> = pts
        .iter()
        .zip(&ys)
        .map(|(&(d, c), &y)| ScanRow { dist: d, cov: c, abs_cov: c.abs(), fit_residual: y - (intercept + slope * d as f64) })
        .collect();
    let ss_res: f64 = rows.iter().map(|r| r.fit_residual.powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(CovarianceScan { rows, slope, intercept, r_squared })
}

/// Edge pairs (x, y_k), k = 1..=kmax: x = (0, −5) → (1, −5) and y_k the
/// parallel edge k rows up. Needs n ≥ 5 and kmax ≤ n + 5 in d = 2.
pub fn standard_decay_pairs(dom: &LatticeDomain, kmax: i64) -> Result<Vec<(usize, usize)>> {
    if dom.dim() != 2 {
        return Err(invalid("the standard scan is two-dimensional"));
    }
    let x = dom.edge_index(&[0, -5], 0).ok_or_else(|| invalid("domain too small for the standard scan"))?;
    (1..=kmax)
        .map(|k| {
            dom.edge_index(&[0, -5 + k], 0)
                .map(|y| (x, y))
                .ok_or_else(|| invalid(format!("no edge {k} rows above the reference edge")))
        })
        .collect()
}

/// Decay-rate floor from the Neumann series of M/β = (m + C)(I − R), where
/// ‖R‖ ≤ 1 − m/(m + C) and R has hopping range `bandwidth`.
pub fn neumann_rate_floor(d: usize, m: f64, bandwidth: f64) -> f64 {
    -(1.0 - m / spectral_ceiling(d, m)).ln() / bandwidth
}
