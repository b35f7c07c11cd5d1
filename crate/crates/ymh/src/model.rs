//! Actions of the model and the small/large field split.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{plaquette_value, CoarseBlocking, LatticeDomain, OneForm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub n: i64,
    /// Block side L (even).
    pub l: i64,
    pub beta: f64,
    pub m: f64,
}

impl ModelParams {
    pub fn new(d: usize, n: i64, l: i64, beta: f64, m: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(invalid(format!("beta must be finite and non-negative, got {beta}")));
        }
        if !(m.is_finite() && m > 0.0) {
            return Err(invalid(format!("mass must be positive, got {m}")));
        }
        Ok(Self { d, n, l, beta, m })
    }

    /// α = mβ.
    pub fn alpha(&self) -> f64 {
        self.m * self.beta
    }

    /// T_β = log^{d+2}(β) / √β.
    pub fn t_beta(&self) -> f64 {
        self.beta.ln().powi(self.d as i32 + 2) / self.beta.sqrt()
    }

    /// The cutoff actually used for "large" fields: T_β capped at π/2 so that
    /// the support of χ(|θ|/T) stays inside [−π, π].
    pub fn threshold(&self) -> f64 {
        self.t_beta().min(PI / 2.0)
    }

    /// r_β = log²β.
    pub fn r_beta(&self) -> f64 {
        self.beta.ln().powi(2)
    }
}

/// Linear tilt t_x θ_x + t_y θ_y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTerm {
    pub x: usize,
    pub y: usize,
    pub t_x: f64,
    pub t_y: f64,
}

impl SourceTerm {
    pub fn new(x: usize, y: usize, t_x: f64, t_y: f64) -> Result<Self> {
        if x == y {
            return Err(invalid("source edges must be distinct"));
        }
        if !(t_x.is_finite() && t_y.is_finite()) {
            return Err(invalid("source weights must be finite"));
        }
        Ok(Self { x, y, t_x, t_y })
    }

    /// Whether both weights lie in the polydisk |t| ≤ β^{−10}.
    pub fn within_polydisk(&self, beta: f64) -> bool {
        let r = beta.powi(-10);
        self.t_x.abs() <= r && self.t_y.abs() <= r
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.t_x * theta[self.x] + self.t_y * theta[self.y]
    }
}

fn source_value(sources: Option<&SourceTerm>, theta: &[f64]) -> f64 {
    sources.map_or(0.0, |s| s.value(theta))
}

/// H = Σ_p (1 − cos dθ_p) + m Σ_e (1 − cos θ_e), plus the source tilt.
pub fn hamiltonian(dom: &LatticeDomain, theta: &OneForm, m: f64, sources: Option<&SourceTerm>) -> f64 {
    let t = &theta.values;
    let plaq: f64 = dom.plaquettes().iter().map(|p| 1.0 - plaquette_value(&p.edges, t).cos()).sum();
    let mass: f64 = t.iter().map(|x| 1.0 - x.cos()).sum();
    plaq + m * mass + source_value(sources, t)
}

/// S = ½ Σ_p (dθ_p)² + (m/2) Σ_e θ_e².
pub fn proca_action(dom: &LatticeDomain, theta: &OneForm, m: f64) -> f64 {
    let t = &theta.values;
    let plaq: f64 = dom.plaquettes().iter().map(|p| plaquette_value(&p.edges, t).powi(2)).sum();
    let mass: f64 = t.iter().map(|x| x * x).sum();
    0.5 * plaq + 0.5 * m * mass
}

/// g(t) = 1 − cos t − t²/2.
///
/// For |t| < 1 the alternating series is summed directly: the closed form
/// loses about −log₁₀(t⁴/24) digits to cancellation.
pub fn g(t: f64) -> f64 {
    if t.abs() < 1.0 {
        let t2 = t * t;
        let mut term = -t2 * t2 / 24.0;
        let mut sum = term;
        let mut k = 3.0;
        while term.abs() > 1e-18 * sum.abs() {
            term *= -t2 / ((2.0 * k - 1.0) * (2.0 * k));
            sum += term;
            k += 1.0;
        }
        sum
    } else {
        1.0 - t.cos() - 0.5 * t * t
    }
}

/// V = Σ_p g(dθ_p) + m Σ_e g(θ_e) + V_s.
pub fn remainder_potential(dom: &LatticeDomain, theta: &OneForm, m: f64, sources: Option<&SourceTerm>) -> f64 {
    let t = &theta.values;
    let plaq: f64 = dom.plaquettes().iter().map(|p| g(plaquette_value(&p.edges, t))).sum();
    let mass: f64 = t.iter().map(|&x| g(x)).sum();
    plaq + m * mass + source_value(sources, t)
}

/// f(x) = e^{−1/x} for x > 0, else 0.
fn flat(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Even smooth cutoff: 1 on [−1, 1], 0 outside (−2, 2), Gevrey class 2.
pub fn bump_chi(t: f64) -> f64 {
    let a = t.abs();
    if a <= 1.0 {
        return 1.0;
    }
    if a >= 2.0 {
        return 0.0;
    }
    let up = flat(2.0 - a);
    up / (up + flat(a - 1.0))
}

/// χ(|θ|/T), treating T = 0 as "every nonzero field is large".
pub fn chi_scaled(theta: f64, threshold: f64) -> f64 {
    if threshold > 0.0 {
        bump_chi(theta.abs() / threshold)
    } else if theta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Finite-difference estimate of sup |χ^{(k)}| over [1, 2].
pub fn chi_derivative_sup(k: u32, h: f64) -> f64 {
    let binom = |n: u32, r: u32| -> f64 { (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64) };
    let grid = 2000;
    (0..=grid)
        .map(|i| {
            let t = 1.0 + i as f64 / grid as f64;
            // Central k-th difference.
            let s: f64 = (0..=k)
                .map(|j| {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    sign * binom(k, j) * bump_chi(t + (k as f64 / 2.0 - j as f64) * h)
                })
                .sum();
            (s / h.powi(k as i32)).abs()
        })
        .fold(0.0, f64::max)
}

/// Bad blocks B and their r_β-neighbourhood B₁.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockClassification {
    pub bad: BTreeSet<usize>,
    pub good: BTreeSet<usize>,
    pub b1: BTreeSet<usize>,
    pub g1: BTreeSet<usize>,
}

impl BlockClassification {
    /// Classification with a prescribed bad set.
    pub fn from_bad(blocking: &CoarseBlocking, bad: BTreeSet<usize>, r_beta: f64) -> Self {
        let all: BTreeSet<usize> = (0..blocking.block_count()).collect();
        let good = all.difference(&bad).copied().collect();
        let b1: BTreeSet<usize> = all
            .iter()
            .copied()
            .filter(|&v| bad.iter().any(|&b| (blocking.coarse_distance(v, b) as f64) <= r_beta))
            .collect();
        let g1 = all.difference(&b1).copied().collect();
        Self { bad, good, b1, g1 }
    }

    /// Every block good.
    pub fn all_good(blocking: &CoarseBlocking) -> Self {
        Self::from_bad(blocking, BTreeSet::new(), 0.0)
    }
}

/// A block is bad when an edge inside it, or on one of its faces, has |θ| ≥ T.
/// A large face edge marks both adjacent blocks.
pub fn classify_blocks(theta: &OneForm, blocking: &CoarseBlocking, params: &ModelParams) -> BlockClassification {
    let t = params.threshold();
    let mut bad = BTreeSet::new();
    for (e, &x) in theta.values.iter().enumerate() {
        if x.abs() >= t {
            let (a, b) = blocking.blocks_of_edge(e);
            bad.insert(a);
            if let Some(b) = b {
                bad.insert(b);
            }
        }
    }
    BlockClassification::from_bad(blocking, bad, params.r_beta())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionWeights {
    pub chi_g: f64,
    pub zeta_b: f64,
}

/// χ_G over the edges not contained in ℰ(B).
fn chi_outside(theta: &OneForm, blocking: &CoarseBlocking, bad: &BTreeSet<usize>, t: f64) -> f64 {
    (0..theta.len())
        .filter(|&e| !edge_inside(blocking, bad, e))
        .map(|e| chi_scaled(theta.values[e], t))
        .product()
}

fn edge_inside(blocking: &CoarseBlocking, set: &BTreeSet<usize>, e: usize) -> bool {
    let (a, b) = blocking.blocks_of_edge(e);
    set.contains(&a) && b.is_none_or(|b| set.contains(&b))
}

/// χ_G and ζ_B with ζ_B the indicator that B is exactly the bad set.
///
/// The inner sum over L ⊆ ℰ(B) multiplies to Π(χ + ζ) = 1, leaving only the
/// indicator.
pub fn partition_weights(
    theta: &OneForm,
    bad: &BTreeSet<usize>,
    blocking: &CoarseBlocking,
    params: &ModelParams,
) -> PartitionWeights {
    let t = params.threshold();
    let actual = classify_blocks(theta, blocking, params).bad;
    PartitionWeights {
        chi_g: chi_outside(theta, blocking, bad, t),
        zeta_b: if &actual == bad { 1.0 } else { 0.0 },
    }
}

/// χ_G and ζ_B from grouping 1 = Π_e(χ_e + ζ_e) by the set of blocks the
/// ζ-edges mark. Here ζ_B depends only on the edges of ℰ(B), which is what
/// lets the G-integral factor off for fixed values on ℰ(B).
///
/// ζ_B = Σ_{L ⊆ ℰ(B), blocks(L) = B} Π_L ζ Π_{ℰ(B)∖L} χ, evaluated by
/// inclusion–exclusion over A ⊆ B.
pub fn grouped_partition_weights(
    theta: &OneForm,
    bad: &BTreeSet<usize>,
    blocking: &CoarseBlocking,
    params: &ModelParams,
) -> PartitionWeights {
    let t = params.threshold();
    PartitionWeights {
        chi_g: chi_outside(theta, blocking, bad, t),
        zeta_b: grouped_zeta(theta, bad, blocking, t),
    }
}

pub(crate) fn grouped_zeta(theta: &OneForm, bad: &BTreeSet<usize>, blocking: &CoarseBlocking, t: f64) -> f64 {
    let members: Vec<usize> = bad.iter().copied().collect();
    let inside = blocking.edges_of_set(bad);
    let k = members.len();
    let mut total = 0.0;
    for mask in 0..(1u32 << k) {
        let subset: BTreeSet<usize> = (0..k).filter(|i| mask >> i & 1 == 1).map(|i| members[i]).collect();
        let sign = if (k - subset.len()) % 2 == 0 { 1.0 } else { -1.0 };
        let prod: f64 = inside
            .iter()
            .filter(|&&e| !edge_inside(blocking, &subset, e))
            .map(|&e| chi_scaled(theta.values[e], t))
            .product();
        total += sign * prod;
    }
    total
}

/// Uniform random configuration in [−π, π]^E.
pub fn uniform_config<R: rand::Rng + ?Sized>(dom: &LatticeDomain, rng: &mut R) -> OneForm {
    OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(-PI..=PI)).collect() }
}
