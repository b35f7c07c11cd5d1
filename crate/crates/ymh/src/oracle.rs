//! Brute-force integration on systems small enough to integrate directly.
//!
//! Everything here is evaluated from its definition: the partition function
//! by quadrature or sampling over [−π, π]^E, Gaussian normalizers by
//! Cholesky log-determinants, and Ξ-type expectations by integrating against
//! the exact Gaussian measure of each decoupled unit. The decomposition
//! check then assembles log Z from these pieces and compares.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{guard, invalid, numerical, Result};
use crate::geometry::{CoarseBlocking, Coord, LatticeDomain, OneForm, Plaquette};
use crate::mcmc::chain_seed;
use crate::model::{chi_scaled, g, grouped_zeta, BlockClassification, ModelParams, SourceTerm};
use crate::polymer::{polymer_partition_function, Polymer, PolymerWeightTable, Provenance};
use crate::proca::{InterpolationMode, PlaquetteWeight, ProcaFamily, ProcaOperator};
use crate::quadrature::{composite_gauss_legendre, gauss_hermite, gauss_legendre_on, tensor_integrate};

pub const MAX_QUADRATURE_EDGES: usize = 8;
pub const MAX_MC_EDGES: usize = 14;
pub const MIN_MC_SAMPLES: usize = 100_000;
const UNIFORM_SHARE: f64 = 0.1;
/// Grid points allowed for a Gauss–Legendre rule over [−π, π]^E.
pub const MAX_GRID_POINTS: usize = 50_000_000;
/// Grid points allowed per Gauss–Hermite unit; the node count shrinks to fit.
pub const UNIT_GRID_POINTS: usize = 2_000_000;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
const CHUNKS: u64 = 16;
const BATCHES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TensorQuadrature,
    MonteCarlo,
}

/// How to integrate. Quadrature falls back to sampling above
/// [`MAX_QUADRATURE_EDGES`] edges where a caller allows it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationPlan {
    pub method: Method,
    pub nodes: usize,
    pub samples: usize,
    pub seed: u64,
}

impl IntegrationPlan {
    pub fn quadrature(nodes: usize) -> Self {
        Self { method: Method::TensorQuadrature, nodes, samples: MIN_MC_SAMPLES, seed: 0 }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self { method: Method::MonteCarlo, nodes: 8, samples, seed }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn resolve(&self, edges: usize) -> Method {
        if self.method == Method::TensorQuadrature && edges <= MAX_QUADRATURE_EDGES {
            Method::TensorQuadrature
        } else {
            Method::MonteCarlo
        }
    }

    /// Checks the plan for a system of `edges` integrated edges.
    pub fn validate(&self, edges: usize) -> Result<()> {
        match self.method {
            Method::TensorQuadrature => {
                if edges > MAX_QUADRATURE_EDGES {
                    return Err(guard(format!("tensor quadrature on {edges} edges (limit {MAX_QUADRATURE_EDGES})")));
                }
                if self.nodes < 4 {
                    return Err(invalid(format!("need at least 4 nodes per edge, got {}", self.nodes)));
                }
                if grid_points(self.nodes, edges) > MAX_GRID_POINTS as f64 {
                    return Err(guard(format!("{}^{edges} grid points exceed {MAX_GRID_POINTS}", self.nodes)));
                }
            }
            Method::MonteCarlo => {
                if edges > MAX_MC_EDGES {
                    return Err(guard(format!("Monte Carlo on {edges} edges (limit {MAX_MC_EDGES})")));
                }
                self.check_samples()?;
            }
        }
        Ok(())
    }

    fn check_samples(&self) -> Result<()> {
        if self.samples < MIN_MC_SAMPLES {
            return Err(invalid(format!("Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {}", self.samples)));
        }
        Ok(())
    }
}

fn grid_points(nodes: usize, edges: usize) -> f64 {
    (nodes as f64).powi(edges as i32)
}

/// A value with its numerical error: `delta` is the change under halving the
/// quadrature rule, `stderr` the Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub delta: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, delta: 0.0, stderr: 0.0 }
    }

    /// √(δ² + (3σ)²).
    pub fn budget(&self) -> f64 {
        self.delta.hypot(3.0 * self.stderr)
    }

    pub fn error(&self) -> f64 {
        self.delta + self.stderr
    }

    /// The same estimate for log(value), to first order.
    fn ln(self) -> Self {
        let v = self.value.abs();
        Self { value: self.value.ln(), delta: self.delta / v, stderr: self.stderr / v }
    }
}

// ---------------------------------------------------------------------------
// Edge systems

/// A set of integrated edges together with the plaquettes all of whose edges
/// belong to it. Every other edge of the domain is absent.
#[derive(Debug, Clone)]
pub struct EdgeSystem<'a> {
    dom: &'a LatticeDomain,
    edges: Vec<usize>,
    local: Vec<Option<usize>>,
    plaquettes: Vec<(usize, [usize; 4])>,
}

impl<'a> EdgeSystem<'a> {
    pub fn full(dom: &'a LatticeDomain) -> Self {
        let all: Vec<usize> = (0..dom.edge_count()).collect();
        Self::induced(dom, &all).expect("every edge is in range")
    }

    pub fn induced(dom: &'a LatticeDomain, edges: &[usize]) -> Result<Self> {
        let set: BTreeSet<usize> = edges.iter().copied().collect();
        if set.is_empty() {
            return Err(invalid("an edge system needs at least one edge"));
        }
        if let Some(&e) = set.iter().find(|&&e| e >= dom.edge_count()) {
            return Err(invalid(format!("edge {e} out of range")));
        }
        let edges: Vec<usize> = set.into_iter().collect();
        let mut local = vec![None; dom.edge_count()];
        for (i, &e) in edges.iter().enumerate() {
            local[e] = Some(i);
        }
        let plaquettes = dom
            .plaquettes()
            .iter()
            .enumerate()
            .filter_map(|(pi, p)| {
                let l: Option<Vec<usize>> = p.edges.iter().map(|&e| local[e]).collect();
                l.map(|l| (pi, [l[0], l[1], l[2], l[3]]))
            })
            .collect();
        Ok(Self { dom, edges, local, plaquettes })
    }

    pub fn domain(&self) -> &LatticeDomain {
        self.dom
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn local_index(&self, e: usize) -> Option<usize> {
        self.local.get(e).copied().flatten()
    }

    pub fn plaquettes(&self) -> Vec<usize> {
        self.plaquettes.iter().map(|&(p, _)| p).collect()
    }

    fn local_sources(&self, sources: Option<&SourceTerm>) -> Result<Vec<(usize, f64)>> {
        let Some(s) = sources else { return Ok(Vec::new()) };
        [(s.x, s.t_x), (s.y, s.t_y)]
            .into_iter()
            .map(|(e, t)| {
                self.local_index(e)
                    .map(|i| (i, t))
                    .ok_or_else(|| invalid(format!("source edge {e} is not in the system")))
            })
            .collect()
    }

    fn d_local(&self, l: &[usize; 4], theta: &[f64]) -> f64 {
        theta[l[0]] + theta[l[1]] - theta[l[2]] - theta[l[3]]
    }

    fn energy(&self, theta: &[f64], m: f64, src: &[(usize, f64)]) -> f64 {
        let plaq: f64 = self.plaquettes.iter().map(|(_, l)| 1.0 - self.d_local(l, theta).cos()).sum();
        let mass: f64 = theta.iter().map(|x| 1.0 - x.cos()).sum();
        plaq + m * mass + src.iter().map(|&(i, t)| t * theta[i]).sum::<f64>()
    }

    fn gaussian_part(&self, theta: &[f64], m: f64) -> f64 {
        let plaq: f64 = self.plaquettes.iter().map(|(_, l)| self.d_local(l, theta).powi(2)).sum();
        let mass: f64 = theta.iter().map(|x| x * x).sum();
        0.5 * plaq + 0.5 * m * mass
    }

    /// H restricted to the system; `theta` is indexed like [`Self::edges`].
    pub fn hamiltonian(&self, theta: &[f64], m: f64, sources: Option<&SourceTerm>) -> Result<f64> {
        if theta.len() != self.len() {
            return Err(invalid(format!("expected {} values, got {}", self.len(), theta.len())));
        }
        Ok(self.energy(theta, m, &self.local_sources(sources)?))
    }

    /// S restricted to the system.
    pub fn proca_action(&self, theta: &[f64], m: f64) -> Result<f64> {
        if theta.len() != self.len() {
            return Err(invalid(format!("expected {} values, got {}", self.len(), theta.len())));
        }
        Ok(self.gaussian_part(theta, m))
    }

    /// The Gaussian e^{−βS} of the system on ℝ^E.
    pub fn gaussian(&self, beta: f64, m: f64) -> Result<ProcaOperator> {
        let fixed: BTreeSet<usize> = (0..self.dom.edge_count()).filter(|&e| self.local[e].is_none()).collect();
        let local = &self.local;
        let fam = ProcaFamily::build(self.dom, &fixed, None, Vec::new(), beta, m, |p: &Plaquette| {
            if p.edges.iter().all(|&e| local[e].is_some()) {
                PlaquetteWeight::One
            } else {
                PlaquetteWeight::Zero
            }
        })?;
        fam.operator(&[])
    }
}

// ---------------------------------------------------------------------------
// Integration helpers

fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n >= 16 && n % 8 == 0 {
        composite_gauss_legendre(8, n / 8, -PI, PI)
    } else {
        gauss_legendre_on(n, -PI, PI)
    }
}

/// ∫_{[−π,π]^k} f with `nodes` per edge and with half as many.
fn cube_quadrature<F: FnMut(&[f64]) -> f64>(k: usize, nodes: usize, mut f: F) -> Estimate {
    let (x, w) = legendre_rule(nodes);
    let fine = tensor_integrate(&x, &w, k, &mut f);
    let (x, w) = legendre_rule((nodes / 2).max(1));
    let coarse = tensor_integrate(&x, &w, k, &mut f);
    Estimate { value: fine, delta: (fine - coarse).abs(), stderr: 0.0 }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sumsq += v * v;
    }

    fn merge(mut self, o: Moments) -> Moments {
        self.n += o.n;
        self.sum += o.sum;
        self.sumsq += o.sumsq;
        self
    }

    fn estimate(&self) -> Estimate {
        let mean = self.sum / self.n;
        let var = ((self.sumsq / self.n - mean * mean).max(0.0)) * self.n / (self.n - 1.0);
        Estimate { value: mean, delta: 0.0, stderr: (var / self.n).sqrt() }
    }
}

/// Mean of `draw` over `samples` draws, split into fixed chunks with their
/// own seeds so the result does not depend on the thread count. Also returns
/// the per-chunk means.
fn sample_mean<F>(samples: usize, seed: u64, draw: F) -> (Estimate, Vec<f64>)
where
    F: Fn(&mut ChaCha8Rng, &mut Vec<f64>) -> f64 + Sync,
{
    let per = samples.div_ceil(CHUNKS as usize);
    let parts: Vec<Moments> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(seed, c as usize));
            let mut scratch = Vec::new();
            let mut mom = Moments::default();
            let n = per.min(samples.saturating_sub(c as usize * per));
            for _ in 0..n {
                mom.push(draw(&mut rng, &mut scratch));
            }
            mom
        })
        .collect();
    let chunks = parts.iter().map(|m| m.sum / m.n).collect();
    (parts.into_iter().fold(Moments::default(), Moments::merge).estimate(), chunks)
}

/// θ = μ + F z with F = L⁻ᵀ for the precision M = L Lᵀ.
#[derive(Debug, Clone)]
struct GaussianMap {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianMap {
    fn new(precision: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let k = precision.nrows();
        let chol = Cholesky::new(precision).ok_or_else(|| numerical("unit precision is not positive definite"))?;
        let linv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(k, k))
            .ok_or_else(|| numerical("singular Cholesky factor"))?;
        Ok(Self { mean, factor: linv.transpose() })
    }

    fn apply(&self, z: &[f64], out: &mut [f64]) {
        let k = z.len();
        for i in 0..k {
            let mut v = self.mean[i];
            for j in i..k {
                v += self.factor[(i, j)] * z[j];
            }
            out[i] = v;
        }
    }
}

// ---------------------------------------------------------------------------
// Direct partition function

/// The I₀ power series Σ (x/2)^{2k}/(k!)², summed until the terms stop
/// mattering.
pub fn bessel_i0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

/// log ∫_{[−π,π]^E} e^{−βH_s} dθ over the system.
///
/// Quadrature is Gauss–Legendre per edge. Sampling draws uniformly when
/// βm < 1. Otherwise a fixed 90% of draws come from the system's own
/// Gaussian and 10% are uniform, pooled with the mixture density: Gaussian
/// draws carry the mass once β is large, and the uniform share bounds the
/// weights near |θ| = π, where e^{−βH} has heavier tails than e^{−βS}.
pub fn direct_log_z(
    sys: &EdgeSystem,
    params: &ModelParams,
    sources: Option<&SourceTerm>,
    plan: &IntegrationPlan,
) -> Result<Estimate> {
    let k = sys.len();
    plan.validate(k)?;
    let src = sys.local_sources(sources)?;
    let (beta, m) = (params.beta, params.m);
    match plan.method {
        Method::TensorQuadrature => {
            let est = cube_quadrature(k, plan.nodes, |t| (-beta * sys.energy(t, m, &src)).exp());
            if !(est.value > 0.0) {
                return Err(numerical("quadrature underflowed"));
            }
            Ok(est.ln())
        }
        Method::MonteCarlo if beta * m < 1.0 => {
            let (est, _) = sample_mean(plan.samples, plan.seed, |rng, buf| {
                buf.clear();
                buf.extend((0..k).map(|_| rng.random_range(-PI..=PI)));
                (-beta * sys.energy(buf, m, &src)).exp()
            });
            let mut out = est.ln();
            out.value += k as f64 * (2.0 * PI).ln();
            Ok(out)
        }
        Method::MonteCarlo => {
            let op = sys.gaussian(beta, m)?;
            let map = GaussianMap::new(op.precision().clone(), op.mean())?;
            let log_zg = op.log_partition();
            let log_vol = k as f64 * (2.0 * PI).ln();
            // e^{−βH} / (Z^G q) for q = (1 − ε) Gaussian + ε uniform
            let weight = |th: &[f64]| {
                let s = beta * sys.gaussian_part(th, m);
                let v = beta * (sys.energy(th, m, &src) - sys.gaussian_part(th, m));
                let x = s + log_zg - log_vol;
                let (a, b) = (1.0 - UNIFORM_SHARE, UNIFORM_SHARE);
                let log_den =
                    if x > 0.0 { x + b.ln() + (a / b * (-x).exp()).ln_1p() } else { a.ln() + (b / a * x.exp()).ln_1p() };
                (-v - log_den).exp()
            };
            let n_uniform = ((plan.samples as f64) * UNIFORM_SHARE).round() as usize;
            let (gauss, _) = sample_mean(plan.samples - n_uniform, plan.seed, |rng, buf| {
                buf.resize(2 * k, 0.0);
                let (z, th) = buf.split_at_mut(k);
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                map.apply(z, th);
                if th.iter().any(|x| x.abs() > PI) {
                    return 0.0;
                }
                weight(th)
            });
            let (flat, _) = sample_mean(n_uniform, chain_seed(plan.seed, 1), |rng, buf| {
                buf.clear();
                buf.extend((0..k).map(|_| rng.random_range(-PI..=PI)));
                weight(buf)
            });
            let (a, b) = (1.0 - UNIFORM_SHARE, UNIFORM_SHARE);
            let est = Estimate {
                value: a * gauss.value + b * flat.value,
                delta: 0.0,
                stderr: (a * gauss.stderr).hypot(b * flat.stderr),
            };
            if !(est.value > 0.0) {
                return Err(numerical("no draw landed where e^{−βH} is positive"));
            }
            let mut out = est.ln();
            out.value += log_zg;
            Ok(out)
        }
    }
}

/// E[f(θ)] under e^{−βH_s} on the system, by Gauss–Legendre quadrature.
pub fn quadrature_expectation<F: Fn(&[f64]) -> f64>(
    sys: &EdgeSystem,
    params: &ModelParams,
    sources: Option<&SourceTerm>,
    nodes: usize,
    f: F,
) -> Result<f64> {
    let k = sys.len();
    IntegrationPlan::quadrature(nodes).validate(k)?;
    let src = sys.local_sources(sources)?;
    let (x, w) = legendre_rule(nodes);
    let rho = |t: &[f64]| (-params.beta * sys.energy(t, params.m, &src)).exp();
    let num = tensor_integrate(&x, &w, k, |t| rho(t) * f(t));
    let den = tensor_integrate(&x, &w, k, rho);
    Ok(num / den)
}

/// ∂²log Z/∂t_x∂t_y at t = 0 divided by β², i.e. Cov(θ_x, θ_y), by a
/// central mixed difference with step `h`. Every tilt reuses the same
/// Gaussian-reference draws; the error is the spread over 20 batches.
pub fn mixed_source_derivative(
    sys: &EdgeSystem,
    params: &ModelParams,
    x: usize,
    y: usize,
    h: f64,
    plan: &IntegrationPlan,
) -> Result<Estimate> {
    let k = sys.len();
    if k > MAX_MC_EDGES {
        return Err(guard(format!("{k} edges exceed {MAX_MC_EDGES}")));
    }
    plan.check_samples()?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    let (beta, m) = (params.beta, params.m);
    if !(beta > 0.0) {
        return Err(invalid("the source derivative needs β > 0"));
    }
    let (lx, ly) = match (sys.local_index(x), sys.local_index(y)) {
        (Some(a), Some(b)) if a != b => (a, b),
        _ => return Err(invalid("source edges must be distinct edges of the system")),
    };
    let op = sys.gaussian(beta, m)?;
    let map = GaussianMap::new(op.precision().clone(), op.mean())?;
    let tilts = [(h, h, 1.0), (h, -h, -1.0), (-h, h, -1.0), (-h, -h, 1.0)];
    let per = plan.samples.div_ceil(BATCHES);
    // Per batch: Σw and Σw·e^{−β(t_xθ_x + t_yθ_y)} for each tilt.
    let batches: Vec<[f64; 5]> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(plan.seed, b));
            let mut z = vec![0.0; k];
            let mut th = vec![0.0; k];
            let mut acc = [0.0; 5];
            for _ in 0..per {
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                map.apply(&z, &mut th);
                if th.iter().any(|v| v.abs() > PI) {
                    continue;
                }
                let w = (-beta * (sys.energy(&th, m, &[]) - sys.gaussian_part(&th, m))).exp();
                acc[0] += w;
                for (i, &(tx, ty, _)) in tilts.iter().enumerate() {
                    acc[i + 1] += w * (-beta * (tx * th[lx] + ty * th[ly])).exp();
                }
            }
            acc
        })
        .collect();
    let fd = |acc: &[f64; 5]| -> f64 {
        tilts.iter().enumerate().map(|(i, &(_, _, s))| s * (acc[i + 1] / acc[0]).ln()).sum::<f64>()
            / (4.0 * h * h * beta * beta)
    };
    let mut total = [0.0; 5];
    for a in &batches {
        for i in 0..5 {
            total[i] += a[i];
        }
    }
    let per_batch: Vec<f64> = batches.iter().map(fd).collect();
    let mean = per_batch.iter().sum::<f64>() / BATCHES as f64;
    let var = per_batch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (BATCHES as f64 - 1.0);
    Ok(Estimate { value: fd(&total), delta: 0.0, stderr: (var / BATCHES as f64).sqrt() })
}

pub fn gaussian_log_z_exact(op: &ProcaOperator) -> f64 {
    op.log_partition()
}

// ---------------------------------------------------------------------------
// Ξ-type expectations

/// One independent factor of E^G[e^{−βV} χ].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitFactor {
    pub edges: Vec<usize>,
    pub value: Estimate,
    /// The value under the halved rule (quadrature) or the value itself.
    pub coarse: f64,
    /// Per-chunk means (Monte Carlo only).
    #[serde(skip)]
    pub chunks: Vec<f64>,
    pub method: Method,
    pub nodes: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XiValue {
    /// log of the product of the unit factors.
    pub log: Estimate,
    pub log_coarse: f64,
    /// log Ξ with every sampled unit replaced by its k-th chunk mean; empty
    /// when nothing was sampled. Chunk seeds are shared across calls with the
    /// same plan, so differences of Ξ at nearby parameters see common random
    /// numbers.
    #[serde(skip)]
    pub log_chunks: Vec<f64>,
    pub units: Vec<UnitFactor>,
}

struct Unit {
    edges: Vec<usize>,
    plaquettes: Vec<(usize, f64)>,
    sources: Vec<(usize, f64)>,
    map: GaussianMap,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits the free edges of `op` into components linked by plaquettes with
/// σ > 0. The Gaussian and V both factor over these exactly.
fn units(
    dom: &LatticeDomain,
    op: &ProcaOperator,
    weights: &[(usize, f64)],
    sources: Option<&SourceTerm>,
) -> Result<Vec<Unit>> {
    let free = op.free_edges();
    let k = free.len();
    let mut parent: Vec<usize> = (0..k).collect();
    let active: Vec<(usize, f64)> = weights.iter().copied().filter(|&(_, s)| s > 0.0).collect();
    for &(p, _) in &active {
        let pos: Vec<usize> = dom.plaquette(p).edges.iter().filter_map(|&e| op.position(e)).collect();
        for w in pos.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..k {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mean = op.mean();
    let prec = op.precision();
    let src: Vec<(usize, f64)> = sources.map_or(Vec::new(), |s| vec![(s.x, s.t_x), (s.y, s.t_y)]);
    let mut out = Vec::with_capacity(groups.len());
    for (root, positions) in groups {
        let n = positions.len();
        let sub = DMatrix::from_fn(n, n, |i, j| prec[(positions[i], positions[j])]);
        let mu = DVector::from_fn(n, |i, _| mean[positions[i]]);
        let plaquettes = active
            .iter()
            .copied()
            .filter(|&(p, _)| {
                let first = dom.plaquette(p).edges.iter().find_map(|&e| op.position(e)).expect("term has a free edge");
                find(&mut parent, first) == root
            })
            .collect();
        let edges: Vec<usize> = positions.iter().map(|&i| free[i]).collect();
        let sources = src
            .iter()
            .filter_map(|&(e, t)| edges.iter().position(|&f| f == e).map(|i| (i, t)))
            .collect();
        out.push(Unit { edges, plaquettes, sources, map: GaussianMap::new(sub, mu)? });
    }
    Ok(out)
}

fn eval_unit(
    dom: &LatticeDomain,
    unit: &Unit,
    base: &[f64],
    params: &ModelParams,
    plan: &IntegrationPlan,
) -> UnitFactor {
    let k = unit.edges.len();
    if k == 0 {
        return UnitFactor {
            edges: Vec::new(),
            value: Estimate::exact(1.0),
            coarse: 1.0,
            chunks: Vec::new(),
            method: plan.method,
            nodes: 0,
            samples: 0,
        };
    }
    let threshold = params.threshold();
    let (beta, m) = (params.beta, params.m);
    let plaq: Vec<(f64, [usize; 4])> = unit.plaquettes.iter().map(|&(p, s)| (s, dom.plaquette(p).edges)).collect();
    let integrand = |z: &[f64], th: &mut [f64], full: &mut [f64]| -> f64 {
        unit.map.apply(z, th);
        let mut chi = 1.0;
        let mut v = 0.0;
        for (i, &e) in unit.edges.iter().enumerate() {
            let t = th[i];
            full[e] = t;
            chi *= chi_scaled(t, threshold);
            v += m * g(t);
        }
        if chi == 0.0 {
            return 0.0;
        }
        for &(i, t) in &unit.sources {
            v += t * th[i];
        }
        for &(s, e) in &plaq {
            v += s * g(full[e[0]] + full[e[1]] - full[e[2]] - full[e[3]]);
        }
        (-beta * v).exp() * chi
    };
    match plan.resolve(k) {
        Method::TensorQuadrature => {
            let cap = (UNIT_GRID_POINTS as f64).powf(1.0 / k as f64).floor() as usize;
            let n = plan.nodes.min(cap).max(2);
            let mut th = vec![0.0; k];
            let mut full = base.to_vec();
            let mut run = |n: usize| {
                let (x, w) = gauss_hermite(n);
                tensor_integrate(&x, &w, k, |z| integrand(z, &mut th, &mut full))
            };
            let fine = run(n);
            let coarse = run(n.div_ceil(2).max(1));
            UnitFactor {
                edges: unit.edges.clone(),
                value: Estimate { value: fine, delta: (fine - coarse).abs(), stderr: 0.0 },
                coarse,
                chunks: Vec::new(),
                method: Method::TensorQuadrature,
                nodes: n,
                samples: 0,
            }
        }
        Method::MonteCarlo => {
            let seed = chain_seed(plan.seed, unit.edges[0]);
            let (est, chunks) = sample_mean(plan.samples, seed, |rng, buf| {
                if buf.len() != 2 * k + base.len() {
                    buf.clear();
                    buf.resize(2 * k, 0.0);
                    buf.extend_from_slice(base);
                }
                let (z, rest) = buf.split_at_mut(k);
                let (th, full) = rest.split_at_mut(k);
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                integrand(z, th, full)
            });
            UnitFactor {
                edges: unit.edges.clone(),
                value: est,
                coarse: est.value,
                chunks,
                method: Method::MonteCarlo,
                nodes: 0,
                samples: plan.samples,
            }
        }
    }
}

/// Ξ(s) = E^G_s[e^{−βV(θ; s)} χ_G(θ)] for a member of an interpolated family,
/// with V carrying the same σ_p(s) as the Gaussian and χ over the free edges.
pub fn xi(
    dom: &LatticeDomain,
    fam: &ProcaFamily,
    s: &[f64],
    params: &ModelParams,
    sources: Option<&SourceTerm>,
    plan: &IntegrationPlan,
) -> Result<XiValue> {
    let op = fam.operator(s)?;
    let weights = fam.plaquette_weights(s);
    let units = units(dom, &op, &weights, sources)?;
    if let Some(big) = units.iter().find(|u| u.edges.len() > MAX_MC_EDGES) {
        return Err(guard(format!("a coupled unit of {} edges exceeds {MAX_MC_EDGES}", big.edges.len())));
    }
    if units.iter().any(|u| plan.resolve(u.edges.len()) == Method::MonteCarlo) {
        plan.check_samples()?;
    }
    let base = op.conditional_mean().values;
    let factors: Vec<UnitFactor> = units.iter().map(|u| eval_unit(dom, u, &base, params, plan)).collect();
    let mut log = Estimate::exact(0.0);
    let mut log_coarse = 0.0;
    let sampled = factors.iter().any(|f| !f.chunks.is_empty());
    let mut log_chunks = vec![0.0; if sampled { CHUNKS as usize } else { 0 }];
    for f in &factors {
        if !(f.value.value > 0.0 && f.coarse > 0.0) {
            return Err(numerical(format!("unit {:?} integrated to {}", f.edges, f.value.value)));
        }
        let l = f.value.ln();
        log.value += l.value;
        log.delta += l.delta;
        log.stderr = log.stderr.hypot(l.stderr);
        log_coarse += f.coarse.ln();
        for (j, c) in log_chunks.iter_mut().enumerate() {
            *c += f.chunks.get(j).copied().unwrap_or(f.value.value).ln();
        }
    }
    Ok(XiValue { log, log_coarse, log_chunks, units: factors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiMode {
    /// s ≡ 0 on the faces of G₁.
    Zero,
    /// Every face between good blocks decoupled.
    ZeroPlus,
}

fn xi_family(
    dom: &LatticeDomain,
    blocking: &CoarseBlocking,
    class: &BlockClassification,
    params: &ModelParams,
    eta: Option<&OneForm>,
    mode: XiMode,
) -> Result<(ProcaFamily, Vec<f64>)> {
    let mode = match mode {
        XiMode::Zero => InterpolationMode::Standard,
        XiMode::ZeroPlus => InterpolationMode::ZeroPlus,
    };
    let fam = ProcaFamily::new(dom, blocking, class, params, eta, mode)?;
    let zeros = vec![0.0; fam.faces().len()];
    Ok((fam, zeros))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockFactor {
    pub block: usize,
    pub interior_edges: usize,
    pub value: Estimate,
    /// The block's edges share a unit with edges outside it.
    pub coupled: bool,
}

/// The factor of Ξ(0) or Ξ(0,+) carried by the units that contain the
/// block's interior edges.
#[allow(clippy::too_many_arguments)]
pub fn xi_block_factor(
    dom: &LatticeDomain,
    blocking: &CoarseBlocking,
    class: &BlockClassification,
    block: usize,
    params: &ModelParams,
    eta: Option<&OneForm>,
    mode: XiMode,
    plan: &IntegrationPlan,
) -> Result<BlockFactor> {
    if block >= blocking.block_count() {
        return Err(invalid(format!("block {block} out of range")));
    }
    if class.bad.contains(&block) {
        return Err(invalid(format!("block {block} is bad")));
    }
    let interior: BTreeSet<usize> = blocking.block_edges(block).iter().copied().collect();
    if interior.len() > MAX_QUADRATURE_EDGES {
        return Err(guard(format!("block has {} edges (limit {MAX_QUADRATURE_EDGES})", interior.len())));
    }
    let (fam, s) = xi_family(dom, blocking, class, params, eta, mode)?;
    let all = xi(dom, &fam, &s, params, None, plan)?;
    let mut value = Estimate::exact(1.0);
    let mut coupled = false;
    for u in all.units.iter().filter(|u| u.edges.iter().any(|e| interior.contains(e))) {
        coupled |= u.edges.iter().any(|e| !interior.contains(e));
        let v = value.value * u.value.value;
        value = Estimate {
            value: v,
            delta: value.delta * u.value.value + u.value.delta * value.value,
            stderr: (value.stderr * u.value.value).hypot(u.value.stderr * value.value),
        };
    }
    Ok(BlockFactor { block, interior_edges: interior.len(), value, coupled })
}

// ---------------------------------------------------------------------------
// Bad sets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BadSetWeight {
    /// ρ_B itself.
    Rho,
    /// ρ_B · K₁(∅; G) = ρ_B · Ξ_{G,η}(0)/Ξ_{G,η}(0,+).
    RhoK1Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BadSetIntegral {
    pub bad: Vec<usize>,
    pub b1: Vec<usize>,
    pub edges: usize,
    pub weight: BadSetWeight,
    pub value: Estimate,
    /// Integration points where e^{−βH^B}ζ_B did not vanish.
    pub support_points: usize,
    pub points: usize,
}

struct BadSetContext<'a> {
    dom: &'a LatticeDomain,
    blocking: &'a CoarseBlocking,
    class: BlockClassification,
    params: ModelParams,
    fixed: Vec<usize>,
    inside: EdgeSystem<'a>,
    sources: Option<SourceTerm>,
    log_zf0: f64,
    log_xi_all0: f64,
    weight: BadSetWeight,
    inner: IntegrationPlan,
}

impl BadSetContext<'_> {
    /// (ρ, relative inner error).
    fn density(&self, eta_b: &[f64], src_b: &[(usize, f64)]) -> Result<(f64, f64)> {
        let p = &self.params;
        let mut eta = OneForm::zeros(self.dom);
        for (&e, &v) in self.fixed.iter().zip(eta_b) {
            eta.values[e] = v;
        }
        let h = if self.fixed.is_empty() { 0.0 } else { self.inside.energy(eta_b, p.m, src_b) };
        let pre = (-p.beta * h).exp() * grouped_zeta(&eta, &self.class.bad, self.blocking, p.threshold());
        if pre == 0.0 {
            return Ok((0.0, 0.0));
        }
        let (fam0, s0) = xi_family(self.dom, self.blocking, &self.class, p, Some(&eta), XiMode::Zero)?;
        let log_zg0 = fam0.log_z(&s0)?;
        let xi_g = match self.weight {
            BadSetWeight::Rho => {
                let (fam, s) = xi_family(self.dom, self.blocking, &self.class, p, Some(&eta), XiMode::ZeroPlus)?;
                xi(self.dom, &fam, &s, p, self.sources.as_ref(), &self.inner)?
            }
            BadSetWeight::RhoK1Empty => xi(self.dom, &fam0, &s0, p, self.sources.as_ref(), &self.inner)?,
        };
        let v = pre * (log_zg0 - self.log_zf0 + xi_g.log.value - self.log_xi_all0).exp();
        Ok((v, xi_g.log.error()))
    }
}

pub const MIN_TAIL_SAMPLES: usize = 1_000;
const TAIL_BINS: usize = 4096;
/// Share of draws that spread the unpinned edges uniformly, which keeps the
/// weights bounded where H has minima the Laplace step does not see.
const DEFENSIVE: f64 = 0.2;

const SIGNS: [f64; 4] = [1.0, 1.0, -1.0, -1.0];

/// One tabulated value of the pinned edge: the minimiser of H over the other
/// edges, its tangent in t, and the Cholesky factor of β·∂²H there.
struct TailBin {
    centre: f64,
    opt: DVector<f64>,
    tangent: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    half_log_det: f64,
    log_density: f64,
}

/// Laplace mixture proposal for fields with at least one edge beyond T: pick
/// an edge j uniformly, draw |θ_j| from the profile e^{−β min H}(1 − χ) on
/// [T, π] (tabulated, random sign), then the other edges from the Gaussian
/// around the constrained minimiser (or, for a fixed share of draws,
/// uniformly on the cube).
///
/// It covers the support of ζ_B for any B but is only efficient when one bad
/// block carries the large field.
struct TailProposal {
    k: usize,
    lo: f64,
    width: f64,
    others: Vec<Vec<usize>>,
    cdf: Vec<Vec<f64>>,
    bins: Vec<Vec<TailBin>>,
}

impl TailProposal {
    fn new(sys: &EdgeSystem, beta: f64, m: f64, threshold: f64) -> Result<Self> {
        let k = sys.len();
        let lo = threshold.min(PI);
        let width = (PI - lo) / TAIL_BINS as f64;
        let mut others = Vec::with_capacity(k);
        let mut cdf = Vec::with_capacity(k);
        let mut bins = Vec::with_capacity(k);
        for j in 0..k {
            let rest: Vec<usize> = (0..k).filter(|&i| i != j).collect();
            let mut theta = vec![0.0; k];
            let mut table = Vec::with_capacity(TAIL_BINS);
            for b in 0..TAIL_BINS {
                let t = lo + (b as f64 + 0.5) * width;
                theta[j] = t;
                let (hoo, hoj) = newton_pinned(sys, m, &rest, &mut theta)?;
                let scaled = &hoo * beta;
                let Some(chol) = Cholesky::new(scaled) else {
                    return Err(numerical("constrained minimum is not strict"));
                };
                let tangent = -Cholesky::new(hoo).expect("positive above").solve(&hoj);
                let half_log_det = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let opt = DVector::from_fn(rest.len(), |a, _| theta[rest[a]]);
                let log_density =
                    -beta * sys.energy(&theta, m, &[]) - half_log_det + (1.0 - chi_scaled(t, threshold)).ln();
                table.push(TailBin { centre: t, opt, tangent, chol, half_log_det, log_density });
            }
            let top = table.iter().map(|b| b.log_density).fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Err(numerical("empty tail proposal"));
            }
            let mass: Vec<f64> = table.iter().map(|b| (b.log_density - top).exp()).collect();
            let total: f64 = mass.iter().sum();
            let mut acc = 0.0;
            cdf.push(
                mass.iter()
                    .map(|v| {
                        acc += v / total;
                        acc
                    })
                    .collect(),
            );
            // density of the signed value: half the bin mass per side
            for (bin, v) in table.iter_mut().zip(&mass) {
                bin.log_density = (0.5 * v / total / width).ln();
            }
            others.push(rest);
            bins.push(table);
        }
        Ok(TailProposal { k, lo, width, others, cdf, bins })
    }

    fn bin(&self, t: f64) -> Option<usize> {
        let a = t.abs();
        (a >= self.lo && a <= PI).then(|| (((a - self.lo) / self.width) as usize).min(TAIL_BINS - 1))
    }

    /// Mean of the other edges given θ_j = t in bin `b`.
    fn centre(&self, bin: &TailBin, t: f64, a: usize) -> f64 {
        let sign = t.signum();
        sign * (bin.opt[a] + bin.tangent[a] * (t.abs() - bin.centre))
    }

    /// Fills `out` and returns the mixture density there.
    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) -> f64 {
        let j = rng.random_range(0..self.k);
        let u: f64 = rng.random_range(0.0..1.0);
        let b = self.cdf[j].partition_point(|&c| c < u).min(TAIL_BINS - 1);
        let a = self.lo + (b as f64 + rng.random_range(0.0..1.0)) * self.width;
        let t = if rng.random_bool(0.5) { a } else { -a };
        out[j] = t;
        let rest = &self.others[j];
        if rng.random_bool(DEFENSIVE) {
            for &e in rest {
                out[e] = rng.random_range(-PI..PI);
            }
        } else {
            let bin = &self.bins[j][b];
            let z = DVector::from_fn(rest.len(), |_, _| StandardNormal.sample(rng));
            let x = bin.chol.l().transpose().solve_upper_triangular(&z).expect("triangular solve");
            for (i, &e) in rest.iter().enumerate() {
                out[e] = self.centre(bin, t, i) + x[i];
            }
        }
        self.density(out)
    }

    fn density(&self, x: &[f64]) -> f64 {
        let norm = 0.5 * (self.k as f64 - 1.0) * (2.0 * PI).ln();
        let flat = -(self.k as f64 - 1.0) * (2.0 * PI).ln();
        let mut total = 0.0;
        for j in 0..self.k {
            let Some(b) = self.bin(x[j]) else { continue };
            let bin = &self.bins[j][b];
            let rest = &self.others[j];
            let r = DVector::from_fn(rest.len(), |i, _| x[rest[i]] - self.centre(bin, x[j], i));
            let y = bin.chol.l().transpose() * &r;
            let laplace = (-0.5 * y.norm_squared() + bin.half_log_det - norm).exp();
            let uniform = if rest.iter().all(|&e| x[e].abs() <= PI) { flat.exp() } else { 0.0 };
            total += bin.log_density.exp() * ((1.0 - DEFENSIVE) * laplace + DEFENSIVE * uniform);
        }
        total / self.k as f64
    }
}

/// Minimises H over the edges in `rest` with the others held at `theta`,
/// starting from `theta`; returns (∂²H/∂o∂o, ∂²H/∂o∂θ_j) at the minimum
/// where j is the single edge missing from `rest`.
fn newton_pinned(sys: &EdgeSystem, m: f64, rest: &[usize], theta: &mut [f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = theta.len();
    let r = rest.len();
    let pinned = (0..k).find(|i| !rest.contains(i)).expect("one pinned edge");
    let derivatives = |theta: &[f64]| {
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for (_, l) in &sys.plaquettes {
            let dp = sys.d_local(l, theta);
            for a in 0..4 {
                grad[l[a]] += SIGNS[a] * dp.sin();
                for b in 0..4 {
                    hess[(l[a], l[b])] += SIGNS[a] * SIGNS[b] * dp.cos();
                }
            }
        }
        for i in 0..k {
            grad[i] += m * theta[i].sin();
            hess[(i, i)] += m * theta[i].cos();
        }
        (grad, hess)
    };
    for _ in 0..100 {
        let (grad, hess) = derivatives(theta);
        let go = DVector::from_fn(r, |a, _| grad[rest[a]]);
        if go.amax() < 1e-13 {
            break;
        }
        let hoo = DMatrix::from_fn(r, r, |a, b| hess[(rest[a], rest[b])]);
        let step = match Cholesky::new(hoo) {
            Some(c) => c.solve(&go),
            None => go.clone(),
        };
        let before = sys.energy(theta, m, &[]);
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = (0..k)
                .map(|i| match rest.iter().position(|&e| e == i) {
                    Some(a) => theta[i] - scale * step[a],
                    None => theta[i],
                })
                .collect();
            if sys.energy(&trial, m, &[]) <= before || scale < 1e-12 {
                theta.copy_from_slice(&trial);
                break;
            }
            scale *= 0.5;
        }
    }
    let (_, hess) = derivatives(theta);
    let hoo = DMatrix::from_fn(r, r, |a, b| hess[(rest[a], rest[b])]);
    let hoj = DVector::from_fn(r, |a, _| hess[(rest[a], pinned)]);
    Ok((hoo, hoj))
}

/// ∫_{[−π,π]^{ℰ(B)}} ρ_B(η) dη, or the same with K₁(∅; G) folded in.
///
/// The outer integral over η follows `plan`: a Legendre grid on the cube
/// (up to 8 edges), or importance sampling from tail draws
/// that put one edge beyond T. The grid cannot resolve the tails once
/// β ≳ 8; the sampler is the one to use there. The Ξ factors inside use
/// Gauss–Hermite per unit with `plan.nodes`.
pub fn rho_b_integral(
    dom: &LatticeDomain,
    blocking: &CoarseBlocking,
    bad: &BTreeSet<usize>,
    params: &ModelParams,
    sources: Option<&SourceTerm>,
    weight: BadSetWeight,
    plan: &IntegrationPlan,
) -> Result<BadSetIntegral> {
    if let Some(&b) = bad.iter().find(|&&b| b >= blocking.block_count()) {
        return Err(invalid(format!("block {b} out of range")));
    }
    if !(params.beta > 0.0) {
        return Err(invalid("bad-set integrals need β > 0"));
    }
    let class = BlockClassification::from_bad(blocking, bad.clone(), params.r_beta());
    let fixed = blocking.edges_of_set(bad);
    let k = fixed.len();
    match plan.method {
        Method::TensorQuadrature => plan.validate(k)?,
        Method::MonteCarlo => {
            if k > MAX_MC_EDGES {
                return Err(guard(format!("Monte Carlo on {k} edges (limit {MAX_MC_EDGES})")));
            }
            if plan.samples < MIN_TAIL_SAMPLES {
                return Err(invalid(format!("tail sampling needs at least {MIN_TAIL_SAMPLES} samples, got {}", plan.samples)));
            }
        }
    }
    let inside = if fixed.is_empty() { EdgeSystem::full(dom) } else { EdgeSystem::induced(dom, &fixed)? };
    let (src_b, src_g) = match sources {
        Some(s) => {
            let inb = |e: usize| fixed.binary_search(&e).is_ok();
            if inb(s.x) != inb(s.y) {
                return Err(invalid("source edges must both lie in ℰ(B) or both outside it"));
            }
            if inb(s.x) {
                (inside.local_sources(Some(s))?, None)
            } else {
                (Vec::new(), Some(*s))
            }
        }
        None => (Vec::new(), None),
    };
    let f_fam = ProcaFamily::interpolated(
        dom,
        blocking,
        &BTreeSet::new(),
        None,
        blocking.faces_of_set(&class.g1),
        params.beta,
        params.m,
    )?;
    let log_zf0 = f_fam.log_z(&vec![0.0; f_fam.faces().len()])?;
    let all_good = BlockClassification::all_good(blocking);
    let (all_fam, all_s) = xi_family(dom, blocking, &all_good, params, None, XiMode::Zero)?;
    let inner = IntegrationPlan { method: Method::TensorQuadrature, ..*plan };
    let log_xi_all0 = xi(dom, &all_fam, &all_s, params, src_g.as_ref(), &inner)?.log.value;
    let ctx = BadSetContext {
        dom,
        blocking,
        class: class.clone(),
        params: *params,
        fixed: fixed.clone(),
        inside,
        sources: src_g,
        log_zf0,
        log_xi_all0,
        weight,
        inner,
    };
    let mut support = 0usize;
    let mut points = 0usize;
    let value = if k == 0 {
        points = 1;
        let (v, rel) = ctx.density(&[], &src_b)?;
        support += usize::from(v != 0.0);
        Estimate { value: v, delta: v * rel, stderr: 0.0 }
    } else {
        match plan.method {
            Method::TensorQuadrature => {
                let mut err: Option<crate::error::Error> = None;
                let mut inner_err = 0.0;
                let mut integrand = |t: &[f64]| -> f64 {
                    points += 1;
                    match ctx.density(t, &src_b) {
                        Ok((v, rel)) => {
                            support += usize::from(v != 0.0);
                            inner_err = f64::max(inner_err, rel);
                            v
                        }
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    }
                };
                let mut est = cube_quadrature(k, plan.nodes, &mut integrand);
                if let Some(e) = err {
                    return Err(e);
                }
                est.delta += est.value.abs() * inner_err;
                est
            }
            Method::MonteCarlo => {
                let proposal = TailProposal::new(&ctx.inside, params.beta, params.m, params.threshold())?;
                let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
                let mut mom = Moments::default();
                let mut inner_err = 0.0;
                let mut eta = vec![0.0; k];
                for _ in 0..plan.samples {
                    let q = proposal.draw(&mut rng, &mut eta);
                    points += 1;
                    if eta.iter().any(|v| v.abs() > PI) {
                        mom.push(0.0);
                        continue;
                    }
                    let (v, rel) = ctx.density(&eta, &src_b)?;
                    support += usize::from(v != 0.0);
                    inner_err = f64::max(inner_err, rel);
                    mom.push(v / q);
                }
                let mut est = mom.estimate();
                est.delta = est.value.abs() * inner_err;
                est
            }
        }
    };
    Ok(BadSetIntegral {
        bad: bad.iter().copied().collect(),
        b1: class.b1.iter().copied().collect(),
        edges: k,
        weight,
        value,
        support_points: support,
        points,
    })
}

// ---------------------------------------------------------------------------
// End-to-end decomposition

pub const MAX_DECOMPOSITION_BLOCKS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
    pub delta: f64,
    pub stderr: f64,
}

impl Term {
    fn new(name: impl Into<String>, e: Estimate) -> Self {
        Self { name: name.into(), value: e.value, delta: e.delta, stderr: e.stderr }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct K1Row {
    pub faces: Vec<usize>,
    /// X(Δ) as block indices.
    pub blocks: Vec<usize>,
    pub value: Estimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolymerWeightRow {
    pub sites: Vec<Coord>,
    pub weight: f64,
    pub delta: f64,
    pub stderr: f64,
    /// Number of face sets Δ with X(Δ) equal to the polymer.
    pub face_sets: usize,
    /// The bad-set contribution with B equal to the polymer.
    pub bad_set: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub schema_version: u32,
    pub params: ModelParams,
    pub sources: Option<SourceTerm>,
    pub plan: IntegrationPlan,
    pub edges: usize,
    pub blocks: usize,
    pub faces: usize,
    /// Largest |Δ| kept.
    pub max_face_set: usize,
    pub lhs: Estimate,
    pub log_gaussian: f64,
    pub log_xi0: Estimate,
    pub polymer_sum: Estimate,
    /// Σ_Δ K₁(Δ) + Σ_{B≠∅} (bad-set terms), before regrouping into polymers.
    pub ungrouped_sum: f64,
    pub rhs: f64,
    pub discrepancy: f64,
    pub budget: f64,
    pub passed: bool,
    /// Bad-set terms on disconnected B, which no single polymer carries.
    pub unassigned_bad_mass: f64,
    pub terms: Vec<Term>,
    pub k1: Vec<K1Row>,
    pub bad_sets: Vec<BadSetIntegral>,
    pub weights: Vec<PolymerWeightRow>,
}

impl DecompositionReport {
    /// w(P) as a table for the polymer expansion.
    pub fn weight_table(&self) -> Result<PolymerWeightTable> {
        let mut t = PolymerWeightTable::new();
        for row in &self.weights {
            t.insert(Polymer::new(row.sites.iter().cloned())?, row.weight, Provenance::OracleIntegrated)?;
        }
        Ok(t)
    }
}

fn subsets(items: &[usize], max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << items.len()) {
        if (mask.count_ones() as usize) <= max {
            out.push((0..items.len()).filter(|i| mask >> i & 1 == 1).map(|i| items[i]).collect());
        }
    }
    out
}

/// Assembles log Z from the Gaussian normalizer, Ξ_Λ(0) and the polymer
/// sum, and compares with a direct evaluation.
///
/// Restricted to instances where r_β reaches across the whole coarse
/// lattice, so that every nonempty B has B₁ = Λ′. Then G₁ = ∅, the only
/// (Γ, Δ) for B ≠ ∅ are empty, and w(P) is Σ_{X(Δ)=P} K₁(Δ; Λ′) plus the
/// bad-set term with B = P. K₁ uses the corner form of ∫_{[0,1]^Δ} ∂^Δ Ξ:
/// Σ_{A⊆Δ} (−1)^{|Δ∖A|} Ξ(1_A) / Ξ(0).
pub fn decomposition_check(
    dom: &LatticeDomain,
    blocking: &CoarseBlocking,
    params: &ModelParams,
    sources: Option<&SourceTerm>,
    plan: &IntegrationPlan,
    max_face_set: Option<usize>,
) -> Result<DecompositionReport> {
    if dom.dim() != 2 {
        return Err(guard(format!("decomposition check runs in d = 2, got d = {}", dom.dim())));
    }
    let nb = blocking.block_count();
    if nb > MAX_DECOMPOSITION_BLOCKS {
        return Err(guard(format!("{nb} blocks exceed {MAX_DECOMPOSITION_BLOCKS}")));
    }
    if dom.edge_count() > MAX_MC_EDGES {
        return Err(guard(format!("{} edges exceed {MAX_MC_EDGES}", dom.edge_count())));
    }
    let diameter = (0..nb).flat_map(|a| (0..nb).map(move |b| (a, b))).map(|(a, b)| blocking.coarse_distance(a, b)).max();
    if (diameter.unwrap_or(0) as f64) > params.r_beta() {
        return Err(guard(format!(
            "r_β = {:.3} does not cover the coarse lattice; the bad-set bookkeeping needs β larger",
            params.r_beta()
        )));
    }
    plan.check_samples()?;
    let faces: Vec<usize> = (0..blocking.faces().len()).collect();
    let max_face_set = max_face_set.unwrap_or(faces.len()).min(faces.len());

    let full = EdgeSystem::full(dom);
    let lhs_plan = IntegrationPlan { method: Method::MonteCarlo, ..*plan };
    let lhs = direct_log_z(&full, params, sources, &lhs_plan)?;
    let log_gaussian = gaussian_log_z_exact(&ProcaFamily::free_field(dom, params.beta, params.m)?.operator(&[])?);

    // Ξ(1_A) for every A up to the largest face set kept, with seeds apart
    // from the left side's.
    let xi_plan = plan.with_seed(chain_seed(plan.seed, 1 << 20));
    let fam = ProcaFamily::interpolated(dom, blocking, &BTreeSet::new(), None, faces.clone(), params.beta, params.m)?;
    let corners: Vec<Vec<usize>> = subsets(&faces, max_face_set);
    let mut xis: BTreeMap<Vec<usize>, XiValue> = BTreeMap::new();
    for a in &corners {
        let s: Vec<f64> = faces.iter().map(|f| if a.contains(f) { 1.0 } else { 0.0 }).collect();
        xis.insert(a.clone(), xi(dom, &fam, &s, params, sources, &xi_plan)?);
    }
    let sampled = xis.values().any(|x| !x.log_chunks.is_empty());
    let n_chunks = if sampled { CHUNKS as usize } else { 0 };

    let blocks: Vec<usize> = (0..nb).collect();
    let mut bad_sets = Vec::new();
    for b in subsets(&blocks, nb).into_iter().filter(|b| !b.is_empty()) {
        let set: BTreeSet<usize> = b.into_iter().collect();
        let k = blocking.edges_of_set(&set).len();
        let outer = if k <= 4 { IntegrationPlan { method: Method::TensorQuadrature, ..*plan } } else { lhs_plan };
        bad_sets.push(rho_b_integral(dom, blocking, &set, params, sources, BadSetWeight::RhoK1Empty, &outer)?);
    }

    // The polymer of each kept Δ (None when X(Δ) is disconnected) and of
    // each connected B.
    let deltas: Vec<&Vec<usize>> = corners.iter().filter(|d| !d.is_empty()).collect();
    let key = |blocks: &BTreeSet<usize>| blocking.is_connected(blocks).then(|| blocks.iter().copied().collect::<Vec<_>>());
    let delta_keys: Vec<Option<Vec<usize>>> = deltas.iter().map(|d| key(&blocking.x_of_faces(d))).collect();
    let bad_keys: Vec<Option<Vec<usize>>> =
        bad_sets.iter().map(|b| key(&b.bad.iter().copied().collect())).collect();
    let mut polymer_keys: BTreeSet<Vec<usize>> = delta_keys.iter().flatten().cloned().collect();
    for (k, b) in bad_keys.iter().zip(&bad_sets) {
        if let Some(k) = k {
            if b.value.value != 0.0 || b.value.error() != 0.0 {
                polymer_keys.insert(k.clone());
            }
        }
    }
    let polymer_keys: Vec<Vec<usize>> = polymer_keys.into_iter().collect();
    let polymers: Vec<Polymer> = polymer_keys
        .iter()
        .map(|k| Polymer::new(k.iter().map(|&b| blocking.site(b).clone())))
        .collect::<Result<_>>()?;

    // Everything downstream of the Ξ values, for one choice of them.
    struct Assembly {
        k1: Vec<f64>,
        w: Vec<f64>,
        log_xi0: f64,
        poly: f64,
    }
    let assemble = |lxi: &dyn Fn(&Vec<usize>) -> f64| -> Result<Assembly> {
        let l0 = lxi(&Vec::new());
        let mut k1 = Vec::with_capacity(deltas.len());
        let mut w = vec![0.0; polymer_keys.len()];
        for (d, pk) in deltas.iter().zip(&delta_keys) {
            let v: f64 = subsets(d, d.len())
                .iter()
                .map(|a| {
                    let sign = if (d.len() - a.len()) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * (lxi(a) - l0).exp()
                })
                .sum();
            k1.push(v);
            if let Some(pk) = pk {
                w[polymer_keys.binary_search(pk).expect("key collected")] += v;
            }
        }
        for (b, pk) in bad_sets.iter().zip(&bad_keys) {
            if let Some(i) = pk.as_ref().and_then(|pk| polymer_keys.binary_search(pk).ok()) {
                w[i] += b.value.value;
            }
        }
        let mut table = PolymerWeightTable::new();
        for (p, &v) in polymers.iter().zip(&w) {
            table.insert(p.clone(), v, Provenance::OracleIntegrated)?;
        }
        Ok(Assembly { k1, w, log_xi0: l0, poly: polymer_partition_function(&table)? })
    };
    let fine = assemble(&|a| xis[a].log.value)?;
    let coarse = assemble(&|a| xis[a].log_coarse)?;
    let chunks: Vec<Assembly> =
        (0..n_chunks).map(|j| assemble(&|a| xis[a].log_chunks.get(j).copied().unwrap_or(xis[a].log.value))).collect::<Result<_>>()?;
    let spread = |f: &dyn Fn(&Assembly) -> f64| -> f64 {
        if chunks.len() < 2 {
            return 0.0;
        }
        let vals: Vec<f64> = chunks.iter().map(f).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    let error_of = |f: &dyn Fn(&Assembly) -> f64| -> Estimate {
        Estimate { value: f(&fine), delta: (f(&fine) - f(&coarse)).abs(), stderr: spread(f) }
    };

    let k1: Vec<K1Row> = deltas
        .iter()
        .enumerate()
        .map(|(i, d)| K1Row {
            faces: (*d).clone(),
            blocks: blocking.x_of_faces(d).into_iter().collect(),
            value: error_of(&|a: &Assembly| a.k1[i]),
        })
        .collect();
    let weights: Vec<PolymerWeightRow> = polymer_keys
        .iter()
        .enumerate()
        .map(|(i, pk)| {
            let mut e = error_of(&|a: &Assembly| a.w[i]);
            let mut bad = 0.0;
            for (b, k) in bad_sets.iter().zip(&bad_keys) {
                if k.as_ref() == Some(pk) {
                    bad += b.value.value;
                    e.delta += b.value.delta;
                    e.stderr = e.stderr.hypot(b.value.stderr);
                }
            }
            PolymerWeightRow {
                sites: polymers[i].sites().to_vec(),
                weight: e.value,
                delta: e.delta,
                stderr: e.stderr,
                face_sets: delta_keys.iter().filter(|k| k.as_ref() == Some(pk)).count(),
                bad_set: bad,
            }
        })
        .collect();
    let ungrouped = 1.0 + fine.k1.iter().sum::<f64>() + bad_sets.iter().map(|b| b.value.value).sum::<f64>();
    let unassigned: f64 =
        bad_sets.iter().zip(&bad_keys).filter(|(_, k)| k.is_none()).map(|(b, _)| b.value.value).sum();
    let bad_error = bad_sets
        .iter()
        .map(|b| b.value)
        .fold(Estimate::exact(0.0), |acc, e| Estimate {
            value: acc.value + e.value,
            delta: acc.delta + e.delta,
            stderr: acc.stderr.hypot(e.stderr),
        });

    if !(fine.poly > 0.0) {
        return Err(numerical(format!("polymer sum {} is not positive", fine.poly)));
    }
    let log_xi0 = error_of(&|a: &Assembly| a.log_xi0);
    let polymer_sum = error_of(&|a: &Assembly| a.poly);
    let rhs_part = error_of(&|a: &Assembly| a.log_xi0 + a.poly.ln());
    let rhs = log_gaussian + rhs_part.value;
    let terms = vec![
        Term::new("lhs_log_z", lhs),
        Term::new("log_gaussian", Estimate::exact(log_gaussian)),
        Term::new("log_xi0_plus_log_polymer_sum", rhs_part),
        Term::new("bad_set_terms", bad_error),
        Term::new("unassigned_bad_mass", Estimate { value: unassigned, delta: unassigned.abs(), stderr: 0.0 }),
    ];
    let budget = terms.iter().map(|t| t.delta.powi(2) + (3.0 * t.stderr).powi(2)).sum::<f64>().sqrt();
    let discrepancy = (lhs.value - rhs).abs();
    Ok(DecompositionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        params: *params,
        sources: sources.copied(),
        plan: *plan,
        edges: dom.edge_count(),
        blocks: nb,
        faces: faces.len(),
        max_face_set,
        lhs,
        log_gaussian,
        log_xi0,
        polymer_sum,
        ungrouped_sum: ungrouped,
        rhs,
        discrepancy,
        budget,
        passed: discrepancy <= budget,
        unassigned_bad_mass: unassigned,
        terms,
        k1,
        bad_sets,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BadSetPoint {
    pub beta: f64,
    pub threshold: f64,
    pub b1: usize,
    pub bad: usize,
    pub value: f64,
}

/// Least-squares fit of log ρ ≈ C·|B₁|·log β − c·β T²·|B|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BadSetFit {
    pub c_growth: f64,
    pub c_decay: f64,
    /// max(log ρ − fit); adding it to the fit makes the bound hold at every point.
    pub max_residual: f64,
}

pub fn fit_bad_set_bound(points: &[BadSetPoint]) -> Result<BadSetFit> {
    if points.len() < 2 {
        return Err(invalid("need at least two points"));
    }
    if let Some(p) = points.iter().find(|p| !(p.value > 0.0 && p.beta > 0.0)) {
        return Err(invalid(format!("point at β = {} has value {}", p.beta, p.value)));
    }
    let row = |p: &BadSetPoint| [p.b1 as f64 * p.beta.ln(), -p.beta * p.threshold.powi(2) * p.bad as f64];
    let x = DMatrix::from_fn(points.len(), 2, |i, j| row(&points[i])[j]);
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.value.ln()));
    let coef = (x.transpose() * &x)
        .try_inverse()
        .ok_or_else(|| numerical("degenerate β grid"))?
        * x.transpose()
        * &y;
    let resid = &y - &x * &coef;
    Ok(BadSetFit { c_growth: coef[0], c_decay: coef[1], max_residual: resid.max() })
}
