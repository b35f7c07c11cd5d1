//! Single-edge Metropolis sampling of the measure ∝ e^{−βH} on [−π, π]^E,
//! connected correlations with autocorrelation-corrected errors, and
//! exponential decay fits.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};
use crate::geometry::{plaquette_value, LatticeDomain, OneForm};
use crate::model::{hamiltonian, ModelParams};

/// Window constant of the automatic windowing rule W ≥ c·τ(W).
pub const WINDOW_C: f64 = 6.0;

/// Tolerance for the running energy against a full recomputation.
pub const ENERGY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ChainState {
    pub theta: OneForm,
    pub sweeps: u64,
    pub energy: f64,
    /// Half-width w of the uniform proposal δ ~ U(−w, w).
    pub width: f64,
    rng: ChaCha8Rng,
    active: Vec<usize>,
    accepted: u64,
    proposed: u64,
    max_energy_drift: f64,
}

impl ChainState {
    pub fn new(dom: &LatticeDomain, params: &ModelParams, theta: OneForm, seed: u64) -> Result<Self> {
        Self::with_active(dom, params, theta, seed, (0..dom.edge_count()).collect())
    }

    /// Only the edges in `active` are updated; the rest stay frozen.
    pub fn with_active(
        dom: &LatticeDomain,
        params: &ModelParams,
        theta: OneForm,
        seed: u64,
        active: Vec<usize>,
    ) -> Result<Self> {
        dom.check_form(&theta)?;
        if theta.values.iter().any(|x| !(x.abs() <= PI)) {
            return Err(invalid("initial configuration leaves [−π, π]"));
        }
        if active.iter().any(|&e| e >= dom.edge_count()) {
            return Err(invalid("active edge out of range"));
        }
        let energy = hamiltonian(dom, &theta, params.m, None);
        Ok(Self {
            theta,
            sweeps: 0,
            energy,
            width: 1.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            active,
            accepted: 0,
            proposed: 0,
            max_energy_drift: 0.0,
        })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn reset_counters(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
    }

    /// Compares the running energy with a recomputation and resynchronises.
    /// Returns the discrepancy.
    pub fn checkpoint(&mut self, dom: &LatticeDomain, params: &ModelParams) -> f64 {
        let exact = hamiltonian(dom, &self.theta, params.m, None);
        let drift = (exact - self.energy).abs() / exact.abs().max(1.0);
        self.max_energy_drift = self.max_energy_drift.max(drift);
        self.energy = exact;
        drift
    }

    pub fn max_energy_drift(&self) -> f64 {
        self.max_energy_drift
    }
}

/// One pass over the active edges in index order. Proposals leaving
/// [−π, π] are rejected.
pub fn metropolis_sweep(state: &mut ChainState, dom: &LatticeDomain, params: &ModelParams) {
    let beta = params.beta;
    let m = params.m;
    let w = state.width;
    for idx in 0..state.active.len() {
        let e = state.active[idx];
        let delta = state.rng.random_range(-w..w);
        let u: f64 = state.rng.random();
        state.proposed += 1;
        let old = state.theta.values[e];
        let new = old + delta;
        if new.abs() > PI {
            continue;
        }
        let t = &mut state.theta.values;
        let mut dh = m * (old.cos() - new.cos());
        for &(p, sign) in dom.plaquettes_of_edge(e) {
            let before = plaquette_value(&dom.plaquette(p).edges, t);
            dh += before.cos() - (before + sign * delta).cos();
        }
        if dh <= 0.0 || u < (-beta * dh).exp() {
            t[e] = new;
            state.energy += dh;
            state.accepted += 1;
        }
    }
    state.sweeps += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub sweeps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: usize,
    pub seed: u64,
    /// Sweeps between energy checkpoints.
    pub checkpoint_every: u64,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in {
            return Err(invalid(format!(
                "sweeps ({}) must exceed burn_in ({})",
                self.sweeps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        if self.chains < 2 {
            return Err(invalid("at least two chains are needed for the between-chain diagnostic"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every must be at least 1"));
        }
        Ok(())
    }
}

/// Seed of chain `k` derived from the run seed.
pub fn chain_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1))
}

/// Sweeps of burn-in with the proposal width nudged every 20 sweeps toward
/// an acceptance rate in [0.3, 0.6]. The width is frozen afterwards.
pub fn burn_in(state: &mut ChainState, dom: &LatticeDomain, params: &ModelParams, sweeps: u64) {
    const BATCH: u64 = 20;
    let mut done = 0;
    while done < sweeps {
        state.reset_counters();
        let batch = BATCH.min(sweeps - done);
        for _ in 0..batch {
            metropolis_sweep(state, dom, params);
        }
        done += batch;
        let rate = state.acceptance_rate();
        if rate < 0.3 {
            state.width *= 0.8;
        } else if rate > 0.6 {
            state.width = (state.width * 1.25).min(2.0 * PI);
        }
    }
    state.reset_counters();
}

/// Edge pairs whose correlations are averaged into one estimate, typically
/// translates of a single pair.
pub type PairGroup = Vec<(usize, usize)>;

/// Recorded series for one chain.
#[derive(Debug, Clone)]
pub struct ChainRecord {
    /// Per group, the group-averaged product θ_xθ_y at each kept sweep.
    pub products: Vec<Vec<f64>>,
    /// Σ θ_e over kept sweeps, for every edge.
    pub edge_sums: Vec<f64>,
    pub kept: usize,
    pub acceptance: f64,
    pub width: f64,
    pub max_energy_drift: f64,
}

pub fn run_chain(
    dom: &LatticeDomain,
    params: &ModelParams,
    settings: &RunSettings,
    groups: &[PairGroup],
    seed: u64,
) -> Result<ChainRecord> {
    let mut state = ChainState::new(dom, params, OneForm::zeros(dom), seed)?;
    burn_in(&mut state, dom, params, settings.burn_in);
    let measured = settings.sweeps - settings.burn_in;
    let kept = (measured / settings.thin) as usize;
    let mut products = vec![Vec::with_capacity(kept); groups.len()];
    let mut edge_sums = vec![0.0; dom.edge_count()];
    for i in 1..=measured {
        metropolis_sweep(&mut state, dom, params);
        if i % settings.thin == 0 {
            let t = &state.theta.values;
            for (series, g) in products.iter_mut().zip(groups) {
                series.push(g.iter().map(|&(x, y)| t[x] * t[y]).sum::<f64>() / g.len() as f64);
            }
            for (s, v) in edge_sums.iter_mut().zip(t) {
                *s += v;
            }
        }
        if i % settings.checkpoint_every == 0 {
            state.checkpoint(dom, params);
        }
    }
    state.checkpoint(dom, params);
    Ok(ChainRecord {
        products,
        edge_sums,
        kept,
        acceptance: state.acceptance_rate(),
        width: state.width,
        max_energy_drift: state.max_energy_drift(),
    })
}

/// Integrated autocorrelation time τ = 1 + 2 Σ_{t=1}^{W} ρ(t), with the
/// smallest window W ≥ c·τ(W).
pub fn integrated_autocorrelation(series: &[f64], c: f64) -> (f64, usize) {
    let n = series.len();
    if n < 2 {
        return (1.0, 0);
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0: f64 = centred.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return (1.0, 0);
    }
    let mut tau = 1.0;
    for w in 1..n {
        let ct: f64 = centred[..n - w].iter().zip(&centred[w..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        tau += 2.0 * ct / c0;
        if w as f64 >= c * tau {
            return (tau.max(1.0), w);
        }
    }
    (tau.max(1.0), n - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    /// First pair of the group.
    pub x: usize,
    pub y: usize,
    /// Number of pairs averaged.
    pub pairs: usize,
    pub dist: i64,
    /// E[θ_xθ_y] − E[θ_x]E[θ_y], averaged over the group.
    pub corr: f64,
    pub stderr: f64,
    pub ess: f64,
    pub per_chain: Vec<f64>,
    pub per_chain_stderr: Vec<f64>,
    /// Gelman–Rubin R̂ of the product series.
    pub rhat: f64,
    /// Some pair of chains disagrees by more than 5 combined stderr.
    pub disagreement: bool,
}

struct ChainEstimate {
    corr: f64,
    stderr: f64,
    ess: f64,
    mean: f64,
    var: f64,
    n: usize,
}

// The measure is even in θ, so E[θ_e] = 0 and the influence function of the
// connected correlation at the true means is the raw product series.
fn chain_estimate(series: &[f64], group: &PairGroup, edge_sums: &[f64], kept: usize) -> ChainEstimate {
    let n = series.len();
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let k = kept as f64;
    let disconnected = group.iter().map(|&(x, y)| edge_sums[x] / k * edge_sums[y] / k).sum::<f64>() / group.len() as f64;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
    let (tau, _) = integrated_autocorrelation(series, WINDOW_C);
    let ess = (nf / tau).min(nf);
    ChainEstimate { corr: mean - disconnected, stderr: (var / ess).sqrt(), ess, mean, var, n }
}

fn gelman_rubin(chains: &[ChainEstimate]) -> f64 {
    let m = chains.len() as f64;
    let n = chains.iter().map(|c| c.n).min().unwrap_or(0) as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let grand = chains.iter().map(|c| c.mean).sum::<f64>() / m;
    let b = n / (m - 1.0) * chains.iter().map(|c| (c.mean - grand).powi(2)).sum::<f64>();
    let w = chains.iter().map(|c| c.var).sum::<f64>() / m;
    if w == 0.0 {
        return 1.0;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Pools per-chain estimates. Symmetric in the order of `records` up to
/// floating-point summation order.
pub fn combine(dom: &LatticeDomain, groups: &[PairGroup], records: &[ChainRecord]) -> Vec<CorrelationEstimate> {
    groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let per: Vec<ChainEstimate> =
                records.iter().map(|r| chain_estimate(&r.products[k], g, &r.edge_sums, r.kept)).collect();
            let m = per.len() as f64;
            let corr = per.iter().map(|c| c.corr).sum::<f64>() / m;
            let stderr = per.iter().map(|c| c.stderr.powi(2)).sum::<f64>().sqrt() / m;
            let ess = per.iter().map(|c| c.ess).sum();
            let mut disagreement = false;
            for i in 0..per.len() {
                for j in (i + 1)..per.len() {
                    let se = (per[i].stderr.powi(2) + per[j].stderr.powi(2)).sqrt();
                    if (per[i].corr - per[j].corr).abs() > 5.0 * se {
                        disagreement = true;
                    }
                }
            }
            let (x, y) = g[0];
            CorrelationEstimate {
                x,
                y,
                pairs: g.len(),
                dist: dom.graph_distance(x, y),
                corr,
                stderr,
                ess,
                per_chain: per.iter().map(|c| c.corr).collect(),
                per_chain_stderr: per.iter().map(|c| c.stderr).collect(),
                rhat: gelman_rubin(&per),
                disagreement,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub seed: u64,
    pub acceptance: f64,
    pub width: f64,
    pub max_energy_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub estimates: Vec<CorrelationEstimate>,
    pub chains: Vec<ChainDiagnostics>,
    /// False when some pair shows a between-chain disagreement or the energy
    /// bookkeeping drifted past tolerance.
    pub converged: bool,
}

/// One estimate per pair.
pub fn run_experiment(
    dom: &LatticeDomain,
    params: &ModelParams,
    settings: &RunSettings,
    pairs: &[(usize, usize)],
) -> Result<Experiment> {
    let groups: Vec<PairGroup> = pairs.iter().map(|&p| vec![p]).collect();
    run_grouped_experiment(dom, params, settings, &groups)
}

/// One estimate per group. Independent chains run in parallel and are
/// merged in chain order.
pub fn run_grouped_experiment(
    dom: &LatticeDomain,
    params: &ModelParams,
    settings: &RunSettings,
    groups: &[PairGroup],
) -> Result<Experiment> {
    settings.validate()?;
    for g in groups {
        if g.is_empty() {
            return Err(invalid("empty pair group"));
        }
        for &(x, y) in g {
            if x >= dom.edge_count() || y >= dom.edge_count() {
                return Err(invalid(format!("pair ({x}, {y}) out of range")));
            }
        }
    }
    let seeds: Vec<u64> = (0..settings.chains).map(|k| chain_seed(settings.seed, k)).collect();
    let records: Vec<ChainRecord> = seeds
        .par_iter()
        .map(|&s| run_chain(dom, params, settings, groups, s))
        .collect::<Result<_>>()?;
    let estimates = combine(dom, groups, &records);
    let chains: Vec<ChainDiagnostics> = records
        .iter()
        .zip(&seeds)
        .map(|(r, &seed)| ChainDiagnostics {
            seed,
            acceptance: r.acceptance,
            width: r.width,
            max_energy_drift: r.max_energy_drift,
        })
        .collect();
    let converged =
        estimates.iter().all(|e| !e.disagreement) && chains.iter().all(|c| c.max_energy_drift <= ENERGY_TOL);
    Ok(Experiment { estimates, chains, converged })
}

/// Translates of (x, y) by whole lattice steps along `axis`, kept while both
/// edges stay inside the domain and at most `reach` steps each way.
pub fn translated_group(dom: &LatticeDomain, x: usize, y: usize, axis: usize, reach: i64) -> Result<PairGroup> {
    if axis >= dom.dim() {
        return Err(invalid(format!("axis {axis} out of range")));
    }
    let ex = dom.edge(x);
    let ey = dom.edge(y);
    let mut out = Vec::new();
    for s in -reach..=reach {
        let shift = |c: &[i64]| {
            let mut c = c.to_vec();
            c[axis] += s;
            c
        };
        if let (Some(a), Some(b)) = (dom.edge_index(&shift(&ex.base), ex.dir), dom.edge_index(&shift(&ey.base), ey.dir)) {
            out.push((a, b));
        }
    }
    // Put the untranslated pair first so the estimate is labelled by it.
    out.sort_by_key(|&p| p != (x, y));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// c in |corr| ≈ C e^{−c·dist}.
    pub rate: f64,
    pub prefactor: f64,
    pub rate_stderr: f64,
    pub rate_ci_lo: f64,
    pub rate_ci_hi: f64,
    pub used: Vec<i64>,
    /// Distances whose estimate is within 3 stderr of zero.
    pub excluded: Vec<i64>,
}

/// Weighted least squares of log|corr| on dist, weights from the delta-method
/// variance (stderr/|corr|)². Needs four usable distances.
pub fn decay_fit(estimates: &[CorrelationEstimate]) -> Result<DecayFit> {
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    let mut pts = Vec::new();
    for e in estimates {
        if e.stderr > 0.0 && e.corr.abs() > 3.0 * e.stderr {
            used.push(e.dist);
            let sd = e.stderr / e.corr.abs();
            pts.push((e.dist as f64, e.corr.abs().ln(), 1.0 / (sd * sd)));
        } else {
            excluded.push(e.dist);
        }
    }
    let distinct: std::collections::BTreeSet<i64> = used.iter().copied().collect();
    if distinct.len() < 4 {
        return Err(invalid(format!("too few usable points: {} distances above 3 stderr", distinct.len())));
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let xm = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let ym = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - xm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - xm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let dof = pts.len() as f64 - 2.0;
    let chi2: f64 = pts.iter().map(|p| p.2 * (p.1 - intercept - slope * p.0).powi(2)).sum();
    // Inflate by the reduced χ² when the points scatter more than their errors.
    let scale = (chi2 / dof).max(1.0);
    let se = (scale / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| invalid(e.to_string()))?.inverse_cdf(0.975);
    let rate = -slope;
    Ok(DecayFit {
        rate,
        prefactor: intercept.exp(),
        rate_stderr: se,
        rate_ci_lo: rate - t * se,
        rate_ci_hi: rate + t * se,
        used,
        excluded,
    })
}

/// Estimates built from exact values with a nominal error, for feeding
/// noiseless covariance scans into [`decay_fit`].
pub fn exact_estimates(values: &[(i64, f64)], rel_err: f64) -> Vec<CorrelationEstimate> {
    values
        .iter()
        .map(|&(d, c)| CorrelationEstimate {
            x: 0,
            y: 0,
            pairs: 1,
            dist: d,
            corr: c,
            stderr: rel_err * c.abs(),
            ess: f64::INFINITY,
            per_chain: vec![c],
            per_chain_stderr: vec![rel_err * c.abs()],
            rhat: 1.0,
            disagreement: false,
        })
        .collect()
}
