//! Polynomials in Gaussian vectors: Wick moments and the covariance
//! interpolation identity ∂ₜ E[F(Xₜ)] = ½ Σ_{ij} ∂ₜΣₜ(i,j) E[∂ᵢ∂ⱼF(Xₜ)].

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{guard, Result};

pub const MAX_WICK_DIM: usize = 6;

/// Σ c · Π x_{i} with each monomial stored as its sorted index list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Polynomial {
    pub terms: BTreeMap<Vec<usize>, f64>,
}

impl Polynomial {
    pub fn add(&mut self, mut mono: Vec<usize>, c: f64) {
        mono.sort_unstable();
        *self.terms.entry(mono).or_insert(0.0) += c;
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Vec::len).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.iter().map(|&i| x[i]).product::<f64>()).sum()
    }

    /// ∂F/∂x_i.
    pub fn derivative(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::default();
        for (mono, &c) in &self.terms {
            let power = mono.iter().filter(|&&k| k == i).count();
            if power == 0 {
                continue;
            }
            let mut rest = mono.clone();
            let at = rest.iter().position(|&k| k == i).unwrap();
            rest.remove(at);
            out.add(rest, c * power as f64);
        }
        out
    }

    /// Every monomial of degree ≤ `max_degree` with a coefficient in [−1, 1].
    pub fn random<R: Rng + ?Sized>(dim: usize, max_degree: usize, rng: &mut R) -> Polynomial {
        let mut out = Polynomial::default();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(mono) = stack.pop() {
            out.add(mono.clone(), rng.random_range(-1.0..=1.0));
            if mono.len() < max_degree {
                let start = mono.last().copied().unwrap_or(0);
                for i in start..dim {
                    let mut next = mono.clone();
                    next.push(i);
                    stack.push(next);
                }
            }
        }
        out
    }
}

/// E[Π_k x_{i_k}] for a centred Gaussian with covariance Σ: the sum over
/// perfect matchings of Π Σ(pair).
pub fn wick_moment(indices: &[usize], sigma: &DMatrix<f64>) -> f64 {
    if indices.is_empty() {
        return 1.0;
    }
    if indices.len() % 2 == 1 {
        return 0.0;
    }
    let first = indices[0];
    let rest = &indices[1..];
    let mut total = 0.0;
    for j in 0..rest.len() {
        let mut others = rest.to_vec();
        let partner = others.remove(j);
        total += sigma[(first, partner)] * wick_moment(&others, sigma);
    }
    total
}

pub fn gaussian_expectation(f: &Polynomial, sigma: &DMatrix<f64>) -> f64 {
    f.terms.iter().map(|(m, c)| c * wick_moment(m, sigma)).sum()
}

/// A random SPD matrix A Aᵀ + δI.
pub fn random_spd<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..=1.0));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCheck {
    /// d/dt E[F(Xₜ)] at t = ½ by central difference.
    pub lhs: f64,
    /// ½ Σ ∂ₜΣₜ(i,j) E[∂ᵢ∂ⱼF(X_½)].
    pub rhs: f64,
    pub deviation: f64,
}

/// Both sides of the interpolation identity for Σₜ = (1 − t)Σ₀ + tΣ₁.
pub fn interpolation_identity(f: &Polynomial, sigma0: &DMatrix<f64>, sigma1: &DMatrix<f64>) -> InterpolationCheck {
    let at = |t: f64| sigma0 * (1.0 - t) + sigma1 * t;
    let h = 1e-3;
    let lhs = (gaussian_expectation(f, &at(0.5 + h)) - gaussian_expectation(f, &at(0.5 - h))) / (2.0 * h);
    let mid = at(0.5);
    let dsigma = sigma1 - sigma0;
    let dim = sigma0.nrows();
    let mut rhs = 0.0;
    for i in 0..dim {
        let fi = f.derivative(i);
        for j in 0..dim {
            rhs += 0.5 * dsigma[(i, j)] * gaussian_expectation(&fi.derivative(j), &mid);
        }
    }
    InterpolationCheck { lhs, rhs, deviation: (lhs - rhs).abs() }
}

/// Random SPD endpoints and a random polynomial of degree ≤ 4.
pub fn interpolation_identity_check(dim: usize, seed: u64) -> Result<InterpolationCheck> {
    if dim == 0 || dim > MAX_WICK_DIM {
        return Err(guard(format!("dimension {dim} outside 1..={MAX_WICK_DIM}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = random_spd(dim, &mut rng);
    let s1 = random_spd(dim, &mut rng);
    let f = Polynomial::random(dim, 4, &mut rng);
    Ok(interpolation_identity(&f, &s0, &s1))
}
