//! Gauss–Legendre rules and tensor-product integration over small cubes.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of the n-point Gauss–Legendre rule on [−1, 1]
/// (Golub–Welsch: eigen-decomposition of the Jacobi matrix).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], 2.0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// The n-point rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    (x.iter().map(|t| mid + half * t).collect(), w.iter().map(|v| v * half).collect())
}

/// Composite rule: `panels` equal panels on [a, b], `n` nodes each.
pub fn composite_gauss_legendre(n: usize, panels: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let h = (b - a) / panels as f64;
    let mut xs = Vec::with_capacity(n * panels);
    let mut ws = Vec::with_capacity(n * panels);
    for k in 0..panels {
        let (x, w) = gauss_legendre_on(n, a + k as f64 * h, a + (k + 1) as f64 * h);
        xs.extend(x);
        ws.extend(w);
    }
    (xs, ws)
}

/// Σ over the tensor grid of a 1-D rule in `dim` dimensions.
pub fn tensor_integrate<F: FnMut(&[f64]) -> f64>(nodes: &[f64], weights: &[f64], dim: usize, mut f: F) -> f64 {
    if dim == 0 {
        return f(&[]);
    }
    let n = nodes.len();
    let mut idx = vec![0usize; dim];
    let mut point = vec![nodes[0]; dim];
    let mut total = 0.0;
    loop {
        let w: f64 = idx.iter().map(|&i| weights[i]).product();
        total += w * f(&point);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < n {
                point[k] = nodes[idx[k]];
                break;
            }
            idx[k] = 0;
            point[k] = nodes[0];
            k += 1;
            if k == dim {
                return total;
            }
        }
    }
}

/// Probabilists' Gauss–Hermite rule: Σ wᵢ f(xᵢ) ≈ E f(Z) for Z ~ N(0, 1).
/// The weights sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}
