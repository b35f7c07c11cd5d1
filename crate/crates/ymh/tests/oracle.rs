use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ymh::error::Error;
use ymh::geometry::*;
use ymh::model::*;
use ymh::oracle::*;
use ymh::proca::*;
use ymh::quadrature::{composite_gauss_legendre, gauss_hermite, tensor_integrate};

fn params(d: usize, n: i64, l: i64, beta: f64, m: f64) -> ModelParams {
    ModelParams::new(d, n, l, beta, m).unwrap()
}

fn plaquette_system(dom: &LatticeDomain) -> EdgeSystem<'_> {
    EdgeSystem::induced(dom, &dom.plaquette(0).edges).unwrap()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn hermite_rule_reproduces_gaussian_moments() {
    let (x, w) = gauss_hermite(10);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    let mut double_factorial = 1.0;
    for k in 0..10usize {
        let moment: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * k as i32)).sum();
        assert!((moment - double_factorial).abs() < 1e-10 * double_factorial, "E Z^{} = {moment}", 2 * k);
        double_factorial *= (2 * k + 1) as f64;
        let odd: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * k as i32 + 1)).sum();
        assert!(odd.abs() < 1e-10 * double_factorial);
    }
}

#[test]
fn bessel_series_matches_integral_form() {
    // I₀(x) = (1/π)∫₀^π e^{x cos t} dt; the periodic trapezoid rule is spectrally accurate.
    for x in [0.0, 0.5, 3.0, 20.0, 80.0] {
        let n = 4000;
        let h = PI / n as f64;
        let s: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (x * (i as f64 * h).cos()).exp()
            })
            .sum::<f64>()
            * h
            / PI;
        let series = bessel_i0_series(x);
        assert!((series - s).abs() < 1e-13 * s, "x = {x}: {series} vs {s}");
    }
}

#[test]
fn single_edge_matches_bessel_value() {
    let dom = build_domain(2, 1).unwrap();
    let sys = EdgeSystem::induced(&dom, &[0]).unwrap();
    assert!(sys.plaquettes().is_empty());
    for (beta, m) in [(3.0, 0.7), (0.5, 1.0), (40.0, 1.0)] {
        let p = params(2, 1, 2, beta, m);
        let got = direct_log_z(&sys, &p, None, &IntegrationPlan::quadrature(256)).unwrap();
        let a = beta * m;
        let want = (2.0 * PI).ln() - a + bessel_i0_series(a).ln();
        assert!((got.value - want).abs() < 1e-8, "β = {beta}: {} vs {want}", got.value);
    }
}

#[test]
fn zero_coupling_gives_the_volume() {
    let dom = build_domain(2, 1).unwrap();
    let p = params(2, 1, 2, 0.0, 1.0);
    let eight: Vec<usize> = (0..8).collect();
    let sys = EdgeSystem::induced(&dom, &eight).unwrap();
    let q = direct_log_z(&sys, &p, None, &IntegrationPlan::quadrature(4)).unwrap();
    assert!((q.value - 8.0 * (2.0 * PI).ln()).abs() < 1e-10);
    let full = EdgeSystem::full(&dom);
    let mc = direct_log_z(&full, &p, None, &IntegrationPlan::monte_carlo(MIN_MC_SAMPLES, 3)).unwrap();
    assert!((mc.value - 12.0 * (2.0 * PI).ln()).abs() < 1e-10);
    assert_eq!(mc.stderr, 0.0);
}

#[test]
fn quadrature_error_estimate_covers_refinement() {
    let dom = build_domain(2, 1).unwrap();
    let sys = plaquette_system(&dom);
    let p = params(2, 1, 2, 2.0, 1.0);
    let q16 = direct_log_z(&sys, &p, None, &IntegrationPlan::quadrature(16)).unwrap();
    let q32 = direct_log_z(&sys, &p, None, &IntegrationPlan::quadrature(32)).unwrap();
    assert!((q32.value - q16.value).abs() <= q16.delta, "{q16:?} vs {q32:?}");
    assert!(q32.delta < q16.delta);
}

#[test]
fn source_derivative_is_the_field_expectation() {
    let dom = build_domain(2, 1).unwrap();
    let sys = plaquette_system(&dom);
    let e = dom.plaquette(0).edges;
    let p = params(2, 1, 2, 1.5, 1.0);
    let plan = IntegrationPlan::quadrature(24);
    let h = 1e-4;
    let at = |tx: f64| {
        let s = SourceTerm::new(e[0], e[1], tx, 0.3).unwrap();
        direct_log_z(&sys, &p, Some(&s), &plan).unwrap().value
    };
    let fd = (at(0.2 + h) - at(0.2 - h)) / (2.0 * h);
    let s = SourceTerm::new(e[0], e[1], 0.2, 0.3).unwrap();
    let mean = quadrature_expectation(&sys, &p, Some(&s), 24, |t| t[0]).unwrap();
    assert!((fd + p.beta * mean).abs() < 1e-6, "{fd} vs {}", -p.beta * mean);
}

#[test]
fn exact_gaussian_normalizers() {
    let dom = build_domain(2, 1).unwrap();
    let (beta, m) = (3.0, 0.8);
    let one = EdgeSystem::induced(&dom, &[5]).unwrap().gaussian(beta, m).unwrap();
    assert!((gaussian_log_z_exact(&one) - 0.5 * (2.0 * PI / (beta * m)).ln()).abs() < 1e-13);

    // four edges in no common plaquette: a product of one-edge factors
    let loose = [0, 2, 9, 11];
    let sys = EdgeSystem::induced(&dom, &loose).unwrap();
    if sys.plaquettes().is_empty() {
        let op = sys.gaussian(beta, m).unwrap();
        assert!((gaussian_log_z_exact(&op) - 2.0 * (2.0 * PI / (beta * m)).ln()).abs() < 1e-12);
    }

    let op = plaquette_system(&dom).gaussian(beta, m).unwrap();
    let prec = op.precision().clone();
    let sd = prec.clone().try_inverse().unwrap().diagonal().iter().cloned().fold(0.0, f64::max).sqrt();
    let r = 12.0 * sd;
    let (x, w) = composite_gauss_legendre(8, 12, -r, r);
    let z = tensor_integrate(&x, &w, 4, |t| {
        let v = nalgebra::DVector::from_column_slice(t);
        (-0.5 * v.dot(&(&prec * &v))).exp()
    });
    assert!((gaussian_log_z_exact(&op) - z.ln()).abs() < 1e-6);
}

#[test]
fn sampling_error_bars_are_honest() {
    let dom = build_domain(2, 1).unwrap();
    let sys = plaquette_system(&dom);
    let p = params(2, 1, 2, 2.0, 1.0);
    let runs: Vec<Estimate> =
        (0..20).map(|s| direct_log_z(&sys, &p, None, &IntegrationPlan::monte_carlo(MIN_MC_SAMPLES, s)).unwrap()).collect();
    let values: Vec<f64> = runs.iter().map(|e| e.value).collect();
    let (mean, spread) = mean_sd(&values);
    let claimed = runs.iter().map(|e| e.stderr).sum::<f64>() / runs.len() as f64;
    assert!(spread <= 1.5 * claimed && spread >= 0.5 * claimed, "spread {spread}, stderr {claimed}");
    let q = direct_log_z(&sys, &p, None, &IntegrationPlan::quadrature(32)).unwrap();
    assert!((mean - q.value).abs() < 5.0 * claimed / 20f64.sqrt() + q.delta, "{mean} vs {q:?}");
    for e in &runs {
        assert!((e.value - q.value).abs() < 5.0 * e.stderr + q.delta);
    }
}

#[test]
fn mixed_derivative_matches_quadrature_covariance() {
    let dom = build_domain(2, 1).unwrap();
    let sys = plaquette_system(&dom);
    let e = dom.plaquette(0).edges;
    let p = params(2, 1, 2, 2.0, 1.0);
    let cov = quadrature_expectation(&sys, &p, None, 24, |t| t[0] * t[2]).unwrap()
        - quadrature_expectation(&sys, &p, None, 24, |t| t[0]).unwrap()
            * quadrature_expectation(&sys, &p, None, 24, |t| t[2]).unwrap();
    let est = mixed_source_derivative(&sys, &p, e[0], e[2], 1e-2, &IntegrationPlan::monte_carlo(400_000, 11)).unwrap();
    assert!(est.stderr > 0.0);
    assert!((est.value - cov).abs() < 5.0 * est.stderr + 1e-4 * cov.abs(), "{est:?} vs {cov}");
}

#[test]
fn plans_are_guarded() {
    let dom = build_domain(2, 1).unwrap();
    let full = EdgeSystem::full(&dom);
    let p = params(2, 1, 2, 2.0, 1.0);
    assert!(matches!(direct_log_z(&full, &p, None, &IntegrationPlan::quadrature(8)), Err(Error::Guard(_))));
    assert!(matches!(
        direct_log_z(&full, &p, None, &IntegrationPlan::monte_carlo(10, 0)),
        Err(Error::InvalidArgument(_))
    ));
    let big = build_domain(2, 2).unwrap();
    assert!(matches!(
        direct_log_z(&EdgeSystem::full(&big), &p, None, &IntegrationPlan::monte_carlo(MIN_MC_SAMPLES, 0)),
        Err(Error::Guard(_))
    ));
}

fn four_blocks() -> (LatticeDomain, CoarseBlocking) {
    let dom = build_domain(2, 1).unwrap();
    let bl = coarse_structure(&dom, 2).unwrap();
    assert_eq!(bl.block_count(), 4);
    (dom, bl)
}

#[test]
fn block_factor_approaches_one_from_bounded_values() {
    let (dom, bl) = four_blocks();
    let good = BlockClassification::all_good(&bl);
    let plan = IntegrationPlan::quadrature(12);
    let mut gaps = Vec::new();
    for beta in [1e3, 1e4, 1e5, 1e6] {
        let p = params(2, 1, 2, beta, 1.0);
        for b in 0..bl.block_count() {
            let f = xi_block_factor(&dom, &bl, &good, b, &p, None, XiMode::Zero, &plan).unwrap();
            let cap = 2f64.powi(f.interior_edges as i32);
            assert!(f.value.value <= cap && f.value.value >= 1.0 / cap, "β = {beta}: {f:?}");
            if b == 0 {
                gaps.push((f.value.value - 1.0).abs());
            }
        }
    }
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[3] < 1e-4);
}

#[test]
fn k1_of_the_empty_set_is_one_without_bad_blocks() {
    let (dom, bl) = four_blocks();
    let good = BlockClassification::all_good(&bl);
    let p = params(2, 1, 2, 50.0, 1.0);
    let plan = IntegrationPlan::quadrature(8);
    for b in 0..bl.block_count() {
        let zero = xi_block_factor(&dom, &bl, &good, b, &p, None, XiMode::Zero, &plan).unwrap();
        let plus = xi_block_factor(&dom, &bl, &good, b, &p, None, XiMode::ZeroPlus, &plan).unwrap();
        assert_eq!(zero.value.value, plus.value.value);
    }
    for w in [BadSetWeight::Rho, BadSetWeight::RhoK1Empty] {
        let r = rho_b_integral(&dom, &bl, &BTreeSet::new(), &p, None, w, &plan).unwrap();
        assert_eq!(r.value.value, 1.0);
    }
}

/// Ξ(s) from independent joint Gaussian draws: e^{−βV(θ; σ)} χ averaged over
/// the family's own sampler, with no unit splitting.
fn xi_by_joint_sampling(dom: &LatticeDomain, fam: &ProcaFamily, s: &[f64], p: &ModelParams, n: usize) -> (f64, f64) {
    let op = fam.operator(s).unwrap();
    let sigma = fam.plaquette_weights(s);
    let free = op.free_edges().to_vec();
    let t = p.threshold();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let th = op.sample_with(&mut rng).values;
            let chi: f64 = free.iter().map(|&e| chi_scaled(th[e], t)).product();
            let mut v: f64 = free.iter().map(|&e| p.m * g(th[e])).sum();
            for &(q, w) in &sigma {
                let e = dom.plaquette(q).edges;
                v += w * g(th[e[0]] + th[e[1]] - th[e[2]] - th[e[3]]);
            }
            (-p.beta * v).exp() * chi
        })
        .collect();
    let (m, sd) = mean_sd(&vals);
    (m, sd / (n as f64).sqrt())
}

#[test]
fn xi_factorization_matches_joint_sampling() {
    let (dom, bl) = four_blocks();
    let p = params(2, 1, 2, 6.0, 1.0);
    let fam = ProcaFamily::new(&dom, &bl, &BlockClassification::all_good(&bl), &p, None, InterpolationMode::Standard).unwrap();
    let faces = fam.faces().len();
    for s in [vec![0.0; faces], vec![1.0; faces], (0..faces).map(|i| 0.25 * (i + 1) as f64).collect()] {
        let (want, err) = xi_by_joint_sampling(&dom, &fam, &s, &p, 200_000);
        let got = xi(&dom, &fam, &s, &p, None, &IntegrationPlan::quadrature(10).with_seed(5)).unwrap();
        let v = got.log.value.exp();
        let tol = 5.0 * err + v * (got.log.error() + 1e-12);
        assert!((v - want).abs() < tol, "s = {s:?}: {v} vs {want} ± {err}");
    }
}

#[test]
fn bad_set_density_falls_with_beta_and_fits_the_bound() {
    let (dom, bl) = four_blocks();
    let bad: BTreeSet<usize> = [0].into();
    let mut points = Vec::new();
    let mut last = f64::INFINITY;
    for (i, beta) in [4.0, 8.0, 16.0, 32.0].into_iter().enumerate() {
        let p = params(2, 1, 2, beta, 1.0);
        let plan = IntegrationPlan { nodes: 8, ..IntegrationPlan::monte_carlo(2_000, 40 + i as u64) };
        let r = rho_b_integral(&dom, &bl, &bad, &p, None, BadSetWeight::Rho, &plan).unwrap();
        assert!(r.value.value > 0.0 && r.value.stderr < 0.2 * r.value.value, "{r:?}");
        assert!(r.value.value + 3.0 * r.value.stderr < last, "β = {beta}");
        last = r.value.value;
        points.push(BadSetPoint { beta, threshold: p.threshold(), b1: r.b1.len(), bad: 1, value: r.value.value });
    }
    let fit = fit_bad_set_bound(&points).unwrap();
    assert!(fit.c_decay > 0.0, "{fit:?}");
    for q in &points {
        let bound = fit.c_growth * q.b1 as f64 * q.beta.ln() - fit.c_decay * q.beta * q.threshold.powi(2) + fit.max_residual;
        assert!(q.value.ln() <= bound + 1e-9);
    }
}

#[test]
fn decomposition_closes_on_four_blocks() {
    let (dom, bl) = four_blocks();
    let p = params(2, 1, 2, 1e4, 1.0);
    let plan = IntegrationPlan { nodes: 8, ..IntegrationPlan::monte_carlo(200_000, 7) };
    let r = decomposition_check(&dom, &bl, &p, None, &plan, None).unwrap();
    assert!(r.passed, "discrepancy {} budget {}", r.discrepancy, r.budget);
    assert!(r.budget < 1e-5);
    assert_eq!(r.schema_version, REPORT_SCHEMA_VERSION);
    let table = r.weight_table().unwrap();
    assert!(!r.weights.is_empty());
    let _ = table;
}

#[test]
fn decomposition_on_one_block_has_trivial_polymers() {
    let dom = build_domain(2, 1).unwrap();
    let bl = coarse_structure(&dom, 4).unwrap();
    assert_eq!(bl.block_count(), 1);
    let p = params(2, 1, 4, 1e4, 1.0);
    let plan = IntegrationPlan { nodes: 8, ..IntegrationPlan::monte_carlo(200_000, 7) };
    let r = decomposition_check(&dom, &bl, &p, None, &plan, None).unwrap();
    assert!(r.passed, "discrepancy {} budget {}", r.discrepancy, r.budget);
    assert!((r.polymer_sum.value - 1.0).abs() < 1e-12);
}

#[test]
fn truncated_face_sets_drop_only_pair_terms() {
    let (dom, bl) = four_blocks();
    let p = params(2, 1, 2, 1e4, 1.0);
    let plan = IntegrationPlan { nodes: 8, ..IntegrationPlan::monte_carlo(200_000, 7) };
    let full = decomposition_check(&dom, &bl, &p, None, &plan, None).unwrap();
    let one = decomposition_check(&dom, &bl, &p, None, &plan, Some(1)).unwrap();
    assert_eq!(one.max_face_set, 1);
    assert!(one.k1.iter().all(|row| row.faces.len() <= 1));
    let dropped: f64 = full.k1.iter().filter(|row| row.faces.len() > 1).map(|row| row.value.value).sum();
    let shift = full.ungrouped_sum - one.ungrouped_sum;
    assert!((shift - dropped).abs() < 1e-12, "{shift} vs {dropped}");
}

#[test]
fn decomposition_guards() {
    let (dom, bl) = four_blocks();
    let plan = IntegrationPlan { nodes: 8, ..IntegrationPlan::monte_carlo(200_000, 7) };
    let low = params(2, 1, 2, 2.0, 1.0);
    assert!(matches!(decomposition_check(&dom, &bl, &low, None, &plan, None), Err(Error::Guard(_))));
    let dom3 = build_domain(3, 1).unwrap();
    let bl3 = coarse_structure(&dom3, 2).unwrap();
    let p3 = params(3, 1, 2, 1e4, 1.0);
    assert!(matches!(decomposition_check(&dom3, &bl3, &p3, None, &plan, None), Err(Error::Guard(_))));
}
