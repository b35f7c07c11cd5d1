use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ymh::geometry::*;
use ymh::model::*;

/// Independent evaluation of H straight from coordinates: walk every vertex and
/// every plane, find the four edges by lookup, and sum.
fn reference_energy(dom: &LatticeDomain, theta: &[f64], m: f64) -> (f64, f64) {
    let d = dom.dim();
    let mut cos_part = 0.0;
    let mut quad_part = 0.0;
    for v in 0..dom.vertex_count() {
        let x = dom.vertex(v);
        for i in 0..d {
            for j in (i + 1)..d {
                let mut xi = x.clone();
                xi[i] += 1;
                let mut xj = x.clone();
                xj[j] += 1;
                let mut xij = xi.clone();
                xij[j] += 1;
                let (Some(a), Some(b), Some(c), Some(e)) = (
                    dom.edge_between(&x, &xi),
                    dom.edge_between(&xi, &xij),
                    dom.edge_between(&xj, &xij),
                    dom.edge_between(&x, &xj),
                ) else {
                    continue;
                };
                let circ = theta[a] + theta[b] - theta[c] - theta[e];
                cos_part += 1.0 - circ.cos();
                quad_part += 0.5 * circ * circ;
            }
        }
    }
    for &t in theta {
        cos_part += m * (1.0 - t.cos());
        quad_part += 0.5 * m * t * t;
    }
    (cos_part, quad_part)
}

#[test]
fn hamiltonian_examples() {
    let dom = build_domain(2, 2).unwrap();
    let m = 0.7;
    assert_eq!(hamiltonian(&dom, &OneForm::zeros(&dom), m, None), 0.0);
    let mut theta = OneForm::zeros(&dom);
    theta.values[dom.edge_index(&[0, 0], 0).unwrap()] = PI;
    let h = hamiltonian(&dom, &theta, m, None);
    assert!((h - (4.0 + 2.0 * m)).abs() < 1e-14);
}

#[test]
fn proca_examples() {
    let dom = build_domain(2, 2).unwrap();
    let m = 0.3;
    assert_eq!(proca_action(&dom, &OneForm::zeros(&dom), m), 0.0);
    let mut theta = OneForm::zeros(&dom);
    theta.values[dom.edge_index(&[0, 0], 0).unwrap()] = 1.0;
    assert!((proca_action(&dom, &theta, m) - (1.0 + m / 2.0)).abs() < 1e-15);
}

#[test]
fn matches_reference_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (d, n) in [(2, 3), (3, 2)] {
        let dom = build_domain(d, n).unwrap();
        for _ in 0..20 {
            let theta = uniform_config(&dom, &mut rng);
            let m = rng.random_range(0.1..3.0);
            let (h_ref, s_ref) = reference_energy(&dom, &theta.values, m);
            let h = hamiltonian(&dom, &theta, m, None);
            let s = proca_action(&dom, &theta, m);
            assert!((h - h_ref).abs() <= 1e-12 * h_ref.abs());
            assert!((s - s_ref).abs() <= 1e-12 * s_ref.abs());
        }
    }
}

#[test]
fn sources_enter_linearly() {
    let dom = build_domain(2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = uniform_config(&dom, &mut rng);
    let src = SourceTerm::new(1, 7, 0.25, -0.5).unwrap();
    let diff = hamiltonian(&dom, &theta, 1.0, Some(&src)) - hamiltonian(&dom, &theta, 1.0, None);
    assert!((diff - (0.25 * theta.values[1] - 0.5 * theta.values[7])).abs() < 1e-14);
    assert!(SourceTerm::new(2, 2, 0.0, 0.0).is_err());
    assert!(src.within_polydisk(0.5) && !src.within_polydisk(2.0));
}

#[test]
fn remainder_examples() {
    let dom = build_domain(2, 3).unwrap();
    assert_eq!(remainder_potential(&dom, &OneForm::zeros(&dom), 1.0, None), 0.0);
    // |θ| ≤ T everywhere: every g term is bounded by T⁴/24.
    let params = ModelParams::new(2, 3, 2, 1e9, 1.0).unwrap();
    let t = params.threshold();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(-t / 4.0..t / 4.0)).collect() };
    let count = (dom.plaquette_count() + dom.edge_count()) as f64;
    assert!(remainder_potential(&dom, &theta, 1.0, None).abs() <= count * t.powi(4) / 24.0);
}

#[test]
fn g_is_accurate_across_the_switch() {
    // Near zero the naive formula cancels; compare against a high-precision series.
    for &t in &[1e-8, 1e-5, 3e-3, 9.9e-3, 1.01e-2, 0.3, 2.0, -PI] {
        let series: f64 = (2..30)
            .map(|k| {
                let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
                let fact: f64 = (1..=(2 * k)).map(|i| i as f64).product();
                sign * (t as f64).powi(2 * k) / fact
            })
            .sum();
        let g_val = g(t);
        assert!((g_val - series).abs() <= 4e-16 * series.abs(), "t = {t}");
    }
}

#[test]
fn g_taylor_bound_on_grid() {
    for i in 0..=20000 {
        let t = -PI + 2.0 * PI * i as f64 / 20000.0;
        assert!(g(t).abs() <= t.powi(4) / 24.0 * (1.0 + 1e-12) + 1e-300);
    }
}

#[test]
fn bump_properties() {
    assert_eq!(bump_chi(0.5), 1.0);
    assert_eq!(bump_chi(1.0), 1.0);
    assert_eq!(bump_chi(3.0), 0.0);
    assert_eq!(bump_chi(2.0), 0.0);
    let v = bump_chi(1.5);
    assert!(v > 0.0 && v < 1.0);
    assert_eq!(bump_chi(1.5), bump_chi(-1.5));
    // Monotone decreasing on [1, 2].
    let mut prev = 1.0;
    for i in 0..=1000 {
        let c = bump_chi(1.0 + i as f64 / 1000.0);
        assert!(c <= prev);
        prev = c;
    }
}

#[test]
fn bump_gevrey_constant() {
    let fact = |k: u32| (1..=k).map(|i| i as f64).product::<f64>();
    let ratios: Vec<f64> = (1..=6).map(|k| chi_derivative_sup(k, 0.01) / fact(k).powi(2)).collect();
    let c = ratios.iter().cloned().fold(0.0, f64::max);
    println!("Gevrey ratios sup|χ^(k)|/(k!)² for k=1..6: {ratios:?}; C = {c:.3}");
    assert!(c.is_finite() && c < 1e3);
}

#[test]
fn thresholds() {
    let p = ModelParams::new(2, 4, 2, 1e4, 0.5).unwrap();
    assert_eq!(p.alpha(), 0.5e4);
    let t = 1e4f64.ln().powi(4) / 100.0;
    assert!((p.t_beta() - t).abs() < 1e-12);
    assert_eq!(p.threshold(), PI / 2.0);
    assert!((p.r_beta() - 1e4f64.ln().powi(2)).abs() < 1e-12);
    assert!(ModelParams::new(2, 4, 2, -1.0, 1.0).is_err());
    assert!(ModelParams::new(2, 4, 2, 1.0, 0.0).is_err());
}

/// A boundary plaquette carrying dθ_p = 2π costs nothing in H but (2π)²/2 in S,
/// so H ≥ S/5 fails on [−π, π]^E once m is below about 1.94.
#[test]
fn stability_fails_for_winding_plaquettes() {
    let dom = build_domain(2, 1).unwrap();
    let p = dom.plaquettes().iter().position(|q| q.base == vec![0, 0]).unwrap();
    let [_, e2, e3, _] = dom.plaquette(p).edges;
    assert_eq!(dom.plaquettes_of_edge(e2).len(), 1);
    assert_eq!(dom.plaquettes_of_edge(e3).len(), 1);
    let mut theta = OneForm::zeros(&dom);
    theta.values[e2] = PI;
    theta.values[e3] = -PI;
    assert!((dom.exterior_derivative(&theta, p).unwrap() - 2.0 * PI).abs() < 1e-15);
    for m in [0.1, 1.0, 1.9] {
        let h = hamiltonian(&dom, &theta, m, None);
        let s = proca_action(&dom, &theta, m);
        assert!((h - 4.0 * m).abs() < 1e-14);
        assert!(h < s / 5.0, "m = {m}");
    }
    let h = hamiltonian(&dom, &theta, 2.0, None);
    assert!(h >= proca_action(&dom, &theta, 2.0) / 5.0);
}

fn setup() -> (LatticeDomain, CoarseBlocking, ModelParams) {
    let dom = build_domain(2, 2).unwrap();
    let cb = coarse_structure(&dom, 4).unwrap();
    (dom, cb, ModelParams::new(2, 2, 4, 1e4, 1.0).unwrap())
}

#[test]
fn classification_examples() {
    let (dom, cb, params) = setup();
    let c = classify_blocks(&OneForm::zeros(&dom), &cb, &params);
    assert!(c.bad.is_empty());
    assert_eq!(c.good.len(), cb.block_count());

    // An interior edge of block 0 at 2T marks exactly block 0.
    let t = params.threshold();
    let mut theta = OneForm::zeros(&dom);
    let e = cb.block_edges(0)[0];
    theta.values[e] = (2.0 * t).min(PI);
    let c = classify_blocks(&theta, &cb, &params);
    assert_eq!(c.bad, BTreeSet::from([0]));
    // r_β = log²β far exceeds the coarse diameter: B₁ saturates.
    assert_eq!(c.b1.len(), cb.block_count());
    assert!(c.g1.is_empty());

    // A large face edge marks both sides.
    let face = &cb.faces()[0];
    let mut theta = OneForm::zeros(&dom);
    theta.values[face.edges[0]] = 3.0;
    let c = classify_blocks(&theta, &cb, &params);
    assert_eq!(c.bad, BTreeSet::from([face.lo, face.hi]));
}

/// Direct scan: a block is bad iff an edge with an endpoint in it is large.
#[test]
fn classification_matches_direct_scan() {
    let dom = build_domain(2, 3).unwrap();
    let cb = coarse_structure(&dom, 2).unwrap();
    let params = ModelParams::new(2, 3, 2, 1e4, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let theta = OneForm {
            values: (0..dom.edge_count()).map(|_| if rng.random_bool(0.05) { 2.0 } else { 0.1 }).collect(),
        };
        let mut oracle = BTreeSet::new();
        for (e, edge) in dom.edges().iter().enumerate() {
            if theta.values[e].abs() >= params.threshold() {
                oracle.insert(cb.block_of_vertex(dom.vertex_index(&edge.base).unwrap()));
                oracle.insert(cb.block_of_vertex(dom.vertex_index(&edge.head()).unwrap()));
            }
        }
        assert_eq!(classify_blocks(&theta, &cb, &params).bad, oracle);
    }
}

fn all_subsets(k: usize) -> Vec<BTreeSet<usize>> {
    (0..(1u32 << k)).map(|m| (0..k).filter(|i| m >> i & 1 == 1).collect()).collect()
}

#[test]
fn partition_examples() {
    let (dom, cb, params) = setup();
    let zero = OneForm::zeros(&dom);
    for b in all_subsets(cb.block_count()) {
        let w = partition_weights(&zero, &b, &cb, &params);
        if b.is_empty() {
            assert_eq!((w.chi_g, w.zeta_b), (1.0, 1.0));
        } else {
            assert_eq!(w.zeta_b, 0.0);
        }
    }
    // Every field beyond 2T: only B = Λ′ survives.
    let big = OneForm::constant(&dom, 3.2);
    let all: BTreeSet<usize> = (0..cb.block_count()).collect();
    for b in all_subsets(cb.block_count()) {
        for w in [partition_weights(&big, &b, &cb, &params), grouped_partition_weights(&big, &b, &cb, &params)] {
            let expected = if b == all { 1.0 } else { 0.0 };
            assert_eq!(w.chi_g * w.zeta_b, expected);
        }
    }
}

/// ζ_B by the literal sum over L ⊆ ℰ(B) grouped by the blocks L marks.
fn literal_grouped_zeta(theta: &OneForm, bad: &BTreeSet<usize>, cb: &CoarseBlocking, t: f64) -> f64 {
    let inside = cb.edges_of_set(bad);
    let mut total = 0.0;
    for mask in 0u64..(1 << inside.len()) {
        let mut marked = BTreeSet::new();
        let mut prod = 1.0;
        for (i, &e) in inside.iter().enumerate() {
            let c = chi_scaled(theta.values[e], t);
            if mask >> i & 1 == 1 {
                prod *= 1.0 - c;
                let (a, b) = cb.blocks_of_edge(e);
                marked.insert(a);
                marked.extend(b);
            } else {
                prod *= c;
            }
        }
        if &marked == bad {
            total += prod;
        }
    }
    total
}

#[test]
fn grouped_zeta_matches_literal_sum() {
    let dom = build_domain(2, 1).unwrap();
    let cb = coarse_structure(&dom, 2).unwrap();
    let params = ModelParams::new(2, 1, 2, 1e4, 1.0).unwrap();
    let t = params.threshold();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let theta = OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(0.5 * t..2.5 * t)).collect() };
        for b in all_subsets(cb.block_count()) {
            let w = grouped_partition_weights(&theta, &b, &cb, &params);
            let lit = literal_grouped_zeta(&theta, &b, &cb, t);
            assert!((w.zeta_b - lit).abs() < 1e-13, "B = {b:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_identity(seed in any::<u64>(), m in 0.05f64..5.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
        let dom = build_domain(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = uniform_config(&dom, &mut rng);
        let src = SourceTerm::new(0, 5, tx, ty).unwrap();
        let h = hamiltonian(&dom, &theta, m, Some(&src));
        let s = proca_action(&dom, &theta, m);
        let v = remainder_potential(&dom, &theta, m, Some(&src));
        prop_assert!((h - s - v).abs() <= 1e-12 * h.abs().max(1.0));
    }

    #[test]
    fn elementary_cosine_bound(x in -PI..=PI) {
        prop_assert!(1.0 - x.cos() >= x * x / 10.0);
    }

    #[test]
    fn stability_when_plaquettes_do_not_wind(seed in any::<u64>(), m in 0.05f64..5.0) {
        // With every |dθ_p| ≤ π the elementary bound applies term by term.
        let dom = build_domain(3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(-PI / 4.0..=PI / 4.0)).collect() };
        prop_assert!(hamiltonian(&dom, &theta, m, None) >= proca_action(&dom, &theta, m) / 5.0);
    }

    #[test]
    fn classification_is_monotone(seed in any::<u64>(), scale in 1.0f64..2.0) {
        let dom = build_domain(2, 3).unwrap();
        let cb = coarse_structure(&dom, 2).unwrap();
        let params = ModelParams::new(2, 3, 2, 1e4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(-1.8..1.8)).collect() };
        let bigger = OneForm { values: theta.values.iter().map(|x| (x * scale).clamp(-PI, PI)).collect() };
        let b0 = classify_blocks(&theta, &cb, &params).bad;
        let b1 = classify_blocks(&bigger, &cb, &params).bad;
        prop_assert!(b0.is_subset(&b1));
    }

    #[test]
    fn both_partitions_of_unity(seed in any::<u64>()) {
        let dom = build_domain(2, 2).unwrap();
        let cb = coarse_structure(&dom, 4).unwrap();
        let params = ModelParams::new(2, 2, 4, 1e4, 1.0).unwrap();
        let t = params.threshold();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(-2.2 * t..2.2 * t)).collect() };
        let mut s_ind = 0.0;
        let mut s_grp = 0.0;
        for b in all_subsets(cb.block_count()) {
            let w = partition_weights(&theta, &b, &cb, &params);
            s_ind += w.chi_g * w.zeta_b;
            let w = grouped_partition_weights(&theta, &b, &cb, &params);
            s_grp += w.chi_g * w.zeta_b;
        }
        prop_assert!((s_ind - 1.0).abs() <= 1e-12);
        prop_assert!((s_grp - 1.0).abs() <= 1e-12);
    }
}
