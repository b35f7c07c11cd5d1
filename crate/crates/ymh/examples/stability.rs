//! The split H = S + V, and how often H ≥ S/5 fails on uniform
//! configurations. Every failure found has a plaquette with |dθ_p| > π.
//!
//!     cargo run --release --example stability

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ymh::geometry::build_domain;
use ymh::model::{hamiltonian, proca_action, remainder_potential, uniform_config};

fn main() -> ymh::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, m) in [(1, 0.5), (2, 1.0), (4, 1.0)] {
        let dom = build_domain(2, n)?;
        let draws = 200_000;
        let (mut bad, mut winding) = (0, 0);
        let mut split_err = 0.0f64;
        for _ in 0..draws {
            let theta = uniform_config(&dom, &mut rng);
            let h = hamiltonian(&dom, &theta, m, None);
            let s = proca_action(&dom, &theta, m);
            split_err = split_err.max((h - s - remainder_potential(&dom, &theta, m, None)).abs() / h.abs());
            if h < s / 5.0 {
                bad += 1;
                if dom.d_all(&theta.values).iter().any(|x| x.abs() > PI) {
                    winding += 1;
                }
            }
        }
        println!("n = {n}, m = {m}: H < S/5 on {bad}/{draws} draws ({winding} winding); |H − S − V|/H <= {split_err:.1e}");
    }
    Ok(())
}
