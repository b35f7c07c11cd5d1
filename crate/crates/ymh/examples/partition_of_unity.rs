//! Bad-block classification and the two partitions of unity over bad sets.
//!
//!     cargo run --example partition_of_unity

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ymh::geometry::{build_domain, coarse_structure, OneForm};
use ymh::model::{classify_blocks, grouped_partition_weights, partition_weights, ModelParams};

fn main() -> ymh::Result<()> {
    let dom = build_domain(2, 2)?;
    let cb = coarse_structure(&dom, 4)?;
    let params = ModelParams::new(2, 2, 4, 1e4, 1.0)?;
    let t = params.threshold();
    println!("T = {t:.4}, r_beta = {:.2}, {} blocks", params.r_beta(), cb.block_count());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = OneForm { values: (0..dom.edge_count()).map(|_| rng.random_range(-1.5 * t..1.5 * t)).collect() };
    let class = classify_blocks(&theta, &cb, &params);
    println!("bad blocks {:?}, B1 {:?}", class.bad, class.b1);

    let mut indicator = 0.0;
    let mut grouped = 0.0;
    for mask in 0..1u32 << cb.block_count() {
        let b: BTreeSet<usize> = (0..cb.block_count()).filter(|i| mask >> i & 1 == 1).collect();
        let w = partition_weights(&theta, &b, &cb, &params);
        let g = grouped_partition_weights(&theta, &b, &cb, &params);
        if g.chi_g * g.zeta_b != 0.0 {
            println!("B = {b:?}: chi_G zeta_B = {:.6} (indicator form {:.1})", g.chi_g * g.zeta_b, w.chi_g * w.zeta_b);
        }
        indicator += w.chi_g * w.zeta_b;
        grouped += g.chi_g * g.zeta_b;
    }
    println!("sums: {indicator} and {grouped}");
    Ok(())
}
