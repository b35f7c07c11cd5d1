//! Ursell functions, a truncated cluster expansion against the direct
//! hard-core partition function, and the KP check.
//!
//!     cargo run --release --example cluster_expansion

use ymh::polymer::{
    kp_condition_check, polymer_partition_function, random_table, truncated_log_z, ursell, Cluster, CoarseLattice,
    Polymer,
};

fn main() -> ymh::Result<()> {
    let p = Polymer::singleton(vec![0, 0]);
    for n in 1..=6 {
        println!("ursell of {n} copies of one polymer: {}", ursell(&Cluster::new(vec![p.clone(); n])?)?);
    }

    let r = 0.5;
    let table = random_table(2, 3, 6, 3, 0.1, r + 2.0, 4)?;
    let e = truncated_log_z(&table, 8, 9, r)?;
    let z = polymer_partition_function(&table)?;
    println!("exp(sum psi) = {:.15}, Z = {z:.15}", e.total.exp());
    for (n, (s, a)) in e.per_n.iter().zip(&e.per_n_abs).enumerate() {
        println!("n = {}: {s:+.3e} (abs {a:.3e})", n + 1);
    }
    println!("||psi_bar||_r = {:.4e} <= envelope {:.4e}", e.psi_bar_norm, e.envelope.unwrap());
    let kp = kp_condition_check(&table, &CoarseLattice::cube(2, 3)?);
    println!("KP holds: {} (margin {:.4} over {} polymers)", kp.holds, kp.margin, kp.checked);
    Ok(())
}
