//! Brute-force log Z on four blocks at β = 10⁴, assembled from the Gaussian
//! normalizer, Ξ and the polymer sum; the weights then feed the expansion.
//!
//!     cargo run --release --example oracle

use ymh::acceptance::decomposition_instance;
use ymh::oracle::decomposition_check;
use ymh::polymer::{kp_condition_check, truncated_log_z, CoarseLattice};

fn main() -> ymh::Result<()> {
    let (dom, cb, params, plan) = decomposition_instance()?;
    let rep = decomposition_check(&dom, &cb, &params, None, &plan, None)?;
    println!("direct    {:.12} ± {:.1e}", rep.lhs.value, rep.lhs.budget());
    println!("assembled {:.12}", rep.rhs);
    println!("discrepancy {:.2e}, budget {:.2e}, passed {}", rep.discrepancy, rep.budget, rep.passed);
    for w in &rep.weights {
        println!("w({:?}) = {:+.4e}", w.sites, w.weight);
    }
    let table = rep.weight_table()?;
    let kp = kp_condition_check(&table, &CoarseLattice::from_blocking(&cb));
    let e = truncated_log_z(&table, 6, cb.block_count(), 0.0)?;
    println!("KP margin {:.6}; cluster sums by n {:?}", kp.margin, e.per_n_abs);
    Ok(())
}
