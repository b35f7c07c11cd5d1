//! Metropolis correlations on Λ₈ at β = 8 and an exponential decay fit,
//! checked against the Proca covariance.
//!
//!     cargo run --release --example metropolis

use ymh::acceptance::scan_groups;
use ymh::geometry::build_domain;
use ymh::mcmc::{decay_fit, run_grouped_experiment, RunSettings};
use ymh::model::ModelParams;
use ymh::proca::ProcaFamily;

fn main() -> ymh::Result<()> {
    let dom = build_domain(2, 8)?;
    let params = ModelParams::new(2, 8, 2, 8.0, 1.0)?;
    let settings = RunSettings { sweeps: 200_000, burn_in: 10_000, thin: 1, chains: 2, seed: 3, checkpoint_every: 2_000 };
    let groups = scan_groups(&dom, 6, 5)?;
    let exp = run_grouped_experiment(&dom, &params, &settings, &groups)?;
    let op = ProcaFamily::free_field(&dom, params.beta, params.m)?.operator(&[])?;
    for (e, g) in exp.estimates.iter().zip(&groups) {
        let gauss = g.iter().map(|&(x, y)| op.covariance(x, y).unwrap()).sum::<f64>() / g.len() as f64;
        println!("dist {}  corr {:+.5e} ± {:.1e}  (proca {:+.5e}, ess {:.0})", e.dist, e.corr, e.stderr, gauss, e.ess);
    }
    for c in &exp.chains {
        println!("chain {:#x}: acceptance {:.3}, width {:.3}", c.seed, c.acceptance, c.width);
    }
    match decay_fit(&exp.estimates) {
        Ok(f) => println!("rate {:.3}, 95% CI [{:.3}, {:.3}]", f.rate, f.rate_ci_lo, f.rate_ci_hi),
        Err(e) => println!("no fit: {e}"),
    }
    Ok(())
}
