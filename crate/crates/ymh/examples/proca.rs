//! The Proca Gaussian: spectrum band, covariance decay and the derivative
//! of the covariance in the interpolation parameters.
//!
//!     cargo run --release --example proca

use ymh::geometry::{build_domain, coarse_structure};
use ymh::model::{BlockClassification, ModelParams};
use ymh::proca::{
    covariance_scan, neumann_rate_floor, spectral_ceiling, standard_decay_pairs, InterpolationMode, ProcaFamily,
};

fn main() -> ymh::Result<()> {
    let dom = build_domain(2, 8)?;
    let op = ProcaFamily::free_field(&dom, 1.0, 1.0)?.operator(&[])?;
    let ev = op.scaled_spectrum();
    println!("spectrum/beta in [{:.6}, {:.6}] ⊂ [1, {}]", ev[0], ev[ev.len() - 1], spectral_ceiling(2, 1.0));

    let scan = covariance_scan(&op, &dom, &standard_decay_pairs(&dom, 10)?)?;
    for r in &scan.rows {
        println!("dist {:>2}  cov {:.6e}  residual {:+.3}", r.dist, r.cov, r.fit_residual);
    }
    println!("rate {:.4} (floor {:.4}), R² {:.4}", -scan.slope, neumann_rate_floor(2, 1.0, 1.0), scan.r_squared);

    // Interpolated family on a 4×4 coarse grid with every block good.
    let dom = build_domain(2, 3)?;
    let cb = coarse_structure(&dom, 2)?;
    let params = ModelParams::new(2, 3, 2, 3.0, 0.5)?;
    let fam = ProcaFamily::new(&dom, &cb, &BlockClassification::all_good(&cb), &params, None, InterpolationMode::Standard)?;
    let s = vec![0.5; fam.faces().len()];
    let (x, y) = (fam.free_edges()[0], fam.free_edges()[5]);
    let f = fam.faces()[0];
    println!(
        "C(x,y) = {:.6e}, dC/ds_F = {:.6e}",
        fam.covariance_derivative(&s, &[], x, y)?,
        fam.covariance_derivative(&s, &[f], x, y)?
    );
    Ok(())
}
