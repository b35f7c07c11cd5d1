//! Wick moments and the covariance interpolation identity on random quartics.
//!
//!     cargo run --example gaussian_interpolation

use nalgebra::DMatrix;
use ymh::wick::{interpolation_identity_check, wick_moment};

fn main() -> ymh::Result<()> {
    let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    // E[x0² x1²] = Σ00 Σ11 + 2 Σ01².
    println!("E[x0^2 x1^2] = {}", wick_moment(&[0, 0, 1, 1], &sigma));
    for dim in 1..=6 {
        let c = interpolation_identity_check(dim, dim as u64)?;
        println!("dim {dim}: d/dt E = {:+.10}, half trace term = {:+.10}, deviation {:.1e}", c.lhs, c.rhs, c.deviation);
    }
    Ok(())
}
