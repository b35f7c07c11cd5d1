//! Domain sizes, the coarse blocking and lattice-animal growth.
//!
//!     cargo run --example geometry

use ymh::geometry::{build_domain, closed_form_counts, coarse_structure, describe, enumerate_connected_sets, OneForm};

fn main() -> ymh::Result<()> {
    let dom = build_domain(2, 4)?;
    let cb = coarse_structure(&dom, 2)?;
    let desc = describe(&dom, Some(&cb));
    println!("{}", serde_json::to_string_pretty(&desc).unwrap());
    assert_eq!(closed_form_counts(2, 4), (dom.vertex_count(), dom.edge_count(), dom.plaquette_count()));

    // d of a gradient vanishes plaquette by plaquette.
    let f: Vec<f64> = (0..dom.vertex_count()).map(|v| (v as f64 * 0.37).sin()).collect();
    let theta = OneForm::gradient(&dom, &f);
    let worst = dom.d_all(&theta.values).iter().fold(0.0f64, |a, x| a.max(x.abs()));
    println!("max |d(grad f)| = {worst:e}");

    for (k, a) in enumerate_connected_sets(2, 8)?.iter().enumerate() {
        println!("a({}) = {a:>6}   log a / k = {:.4}", k + 1, (*a as f64).ln() / (k + 1) as f64);
    }
    Ok(())
}
