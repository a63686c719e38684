//! Peak retained tensor elements during training as depth grows: stored-mode
//! backpropagation scales linearly with the number of layers, the invertible
//! mode stays flat.

use irim::autodiff::{affine_fit, memory_report, BackpropMode};

fn main() -> Result<(), irim::IrimError> {
    let depths = [2usize, 8, 32, 128];
    let grid: Vec<(usize, usize)> = depths.iter().map(|&l| (2, l)).collect();
    let rows = memory_report(
        16,
        8,
        8,
        &grid,
        &[BackpropMode::Stored, BackpropMode::Invertible],
        0,
    )?;
    println!("{:>7} {:>12} {:>12}", "layers", "stored", "invertible");
    let peak = |mode: &str, l: usize| {
        rows.iter()
            .find(|r| r.mode == mode && r.phase == "training" && r.layers == l)
            .unwrap()
            .peak_elements
    };
    for &l in &depths {
        println!("{l:>7} {:>12} {:>12}", peak("stored", l), peak("invertible", l));
    }
    let xs: Vec<f64> = depths.iter().map(|&l| l as f64).collect();
    let stored: Vec<f64> = depths.iter().map(|&l| peak("stored", l) as f64).collect();
    let inv: Vec<f64> = depths.iter().map(|&l| peak("invertible", l) as f64).collect();
    let (_, slope, r2) = affine_fit(&xs, &stored);
    println!("stored: {slope:.1} elements per extra layer (affine fit, r^2 = {r2:.5})");
    let spread = inv.iter().cloned().fold(f64::MIN, f64::max)
        / inv.iter().cloned().fold(f64::MAX, f64::min);
    println!("invertible: max/min peak ratio across depths = {spread:.4}");
    Ok(())
}
