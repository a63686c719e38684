//! Round-trip inversion error of deep coupling stacks as a function of depth,
//! comparing the additive family (exact algebraic inverse) against the affine
//! family (inverse amplified by the exponential gate), at both precisions.

use irim::commands::cmd_invcheck;

fn main() -> Result<(), irim::IrimError> {
    let dir = std::env::temp_dir().join("irim_depth_invertibility");
    let rows = cmd_invcheck(&[10, 50, 100, 400], &[0, 1, 2, 3], &dir)?;
    println!("{:>6} {:>10} {:>10} {:>13}", "layers", "family", "precision", "worst error");
    for &depth in &[10usize, 50, 100, 400] {
        for family in ["additive", "affine"] {
            for precision in ["f64", "f32"] {
                let worst = rows
                    .iter()
                    .filter(|r| {
                        r.layers == depth && r.family == family && r.precision == precision
                    })
                    .map(|r| r.roundtrip_error)
                    .fold(0.0f64, f64::max);
                println!("{depth:>6} {family:>10} {precision:>10} {worst:>13.3e}");
            }
        }
    }
    println!("full table written to {}", dir.join("invcheck.csv").display());
    Ok(())
}
