//! Sweeps activation and weight noise magnitudes on a trained fixture and
//! prints how far the first- and second-order predictions are from the
//! measured loss change.

use llc::fixtures::blob_classifier;
use llc::pipeline::{sweep_bounds, BOUNDS_MAGNITUDES};

fn main() -> llc::Result<()> {
    let fx = blob_classifier(0)?;
    let (calib, _) = fx.data.split(0.2, 0)?;
    let rows = sweep_bounds(&fx.model, &calib, &BOUNDS_MAGNITUDES, 10, 0)?;
    println!("{:<12} {:>9} {:<12} {:>12} {:>12}", "target", "magnitude", "regime", "gap 1st", "gap 2nd");
    for r in rows {
        println!(
            "{:<12} {:>9.0e} {:<12} {:>12.4e} {:>12.4e}",
            format!("{:?}", r.target),
            r.magnitude,
            format!("{:?}", r.regime),
            r.gap_first,
            r.gap_second
        );
    }
    Ok(())
}
