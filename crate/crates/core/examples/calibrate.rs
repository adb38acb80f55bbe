//! Gathers mean gradients on a calibration split and shows, per layer, which
//! rounding direction the activation quantizer will take.

use llc::calibration::calibrate;
use llc::fixtures::blob_classifier;
use llc::quant::choose_direction;

fn main() -> llc::Result<()> {
    let fx = blob_classifier(0)?;
    let (calib, _) = fx.data.split(0.2, 0)?;
    let profile = calibrate(&fx.model, &calib)?;
    println!("{} calibration samples, mean loss {:.6e}", profile.sample_count, profile.mean_loss);
    for (k, l) in profile.layers.iter().enumerate() {
        println!(
            "layer {k} (outer {}): |E dW| = {:.3e}, dh.1 = {:+.3e} -> {:?}",
            fx.model.outer_index(k),
            l.mean_weight_grad.norm_l2(),
            l.grad_dot_one,
            choose_direction(&profile, k)?
        );
    }
    Ok(())
}
