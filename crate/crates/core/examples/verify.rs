//! Quantizes a fixture, then certifies it on the calibration split and shows
//! that a model with heavy weight noise is rejected.

use llc::fixtures::blob_classifier;
use llc::net::LayerWeight;
use llc::pipeline::{quantize, verify, QuantizeOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> llc::Result<()> {
    let fx = blob_classifier(0)?;
    let (calib, _) = fx.data.split(0.2, 0)?;
    let q = quantize(&fx.model, &calib, None, &QuantizeOptions::default())?;
    let r = verify(&fx.model, &q.model, &calib, 0.0)?;
    println!("quantized: {} ({:.6e} -> {:.6e})", verdict(r.pass), r.original_loss, r.compressed_loss);

    let mut noisy = fx.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for l in noisy.layers_mut() {
        if let LayerWeight::Dense(w) = &mut l.weight {
            w.data_mut().iter_mut().for_each(|v| *v += if rng.gen() { 0.5 } else { -0.5 });
        }
    }
    let r = verify(&fx.model, &noisy, &calib, 0.0)?;
    println!("noised:    {} ({:.6e} -> {:.6e})", verdict(r.pass), r.original_loss, r.compressed_loss);
    Ok(())
}

fn verdict(pass: Option<bool>) -> &'static str {
    if pass == Some(true) {
        "PASS"
    } else {
        "FAIL"
    }
}
