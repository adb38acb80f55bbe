//! Mixed-precision quantization of a trained blob classifier under a byte
//! budget, printing the chosen level per layer and the loss before/after.
//!
//!     cargo run --release --example quantize -- [drop_rate] [seed]

use llc::fixtures::blob_classifier;
use llc::pipeline::{quantize, Capacity, QuantizeOptions};

fn main() -> llc::Result<()> {
    let mut args = std::env::args().skip(1);
    let drop: f64 = args.next().map_or(0.73, |s| s.parse().expect("drop rate"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let fx = blob_classifier(seed)?;
    let (calib, heldout) = fx.data.split(0.2, seed)?;
    let opts = QuantizeOptions {
        capacity: Capacity::DropRate(drop),
        ..Default::default()
    };
    let out = quantize(&fx.model, &calib, Some(&heldout), &opts)?;
    let r = &out.report;
    for d in &r.layers {
        println!(
            "layer {} (outer {}): {:>3}  {} -> {} bytes  predicted {:.3e}",
            d.layer,
            d.outer_index,
            d.level.as_deref().unwrap_or("-"),
            d.bytes_before,
            d.bytes_after,
            d.predicted_cost.unwrap_or(0.0)
        );
    }
    println!("drop rate    {:.4}", r.drop_rate);
    println!("calib loss   {:.6e} -> {:.6e}", r.original_loss, r.compressed_loss);
    if let Some(h) = &r.heldout {
        println!("held-out     {:.6e} -> {:.6e}  top1 {:.4} -> {:.4}", h.original_loss, h.compressed_loss, h.original_top1, h.compressed_top1);
    }
    Ok(())
}
