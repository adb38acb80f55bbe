//! Low-rank factorisation of a classifier whose first layer is numerically
//! rank deficient, printing the per-rank search trace.
//!
//!     cargo run --release --example decompose -- [gamma] [seed] [first]
//!
//! Passing `first` stops each layer at its lowest lossless rank instead of
//! taking the minimum-loss rank.

use llc::fixtures::rank_deficient_classifier;
use llc::lowrank::DecomposeConfig;
use llc::pipeline::decompose;

fn main() -> llc::Result<()> {
    let mut args = std::env::args().skip(1);
    let gamma: f64 = args.next().map_or(1e-4, |s| s.parse().expect("gamma"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let fx = rank_deficient_classifier(seed)?;
    let (calib, heldout) = fx.data.split(0.2, seed)?;
    let cfg = DecomposeConfig {
        gamma,
        stop_at_first_lossless: args.next().as_deref() == Some("first"),
        ..Default::default()
    };
    let out = decompose(&fx.model, &calib, Some(&heldout), &cfg)?;
    for t in &out.traces {
        println!("layer {}: cap {}, early stop {:?}", t.layer, t.cap, t.early_stop);
        for c in t.candidates.iter().filter(|c| c.residual_fro < 1e-2) {
            println!(
                "  r={:<3} residual {:.3e}  sign {:+.3e}  {}",
                c.rank,
                c.residual_fro,
                c.sign_value,
                c.measured_loss.map_or("rejected".to_string(), |l| format!("loss {l:.9e}"))
            );
        }
    }
    let r = &out.report;
    for d in &r.layers {
        println!("layer {}: rank {:?}, {} -> {} bytes", d.layer, d.rank, d.bytes_before, d.bytes_after);
    }
    println!("drop rate  {:.4}", r.drop_rate);
    println!("calib loss {:.9e} -> {:.9e}", r.original_loss, r.compressed_loss);
    Ok(())
}
