//! Trains the blob classifier used throughout the examples and saves it.
//!
//!     cargo run --release --example train_fixture -- [out.llcm] [seed]

use std::path::PathBuf;

use llc::data_io::{load_model, save_model};
use llc::fixtures::blob_classifier;
use llc::net::loss_and_accuracy;

fn main() -> llc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "fixture.llcm".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let fx = blob_classifier(seed)?;
    let (loss, top1) = loss_and_accuracy(&fx.model, &fx.data)?;
    println!("{} samples, loss {loss:.6e}, top1 {top1:.4}", fx.data.len());
    save_model(&fx.model, &out)?;
    assert_eq!(load_model(&out)?, fx.model);
    println!("wrote {} ({} parameter bytes)", out.display(), fx.model.stored_bytes());
    Ok(())
}
