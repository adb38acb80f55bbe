//! Compares the Chebyshev bound on `P(Σ eᵢpᵢ ≥ 0)` with a Monte Carlo
//! estimate, for a rounding error whose mean opposes the gradient's.

use llc::neighborhood::chebyshev_bound;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> llc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trials = 100_000;
    for (e_mean, e_sd, p_mean, p_sd, k) in [(-0.5, 0.3, 1.0, 0.4, 16), (-0.2, 0.2, 0.5, 0.5, 8), (-1.0, 0.1, 2.0, 0.1, 1)] {
        let e = Normal::new(e_mean, e_sd).unwrap();
        let p = Normal::new(p_mean, p_sd).unwrap();
        let hits = (0..trials)
            .filter(|_| (0..k).map(|_| e.sample(&mut rng) * p.sample(&mut rng)).sum::<f64>() >= 0.0)
            .count();
        let bound = chebyshev_bound(e_mean, e_sd * e_sd, p_mean, p_sd * p_sd)?;
        println!(
            "Ee={e_mean:+.1} sd={e_sd:.1} Ep={p_mean:+.1} sd={p_sd:.1} k={k:<2}: P(inner >= 0) = {:.5}, bound {bound:.5}",
            hits as f64 / trials as f64
        );
    }
    Ok(())
}
