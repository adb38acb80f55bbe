//! The bit-width allocator on its own: a small cost/size table solved by the
//! DP and cross-checked by brute force.

use llc::allocator::{exhaustive_allocation, solve_group_knapsack, AllocationProblem};

fn main() -> llc::Result<()> {
    // Three layers, levels fp / 16 / 8 / 4.
    let costs = vec![
        vec![0.0, 1e-6, 4e-4, 9e-2],
        vec![0.0, 3e-6, 2e-3, 3e-1],
        vec![0.0, 1e-7, 5e-5, 1e-2],
    ];
    let bytes = vec![
        vec![8000, 2000, 1000, 500],
        vec![16000, 4000, 2000, 1000],
        vec![2000, 500, 250, 125],
    ];
    for cap in [26001, 12000, 6000, 3000] {
        let p = AllocationProblem::new(costs.clone(), bytes.clone(), cap)?.with_exact_granularity();
        let dp = solve_group_knapsack(&p)?;
        let brute = exhaustive_allocation(&p)?;
        assert_eq!(dp, brute);
        println!("capacity {cap:>6}: levels {:?}, cost {:.3e}, {} bytes", dp.choices, dp.total_cost, dp.total_bytes);
    }
    match solve_group_knapsack(&AllocationProblem::new(costs, bytes, 1000)?) {
        Err(e) => println!("capacity   1000: {e}"),
        Ok(a) => println!("unexpected: {a:?}"),
    }
    Ok(())
}
