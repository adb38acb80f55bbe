//! Grouped knapsack over layers: pick exactly one level per layer, minimising
//! the summed predicted cost subject to `Σ bytes < capacity`.
//!
//! Ties are broken by smaller total bytes, then by the lexicographically
//! smaller vector of level indices. Costs are accumulated layer by layer in
//! index order by both solvers, so equal selections produce identical sums.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRANULARITY: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// `costs[i][j]`: predicted cost of level `j` for layer `i`.
    pub costs: Vec<Vec<f64>>,
    /// `bytes[i][j]`: storage of level `j` for layer `i`.
    pub bytes: Vec<Vec<u64>>,
    /// Exclusive upper bound on total bytes.
    pub capacity: u64,
    /// Bytes per DP cell. Item sizes are rounded up to whole cells, so the
    /// solution is exact whenever the granularity divides every size.
    pub granularity: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub choices: Vec<usize>,
    pub total_cost: f64,
    pub total_bytes: u64,
}

impl AllocationProblem {
    pub fn new(costs: Vec<Vec<f64>>, bytes: Vec<Vec<u64>>, capacity: u64) -> Result<Self> {
        let p = Self {
            costs,
            bytes,
            capacity,
            granularity: DEFAULT_GRANULARITY,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_granularity(mut self, g: u64) -> Self {
        self.granularity = g;
        self
    }

    /// Uses the gcd of all sizes as the cell width, which makes the DP exact.
    pub fn with_exact_granularity(mut self) -> Self {
        let g = self.bytes.iter().flatten().fold(0, |a, &b| gcd(a, b));
        self.granularity = g.max(1);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.costs.is_empty() {
            return Err(Error::InvalidArgument("allocation problem has no groups".into()));
        }
        if self.costs.len() != self.bytes.len() {
            return Err(Error::InvalidArgument("cost and byte matrices differ in rows".into()));
        }
        for (i, (c, b)) in self.costs.iter().zip(&self.bytes).enumerate() {
            if c.is_empty() || c.len() != b.len() {
                return Err(Error::InvalidArgument(format!("group {i} has mismatched or empty levels")));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("costs of group {i}")));
            }
        }
        if self.granularity == 0 {
            return Err(Error::InvalidArgument("granularity must be > 0".into()));
        }
        Ok(())
    }

    /// Smallest achievable total size.
    pub fn min_bytes(&self) -> u64 {
        self.bytes.iter().map(|row| *row.iter().min().unwrap()).sum()
    }

    fn check_feasible(&self) -> Result<()> {
        let min = self.min_bytes();
        if min >= self.capacity {
            return Err(Error::Infeasible {
                min_bytes: min,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    fn evaluate(&self, choices: &[usize]) -> Allocation {
        let mut cost = 0.0;
        let mut bytes = 0;
        for (i, &j) in choices.iter().enumerate() {
            cost += self.costs[i][j];
            bytes += self.bytes[i][j];
        }
        Allocation {
            choices: choices.to_vec(),
            total_cost: cost,
            total_bytes: bytes,
        }
    }
}

pub fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Preference order shared by both solvers.
fn better(a_cost: f64, a_bytes: u64, a_choice: &[usize], b_cost: f64, b_bytes: u64, b_choice: &[usize]) -> bool {
    match a_cost.total_cmp(&b_cost) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match a_bytes.cmp(&b_bytes) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => a_choice < b_choice,
        },
    }
}

#[derive(Clone)]
struct Cell {
    cost: f64,
    bytes: u64,
    choices: Vec<usize>,
}

/// Dynamic programme over `(group, used cells)`; `O(n · k · C/g)` time.
pub fn solve_group_knapsack(prob: &AllocationProblem) -> Result<Allocation> {
    prob.validate()?;
    prob.check_feasible()?;
    let g = prob.granularity;
    // Largest cell count K with K·g < capacity.
    let max_cells = ((prob.capacity - 1) / g) as usize;
    let cells_of = |b: u64| b.div_ceil(g) as usize;

    let mut layer: Vec<Option<Cell>> = vec![None; max_cells + 1];
    layer[0] = Some(Cell {
        cost: 0.0,
        bytes: 0,
        choices: Vec::new(),
    });
    for (i, (costs, bytes)) in prob.costs.iter().zip(&prob.bytes).enumerate() {
        let mut next: Vec<Option<Cell>> = vec![None; max_cells + 1];
        for (used, cell) in layer.iter().enumerate() {
            let Some(cell) = cell else { continue };
            for (j, (&c, &b)) in costs.iter().zip(bytes).enumerate() {
                let to = used + cells_of(b);
                if to > max_cells {
                    continue;
                }
                let cost = cell.cost + c;
                let total = cell.bytes + b;
                let replace = match &next[to] {
                    None => true,
                    Some(cur) => {
                        let mut cand = cell.choices.clone();
                        cand.push(j);
                        better(cost, total, &cand, cur.cost, cur.bytes, &cur.choices)
                    }
                };
                if replace {
                    let mut choices = Vec::with_capacity(i + 1);
                    choices.extend_from_slice(&cell.choices);
                    choices.push(j);
                    next[to] = Some(Cell {
                        cost,
                        bytes: total,
                        choices,
                    });
                }
            }
        }
        layer = next;
    }
    let mut best: Option<&Cell> = None;
    for cell in layer.iter().flatten() {
        if cell.bytes >= prob.capacity {
            continue;
        }
        best = match best {
            None => Some(cell),
            Some(b) if better(cell.cost, cell.bytes, &cell.choices, b.cost, b.bytes, &b.choices) => Some(cell),
            keep => keep,
        };
    }
    let best = best.ok_or(Error::Infeasible {
        min_bytes: prob.min_bytes(),
        capacity: prob.capacity,
    })?;
    Ok(prob.evaluate(&best.choices))
}

/// Enumerates every selection. Limited to `kⁿ ≤ 10⁷`.
pub fn exhaustive_allocation(prob: &AllocationProblem) -> Result<Allocation> {
    prob.validate()?;
    let combos: u128 = prob.costs.iter().map(|r| r.len() as u128).product();
    if combos > 10_000_000 {
        return Err(Error::TooLarge(combos));
    }
    prob.check_feasible()?;
    let n = prob.costs.len();
    let mut idx = vec![0usize; n];
    let mut best: Option<Allocation> = None;
    loop {
        let a = prob.evaluate(&idx);
        if a.total_bytes < prob.capacity {
            let take = match &best {
                None => true,
                Some(b) => better(a.total_cost, a.total_bytes, &a.choices, b.total_cost, b.total_bytes, &b.choices),
            };
            if take {
                best = Some(a);
            }
        }
        // Odometer increment, last group fastest.
        let mut pos = n;
        loop {
            if pos == 0 {
                return best.ok_or(Error::Infeasible {
                    min_bytes: prob.min_bytes(),
                    capacity: prob.capacity,
                });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < prob.costs[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_cheaper_level_when_it_fits() {
        let p = AllocationProblem::new(vec![vec![0.5, 0.1]], vec![vec![100, 400]], 500).unwrap();
        let a = solve_group_knapsack(&p).unwrap();
        assert_eq!(a.choices, vec![1]);
        assert_eq!(a.total_cost, 0.1);
    }

    #[test]
    fn forced_to_small_level_under_tight_capacity() {
        let p = AllocationProblem::new(vec![vec![0.5, 0.1]], vec![vec![100, 400]], 300).unwrap();
        assert_eq!(solve_group_knapsack(&p).unwrap().choices, vec![0]);
    }

    #[test]
    fn capacity_is_strict() {
        let p = AllocationProblem::new(vec![vec![0.5, 0.1]], vec![vec![100, 400]], 400)
            .unwrap()
            .with_granularity(100);
        assert_eq!(solve_group_knapsack(&p).unwrap().choices, vec![0]);
        let p = AllocationProblem::new(vec![vec![0.5, 0.1]], vec![vec![100, 400]], 100).unwrap();
        match solve_group_knapsack(&p) {
            Err(Error::Infeasible { min_bytes, capacity }) => assert_eq!((min_bytes, capacity), (100, 100)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_instance_three_groups() {
        // Costs / bytes per group:
        //   g0: (1.0, 10) (0.2, 30)
        //   g1: (0.8, 10) (0.1, 20)
        //   g2: (0.5, 10) (0.4, 40)
        // Capacity 61 → budget of 60 bytes. Enumerating by hand, the feasible
        // selection with the lowest cost is (1, 1, 0): 0.2 + 0.1 + 0.5 = 0.8
        // at 30 + 20 + 10 = 60 bytes.
        let p = AllocationProblem::new(
            vec![vec![1.0, 0.2], vec![0.8, 0.1], vec![0.5, 0.4]],
            vec![vec![10, 30], vec![10, 20], vec![10, 40]],
            61,
        )
        .unwrap()
        .with_exact_granularity();
        let brute = exhaustive_allocation(&p).unwrap();
        assert_eq!(brute.choices, vec![1, 1, 0]);
        assert_eq!(brute.total_bytes, 60);
        assert_eq!(solve_group_knapsack(&p).unwrap(), brute);
    }

    #[test]
    fn ties_prefer_fewer_bytes_then_lexicographic() {
        let p = AllocationProblem::new(vec![vec![0.0, 0.0, 0.0]], vec![vec![20, 10, 10]], 100)
            .unwrap()
            .with_exact_granularity();
        assert_eq!(solve_group_knapsack(&p).unwrap().choices, vec![1]);
        assert_eq!(exhaustive_allocation(&p).unwrap().choices, vec![1]);
    }

    #[test]
    fn exhaustive_refuses_huge_instances() {
        let p = AllocationProblem::new(vec![vec![0.0; 10]; 8], vec![vec![1; 10]; 8], 100).unwrap();
        assert!(matches!(exhaustive_allocation(&p), Err(Error::TooLarge(_))));
    }
}
