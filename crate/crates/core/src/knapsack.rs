//! Budgeted selection of channel groups with chain precedence.
//!
//! Items are grouped channels with a non-negative importance and an
//! integer-scaled cost; each chain may only be kept as a rank prefix. Two
//! solvers are provided:
//!
//! * [`solve_exact`] — a dynamic program over per-chain prefix lengths
//!   using cumulative prefix costs. This optimizes the selection exactly
//!   and is the default engine solver. Cumulative prefix costs built from
//!   a lookup table are plain table values, so they stay non-negative even
//!   when individual item costs are negative on noisy tables.
//! * [`solve_itemwise`] — a per-item dynamic program that gates keeping an
//!   item on the recorded decision for its predecessor at the shifted
//!   capacity. It is cheaper per item but the predecessor check can
//!   consult a capacity off the optimal path, so it is not guaranteed
//!   optimal; a repair pass restores prefix closure and feasibility. Kept
//!   for fidelity comparison against the exact solver.
//!
//! [`brute_force`] enumerates all prefix combinations and is the test
//! oracle for both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard against runaway DP allocations (capacity cells per chain row).
const MAX_DP_CELLS: u128 = 400_000_000;

/// One selectable group. `cost` is integer-scaled (milli-units for latency,
/// MACs for FLOPs) and may be negative on noisy tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: u64,
    pub importance: f64,
    pub cost: i64,
    pub chain_id: u64,
    /// 1-based position within the chain; an item may be kept only if all
    /// lower ranks of its chain are kept.
    pub rank_position: u32,
    #[serde(default)]
    pub preceding_item_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    /// Kept item ids, ascending.
    pub kept_item_ids: Vec<u64>,
    pub total_importance: f64,
    pub total_cost: i64,
}

impl Solution {
    pub fn empty() -> Self {
        Solution {
            kept_item_ids: Vec::new(),
            total_importance: 0.0,
            total_cost: 0,
        }
    }
}

/// A solver instance as accepted by the `oracle` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnapsackInstance {
    pub budget: i64,
    pub items: Vec<Item>,
}

/// Convert latencies in milliseconds to integer milli-units: multiply by
/// 1000 and round half away from zero. Budgets must be scaled with the
/// same rule before solving.
pub fn to_int_cost(value_ms: f64) -> Result<i64> {
    if !value_ms.is_finite() {
        return Err(Error::validation("cannot scale a non-finite latency"));
    }
    let scaled = (value_ms * 1000.0).round();
    if scaled.abs() >= 9.0e18 {
        return Err(Error::validation(format!(
            "scaled latency {scaled} overflows the integer range"
        )));
    }
    Ok(scaled as i64)
}

pub fn to_int_costs(values_ms: &[f64]) -> Result<Vec<i64>> {
    values_ms.iter().map(|&v| to_int_cost(v)).collect()
}

/// Per-chain prefix view: cumulative importance and cost for keeping the
/// first `p` items (index 0 = keep nothing).
#[derive(Debug, Clone)]
struct Chain {
    item_ids: Vec<u64>,
    cum_importance: Vec<f64>,
    cum_cost: Vec<i64>,
}

impl Chain {
    fn len(&self) -> usize {
        self.item_ids.len()
    }
}

fn build_chains(items: &[Item]) -> Result<Vec<Chain>> {
    use std::collections::BTreeMap;
    let mut by_id: BTreeMap<u64, &Item> = BTreeMap::new();
    for item in items {
        if !item.importance.is_finite() || item.importance < 0.0 {
            return Err(Error::validation(format!(
                "item {}: importance must be finite and non-negative",
                item.item_id
            )));
        }
        if by_id.insert(item.item_id, item).is_some() {
            return Err(Error::validation(format!(
                "duplicate item id {}",
                item.item_id
            )));
        }
    }
    let mut grouped: BTreeMap<u64, Vec<&Item>> = BTreeMap::new();
    for item in items {
        grouped.entry(item.chain_id).or_default().push(item);
    }
    let mut chains = Vec::with_capacity(grouped.len());
    for (chain_id, mut members) in grouped {
        members.sort_by_key(|i| i.rank_position);
        let mut cum_importance = vec![0.0];
        let mut cum_cost = vec![0i64];
        let mut item_ids = Vec::with_capacity(members.len());
        for (idx, item) in members.iter().enumerate() {
            let expected_rank = idx as u32 + 1;
            if item.rank_position != expected_rank {
                return Err(Error::validation(format!(
                    "chain {chain_id}: ranks must be contiguous from 1 \
                     (found {} at position {expected_rank})",
                    item.rank_position
                )));
            }
            let expected_pred = if idx == 0 {
                None
            } else {
                Some(members[idx - 1].item_id)
            };
            if item.preceding_item_id != expected_pred {
                return Err(Error::validation(format!(
                    "chain {chain_id}: item {} must precede through {:?}, found {:?}",
                    item.item_id, expected_pred, item.preceding_item_id
                )));
            }
            cum_importance.push(cum_importance[idx] + item.importance);
            cum_cost.push(cum_cost[idx] + item.cost);
            item_ids.push(item.item_id);
        }
        chains.push(Chain {
            item_ids,
            cum_importance,
            cum_cost,
        });
    }
    Ok(chains)
}

fn solution_from_prefixes(chains: &[Chain], prefixes: &[usize]) -> Solution {
    let mut kept = Vec::new();
    let mut importance = 0.0;
    let mut cost = 0i64;
    for (chain, &p) in chains.iter().zip(prefixes) {
        kept.extend_from_slice(&chain.item_ids[..p]);
        importance += chain.cum_importance[p];
        cost += chain.cum_cost[p];
    }
    kept.sort_unstable();
    Solution {
        kept_item_ids: kept,
        total_importance: importance,
        total_cost: cost,
    }
}

/// Exact solver: one prefix length per chain, maximizing total importance
/// under `Σ cumulative cost <= budget`. Ties prefer smaller total cost,
/// then the lexicographically smallest prefix-length vector in ascending
/// chain-id order.
pub fn solve_exact(items: &[Item], budget: i64) -> Result<Solution> {
    if budget < 0 {
        return Err(Error::validation("budget must be non-negative"));
    }
    let chains = build_chains(items)?;
    if chains.is_empty() {
        return Ok(Solution::empty());
    }

    // Shift each chain by its most negative cumulative cost so DP weights
    // are non-negative; the zero-weight prefix keeps every cell feasible.
    let shifts: Vec<i64> = chains
        .iter()
        .map(|c| c.cum_cost.iter().copied().min().unwrap().min(0))
        .collect();
    let capacity_i64 = budget - shifts.iter().sum::<i64>();
    let capacity = usize::try_from(capacity_i64)
        .map_err(|_| Error::validation("budget out of range for the DP"))?;
    let cells = (capacity as u128 + 1) * chains.len() as u128;
    if cells > MAX_DP_CELLS {
        return Err(Error::validation(format!(
            "DP would need {cells} cells; shrink the budget scale"
        )));
    }

    let width = capacity + 1;
    // Process chains in reverse so backtracking decides the first chain
    // first and the smallest-prefix tie rule applies in chain order.
    let mut value = vec![0.0f64; width];
    let mut cost = vec![0i64; width];
    let mut choices: Vec<Vec<u32>> = Vec::with_capacity(chains.len());
    let mut next_value = vec![0.0f64; width];
    let mut next_cost = vec![0i64; width];
    for (ci, chain) in chains.iter().enumerate().rev() {
        let shift = shifts[ci];
        let mut choice_row = vec![0u32; width];
        for w in 0..width {
            let mut best_value = f64::NEG_INFINITY;
            let mut best_cost = i64::MAX;
            let mut best_p = 0u32;
            for p in 0..=chain.len() {
                let weight = (chain.cum_cost[p] - shift) as usize;
                if weight > w {
                    continue;
                }
                let rest = w - weight;
                let cand_value = chain.cum_importance[p] + value[rest];
                let cand_cost = chain.cum_cost[p] + cost[rest];
                if cand_value > best_value
                    || (cand_value == best_value && cand_cost < best_cost)
                {
                    best_value = cand_value;
                    best_cost = cand_cost;
                    best_p = p as u32;
                }
            }
            next_value[w] = best_value;
            next_cost[w] = best_cost;
            choice_row[w] = best_p;
        }
        std::mem::swap(&mut value, &mut next_value);
        std::mem::swap(&mut cost, &mut next_cost);
        choices.push(choice_row);
    }
    choices.reverse();

    let mut prefixes = vec![0usize; chains.len()];
    let mut w = capacity;
    for (ci, chain) in chains.iter().enumerate() {
        let p = choices[ci][w] as usize;
        prefixes[ci] = p;
        w -= (chain.cum_cost[p] - shifts[ci]) as usize;
    }
    Ok(solution_from_prefixes(&chains, &prefixes))
}

/// Exhaustive oracle over all per-chain prefix combinations. Guarded to 24
/// items; uses the same tie rule as [`solve_exact`].
pub fn brute_force(items: &[Item], budget: i64) -> Result<Solution> {
    const MAX_ITEMS: usize = 24;
    if budget < 0 {
        return Err(Error::validation("budget must be non-negative"));
    }
    if items.len() > MAX_ITEMS {
        return Err(Error::validation(format!(
            "brute force limited to {MAX_ITEMS} items, got {}",
            items.len()
        )));
    }
    let chains = build_chains(items)?;
    let mut best: Option<(f64, i64, Vec<usize>)> = None;
    let mut prefixes = vec![0usize; chains.len()];
    loop {
        let total_cost: i64 = chains
            .iter()
            .zip(&prefixes)
            .map(|(c, &p)| c.cum_cost[p])
            .sum();
        if total_cost <= budget {
            let total_importance: f64 = chains
                .iter()
                .zip(&prefixes)
                .map(|(c, &p)| c.cum_importance[p])
                .sum();
            let better = match &best {
                None => true,
                Some((bi, bc, bp)) => {
                    total_importance > *bi
                        || (total_importance == *bi && total_cost < *bc)
                        || (total_importance == *bi && total_cost == *bc && prefixes < *bp)
                }
            };
            if better {
                best = Some((total_importance, total_cost, prefixes.clone()));
            }
        }
        // Odometer over prefix lengths.
        let mut pos = chains.len();
        loop {
            if pos == 0 {
                let (_, _, prefixes) = match best {
                    Some(b) => b,
                    None => return Ok(Solution::empty()),
                };
                return Ok(solution_from_prefixes(&chains, &prefixes));
            }
            pos -= 1;
            if prefixes[pos] < chains[pos].len() {
                prefixes[pos] += 1;
                break;
            }
            prefixes[pos] = 0;
        }
    }
}

/// Per-item DP with predecessor gating. Items are (stably) sorted by
/// descending importance; the capacity axis is extended by the most
/// negative item cost so negative contributions stay representable. After
/// backtracking, each chain is truncated to its longest kept prefix and
/// tail items are dropped (smallest importance first) until the true
/// cumulative cost fits the budget. Feasible and prefix-closed, but not
/// guaranteed optimal.
pub fn solve_itemwise(items: &[Item], budget: i64) -> Result<Solution> {
    if budget < 0 {
        return Err(Error::validation("budget must be non-negative"));
    }
    let chains = build_chains(items)?;
    if items.is_empty() {
        return Ok(Solution::empty());
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .importance
            .partial_cmp(&items[a].importance)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut row_of_item = std::collections::BTreeMap::new();
    for (row, &idx) in order.iter().enumerate() {
        row_of_item.insert(items[idx].item_id, row);
    }

    let min_cost = items.iter().map(|i| i.cost).min().unwrap_or(0);
    let extended_i64 = budget - min_cost.min(0);
    let extended = usize::try_from(extended_i64)
        .map_err(|_| Error::validation("budget out of range for the DP"))?;
    let cells = (extended as u128 + 1) * items.len() as u128;
    if cells > MAX_DP_CELLS {
        return Err(Error::validation(format!(
            "DP would need {cells} cells; shrink the budget scale"
        )));
    }
    let width = extended + 1;

    let mut keep = BitMatrix::new(items.len(), width);
    let mut dp = vec![0.0f64; width];
    let mut new_dp = vec![0.0f64; width];
    for (row, &idx) in order.iter().enumerate() {
        let item = &items[idx];
        let pred_row = item.preceding_item_id.map(|p| row_of_item[&p]);
        new_dp[0] = dp[0];
        for c in 1..width {
            let v_prune = dp[c];
            let source = c as i64 - item.cost;
            let mut keep_here = false;
            let mut v_keep = f64::NEG_INFINITY;
            if source >= 0 {
                // Reads past the extended axis clamp to its top cell.
                let source = (source as usize).min(extended);
                v_keep = item.importance + dp[source];
                let pred_ok = match pred_row {
                    None => true,
                    Some(p) => keep.get(p, source),
                };
                keep_here = v_keep > v_prune && pred_ok;
            }
            if keep_here {
                keep.set(row, c);
                new_dp[c] = v_keep;
            } else {
                new_dp[c] = v_prune;
            }
        }
        std::mem::swap(&mut dp, &mut new_dp);
    }

    // Standard reconstruction: test the current capacity cell per item,
    // then walk the capacity down by that item's cost.
    let mut kept_rows = vec![false; items.len()];
    let mut cap = budget.min(extended as i64);
    for row in (0..items.len()).rev() {
        if cap < 0 {
            break;
        }
        let c = (cap as usize).min(extended);
        if c == 0 {
            break;
        }
        if keep.get(row, c) {
            kept_rows[row] = true;
            cap -= items[order[row]].cost;
            cap = cap.min(extended as i64);
        }
    }

    // Repair: prefix-close each chain, then enforce the true budget.
    let mut prefixes: Vec<usize> = Vec::with_capacity(chains.len());
    for chain in &chains {
        let mut p = 0;
        for id in &chain.item_ids {
            if kept_rows[row_of_item[id]] {
                p += 1;
            } else {
                break;
            }
        }
        prefixes.push(p);
    }
    loop {
        let total_cost: i64 = chains
            .iter()
            .zip(&prefixes)
            .map(|(c, &p)| c.cum_cost[p])
            .sum();
        if total_cost <= budget {
            break;
        }
        // Drop the cheapest-to-lose tail item across chains.
        let victim = chains
            .iter()
            .enumerate()
            .filter(|(ci, _)| prefixes[*ci] > 0)
            .min_by(|(ai, a), (bi, b)| {
                let ia = a.cum_importance[prefixes[*ai]] - a.cum_importance[prefixes[*ai] - 1];
                let ib = b.cum_importance[prefixes[*bi]] - b.cum_importance[prefixes[*bi] - 1];
                ia.partial_cmp(&ib)
                    .unwrap()
                    .then(b.item_ids[prefixes[*bi] - 1].cmp(&a.item_ids[prefixes[*ai] - 1]))
            })
            .map(|(ci, _)| ci);
        match victim {
            Some(ci) => prefixes[ci] -= 1,
            None => break, // everything empty; cost is 0 <= budget
        }
    }
    Ok(solution_from_prefixes(&chains, &prefixes))
}

struct BitMatrix {
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitMatrix {
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    fn set(&mut self, row: usize, col: usize) {
        self.data[row * self.words_per_row + col / 64] |= 1 << (col % 64);
    }

    fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.words_per_row + col / 64] >> (col % 64) & 1 == 1
    }
}

/// True whether `solution` keeps a rank prefix of every chain in `items`.
pub fn is_prefix_closed(items: &[Item], solution: &Solution) -> bool {
    use std::collections::{BTreeMap, BTreeSet};
    let kept: BTreeSet<u64> = solution.kept_item_ids.iter().copied().collect();
    let mut chains: BTreeMap<u64, Vec<&Item>> = BTreeMap::new();
    for item in items {
        chains.entry(item.chain_id).or_default().push(item);
    }
    for members in chains.values_mut() {
        members.sort_by_key(|i| i.rank_position);
        let mut gap = false;
        for item in members.iter() {
            if kept.contains(&item.item_id) {
                if gap {
                    return false;
                }
            } else {
                gap = true;
            }
        }
    }
    true
}
