//! 0-1 knapsack over attention blocks: an exact solver for small instances
//! and the ratio greedy used by the router.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// One candidate block: its error mass and its entry count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub value: f64,
    pub weight: u64,
}

impl Item {
    pub fn new(value: f64, weight: u64) -> Self {
        Self { value, weight }
    }

    pub fn ratio(&self) -> f64 {
        if self.weight == 0 {
            f64::INFINITY
        } else {
            self.value / self.weight as f64
        }
    }
}

/// Chosen subset of items with its totals.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: Vec<bool>,
    pub value: f64,
    pub weight: u64,
}

impl Selection {
    fn from_chosen(items: &[Item], chosen: Vec<bool>) -> Self {
        let mut value = 0.0;
        let mut weight = 0;
        for (it, &c) in items.iter().zip(&chosen) {
            if c {
                value += it.value;
                weight += it.weight;
            }
        }
        Self {
            chosen,
            value,
            weight,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.chosen
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }
}

/// Size limits for the exact solver. It refuses rather than approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    /// Largest item count for subset enumeration.
    pub max_exhaustive_items: usize,
    /// Largest capacity (after dividing out the common weight factor) for DP.
    pub max_dp_capacity: u64,
    /// Largest `items × (capacity + 1)` DP decision table.
    pub max_dp_cells: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_exhaustive_items: 24,
            max_dp_capacity: 1_000_000,
            max_dp_cells: 1 << 28,
        }
    }
}

/// When the next block in ranked order does not fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Overshoot {
    /// Skip it and keep scanning for blocks that still fit.
    #[default]
    FillRemainder,
    /// Stop selecting.
    StopAtFirstOverflow,
}

/// Optimal 0-1 knapsack. On equal value the lexicographically smallest
/// index set wins.
pub fn solve_exact(items: &[Item], capacity: u64, limits: &OracleLimits) -> Result<Selection> {
    let total: u64 = items.iter().map(|it| it.weight).sum();
    if total <= capacity && items.iter().all(|it| it.value >= 0.0) {
        return Ok(Selection::from_chosen(items, vec![true; items.len()]));
    }
    let g = items
        .iter()
        .map(|it| it.weight)
        .filter(|&w| w > 0)
        .fold(0, gcd)
        .max(1);
    let cap = (capacity / g).min(total / g);
    let cells = (items.len() as u64).saturating_mul(cap + 1);
    if cap <= limits.max_dp_capacity && cells <= limits.max_dp_cells {
        let weights: Vec<usize> = items.iter().map(|it| (it.weight / g) as usize).collect();
        return Ok(Selection::from_chosen(items, dp(items, &weights, cap as usize)));
    }
    if items.len() <= limits.max_exhaustive_items {
        return Ok(Selection::from_chosen(items, enumerate(items, capacity)));
    }
    Err(Error::OracleLimit(alloc::format!(
        "{} items, reduced capacity {}",
        items.len(),
        cap
    )))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Suffix DP: `best[w]` is the optimum over items `i..` with capacity `w`;
/// decisions are replayed front to back so lower indices are preferred on ties.
fn dp(items: &[Item], weights: &[usize], cap: usize) -> Vec<bool> {
    let n = items.len();
    let width = cap + 1;
    let mut take = vec![0u64; (n * width).div_ceil(64)];
    let mut best = vec![0.0f64; width];
    for i in (0..n).rev() {
        let (w_i, v_i) = (weights[i], items[i].value);
        for w in (0..width).rev() {
            if w_i > w {
                continue;
            }
            let with = best[w - w_i] + v_i;
            if with > best[w] || (with == best[w] && v_i > 0.0) {
                best[w] = with;
                let bit = i * width + w;
                take[bit / 64] |= 1 << (bit % 64);
            }
        }
    }
    let mut chosen = vec![false; n];
    let mut w = cap;
    for (i, c) in chosen.iter_mut().enumerate() {
        let bit = i * width + w;
        if take[bit / 64] & (1 << (bit % 64)) != 0 {
            *c = true;
            w -= weights[i];
        }
    }
    chosen
}

/// Gray-code walk over all subsets.
fn enumerate(items: &[Item], capacity: u64) -> Vec<bool> {
    let n = items.len();
    let mut cur = vec![false; n];
    let mut weight = 0u64;
    let mut best = cur.clone();
    let mut best_value = 0.0f64;
    for step in 1u64..(1u64 << n) {
        let flip = step.trailing_zeros() as usize;
        cur[flip] = !cur[flip];
        if cur[flip] {
            weight += items[flip].weight;
        } else {
            weight -= items[flip].weight;
        }
        if weight > capacity {
            continue;
        }
        // summed in index order so equal subsets compare equal
        let exact: f64 = items
            .iter()
            .zip(&cur)
            .filter(|(_, &c)| c)
            .map(|(it, _)| it.value)
            .sum();
        if exact > best_value || (exact == best_value && lex_less(&cur, &best)) {
            best_value = exact;
            best.copy_from_slice(&cur);
        }
    }
    best
}

/// Lexicographic order of the ascending index lists two subsets induce.
fn lex_less(a: &[bool], b: &[bool]) -> bool {
    let ia = a.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i);
    let ib = b.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i);
    ia.cmp(ib) == Ordering::Less
}

/// Indices sorted by descending value/weight, then descending value, then
/// ascending index.
pub fn ratio_order(items: &[Item]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .ratio()
            .total_cmp(&items[a].ratio())
            .then(items[b].value.total_cmp(&items[a].value))
            .then(a.cmp(&b))
    });
    order
}

/// Walk `order`, taking every item that fits.
///
/// With `single_item_fallback`, the result is replaced by the single most
/// valuable fitting item whenever that beats the greedy total, which gives
/// the classic one-half approximation guarantee.
pub fn greedy(
    items: &[Item],
    order: &[usize],
    capacity: u64,
    overshoot: Overshoot,
    single_item_fallback: bool,
) -> Selection {
    let mut chosen = vec![false; items.len()];
    let mut remaining = capacity;
    for &i in order {
        if items[i].weight <= remaining {
            chosen[i] = true;
            remaining -= items[i].weight;
        } else if overshoot == Overshoot::StopAtFirstOverflow {
            break;
        }
    }
    let sel = Selection::from_chosen(items, chosen);
    if !single_item_fallback {
        return sel;
    }
    let best_single = order
        .iter()
        .copied()
        .filter(|&i| items[i].weight <= capacity)
        .fold(None::<usize>, |best, i| match best {
            Some(b) if items[b].value >= items[i].value => Some(b),
            _ => Some(i),
        });
    match best_single {
        Some(i) if items[i].value > sel.value => {
            let mut chosen = vec![false; items.len()];
            chosen[i] = true;
            Selection::from_chosen(items, chosen)
        }
        _ => sel,
    }
}
