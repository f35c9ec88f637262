//! How much of a dataset a selection covers, broken down by item frequency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ItemId, UserSets};

/// Lower edges of the frequency buckets: 1, 2–9, 10–99, 100–999, ≥1000.
pub const BUCKET_EDGES: [u32; 5] = [1, 2, 10, 100, 1000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    pub min_frequency: u32,
    /// Inclusive upper edge; `None` for the open last bucket.
    pub max_frequency: Option<u32>,
    pub total_items: u64,
    pub selected_items: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub buckets: Vec<FrequencyBucket>,
    /// Fraction of users holding at least one selected item.
    pub user_coverage: f64,
    /// Fraction of user-item entries whose item is selected.
    pub entry_coverage: f64,
}

fn bucket_of(freq: u32) -> usize {
    BUCKET_EDGES.iter().rposition(|&e| freq >= e).unwrap_or(0)
}

fn fraction(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `selected` must be a subset of the observed union of `data`.
pub fn coverage_report(data: &UserSets, selected: &[ItemId]) -> Result<CoverageReport> {
    let freq = data.item_frequencies();
    let mut is_selected = vec![false; data.num_items()];
    for &i in selected {
        match freq.get(i.index()) {
            Some(&f) if f > 0 => is_selected[i.index()] = true,
            _ => {
                return Err(Error::param(format!(
                    "selected item {} is not in the observed union",
                    i.0
                )))
            }
        }
    }

    let mut buckets: Vec<FrequencyBucket> = BUCKET_EDGES
        .iter()
        .enumerate()
        .map(|(k, &lo)| FrequencyBucket {
            min_frequency: lo,
            max_frequency: BUCKET_EDGES.get(k + 1).map(|hi| hi - 1),
            total_items: 0,
            selected_items: 0,
        })
        .collect();
    let mut covered_entries = 0u64;
    for (i, &f) in freq.iter().enumerate().filter(|(_, &f)| f > 0) {
        let b = &mut buckets[bucket_of(f)];
        b.total_items += 1;
        if is_selected[i] {
            b.selected_items += 1;
            covered_entries += f as u64;
        }
    }
    let covered_users = data.iter().filter(|s| s.iter().any(|i| is_selected[i.index()])).count();

    Ok(CoverageReport {
        buckets,
        user_coverage: fraction(covered_users as u64, data.num_users() as u64),
        entry_coverage: fraction(covered_entries, data.num_entries() as u64),
    })
}
