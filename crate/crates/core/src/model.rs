//! Domain types shared by the weighting, calibration and orchestration code.
//!
//! Items and users are interned to dense `u32` ids. A [`UserSets`] stores the
//! per-user item sets in compressed-row form, and the weight-like maps are
//! dense vectors over the item id space with an explicit support mask, so
//! that "absent" and "zero" stay distinguishable without hashing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Per-user item sets in compressed-row layout.
///
/// User `u` holds `items[offsets[u]..offsets[u + 1]]`, sorted and free of
/// duplicates. Users may be empty (e.g. an empty document or a set emptied
/// by round-two removals); weighters skip them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserSets {
    offsets: Vec<usize>,
    items: Vec<ItemId>,
    num_items: usize,
}

impl UserSets {
    pub fn new() -> Self {
        UserSets {
            offsets: vec![0],
            items: Vec::new(),
            num_items: 0,
        }
    }

    pub fn with_capacity(users: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(users + 1);
        offsets.push(0);
        UserSets {
            offsets,
            items: Vec::with_capacity(entries),
            num_items: 0,
        }
    }

    /// Builds a collection from raw `u32` item ids, one inner vector per user.
    pub fn from_sets<I, S>(sets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = u32>,
    {
        let mut out = UserSets::new();
        for set in sets {
            out.push_user(set.into_iter().map(ItemId));
        }
        out
    }

    /// Appends a user. Duplicate items collapse.
    pub fn push_user(&mut self, items: impl IntoIterator<Item = ItemId>) {
        let start = self.items.len();
        self.items.extend(items);
        let slot = &mut self.items[start..];
        slot.sort_unstable();
        let mut kept = 0;
        for k in 0..slot.len() {
            if k == 0 || slot[k] != slot[kept - 1] {
                slot[kept] = slot[k];
                kept += 1;
            }
        }
        self.items.truncate(start + kept);
        if let Some(max) = self.items[start..].last() {
            self.num_items = self.num_items.max(max.index() + 1);
        }
        self.offsets.push(self.items.len());
    }

    /// Extends the item id space so that ids `< n` are valid even if unused.
    pub fn reserve_item_space(&mut self, n: usize) {
        self.num_items = self.num_items.max(n);
    }

    pub fn num_users(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.items.len()
    }

    /// Size of the item id space (one past the largest id seen or reserved).
    pub fn num_items(&self) -> usize {
        self.num_items
    }

    #[inline]
    pub fn user(&self, u: usize) -> &[ItemId] {
        &self.items[self.offsets[u]..self.offsets[u + 1]]
    }

    #[inline]
    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_users()).map(|u| self.degree(u)).max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[ItemId]> + '_ {
        (0..self.num_users()).map(move |u| self.user(u))
    }

    pub fn entries(&self) -> &[ItemId] {
        &self.items
    }

    /// Assembles a collection from parts produced by a parallel stage.
    pub(crate) fn from_parts(offsets: Vec<usize>, items: Vec<ItemId>, num_items: usize) -> Self {
        debug_assert_eq!(offsets.last().copied(), Some(items.len()));
        UserSets {
            offsets,
            items,
            num_items,
        }
    }

    /// Rebuilds the collection with every user's set mapped through `f`.
    /// User indices are preserved; the item id space is kept.
    pub fn map_users<F>(&self, f: F) -> UserSets
    where
        F: Fn(usize, &[ItemId]) -> Vec<ItemId> + Sync,
    {
        let mapped: Vec<Vec<ItemId>> = (0..self.num_users())
            .into_par_iter()
            .with_min_len(1024)
            .map(|u| f(u, self.user(u)))
            .collect();
        let mut out = UserSets::with_capacity(mapped.len(), mapped.iter().map(Vec::len).sum());
        for set in mapped {
            out.push_user(set);
        }
        out.num_items = out.num_items.max(self.num_items);
        out
    }

    /// Removes every item for which `remove` is true from every user's set.
    pub fn remove_items(&self, remove: &[bool]) -> UserSets {
        let mut offsets = Vec::with_capacity(self.offsets.len());
        offsets.push(0);
        let mut items = Vec::with_capacity(self.items.len());
        for u in 0..self.num_users() {
            items.extend(
                self.user(u)
                    .iter()
                    .copied()
                    .filter(|i| !remove.get(i.index()).copied().unwrap_or(false)),
            );
            offsets.push(items.len());
        }
        UserSets::from_parts(offsets, items, self.num_items)
    }

    /// Number of users holding each item.
    pub fn item_frequencies(&self) -> Vec<u32> {
        let mut freq = vec![0u32; self.num_items];
        for i in &self.items {
            freq[i.index()] += 1;
        }
        freq
    }

    /// Membership mask of the observed union over the item id space.
    pub fn support_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_items];
        for i in &self.items {
            mask[i.index()] = true;
        }
        mask
    }
}

/// The union of all user sets, in ascending id order.
pub fn observed_union(data: &UserSets) -> Vec<ItemId> {
    data.support_mask()
        .iter()
        .enumerate()
        .filter(|(_, &present)| present)
        .map(|(i, _)| ItemId(i as u32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::param(format!("epsilon must be finite and > 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::param(format!("delta must lie in (0, 1], got {delta}")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }
}

/// Clamps applied to per-item biases when allocating a user's weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasClamp {
    pub b_min: f64,
    pub b_max: f64,
}

impl BiasClamp {
    pub const UNBIASED: BiasClamp = BiasClamp { b_min: 1.0, b_max: 1.0 };

    pub fn new(b_min: f64, b_max: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&b_min) {
            return Err(Error::param(format!("b_min must lie in [0.5, 1], got {b_min}")));
        }
        if !(b_max >= 1.0) {
            return Err(Error::param(format!("b_max must be >= 1, got {b_max}")));
        }
        Ok(BiasClamp { b_min, b_max })
    }
}

/// Per-item biases in `(0, 1]`; items without an explicit bias are unbiased.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BiasMap {
    values: Option<Vec<f64>>,
}

impl BiasMap {
    pub fn unbiased() -> Self {
        BiasMap { values: None }
    }

    pub fn set(&mut self, item: ItemId, bias: f64) -> Result<()> {
        if !(bias > 0.0 && bias <= 1.0) {
            return Err(Error::param(format!(
                "bias for item {} must lie in (0, 1], got {bias}",
                item.0
            )));
        }
        let values = self.values.get_or_insert_with(Vec::new);
        if values.len() <= item.index() {
            values.resize(item.index() + 1, 1.0);
        }
        values[item.index()] = bias;
        Ok(())
    }

    #[inline]
    pub fn get(&self, item: ItemId) -> f64 {
        match &self.values {
            Some(v) => v.get(item.index()).copied().unwrap_or(1.0),
            None => 1.0,
        }
    }

    pub fn is_unbiased(&self) -> bool {
        match &self.values {
            None => true,
            Some(v) => v.iter().all(|&b| b == 1.0),
        }
    }

    /// Items carrying a bias strictly below 1.
    pub fn biased_items(&self) -> impl Iterator<Item = (ItemId, f64)> + '_ {
        self.values
            .iter()
            .flat_map(|v| v.iter().enumerate())
            .filter(|(_, &b)| b < 1.0)
            .map(|(i, &b)| (ItemId(i as u32), b))
    }
}

/// Degree gate and reroute discount of the adaptive weighter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub d_max: f64,
    pub alpha: f64,
    pub min_adaptive_degree: usize,
}

impl AdaptiveConfig {
    pub fn new(d_max: f64, b_min: f64) -> Result<Self> {
        if !(d_max.is_finite() && d_max > 1.0) {
            return Err(Error::param(format!("d_max must be finite and > 1, got {d_max}")));
        }
        if !(0.5..=1.0).contains(&b_min) {
            return Err(Error::param(format!("b_min must lie in [0.5, 1], got {b_min}")));
        }
        Ok(AdaptiveConfig {
            d_max,
            alpha: reroute_discount(b_min, d_max),
            min_adaptive_degree: (1.0 / (b_min * b_min)).ceil() as usize,
        })
    }

    #[inline]
    pub fn is_adaptive(&self, degree: usize) -> bool {
        degree >= self.min_adaptive_degree && (degree as f64) <= self.d_max
    }
}

/// `b_min - 1 / (2 sqrt(d_max))`.
pub fn reroute_discount(b_min: f64, d_max: f64) -> f64 {
    b_min - 1.0 / (2.0 * d_max.sqrt())
}

/// Sparse item weights, stored densely over the item id space with a support
/// mask. Items outside the support are absent (weight 0 for all purposes).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightMap {
    values: Vec<f64>,
    support: Vec<bool>,
}

impl WeightMap {
    pub fn from_dense(values: Vec<f64>, support: Vec<bool>) -> Self {
        assert_eq!(values.len(), support.len());
        WeightMap { values, support }
    }

    pub fn empty(num_items: usize) -> Self {
        WeightMap {
            values: vec![0.0; num_items],
            support: vec![false; num_items],
        }
    }

    #[inline]
    pub fn get(&self, item: ItemId) -> Option<f64> {
        match self.support.get(item.index()) {
            Some(true) => Some(self.values[item.index()]),
            _ => None,
        }
    }

    /// Weight with absent items reading as 0.
    #[inline]
    pub fn weight(&self, item: ItemId) -> f64 {
        self.get(item).unwrap_or(0.0)
    }

    #[inline]
    pub fn contains(&self, item: ItemId) -> bool {
        self.support.get(item.index()).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, item: ItemId, w: f64) {
        let i = item.index();
        if i >= self.values.len() {
            self.values.resize(i + 1, 0.0);
            self.support.resize(i + 1, false);
        }
        self.values[i] = w;
        self.support[i] = true;
    }

    pub fn len(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.support.iter().any(|&s| s)
    }

    pub fn id_space(&self) -> usize {
        self.values.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.support)
            .enumerate()
            .filter(|(_, (_, &s))| s)
            .map(|(i, (&w, _))| (ItemId(i as u32), w))
    }

    pub fn dense_values(&self) -> &[f64] {
        &self.values
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }
}

/// Timing and volume of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    /// Entries (user-item pairs) or items processed by the stage.
    pub processed: u64,
}

impl StageTiming {
    pub fn throughput(&self) -> f64 {
        if self.seconds > 0.0 {
            self.processed as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub rho_argmax_t: usize,
    /// Adaptive threshold, when the weighter uses one.
    pub tau: Option<f64>,
    pub candidates: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub output_size: usize,
    pub entries_processed: u64,
    pub epsilon_total: f64,
    pub delta_total: f64,
    pub rounds: Vec<RoundSummary>,
    pub stages: Vec<StageTiming>,
}

/// Output of a selection run.
///
/// The noisy weights are kept for later rounds of a multi-round algorithm
/// but are not private to release: their support is the true union.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub selected: Vec<ItemId>,
    noisy_weights: WeightMap,
    pub metrics: RunMetrics,
}

impl SelectionResult {
    pub(crate) fn new(selected: Vec<ItemId>, noisy_weights: WeightMap, metrics: RunMetrics) -> Self {
        SelectionResult {
            selected,
            noisy_weights,
            metrics,
        }
    }

    /// Noisy weights on the observed union. Releasing these is NOT
    /// differentially private.
    pub fn noisy_weights_non_private(&self) -> &WeightMap {
        &self.noisy_weights
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.selected.binary_search(&item).is_ok()
    }
}
