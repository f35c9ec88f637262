//! Keyed map/aggregate passes over a [`UserSets`].
//!
//! Per-item sums of per-user contributions are evaluated over an inverted
//! index whose holder lists are in ascending user order, one item per task.
//! The floating-point summation order is therefore fixed by the data alone and
//! results are bit-identical for any worker count.

use rayon::prelude::*;

use crate::model::{ItemId, UserSets};

const MIN_ITEMS_PER_TASK: usize = 4096;
const MIN_USERS_PER_TASK: usize = 1024;

/// For each item, the users holding it (ascending).
#[derive(Debug, Clone)]
pub struct ItemIndex {
    offsets: Vec<usize>,
    holders: Vec<u32>,
}

impl ItemIndex {
    pub fn build(data: &UserSets) -> Self {
        let n = data.num_items();
        let mut offsets = vec![0usize; n + 1];
        for i in data.entries() {
            offsets[i.index() + 1] += 1;
        }
        for k in 0..n {
            offsets[k + 1] += offsets[k];
        }
        let mut cursor = offsets[..n].to_vec();
        let mut holders = vec![0u32; data.num_entries()];
        for u in 0..data.num_users() {
            for i in data.user(u) {
                let c = &mut cursor[i.index()];
                holders[*c] = u as u32;
                *c += 1;
            }
        }
        ItemIndex { offsets, holders }
    }

    pub fn num_items(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn holders(&self, item: ItemId) -> &[u32] {
        &self.holders[self.offsets[item.index()]..self.offsets[item.index() + 1]]
    }

    #[inline]
    pub fn frequency(&self, item: ItemId) -> usize {
        self.offsets[item.index() + 1] - self.offsets[item.index()]
    }

    /// Items held by at least one user.
    pub fn support(&self) -> Vec<bool> {
        (0..self.num_items())
            .into_par_iter()
            .with_min_len(MIN_ITEMS_PER_TASK)
            .map(|i| self.offsets[i + 1] > self.offsets[i])
            .collect()
    }

    /// `out[i] = Σ_{u holds i} per_user[u]`, summed in ascending user order.
    pub fn sum_user_scalars(&self, per_user: &[f64]) -> Vec<f64> {
        self.sum_by(|u, _| per_user[u as usize])
    }

    /// `out[i] = Σ_{u holds i} f(u, i)`, summed in ascending user order.
    pub fn sum_by<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(u32, ItemId) -> f64 + Sync,
    {
        (0..self.num_items())
            .into_par_iter()
            .with_min_len(MIN_ITEMS_PER_TASK)
            .map(|i| {
                let item = ItemId(i as u32);
                self.holders(item).iter().fold(0.0, |acc, &u| acc + f(u, item))
            })
            .collect()
    }
}

/// `out[u] = g(u, Σ_{i in S_u} f(i))`, summing over the user's items in id order.
pub fn gather_per_user<F, G>(data: &UserSets, f: F, g: G) -> Vec<f64>
where
    F: Fn(ItemId) -> f64 + Sync,
    G: Fn(usize, f64) -> f64 + Sync,
{
    (0..data.num_users())
        .into_par_iter()
        .with_min_len(MIN_USERS_PER_TASK)
        .map(|u| g(u, data.user(u).iter().fold(0.0, |acc, &i| acc + f(i))))
        .collect()
}

/// Per-user map producing one scalar per user.
pub fn map_users<F>(data: &UserSets, f: F) -> Vec<f64>
where
    F: Fn(usize, &[ItemId]) -> f64 + Sync,
{
    (0..data.num_users())
        .into_par_iter()
        .with_min_len(MIN_USERS_PER_TASK)
        .map(|u| f(u, data.user(u)))
        .collect()
}

/// Per-item map over the item id space.
pub fn map_items<F>(n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..n).into_par_iter().with_min_len(MIN_ITEMS_PER_TASK).map(f).collect()
}
