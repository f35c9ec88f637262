//! Sequential weighting baselines. Each user's update depends on the weights
//! left by every user before it, so these run single-threaded.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{ItemId, UserSets, WeightMap};
use crate::rng::StreamKey;

/// Seeded permutation of `0..n`.
pub fn user_order(n: usize, key: StreamKey) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut key.rng(0));
    order
}

/// Running weights of a sequential baseline.
#[derive(Debug, Clone)]
pub struct SequentialState {
    weights: Vec<f64>,
    seen: Vec<bool>,
    pub tau: f64,
    pub processed: usize,
}

impl SequentialState {
    pub fn new(num_items: usize, tau: f64) -> Self {
        SequentialState {
            weights: vec![0.0; num_items],
            seen: vec![false; num_items],
            tau,
            processed: 0,
        }
    }

    pub fn weight(&self, item: ItemId) -> f64 {
        self.weights[item.index()]
    }

    /// Adds the ℓ2 projection of the gap to `tau` over the user's items and
    /// returns the squared norm of the addition.
    pub fn policy_gaussian_step(&mut self, items: &[ItemId]) -> f64 {
        let gap_sq: f64 = items
            .iter()
            .map(|&i| (self.tau - self.weights[i.index()]).max(0.0).powi(2))
            .sum();
        let scale = if gap_sq > 1.0 { 1.0 / gap_sq.sqrt() } else { 1.0 };
        let mut added_sq = 0.0;
        for &i in items {
            let g = (self.tau - self.weights[i.index()]).max(0.0) * scale;
            self.weights[i.index()] += g;
            self.seen[i.index()] = true;
            added_sq += g * g;
        }
        self.processed += 1;
        added_sq
    }

    /// Increments by one the heaviest item still below `tau` (smallest id on
    /// ties). Returns the chosen item, if any.
    pub fn greedy_update_step(&mut self, items: &[ItemId]) -> Option<ItemId> {
        let mut best: Option<ItemId> = None;
        for &i in items {
            self.seen[i.index()] = true;
            let w = self.weights[i.index()];
            if w < self.tau && best.is_none_or(|b| w > self.weights[b.index()]) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            self.weights[b.index()] += 1.0;
        }
        self.processed += 1;
        best
    }

    pub fn into_weights(self) -> WeightMap {
        WeightMap::from_dense(self.weights, self.seen)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::param(format!("tau must be finite and > 0, got {tau}")));
    }
    Ok(())
}

fn check_order(data: &UserSets, order: &[u32]) -> Result<()> {
    if order.len() != data.num_users() {
        return Err(Error::param(format!(
            "user order has {} entries for {} users",
            order.len(),
            data.num_users()
        )));
    }
    Ok(())
}

/// Processes users in `order`, each adding the gap vector `max(0, tau - w)`
/// over its items, scaled down to unit ℓ2 norm when longer.
pub fn policy_gaussian_weights(data: &UserSets, tau: f64, order: &[u32]) -> Result<WeightMap> {
    check_tau(tau)?;
    check_order(data, order)?;
    let mut state = SequentialState::new(data.num_items(), tau);
    for &u in order {
        state.policy_gaussian_step(data.user(u as usize));
    }
    Ok(state.into_weights())
}

/// Processes users in `order`, each adding 1 to its heaviest item below `tau`.
pub fn greedy_update_weights(data: &UserSets, tau: f64, order: &[u32]) -> Result<WeightMap> {
    check_tau(tau)?;
    check_order(data, order)?;
    let mut state = SequentialState::new(data.num_items(), tau);
    for &u in order {
        state.greedy_update_step(data.user(u as usize));
    }
    Ok(state.into_weights())
}
