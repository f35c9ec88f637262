//! Item weighting algorithms with bounded ℓ2 and novel-item sensitivity.
//!
//! * [`basic_weights`]: every user spreads `1/sqrt(|S_u|)` over its items.
//! * [`user_weights`]: a single user's biased allocation.
//! * [`mad_weights`]: adaptive weighting that truncates items at the adaptive
//!   threshold and reroutes the excess back through the users that
//!   contributed it.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{self, ItemIndex};
use crate::error::{Error, Result};
use crate::model::{reroute_discount, AdaptiveConfig, BiasClamp, BiasMap, ItemId, UserSets, WeightMap};

/// Cap on rescaling passes in [`user_weights`].
pub const USER_WEIGHTS_MAX_ITERS: u32 = 64;
const NORM_SLACK: f64 = 1e-12;

pub fn basic_weights(data: &UserSets) -> WeightMap {
    let index = ItemIndex::build(data);
    basic_weights_indexed(data, &index)
}

pub(crate) fn basic_weights_indexed(data: &UserSets, index: &ItemIndex) -> WeightMap {
    let per_user = engine::map_users(data, |_, items| {
        if items.is_empty() {
            0.0
        } else {
            1.0 / (items.len() as f64).sqrt()
        }
    });
    WeightMap::from_dense(index.sum_user_scalars(&per_user), index.support())
}

/// Result of one user's biased allocation, aligned with the input items.
#[derive(Debug, Clone, PartialEq)]
pub struct UserWeights {
    pub weights: Vec<f64>,
    /// Rescaling passes performed by the top-up loop.
    pub iterations: u32,
}

impl UserWeights {
    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Allocates one user's unit ℓ2 budget over `items`.
///
/// Items with bias below 1 get `max(b_min, b)/sqrt(d)`. Unbiased items share
/// the rest of the budget, capped at `b_max/sqrt(d)`. Unbiased items left
/// below `1/sqrt(d)` are then scaled up while budget remains. Budget that
/// cannot be placed on unbiased items stays unused.
pub fn user_weights(items: &[ItemId], biases: &BiasMap, clamp: BiasClamp) -> Result<UserWeights> {
    if items.is_empty() {
        return Err(Error::param("user_weights needs a non-empty item set"));
    }
    let mut weights = Vec::with_capacity(items.len());
    let iterations = user_weights_into(items, biases, clamp, &mut weights)?;
    Ok(UserWeights { weights, iterations })
}

pub(crate) fn user_weights_into(items: &[ItemId], biases: &BiasMap, clamp: BiasClamp, w: &mut Vec<f64>) -> Result<u32> {
    let d = items.len();
    let sd = (d as f64).sqrt();
    w.clear();

    let mut biased_sq = 0.0;
    let mut n_unbiased = 0usize;
    for &i in items {
        let b = biases.get(i);
        if !(b > 0.0) {
            return Err(Error::param(format!("bias for item {} must be > 0, got {b}", i.0)));
        }
        if b < 1.0 {
            let x = clamp.b_min.max(b) / sd;
            biased_sq += x * x;
            w.push(x);
        } else {
            n_unbiased += 1;
            w.push(f64::NAN);
        }
    }
    if n_unbiased == 0 {
        return Ok(0);
    }

    let cap = clamp.b_max / sd;
    let share = if n_unbiased == d {
        1.0 / sd
    } else {
        ((1.0 - biased_sq).max(0.0) / n_unbiased as f64).sqrt()
    };
    let unbiased_value = cap.min(share);
    for x in w.iter_mut().filter(|x| x.is_nan()) {
        *x = unbiased_value;
    }

    // Top-up pass over unbiased items still below the uniform share.
    let floor = 1.0 / sd;
    let mut iterations = 0;
    while iterations < USER_WEIGHTS_MAX_ITERS {
        let norm_sq: f64 = w.iter().map(|x| x * x).sum();
        if norm_sq >= 1.0 - NORM_SLACK {
            break;
        }
        let small: Vec<bool> = (0..d).map(|k| biases.get(items[k]) >= 1.0 && w[k] < floor).collect();
        let (mut small_sq, mut small_max, mut any) = (0.0, 0.0f64, false);
        for k in (0..d).filter(|&k| small[k]) {
            small_sq += w[k] * w[k];
            small_max = small_max.max(w[k]);
            any = true;
        }
        if !any || small_sq == 0.0 {
            break;
        }
        let c = (cap / small_max).min((1.0 + (1.0 - norm_sq) / small_sq).sqrt());
        if c <= 1.0 + NORM_SLACK {
            break;
        }
        for (x, _) in w.iter_mut().zip(&small).filter(|(_, &s)| s) {
            *x *= c;
        }
        iterations += 1;
    }
    Ok(iterations)
}

/// Parameters of the adaptive weighter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MadParams {
    /// Adaptive threshold; item weights above it are truncated and rerouted.
    pub tau: f64,
    pub adaptive: AdaptiveConfig,
    pub clamp: BiasClamp,
    /// Permit `tau < 1` or `d_max < 4`, where the novel-item bound is not proved.
    pub allow_unsafe: bool,
}

impl MadParams {
    pub fn new(tau: f64, d_max: f64, clamp: BiasClamp) -> Result<Self> {
        Ok(MadParams {
            tau,
            adaptive: AdaptiveConfig::new(d_max, clamp.b_min)?,
            clamp,
            allow_unsafe: false,
        })
    }

    pub fn unsafe_override(mut self, allow: bool) -> Self {
        self.allow_unsafe = allow;
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::param(format!("tau must be finite, got {}", self.tau)));
        }
        let expected = reroute_discount(self.clamp.b_min, self.adaptive.d_max);
        if self.adaptive.alpha.to_bits() != expected.to_bits() {
            return Err(Error::param(format!(
                "adaptive config alpha {} does not match b_min {} and d_max {}",
                self.adaptive.alpha, self.clamp.b_min, self.adaptive.d_max
            )));
        }
        if !self.allow_unsafe {
            if self.tau < 1.0 {
                return Err(Error::UnsafeRegime(format!("tau = {} < 1", self.tau)));
            }
            if self.adaptive.d_max < 4.0 {
                return Err(Error::UnsafeRegime(format!("d_max = {} < 4", self.adaptive.d_max)));
            }
        }
        Ok(())
    }
}

/// Every intermediate vector of the adaptive weighter, dense over the item
/// id space (per-item) or the user index (per-user).
#[derive(Debug, Clone)]
pub struct MadStages {
    pub adaptive_user: Vec<bool>,
    pub init: Vec<f64>,
    pub excess_ratio: Vec<f64>,
    pub trunc: Vec<f64>,
    pub user_excess: Vec<f64>,
    pub reroute: Vec<f64>,
    pub weights: WeightMap,
    /// Largest number of top-up passes any user needed.
    pub max_user_iterations: u32,
}

pub fn mad_weights(data: &UserSets, params: &MadParams, biases: &BiasMap) -> Result<WeightMap> {
    Ok(mad_stages(data, params, biases)?.weights)
}

pub fn mad_stages(data: &UserSets, params: &MadParams, biases: &BiasMap) -> Result<MadStages> {
    let index = ItemIndex::build(data);
    mad_stages_indexed(data, &index, params, biases)
}

pub(crate) fn mad_stages_indexed(
    data: &UserSets,
    index: &ItemIndex,
    params: &MadParams,
    biases: &BiasMap,
) -> Result<MadStages> {
    params.validate()?;
    let MadParams {
        tau, adaptive, clamp, ..
    } = *params;
    let n_items = data.num_items();

    let adaptive_user: Vec<bool> = (0..data.num_users())
        .into_par_iter()
        .with_min_len(1024)
        .map(|u| adaptive.is_adaptive(data.degree(u)))
        .collect();
    let sqrt_deg: Vec<f64> = engine::map_users(data, |_, s| (s.len() as f64).sqrt());

    // Initial ℓ1-bounded weights from adaptive users.
    let init_contrib = engine::map_users(data, |u, s| if adaptive_user[u] { 1.0 / s.len() as f64 } else { 0.0 });
    let init = index.sum_user_scalars(&init_contrib);

    // Excess ratio and truncation. `1 - tau/x` is monotone in x under rounding.
    let excess_ratio = engine::map_items(n_items, |i| {
        let x = init[i];
        if x > 0.0 {
            (1.0 - tau / x).max(0.0)
        } else {
            0.0
        }
    });
    let trunc = engine::map_items(n_items, |i| init[i].min(tau));

    // Excess returned to each adaptive user, then rerouted over its items.
    let user_excess = engine::gather_per_user(
        data,
        |i| excess_ratio[i.index()],
        |u, sum| {
            if adaptive_user[u] {
                sum / data.degree(u) as f64
            } else {
                0.0
            }
        },
    );
    let reroute_contrib: Vec<f64> = user_excess
        .iter()
        .map(|e| adaptive.alpha * e / adaptive.d_max)
        .collect();
    let reroute = index.sum_user_scalars(&reroute_contrib);

    // Per-user biased allocation. Biased items receive max(b_min, b)/sqrt(d);
    // all unbiased items of a user share one value, stored here.
    let unbiased_alloc: Vec<(f64, u32)> = if biases.is_unbiased() && clamp.b_max >= 1.0 {
        sqrt_deg.iter().map(|&sd| (1.0 / sd, 0)).collect()
    } else {
        (0..data.num_users())
            .into_par_iter()
            .with_min_len(256)
            .map_init(Vec::new, |buf, u| {
                let items = data.user(u);
                if items.is_empty() {
                    return Ok((0.0, 0));
                }
                let iters = user_weights_into(items, biases, clamp, buf)?;
                let value = items
                    .iter()
                    .zip(buf.iter())
                    .find(|(&i, _)| biases.get(i) >= 1.0)
                    .map(|(_, &x)| x)
                    .unwrap_or(0.0);
                Ok((value, iters))
            })
            .collect::<Result<_>>()?
    };
    let max_user_iterations = unbiased_alloc.iter().map(|&(_, k)| k).max().unwrap_or(0);

    let final_add = index.sum_by(|u, i| {
        let u = u as usize;
        let b = biases.get(i);
        let wb = if b < 1.0 {
            clamp.b_min.max(b) / sqrt_deg[u]
        } else {
            unbiased_alloc[u].0
        };
        wb - init_contrib[u]
    });
    let values = engine::map_items(n_items, |i| trunc[i] + reroute[i] + final_add[i]);

    Ok(MadStages {
        adaptive_user,
        init,
        excess_ratio,
        trunc,
        user_excess,
        reroute,
        weights: WeightMap::from_dense(values, index.support()),
        max_user_iterations,
    })
}
