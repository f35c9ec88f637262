//! Multi-round selection with the privacy budget split across rounds.
//!
//! Later rounds may use anything released or queried privately in earlier
//! rounds: items already selected are removed, and in [`mad2r`] the round-one
//! noisy weights (restricted to the observed union) also drop hopeless items
//! and bias down items that are likely to clear the threshold anyway.

use serde::Serialize;

use crate::calibration::{calibrate, SensitivityProfile};
use crate::error::{Error, Result};
use crate::model::{BiasClamp, BiasMap, ItemId, PrivacyBudget, RunMetrics, SelectionResult, UserSets, WeightMap};
use crate::pipeline::{cap_degrees, run_round, timed, Weighter};
use crate::rng::{Purpose, RunSeed};

/// Per-round budgets, consumed in order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundBudgetSplit {
    rounds: Vec<PrivacyBudget>,
}

impl RoundBudgetSplit {
    pub fn new(rounds: Vec<PrivacyBudget>) -> Result<Self> {
        if rounds.is_empty() {
            return Err(Error::param("budget split needs at least one round"));
        }
        for r in &rounds {
            PrivacyBudget::new(r.epsilon, r.delta)?;
        }
        Ok(RoundBudgetSplit { rounds })
    }

    /// Splits `total` proportionally to `fractions`, which must be positive
    /// and sum to 1.
    pub fn from_fractions(total: PrivacyBudget, fractions: &[f64]) -> Result<Self> {
        if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::param(format!(
                "split fractions must lie in (0, 1], got {fractions:?}"
            )));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("split fractions must sum to 1, got {sum}")));
        }
        Self::new(
            fractions
                .iter()
                .map(|f| PrivacyBudget {
                    epsilon: total.epsilon * f,
                    delta: total.delta * f,
                })
                .collect(),
        )
    }

    pub fn rounds(&self) -> &[PrivacyBudget] {
        &self.rounds
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn total(&self) -> PrivacyBudget {
        PrivacyBudget {
            epsilon: self.rounds.iter().map(|r| r.epsilon).sum(),
            delta: self.rounds.iter().map(|r| r.delta).sum(),
        }
    }
}

/// Confidence bounds on the true round-one weights.
#[derive(Debug, Clone)]
pub struct ConfidenceBounds {
    /// `max(0, w̃ − c_lb·σ)`.
    pub lb: WeightMap,
    /// `w̃ + c_ub·σ`.
    pub ub: WeightMap,
    pub c_lb: f64,
    pub c_ub: f64,
}

impl ConfidenceBounds {
    pub fn from_noisy(noisy: &WeightMap, sigma: f64, c_lb: f64, c_ub: f64) -> Self {
        let (mut lb, mut ub) = (WeightMap::empty(noisy.id_space()), WeightMap::empty(noisy.id_space()));
        for (i, w) in noisy.iter() {
            lb.insert(i, (w - c_lb * sigma).max(0.0));
            ub.insert(i, w + c_ub * sigma);
        }
        ConfidenceBounds { lb, ub, c_lb, c_ub }
    }
}

/// Bias that keeps an item with lower bound `lb` from overshooting `rho`:
/// `min(1, rho / lb)`, and 1 when the lower bound is not positive.
pub fn overshoot_bias(rho: f64, lb: f64) -> f64 {
    if lb > 0.0 {
        (rho / lb).min(1.0)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Mad2rConfig {
    pub split: RoundBudgetSplit,
    pub delta0: usize,
    pub d_max: f64,
    pub beta: f64,
    pub c_lb: f64,
    pub c_ub: f64,
    pub clamp: BiasClamp,
    pub allow_unsafe: bool,
}

impl Mad2rConfig {
    /// Standard setting: split [0.1, 0.9], Δ0 = 100, d_max = 50, β = 2,
    /// C_lb = 1, C_ub = 3, b_min = 0.5, b_max = 2.
    pub fn standard(total: PrivacyBudget) -> Result<Self> {
        Ok(Mad2rConfig {
            split: RoundBudgetSplit::from_fractions(total, &[0.1, 0.9])?,
            delta0: 100,
            d_max: 50.0,
            beta: 2.0,
            c_lb: 1.0,
            c_ub: 3.0,
            clamp: BiasClamp::new(0.5, 2.0)?,
            allow_unsafe: false,
        })
    }
}

fn merge_noisy(into: &mut WeightMap, from: &WeightMap) {
    for (i, w) in from.iter() {
        into.insert(i, w);
    }
}

/// Two-round adaptive selection. Round one runs unbiased adaptive weighting;
/// round two drops items selected or out of reach, biases the rest from the
/// round-one confidence bounds, and runs biased adaptive weighting.
pub fn mad2r(data: &UserSets, config: &Mad2rConfig, seed: RunSeed) -> Result<SelectionResult> {
    let [b1, b2] = config.split.rounds() else {
        return Err(Error::param(format!(
            "two-round selection needs exactly 2 budgets, got {}",
            config.split.len()
        )));
    };
    if !(config.c_lb >= 0.0 && config.c_ub >= 0.0) {
        return Err(Error::param("confidence bound constants must be >= 0"));
    }

    let mut stages = Vec::new();
    let capped = timed(&mut stages, "cap", data.num_entries() as u64, || {
        cap_degrees(data, config.delta0, seed.stream(Purpose::Capping))
    });

    let calib1 = calibrate(*b1, config.delta0, config.beta, SensitivityProfile::inv_sqrt(1.0))?;
    let round1_weighter = Weighter::Mad {
        d_max: config.d_max,
        clamp: BiasClamp::UNBIASED,
        biases: BiasMap::unbiased(),
        allow_unsafe: config.allow_unsafe,
    };
    let r1 = run_round(&capped, &calib1, *b1, &round1_weighter, seed, 1)?;
    stages.extend(r1.stages.iter().map(|s| prefixed("r1", s)));

    let calib2 = calibrate(
        *b2,
        config.delta0,
        config.beta,
        SensitivityProfile::inv_sqrt(config.clamp.b_max),
    )?;
    let rho2 = calib2.rho;
    let bounds = ConfidenceBounds::from_noisy(&r1.noisy, calib1.sigma, config.c_lb, config.c_ub);

    let mut remove = vec![false; capped.num_items()];
    for &i in &r1.selected {
        remove[i.index()] = true;
    }
    for (i, ub) in bounds.ub.iter() {
        if ub < rho2 {
            remove[i.index()] = true;
        }
    }
    let mut biases = BiasMap::unbiased();
    for (i, lb) in bounds.lb.iter() {
        let b = overshoot_bias(rho2, lb);
        if b < 1.0 {
            biases.set(i, b)?;
        }
    }
    let round2_data = timed(&mut stages, "r2.remove", capped.num_entries() as u64, || {
        capped.remove_items(&remove)
    });
    drop(capped);
    if let Some(i) = round2_data.entries().iter().find(|&&i| !r1.noisy.contains(i)) {
        return Err(Error::Invariant(format!(
            "round-two item {} has no round-one noisy weight",
            i.0
        )));
    }

    let round2_weighter = Weighter::Mad {
        d_max: config.d_max,
        clamp: config.clamp,
        biases,
        allow_unsafe: config.allow_unsafe,
    };
    let r2 = run_round(&round2_data, &calib2, *b2, &round2_weighter, seed, 2)?;
    stages.extend(r2.stages.iter().map(|s| prefixed("r2", s)));

    let mut selected = r1.selected;
    selected.extend_from_slice(&r2.selected);
    selected.sort_unstable();
    if selected.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invariant("round two re-selected a round-one item".into()));
    }

    let mut noisy = r1.noisy;
    merge_noisy(&mut noisy, &r2.noisy);
    let total = config.split.total();
    let metrics = RunMetrics {
        output_size: selected.len(),
        entries_processed: data.num_entries() as u64,
        epsilon_total: total.epsilon,
        delta_total: total.delta,
        rounds: vec![r1.summary, r2.summary],
        stages,
    };
    Ok(SelectionResult::new(selected, noisy, metrics))
}

/// DP-SIPS: Basic weighting in each round on the sets with all previously
/// selected items removed.
pub fn dp_sips(data: &UserSets, split: &RoundBudgetSplit, delta0: usize, seed: RunSeed) -> Result<SelectionResult> {
    let mut stages = Vec::new();
    let mut current = timed(&mut stages, "cap", data.num_entries() as u64, || {
        cap_degrees(data, delta0, seed.stream(Purpose::Capping))
    });
    let mut selected: Vec<ItemId> = Vec::new();
    let mut noisy = WeightMap::empty(current.num_items());
    let mut rounds = Vec::new();
    for (r, budget) in split.rounds().iter().enumerate() {
        let round_no = r as u32 + 1;
        if r > 0 {
            let mut remove = vec![false; current.num_items()];
            for &i in &selected {
                remove[i.index()] = true;
            }
            current = current.remove_items(&remove);
        }
        let calib = calibrate(*budget, delta0, 0.0, SensitivityProfile::inv_sqrt(1.0))?;
        let out = run_round(&current, &calib, *budget, &Weighter::Basic, seed, round_no)?;
        let tag = format!("r{round_no}");
        stages.extend(out.stages.iter().map(|s| prefixed(&tag, s)));
        merge_noisy(&mut noisy, &out.noisy);
        selected.extend_from_slice(&out.selected);
        rounds.push(out.summary);
    }
    selected.sort_unstable();
    let total = split.total();
    let metrics = RunMetrics {
        output_size: selected.len(),
        entries_processed: data.num_entries() as u64,
        epsilon_total: total.epsilon,
        delta_total: total.delta,
        rounds,
        stages,
    };
    Ok(SelectionResult::new(selected, noisy, metrics))
}

fn prefixed(tag: &str, s: &crate::model::StageTiming) -> crate::model::StageTiming {
    crate::model::StageTiming {
        stage: format!("{tag}.{}", s.stage),
        ..s.clone()
    }
}
