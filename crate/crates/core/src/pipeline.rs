//! The weight-and-threshold pipeline: cap degrees, weight items, add keyed
//! Gaussian noise, release the items whose noisy weight reaches the threshold.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::baselines::{greedy_update_weights, policy_gaussian_weights, user_order};
use crate::calibration::{calibrate, CalibrationParams, SensitivityProfile};
use crate::engine::ItemIndex;
use crate::error::{Error, Result};
use crate::model::{
    BiasClamp, BiasMap, ItemId, PrivacyBudget, RoundSummary, RunMetrics, SelectionResult, StageTiming, UserSets,
    WeightMap,
};
use crate::rng::{Purpose, RunSeed, StreamKey};
use crate::weighters::{basic_weights_indexed, mad_stages_indexed, MadParams};

/// Keeps at most `delta0` items per user, chosen uniformly without
/// replacement by a shuffle keyed on the user index.
pub fn cap_degrees(data: &UserSets, delta0: usize, key: StreamKey) -> UserSets {
    if data.max_degree() <= delta0 {
        return data.clone();
    }
    data.map_users(|u, items| {
        if items.len() <= delta0 {
            return items.to_vec();
        }
        let mut shuffled = items.to_vec();
        let mut rng = key.rng(u as u64);
        let (kept, _) = shuffled.partial_shuffle(&mut rng, delta0);
        kept.to_vec()
    })
}

/// Adds `N(0, sigma²)` to every supported item. The draw for item `i` is a
/// pure function of `(key, i)`.
pub fn add_noise(w: &WeightMap, sigma: f64, key: StreamKey) -> WeightMap {
    let noisy: Vec<f64> = w
        .dense_values()
        .par_iter()
        .zip(w.support().par_iter())
        .enumerate()
        .with_min_len(4096)
        .map(|(i, (&x, &present))| {
            if present {
                x + sigma * key.normal(i as u64, 0)
            } else {
                0.0
            }
        })
        .collect();
    WeightMap::from_dense(noisy, w.support().to_vec())
}

/// Items whose noisy weight is at least `rho`, in ascending id order.
pub fn threshold(noisy: &WeightMap, rho: f64) -> Vec<ItemId> {
    let values = noisy.dense_values();
    let support = noisy.support();
    (0..values.len())
        .into_par_iter()
        .with_min_len(4096)
        .filter(|&i| support[i] && values[i] >= rho)
        .map(|i| ItemId(i as u32))
        .collect()
}

/// Weighting algorithm plugged into the pipeline.
#[derive(Debug, Clone)]
pub enum Weighter {
    Basic,
    /// Adaptive weighting; the adaptive threshold is `rho + beta * sigma`.
    Mad {
        d_max: f64,
        clamp: BiasClamp,
        biases: BiasMap,
        allow_unsafe: bool,
    },
    PolicyGaussian,
    GreedyUpdate,
}

impl Weighter {
    pub fn mad(d_max: f64) -> Self {
        Weighter::Mad {
            d_max,
            clamp: BiasClamp::UNBIASED,
            biases: BiasMap::unbiased(),
            allow_unsafe: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Weighter::Basic => "basic",
            Weighter::Mad { .. } => "mad",
            Weighter::PolicyGaussian => "policy",
            Weighter::GreedyUpdate => "greedy",
        }
    }

    /// Proved bound on the weight of each novel item, as a function of their count.
    pub fn required_profile(&self) -> SensitivityProfile {
        match self {
            Weighter::Basic | Weighter::PolicyGaussian => SensitivityProfile::inv_sqrt(1.0),
            Weighter::Mad { clamp, biases, .. } => {
                if biases.is_unbiased() {
                    SensitivityProfile::inv_sqrt(1.0)
                } else {
                    SensitivityProfile::inv_sqrt(clamp.b_max)
                }
            }
            Weighter::GreedyUpdate => SensitivityProfile::Constant(1.0),
        }
    }

    fn uses_tau(&self) -> bool {
        !matches!(self, Weighter::Basic)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub budget: PrivacyBudget,
    pub delta0: usize,
    /// Adaptive threshold offset in units of sigma.
    pub beta: f64,
    /// Sensitivity profile; defaults to the weighter's proved bound.
    pub profile: Option<SensitivityProfile>,
    /// Accept a profile that does not dominate the weighter's bound.
    pub allow_profile_override: bool,
    pub seed: RunSeed,
}

impl PipelineConfig {
    pub fn new(budget: PrivacyBudget, delta0: usize, beta: f64, seed: RunSeed) -> Self {
        PipelineConfig {
            budget,
            delta0,
            beta,
            profile: None,
            allow_profile_override: false,
            seed,
        }
    }
}

pub(crate) fn resolve_profile(
    weighter: &Weighter,
    given: Option<&SensitivityProfile>,
    delta0: usize,
    allow_override: bool,
) -> Result<SensitivityProfile> {
    let required = weighter.required_profile();
    match given {
        None => Ok(required),
        Some(p) if allow_override || p.dominates(&required, delta0) => Ok(p.clone()),
        Some(p) => Err(Error::ProfileMismatch(format!(
            "{} weighter needs h(t) >= {}, got {}",
            weighter.name(),
            required.describe(),
            p.describe()
        ))),
    }
}

/// One scored round on already-capped data.
#[derive(Debug, Clone)]
pub(crate) struct RoundOutput {
    pub selected: Vec<ItemId>,
    pub noisy: WeightMap,
    pub summary: RoundSummary,
    pub stages: Vec<StageTiming>,
}

pub(crate) fn timed<T>(stages: &mut Vec<StageTiming>, name: &str, processed: u64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    stages.push(StageTiming {
        stage: name.to_string(),
        seconds: start.elapsed().as_secs_f64(),
        processed,
    });
    out
}

pub(crate) fn run_round(
    data: &UserSets,
    calib: &CalibrationParams,
    budget: PrivacyBudget,
    weighter: &Weighter,
    seed: RunSeed,
    round: u32,
) -> Result<RoundOutput> {
    let mut stages = Vec::new();
    let entries = data.num_entries() as u64;
    let weights = match weighter {
        Weighter::Basic => {
            let index = timed(&mut stages, "index", entries, || ItemIndex::build(data));
            timed(&mut stages, "weights", entries, || basic_weights_indexed(data, &index))
        }
        Weighter::Mad {
            d_max,
            clamp,
            biases,
            allow_unsafe,
        } => {
            let params = MadParams::new(calib.tau, *d_max, *clamp)?.unsafe_override(*allow_unsafe);
            let index = timed(&mut stages, "index", entries, || ItemIndex::build(data));
            timed(&mut stages, "weights", entries, || {
                mad_stages_indexed(data, &index, &params, biases)
            })?
            .weights
        }
        Weighter::PolicyGaussian => {
            let order = user_order(data.num_users(), seed.stream(Purpose::UserOrder));
            timed(&mut stages, "weights", entries, || {
                policy_gaussian_weights(data, calib.tau, &order)
            })?
        }
        Weighter::GreedyUpdate => {
            let order = user_order(data.num_users(), seed.stream(Purpose::UserOrder));
            timed(&mut stages, "weights", entries, || {
                greedy_update_weights(data, calib.tau, &order)
            })?
        }
    };
    let candidates = weights.len();
    let noisy = timed(&mut stages, "noise", candidates as u64, || {
        add_noise(&weights, calib.sigma, seed.stream(Purpose::Noise(round)))
    });
    let selected = timed(&mut stages, "threshold", candidates as u64, || {
        threshold(&noisy, calib.rho)
    });
    Ok(RoundOutput {
        summary: RoundSummary {
            epsilon: budget.epsilon,
            delta: budget.delta,
            sigma: calib.sigma,
            rho: calib.rho,
            rho_argmax_t: calib.rho_argmax_t,
            tau: weighter.uses_tau().then_some(calib.tau),
            candidates,
            selected: selected.len(),
        },
        selected,
        noisy,
        stages,
    })
}

/// Single-round private partition selection.
pub fn weight_and_threshold(data: &UserSets, config: &PipelineConfig, weighter: &Weighter) -> Result<SelectionResult> {
    let profile = resolve_profile(
        weighter,
        config.profile.as_ref(),
        config.delta0,
        config.allow_profile_override,
    )?;
    let calib = calibrate(config.budget, config.delta0, config.beta, profile)?;

    let mut stages = Vec::new();
    let capped = timed(&mut stages, "cap", data.num_entries() as u64, || {
        cap_degrees(data, config.delta0, config.seed.stream(Purpose::Capping))
    });
    let round = run_round(&capped, &calib, config.budget, weighter, config.seed, 1)?;
    stages.extend(round.stages);

    let metrics = RunMetrics {
        output_size: round.selected.len(),
        entries_processed: capped.num_entries() as u64,
        epsilon_total: config.budget.epsilon,
        delta_total: config.budget.delta,
        rounds: vec![round.summary],
        stages,
    };
    Ok(SelectionResult::new(round.selected, round.noisy, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::observed_union;

    fn cfg(seed: u64) -> PipelineConfig {
        PipelineConfig::new(PrivacyBudget::new(1.0, 1e-5).unwrap(), 100, 2.0, RunSeed(seed))
    }

    #[test]
    fn cap_leaves_small_users_alone() {
        let data = UserSets::from_sets([vec![0, 1, 2]]);
        let capped = cap_degrees(&data, 100, RunSeed(1).stream(Purpose::Capping));
        assert_eq!(capped, data);
    }

    #[test]
    fn cap_keeps_exactly_delta0_members() {
        let data = UserSets::from_sets([(0..200).collect::<Vec<u32>>(), vec![5]]);
        let key = RunSeed(9).stream(Purpose::Capping);
        let capped = cap_degrees(&data, 100, key);
        assert_eq!(capped.degree(0), 100);
        assert!(capped.user(0).iter().all(|i| i.0 < 200));
        assert_eq!(capped.user(1), data.user(1));
        assert_eq!(cap_degrees(&data, 100, key), capped);
        assert_ne!(cap_degrees(&data, 100, RunSeed(10).stream(Purpose::Capping)), capped);
    }

    #[test]
    fn noise_is_keyed_by_item() {
        let mut w = WeightMap::empty(3);
        w.insert(ItemId(0), 1.0);
        w.insert(ItemId(2), 5.0);
        let key = RunSeed(4).stream(Purpose::Noise(1));
        let a = add_noise(&w, 2.0, key);
        let b = add_noise(&w, 2.0, key);
        assert_eq!(a, b);
        assert_eq!(a.get(ItemId(1)), None);
        assert_ne!(a.get(ItemId(0)), Some(1.0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let rho = 3.25;
        assert!(threshold(&WeightMap::empty(0), rho).is_empty());
        let mut w = WeightMap::empty(2);
        w.insert(ItemId(0), rho);
        assert_eq!(threshold(&w, rho), vec![ItemId(0)]);
        w.insert(ItemId(0), rho - 1e-9);
        assert!(threshold(&w, rho).is_empty());
    }

    #[test]
    fn empty_dataset_selects_nothing() {
        for weighter in [Weighter::Basic, Weighter::mad(50.0)] {
            let r = weight_and_threshold(&UserSets::new(), &cfg(1), &weighter).unwrap();
            assert!(r.is_empty());
        }
    }

    #[test]
    fn selection_matches_noisy_weights() {
        let sets: Vec<Vec<u32>> = (0..3000u32).map(|u| vec![u % 7, 7 + u % 40, 100 + u % 500]).collect();
        let data = UserSets::from_sets(sets);
        let union = observed_union(&data);
        for weighter in [Weighter::Basic, Weighter::mad(50.0)] {
            let r = weight_and_threshold(&data, &cfg(5), &weighter).unwrap();
            let rho = r.metrics.rounds[0].rho;
            let noisy = r.noisy_weights_non_private();
            for &i in &union {
                assert_eq!(r.contains(i), noisy.get(i).unwrap() >= rho);
            }
            assert!(r.selected.iter().all(|i| union.binary_search(i).is_ok()));
            assert!(r.len() >= 7);
        }
    }

    #[test]
    fn mismatched_profile_is_rejected() {
        let mut c = cfg(1);
        c.profile = Some(SensitivityProfile::Constant(0.0));
        let data = UserSets::from_sets([vec![0]]);
        assert!(matches!(
            weight_and_threshold(&data, &c, &Weighter::Basic),
            Err(Error::ProfileMismatch(_))
        ));
        c.allow_profile_override = true;
        assert!(weight_and_threshold(&data, &c, &Weighter::Basic).is_ok());
        c.profile = Some(SensitivityProfile::inv_sqrt(2.0));
        c.allow_profile_override = false;
        assert!(weight_and_threshold(&data, &c, &Weighter::Basic).is_ok());
    }

    #[test]
    fn basic_calibration_matches_round_one_formula() {
        let r = weight_and_threshold(&UserSets::from_sets([vec![0]]), &cfg(2), &Weighter::Basic).unwrap();
        let c = calibrate(
            PrivacyBudget::new(1.0, 1e-5).unwrap(),
            100,
            0.0,
            SensitivityProfile::inv_sqrt(1.0),
        )
        .unwrap();
        assert_eq!(r.metrics.rounds[0].sigma, c.sigma);
        assert_eq!(r.metrics.rounds[0].rho, c.rho);
    }
}
