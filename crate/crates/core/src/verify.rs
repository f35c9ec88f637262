//! Executable checks of the privacy and utility guarantees.
//!
//! * [`measure_sensitivity`] compares weights on neighboring datasets, and
//!   [`sensitivity_sweep`] runs it over an exhaustive family of small pairs.
//! * [`dominance_harness`] estimates per-item selection frequencies of the
//!   Basic and adaptive weighters under shared noise.
//! * [`calibration_monte_carlo`] estimates the probability that a novel item
//!   crosses the threshold.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::{calibrate, std_normal_cdf, CalibrationParams, SensitivityProfile};
use crate::error::{Error, Result};
use crate::model::{BiasClamp, BiasMap, ItemId, PrivacyBudget, UserSets, WeightMap};
use crate::pipeline::cap_degrees;
use crate::rng::{Purpose, RunSeed};
use crate::weighters::{basic_weights, mad_stages, MadParams, MadStages};

/// A dataset and the same dataset with one user appended.
#[derive(Debug, Clone)]
pub struct NeighborPair {
    base: UserSets,
    extended: UserSets,
    novel: Vec<ItemId>,
}

impl NeighborPair {
    /// Appends `new_user` to `base`. Both sides share one item id space.
    pub fn append(base: &UserSets, new_user: &[ItemId]) -> Self {
        let mut extended = base.clone();
        extended.push_user(new_user.iter().copied());
        let mut base = base.clone();
        base.reserve_item_space(extended.num_items());
        Self::from_datasets(base, extended).expect("appended pair is a neighbor pair")
    }

    /// Checks that `extended` is `base` plus one trailing user.
    pub fn from_datasets(mut base: UserSets, mut extended: UserSets) -> Result<Self> {
        let n = base.num_users();
        if extended.num_users() != n + 1 || (0..n).any(|u| base.user(u) != extended.user(u)) {
            return Err(Error::param("extended dataset must equal base plus one appended user"));
        }
        let space = base.num_items().max(extended.num_items());
        base.reserve_item_space(space);
        extended.reserve_item_space(space);
        let seen = base.support_mask();
        let novel = extended.user(n).iter().copied().filter(|i| !seen[i.index()]).collect();
        Ok(NeighborPair { base, extended, novel })
    }

    pub fn base(&self) -> &UserSets {
        &self.base
    }

    pub fn extended(&self) -> &UserSets {
        &self.extended
    }

    pub fn new_user(&self) -> &[ItemId] {
        self.extended.user(self.base.num_users())
    }

    /// Items of the new user held by nobody in `base`.
    pub fn novel(&self) -> &[ItemId] {
        &self.novel
    }

    pub fn t(&self) -> usize {
        self.novel.len()
    }
}

/// Weighter under test. Capping is not applied.
#[derive(Debug, Clone)]
pub enum SensitivityTarget {
    Basic,
    Mad { params: MadParams, biases: BiasMap },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub t: usize,
    /// ℓ2 norm of the weight change over the extended union.
    pub l2_delta: f64,
    /// Largest weight on a novel item (0 when there is none).
    pub novel_linf: f64,
    /// Whether initial, truncated and rerouted weights did not decrease
    /// (adaptive weighter only).
    pub monotone: Option<bool>,
}

fn l2_delta(before: &WeightMap, after: &WeightMap) -> f64 {
    after
        .iter()
        .map(|(i, w)| {
            let d = w - before.get(i).unwrap_or(0.0);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn novel_linf(after: &WeightMap, novel: &[ItemId]) -> f64 {
    novel.iter().map(|&i| after.weight(i)).fold(0.0, f64::max)
}

fn monotone(before: &MadStages, after: &MadStages) -> bool {
    let ge = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x >= y);
    ge(&after.init, &before.init) && ge(&after.trunc, &before.trunc) && ge(&after.reroute, &before.reroute)
}

pub fn measure_sensitivity(target: &SensitivityTarget, pair: &NeighborPair) -> Result<SensitivityReport> {
    match target {
        SensitivityTarget::Basic => {
            let (w, w2) = (basic_weights(&pair.base), basic_weights(&pair.extended));
            Ok(SensitivityReport {
                t: pair.t(),
                l2_delta: l2_delta(&w, &w2),
                novel_linf: novel_linf(&w2, &pair.novel),
                monotone: None,
            })
        }
        SensitivityTarget::Mad { params, biases } => {
            let before = mad_stages(&pair.base, params, biases)?;
            let after = mad_stages(&pair.extended, params, biases)?;
            Ok(mad_report(&before, &after, pair))
        }
    }
}

fn mad_report(before: &MadStages, after: &MadStages, pair: &NeighborPair) -> SensitivityReport {
    SensitivityReport {
        t: pair.t(),
        l2_delta: l2_delta(&before.weights, &after.weights),
        novel_linf: novel_linf(&after.weights, &pair.novel),
        monotone: Some(monotone(before, after)),
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepConfig {
    pub b_min: f64,
    pub b_max: f64,
    pub tau: f64,
    pub d_max: f64,
}

impl SweepConfig {
    /// b_min ∈ {0.5, 0.75, 1}, b_max ∈ {1, 2}, τ ∈ {1, 1.5}, d_max ∈ {4, 9}.
    pub fn grid() -> Vec<SweepConfig> {
        let mut out = Vec::new();
        for b_min in [0.5, 0.75, 1.0] {
            for b_max in [1.0, 2.0] {
                for tau in [1.0, 1.5] {
                    for d_max in [4.0, 9.0] {
                        out.push(SweepConfig {
                            b_min,
                            b_max,
                            tau,
                            d_max,
                        });
                    }
                }
            }
        }
        out
    }

    fn params(&self) -> Result<MadParams> {
        MadParams::new(self.tau, self.d_max, BiasClamp::new(self.b_min, self.b_max)?)
    }
}

/// Bias values used for biased sweep instances.
pub const BIAS_GRID: [f64; 3] = [0.3, 0.6, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct SweepViolation {
    pub family: &'static str,
    pub config: SweepConfig,
    pub base: Vec<Vec<u32>>,
    pub new_user: Vec<u32>,
    pub biases: Vec<f64>,
    pub report: SensitivityReport,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepFamilyStats {
    pub family: &'static str,
    pub base_datasets: usize,
    pub pairs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub configs: usize,
    pub families: Vec<SweepFamilyStats>,
    pub pairs_checked: u64,
    pub max_l2: f64,
    /// Largest `novel_linf / (b_max / sqrt(t))` over pairs with t ≥ 1.
    pub max_linf_ratio: f64,
    pub basic_pairs: u64,
    /// Largest `|l2 - 1|` for the Basic weighter.
    pub basic_max_l2_error: f64,
    pub basic_max_linf_ratio: f64,
    pub monotonicity_failures: u64,
    /// First violations found (at most 20 are kept).
    pub violations: Vec<SweepViolation>,
    pub violation_count: u64,
    pub seconds: f64,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0 && self.monotonicity_failures == 0
    }
}

/// Sensitivity tolerances of the sweep.
pub const SWEEP_TOL: f64 = 1e-9;
/// Allowed `|l2 - 1|` for Basic, a few ulps of the summed weights.
pub const BASIC_L2_TOL: f64 = 8.0 * f64::EPSILON;

const UNIVERSE: usize = 6;

fn permutations(n: usize) -> Vec<Vec<u8>> {
    fn go(prefix: &mut Vec<u8>, used: &mut [bool], out: &mut Vec<Vec<u8>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                prefix.push(k as u8);
                go(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// `table[p][mask]` is `mask` with its bits permuted by permutation `p`.
fn mask_tables(perms: &[Vec<u8>]) -> Vec<[u8; 64]> {
    perms
        .iter()
        .map(|p| {
            let mut t = [0u8; 64];
            for (m, slot) in t.iter_mut().enumerate() {
                *slot = (0..UNIVERSE)
                    .filter(|&b| m >> b & 1 == 1)
                    .fold(0u8, |acc, b| acc | 1 << p[b]);
            }
            t
        })
        .collect()
}

fn mapped_sorted(ms: &[u8], table: &[u8; 64]) -> Vec<u8> {
    let mut v: Vec<u8> = ms.iter().map(|&m| table[m as usize]).collect();
    v.sort_unstable();
    v
}

/// Multisets of at most `max_users` nonempty subsets of the 6-item universe,
/// one representative per orbit under item relabeling (lexicographically
/// smallest sorted mask list).
fn canonical_bases(max_users: usize, tables: &[[u8; 64]]) -> Vec<Vec<u8>> {
    fn extend(cur: &mut Vec<u8>, max: usize, all: &mut Vec<Vec<u8>>) {
        all.push(cur.clone());
        if cur.len() == max {
            return;
        }
        let start = cur.last().copied().unwrap_or(1);
        for m in start..64u8 {
            cur.push(m);
            extend(cur, max, all);
            cur.pop();
        }
    }
    let mut all = Vec::new();
    extend(&mut Vec::new(), max_users, &mut all);
    all.into_par_iter()
        .filter(|ms| tables.iter().all(|t| mapped_sorted(ms, t) >= *ms))
        .collect()
}

fn masks_to_sets(ms: &[u8]) -> UserSets {
    let mut s = UserSets::from_sets(
        ms.iter()
            .map(|&m| (0..UNIVERSE as u32).filter(move |&b| m >> b & 1 == 1)),
    );
    s.reserve_item_space(UNIVERSE);
    s
}

fn mask_items(m: u8) -> Vec<ItemId> {
    (0..UNIVERSE as u32).filter(|&b| m >> b & 1 == 1).map(ItemId).collect()
}

/// Bias patterns over the universe, one per orbit of the base's stabilizer.
fn canonical_bias_patterns(base: &[u8], tables: &[[u8; 64]], perms: &[Vec<u8>]) -> Vec<[u8; UNIVERSE]> {
    let stab: Vec<&Vec<u8>> = perms
        .iter()
        .zip(tables)
        .filter(|(_, t)| mapped_sorted(base, t) == base)
        .map(|(p, _)| p)
        .collect();
    let mut out = Vec::new();
    let total = BIAS_GRID.len().pow(UNIVERSE as u32);
    for code in 0..total {
        let mut pat = [0u8; UNIVERSE];
        let mut c = code;
        for slot in pat.iter_mut() {
            *slot = (c % BIAS_GRID.len()) as u8;
            c /= BIAS_GRID.len();
        }
        let canonical = stab.iter().all(|p| {
            let mut q = [0u8; UNIVERSE];
            for b in 0..UNIVERSE {
                q[p[b] as usize] = pat[b];
            }
            q >= pat
        });
        if canonical {
            out.push(pat);
        }
    }
    out
}

fn bias_map(pattern: &[f64]) -> BiasMap {
    let mut m = BiasMap::unbiased();
    for (i, &b) in pattern.iter().enumerate() {
        if b < 1.0 {
            m.set(ItemId(i as u32), b).expect("grid biases are in (0, 1]");
        }
    }
    m
}

/// Accumulates results of one family.
#[derive(Default)]
struct Tally {
    pairs: u64,
    max_l2: f64,
    max_linf_ratio: f64,
    basic_pairs: u64,
    basic_l2_err: f64,
    basic_linf_ratio: f64,
    monotone_fail: u64,
    violation_count: u64,
    violations: Vec<SweepViolation>,
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        self.pairs += o.pairs;
        self.max_l2 = self.max_l2.max(o.max_l2);
        self.max_linf_ratio = self.max_linf_ratio.max(o.max_linf_ratio);
        self.basic_pairs += o.basic_pairs;
        self.basic_l2_err = self.basic_l2_err.max(o.basic_l2_err);
        self.basic_linf_ratio = self.basic_linf_ratio.max(o.basic_linf_ratio);
        self.monotone_fail += o.monotone_fail;
        self.violation_count += o.violation_count;
        self.violations.extend(o.violations);
        self.violations.truncate(20);
        self
    }

    #[allow(clippy::too_many_arguments)]
    fn check_mad(
        &mut self,
        family: &'static str,
        cfg: &SweepConfig,
        pair: &NeighborPair,
        before: &MadStages,
        params: &MadParams,
        biases: &BiasMap,
        pattern: &[f64],
    ) -> Result<()> {
        let after = mad_stages(&pair.extended, params, biases)?;
        let r = mad_report(before, &after, pair);
        self.pairs += 1;
        self.max_l2 = self.max_l2.max(r.l2_delta);
        let mut reasons = Vec::new();
        if r.l2_delta > 1.0 + SWEEP_TOL {
            reasons.push(format!("l2 {} > 1", r.l2_delta));
        }
        if r.t > 0 {
            let bound = cfg.b_max / (r.t as f64).sqrt();
            self.max_linf_ratio = self.max_linf_ratio.max(r.novel_linf / bound);
            if r.novel_linf > bound + SWEEP_TOL {
                reasons.push(format!("novel linf {} > {}", r.novel_linf, bound));
            }
        }
        if r.monotone == Some(false) {
            self.monotone_fail += 1;
            reasons.push("stage weights decreased".into());
        }
        if !reasons.is_empty() {
            self.violation_count += 1;
            if self.violations.len() < 20 {
                self.violations.push(SweepViolation {
                    family,
                    config: *cfg,
                    base: pair.base.iter().map(|s| s.iter().map(|i| i.0).collect()).collect(),
                    new_user: pair.new_user().iter().map(|i| i.0).collect(),
                    biases: pattern.to_vec(),
                    report: r,
                    reason: reasons.join("; "),
                });
            }
        }
        Ok(())
    }

    fn check_basic(&mut self, pair: &NeighborPair, before: &WeightMap) {
        let after = basic_weights(&pair.extended);
        self.basic_pairs += 1;
        let l2 = l2_delta(before, &after);
        self.basic_l2_err = self.basic_l2_err.max((l2 - 1.0).abs());
        if pair.t() > 0 {
            let r = novel_linf(&after, &pair.novel) * (pair.t() as f64).sqrt();
            self.basic_linf_ratio = self.basic_linf_ratio.max(r);
        }
    }
}

/// Exhaustive sensitivity check of the adaptive weighter over three families
/// of neighbor pairs, for every configuration of [`SweepConfig::grid`]:
///
/// * `unbiased`: every base of at most 4 users over 6 items (up to item
///   relabeling) and every nonempty new user over those items;
/// * `biased`: bases of at most 2 users, every bias pattern over
///   [`BIAS_GRID`] (up to relabeling), every nonempty new user;
/// * `wide`: bases of at most 2 users drawn from nested prefix and suffix
///   sets over 10 items, new users adding up to 3 novel items, so that user
///   degrees reach 9 and beyond.
///
/// Basic is checked on the unbiased family.
pub fn sensitivity_sweep(configs: &[SweepConfig]) -> Result<SweepReport> {
    let start = Instant::now();
    let perms = permutations(UNIVERSE);
    let tables = mask_tables(&perms);
    let mut families = Vec::new();
    let params: Vec<MadParams> = configs.iter().map(SweepConfig::params).collect::<Result<_>>()?;

    // Unbiased family.
    let bases = canonical_bases(4, &tables);
    let unbiased = BiasMap::unbiased();
    let tally_a = bases
        .par_iter()
        .map(|ms| -> Result<Tally> {
            let base = masks_to_sets(ms);
            let mut tally = Tally::default();
            let basic_before = basic_weights(&base);
            let pairs: Vec<NeighborPair> = (1..64u8).map(|m| NeighborPair::append(&base, &mask_items(m))).collect();
            for pair in &pairs {
                tally.check_basic(pair, &basic_before);
            }
            for (cfg, p) in configs.iter().zip(&params) {
                let before = mad_stages(&base, p, &unbiased)?;
                for pair in &pairs {
                    tally.check_mad("unbiased", cfg, pair, &before, p, &unbiased, &[])?;
                }
            }
            Ok(tally)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    families.push(SweepFamilyStats {
        family: "unbiased",
        base_datasets: bases.len(),
        pairs: tally_a.pairs,
    });

    // Biased family.
    let small_bases = canonical_bases(2, &tables);
    let biased_inputs: Vec<(Vec<u8>, [u8; UNIVERSE])> = small_bases
        .iter()
        .flat_map(|ms| {
            canonical_bias_patterns(ms, &tables, &perms)
                .into_iter()
                .map(move |p| (ms.clone(), p))
        })
        .collect();
    let tally_b = biased_inputs
        .par_iter()
        .map(|(ms, pat)| -> Result<Tally> {
            let base = masks_to_sets(ms);
            let pattern: Vec<f64> = pat.iter().map(|&k| BIAS_GRID[k as usize]).collect();
            let biases = bias_map(&pattern);
            let pairs: Vec<NeighborPair> = (1..64u8).map(|m| NeighborPair::append(&base, &mask_items(m))).collect();
            let mut tally = Tally::default();
            for (cfg, p) in configs.iter().zip(&params) {
                let before = mad_stages(&base, p, &biases)?;
                for pair in &pairs {
                    tally.check_mad("biased", cfg, pair, &before, p, &biases, &pattern)?;
                }
            }
            Ok(tally)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    families.push(SweepFamilyStats {
        family: "biased",
        base_datasets: biased_inputs.len(),
        pairs: tally_b.pairs,
    });

    // Wide family: nested sets reach the d_max = 9 boundary.
    const WIDE: u32 = 10;
    let mut shapes: Vec<Vec<u32>> = Vec::new();
    for k in 1..=WIDE {
        shapes.push((0..k).collect());
        shapes.push((WIDE - k..WIDE).collect());
    }
    shapes.sort();
    shapes.dedup();
    let mut wide_bases: Vec<Vec<usize>> = vec![vec![]];
    for a in 0..shapes.len() {
        wide_bases.push(vec![a]);
        for b in a..shapes.len() {
            wide_bases.push(vec![a, b]);
        }
    }
    let mut new_users: Vec<Vec<ItemId>> = Vec::new();
    for body in std::iter::once(Vec::new()).chain(shapes.iter().cloned()) {
        for novel_mask in 0..8u32 {
            let mut s: Vec<u32> = body.clone();
            s.extend((0..3).filter(|b| novel_mask >> b & 1 == 1).map(|b| WIDE + b));
            if !s.is_empty() {
                new_users.push(s.into_iter().map(ItemId).collect());
            }
        }
    }
    let wide_patterns: [Vec<f64>; 2] = [
        vec![1.0; (WIDE + 3) as usize],
        (0..WIDE + 3).map(|i| BIAS_GRID[i as usize % BIAS_GRID.len()]).collect(),
    ];
    let tally_c = wide_bases
        .par_iter()
        .map(|idx| -> Result<Tally> {
            let mut base = UserSets::from_sets(idx.iter().map(|&k| shapes[k].clone()));
            base.reserve_item_space((WIDE + 3) as usize);
            let pairs: Vec<NeighborPair> = new_users.iter().map(|s| NeighborPair::append(&base, s)).collect();
            let mut tally = Tally::default();
            for pattern in &wide_patterns {
                let biases = bias_map(pattern);
                for (cfg, p) in configs.iter().zip(&params) {
                    let before = mad_stages(&base, p, &biases)?;
                    for pair in &pairs {
                        tally.check_mad("wide", cfg, pair, &before, p, &biases, pattern)?;
                    }
                }
            }
            Ok(tally)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    families.push(SweepFamilyStats {
        family: "wide",
        base_datasets: wide_bases.len() * wide_patterns.len(),
        pairs: tally_c.pairs,
    });

    let t = tally_a.merge(tally_b).merge(tally_c);
    Ok(SweepReport {
        configs: configs.len(),
        families,
        pairs_checked: t.pairs,
        max_l2: t.max_l2,
        max_linf_ratio: t.max_linf_ratio,
        basic_pairs: t.basic_pairs,
        basic_max_l2_error: t.basic_l2_err,
        basic_max_linf_ratio: t.basic_linf_ratio,
        monotonicity_failures: t.monotone_fail,
        violations: t.violations,
        violation_count: t.violation_count,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A named dataset for the dominance harness.
#[derive(Debug, Clone)]
pub struct DominanceInstance {
    pub name: String,
    pub data: UserSets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceParams {
    pub budget: PrivacyBudget,
    pub delta0: usize,
    pub beta: f64,
    pub d_max: f64,
    pub trials: u64,
    pub seed: RunSeed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemDominance {
    pub item: u32,
    pub weight_basic: f64,
    pub weight_mad: f64,
    pub freq_basic: f64,
    pub freq_mad: f64,
    /// Standard error of the paired difference `freq_mad - freq_basic`.
    pub stderr_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceDominance {
    pub name: String,
    pub items: usize,
    pub mean_output_basic: f64,
    pub mean_output_mad: f64,
    /// Items with `w_mad < min(w_basic, tau) - 1e-12`.
    pub weight_check_failures: usize,
    pub failures: Vec<ItemDominance>,
    /// Smallest slack of the passing branch over all items (≥ 0 when passing).
    pub min_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub calibration: CalibrationParams,
    pub trials: u64,
    pub phi_beta: f64,
    pub instances: Vec<InstanceDominance>,
}

impl DominanceReport {
    pub fn passed(&self) -> bool {
        self.instances
            .iter()
            .all(|i| i.failures.is_empty() && i.weight_check_failures == 0)
    }
}

/// For every item, checks `freq_mad ≥ freq_basic − 3·se` or
/// `freq_mad ≥ Φ(β) − 3·se`. Both weighters see the same noise draw in each
/// trial, so the paired difference has small variance.
pub fn dominance_harness(instances: &[DominanceInstance], params: &DominanceParams) -> Result<DominanceReport> {
    if params.trials < 2 {
        return Err(Error::param("dominance harness needs at least 2 trials"));
    }
    let calib = calibrate(
        params.budget,
        params.delta0,
        params.beta,
        SensitivityProfile::inv_sqrt(1.0),
    )?;
    let mad = MadParams::new(calib.tau, params.d_max, BiasClamp::UNBIASED)?;
    let phi_beta = std_normal_cdf(params.beta);
    let n = params.trials as f64;
    let se_beta = (phi_beta * (1.0 - phi_beta) / n).sqrt();

    let mut out = Vec::new();
    for inst in instances {
        let capped = cap_degrees(&inst.data, params.delta0, params.seed.stream(Purpose::Capping));
        let wb = basic_weights(&capped);
        let wm = mad_stages(&capped, &mad, &BiasMap::unbiased())?.weights;
        let items: Vec<ItemId> = wb.iter().map(|(i, _)| i).collect();
        let weight_check_failures = items
            .iter()
            .filter(|&&i| wm.weight(i) < wb.weight(i).min(calib.tau) - 1e-12)
            .count();

        // Per item: (basic hits, mad hits, squared paired differences).
        let counts: Vec<(u64, u64, u64)> = (0..params.trials)
            .into_par_iter()
            .fold(
                || vec![(0u64, 0u64, 0u64); items.len()],
                |mut acc, trial| {
                    let key = params.seed.stream(Purpose::Trial(trial));
                    for (k, &i) in items.iter().enumerate() {
                        let z = calib.sigma * key.normal(i.0 as u64, 0);
                        let b = (wb.weight(i) + z >= calib.rho) as u64;
                        let m = (wm.weight(i) + z >= calib.rho) as u64;
                        acc[k].0 += b;
                        acc[k].1 += m;
                        acc[k].2 += (b != m) as u64;
                    }
                    acc
                },
            )
            .reduce(
                || vec![(0, 0, 0); items.len()],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        x.0 += y.0;
                        x.1 += y.1;
                        x.2 += y.2;
                    }
                    a
                },
            );

        let mut failures = Vec::new();
        let mut min_margin = f64::INFINITY;
        let (mut out_b, mut out_m) = (0.0, 0.0);
        for (k, &i) in items.iter().enumerate() {
            let (hb, hm, sq) = counts[k];
            let (fb, fm) = (hb as f64 / n, hm as f64 / n);
            out_b += fb;
            out_m += fm;
            let mean_d = fm - fb;
            let var_d = (sq as f64 / n - mean_d * mean_d).max(0.0) * n / (n - 1.0);
            let se_d = (var_d / n).sqrt();
            let margin = (fm - (fb - 3.0 * se_d)).max(fm - (phi_beta - 3.0 * se_beta));
            min_margin = min_margin.min(margin);
            if margin < 0.0 {
                failures.push(ItemDominance {
                    item: i.0,
                    weight_basic: wb.weight(i),
                    weight_mad: wm.weight(i),
                    freq_basic: fb,
                    freq_mad: fm,
                    stderr_diff: se_d,
                });
            }
        }
        out.push(InstanceDominance {
            name: inst.name.clone(),
            items: items.len(),
            mean_output_basic: out_b,
            mean_output_mad: out_m,
            weight_check_failures,
            failures,
            min_margin,
        });
    }
    Ok(DominanceReport {
        calibration: calib,
        trials: params.trials,
        phi_beta,
        instances: out,
    })
}

/// Random small instances with a few heavy items held by many low-degree
/// users, so the adaptive weighter truncates and reroutes.
pub fn random_dominance_instances(count: usize, seed: RunSeed) -> Vec<DominanceInstance> {
    use rand::Rng;
    (0..count)
        .map(|k| {
            let mut rng = seed.stream(Purpose::Synthetic).rng(k as u64);
            let users = rng.random_range(200..=1500);
            let heavy = rng.random_range(1..=4u32);
            let light = rng.random_range(20..=300u32);
            let max_deg = rng.random_range(2..=8usize);
            let heavy_share = rng.random_range(0.3..0.95);
            let data = UserSets::from_parallel(users, |u, buf| {
                let mut r = seed.stream(Purpose::Synthetic).rng(((k as u64) << 32) | u as u64);
                let d = r.random_range(1..=max_deg);
                for h in 0..heavy {
                    if r.random_bool(heavy_share / (h + 1) as f64) {
                        buf.push(ItemId(h));
                    }
                }
                while buf.len() < d {
                    buf.push(ItemId(heavy + r.random_range(0..light)));
                    buf.sort_unstable();
                    buf.dedup();
                }
            });
            DominanceInstance {
                name: format!("random-{k}"),
                data,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationMcRow {
    pub t: usize,
    pub h: f64,
    pub hits: u64,
    pub probability: f64,
    /// `delta/2 + 3·se`, with `se` the standard error at probability `delta/2`.
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationMcReport {
    pub sigma: f64,
    pub rho: f64,
    pub delta: f64,
    pub samples: u64,
    pub rows: Vec<CalibrationMcRow>,
}

impl CalibrationMcReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// For each `t`, draws `samples` batches of `t` independent `N(0, σ²)` values
/// and counts batches whose maximum reaches `rho − h(t)`.
pub fn calibration_monte_carlo(
    sigma: f64,
    rho: f64,
    delta: f64,
    ts: &[usize],
    h: &SensitivityProfile,
    samples: u64,
    seed: RunSeed,
) -> Result<CalibrationMcReport> {
    if samples == 0 || ts.contains(&0) {
        return Err(Error::param("need samples >= 1 and every t >= 1"));
    }
    let target = delta / 2.0;
    let se = (target * (1.0 - target) / samples as f64).sqrt();
    let rows = ts
        .iter()
        .map(|&t| {
            let key = seed.stream(Purpose::Trial(t as u64));
            let x = (rho - h.eval(t)) / sigma;
            let hits: u64 = (0..samples)
                .into_par_iter()
                .filter(|&s| (0..t as u64).any(|j| key.normal(s, j) >= x))
                .count() as u64;
            let probability = hits as f64 / samples as f64;
            let bound = target + 3.0 * se;
            CalibrationMcRow {
                t,
                h: h.eval(t),
                hits,
                probability,
                bound,
                passed: probability <= bound,
            }
        })
        .collect();
    Ok(CalibrationMcReport {
        sigma,
        rho,
        delta,
        samples,
        rows,
    })
}
