use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use partsel::coverage::{coverage_report, CoverageReport};
use partsel::ingest::{self, Dataset, DatasetManifest, InputFormat};
use partsel::synth::{synth_gap_instance, ZipfCorpus};
use partsel::two_round::Mad2rConfig;
use partsel::verify::{
    calibration_monte_carlo, dominance_harness, random_dominance_instances, sensitivity_sweep, DominanceInstance,
    DominanceParams, SweepConfig,
};
use partsel::{
    calibrate as calibrate_budget, dp_sips, mad2r, weight_and_threshold, BiasClamp, BiasMap, Error, ItemId,
    PipelineConfig, PrivacyBudget, RoundBudgetSplit, RunMetrics, RunSeed, SelectionResult, SensitivityProfile,
    Weighter,
};
use serde::Serialize;

use crate::{
    Algo, BudgetArgs, CalibrateArgs, CoverageArgs, InputArgs, RunArgs, StatsArgs, SynthGapArgs, SynthZipfArgs,
    VerificationFailed, VerifyArgs, VerifyCheck,
};

fn budget(b: &BudgetArgs) -> Result<PrivacyBudget> {
    Ok(PrivacyBudget::new(b.eps, b.delta)?)
}

fn load(input: &InputArgs) -> Result<(Dataset, InputFormat)> {
    let format: InputFormat = input.format.parse()?;
    Ok((ingest::load(&input.input, format)?, format))
}

fn write_json(value: &impl Serialize, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let params = calibrate_budget(
        budget(&a.budget)?,
        a.budget.delta0,
        a.beta,
        SensitivityProfile::inv_sqrt(a.bmax),
    )?;
    write_json(&params, None)
}

#[derive(Serialize)]
struct RunParameters {
    epsilon: f64,
    delta: f64,
    delta0: usize,
    beta: f64,
    d_max: Option<f64>,
    split: Option<Vec<f64>>,
    c_lb: Option<f64>,
    c_ub: Option<f64>,
    b_min: Option<f64>,
    b_max: Option<f64>,
    allow_unsafe: bool,
}

#[derive(Serialize)]
struct RunRecord {
    algo: String,
    parameters: RunParameters,
    /// The seed itself is not recorded: with it, the output leaks the noise.
    seed_supplied: bool,
    workers: usize,
    input: DatasetManifest,
    output: PathBuf,
    metrics: RunMetrics,
    coverage: CoverageReport,
}

fn algo_name(a: Algo) -> &'static str {
    match a {
        Algo::Basic => "basic",
        Algo::Mad => "mad",
        Algo::Mad2r => "mad2r",
        Algo::Dpsips => "dpsips",
        Algo::Policy => "policy",
        Algo::Greedy => "greedy",
    }
}

pub fn run(a: RunArgs) -> Result<()> {
    let (data, format) = load(&a.input)?;
    let manifest = DatasetManifest::scan(&data.sets, vec![a.input.input.clone()], format);
    let seed = RunSeed(a.seed.unwrap_or_else(rand::random));
    let total = budget(&a.budget)?;
    let delta0 = a.budget.delta0;
    let sequential = matches!(a.algo, Algo::Policy | Algo::Greedy);
    let beta = a.beta.unwrap_or(if sequential { 4.0 } else { 2.0 });
    if sequential && manifest.entries > a.max_sequential_entries {
        return Err(Error::TooLarge {
            entries: manifest.entries,
            limit: a.max_sequential_entries,
        }
        .into());
    }

    let multi_round = matches!(a.algo, Algo::Mad2r | Algo::Dpsips);
    let biased = a.algo == Algo::Mad2r;
    let result: SelectionResult = match a.algo {
        Algo::Mad2r => {
            let config = Mad2rConfig {
                split: RoundBudgetSplit::from_fractions(total, &a.split)?,
                delta0,
                d_max: a.dmax,
                beta,
                c_lb: a.clb,
                c_ub: a.cub,
                clamp: BiasClamp::new(a.bmin, a.bmax)?,
                allow_unsafe: a.allow_unsafe,
            };
            mad2r(&data.sets, &config, seed)?
        }
        Algo::Dpsips => dp_sips(
            &data.sets,
            &RoundBudgetSplit::from_fractions(total, &a.split)?,
            delta0,
            seed,
        )?,
        single => {
            let weighter = match single {
                Algo::Basic => Weighter::Basic,
                Algo::Mad => Weighter::Mad {
                    d_max: a.dmax,
                    clamp: BiasClamp::UNBIASED,
                    biases: BiasMap::unbiased(),
                    allow_unsafe: a.allow_unsafe,
                },
                Algo::Policy => Weighter::PolicyGaussian,
                _ => Weighter::GreedyUpdate,
            };
            weight_and_threshold(&data.sets, &PipelineConfig::new(total, delta0, beta, seed), &weighter)?
        }
    };

    ingest::write_items(result.selected.iter().map(|&i| data.item_name(i)), &a.output)?;
    if let Some(path) = &a.dump_noisy_weights {
        eprintln!(
            "warning: {} holds noisy weights of every observed item; it is NOT differentially private",
            path.display()
        );
        let mut names: Vec<(ItemId, f64)> = result.noisy_weights_non_private().iter().collect();
        names.sort_by_key(|p| p.0);
        ingest::write_items(
            names.iter().map(|(i, w)| format!("{}\t{w:.17e}", data.item_name(*i))),
            path,
        )?;
    }

    let coverage = coverage_report(&data.sets, &result.selected)?;
    if a.benchmark {
        for s in &result.metrics.stages {
            eprintln!(
                "{:<16} {:>10.3}s {:>14} {:>14.0}/s",
                s.stage,
                s.seconds,
                s.processed,
                s.throughput()
            );
        }
    }
    let uses_adaptive = matches!(a.algo, Algo::Mad | Algo::Mad2r);
    let record = RunRecord {
        algo: algo_name(a.algo).into(),
        parameters: RunParameters {
            epsilon: total.epsilon,
            delta: total.delta,
            delta0,
            beta,
            d_max: uses_adaptive.then_some(a.dmax),
            split: multi_round.then(|| a.split.clone()),
            c_lb: biased.then_some(a.clb),
            c_ub: biased.then_some(a.cub),
            b_min: biased.then_some(a.bmin),
            b_max: biased.then_some(a.bmax),
            allow_unsafe: a.allow_unsafe,
        },
        seed_supplied: a.seed.is_some(),
        workers: rayon::current_num_threads(),
        input: manifest,
        output: a.output.clone(),
        metrics: result.metrics,
        coverage,
    };
    let metrics_path = a.metrics.unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".metrics.json");
        PathBuf::from(p)
    });
    write_json(&record, Some(&metrics_path))
}

fn finish_verify(report: &impl Serialize, path: Option<&Path>, passed: bool, what: &str) -> Result<()> {
    write_json(report, path)?;
    if passed {
        Ok(())
    } else {
        Err(VerificationFailed(what.into()).into())
    }
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let path = a.report.as_deref();
    match a.check {
        VerifyCheck::Sensitivity => {
            let r = sensitivity_sweep(&SweepConfig::grid())?;
            finish_verify(&r, path, r.passed(), "sensitivity bound exceeded")
        }
        VerifyCheck::Dominance {
            instances,
            trials,
            beta,
            dmax,
            seed,
            budget: b,
        } => {
            let mut list = random_dominance_instances(instances, RunSeed(seed));
            list.push(DominanceInstance {
                name: "gap".into(),
                data: synth_gap_instance(15_000, 1000, RunSeed(seed))?,
            });
            let params = DominanceParams {
                budget: budget(&b)?,
                delta0: b.delta0,
                beta,
                d_max: dmax,
                trials,
                seed: RunSeed(seed),
            };
            let r = dominance_harness(&list, &params)?;
            finish_verify(&r, path, r.passed(), "dominance check failed")
        }
        VerifyCheck::Calibration {
            samples,
            ts,
            seed,
            budget: b,
        } => {
            let bud = budget(&b)?;
            let profile = SensitivityProfile::inv_sqrt(1.0);
            let c = calibrate_budget(bud, b.delta0, 0.0, profile.clone())?;
            if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > b.delta0) {
                return Err(Error::InvalidParameter(format!("t = {t} outside 1..={}", b.delta0)).into());
            }
            let r = calibration_monte_carlo(c.sigma, c.rho, bud.delta, &ts, &profile, samples, RunSeed(seed))?;
            finish_verify(&r, path, r.passed(), "crossing probability above delta/2")
        }
    }
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let (data, format) = load(&a.input)?;
    let manifest = DatasetManifest::scan(&data.sets, vec![a.input.input.clone()], format);
    if a.strict {
        let (again, _) = load(&a.input)?;
        manifest.check(&again.sets)?;
    }
    write_json(&manifest, None)
}

pub fn synth_gap(a: SynthGapArgs) -> Result<()> {
    let sets = synth_gap_instance(a.n, a.m, RunSeed(a.seed))?;
    ingest::write_pairs_tsv(&Dataset::from_sets(sets), &a.output)?;
    Ok(())
}

pub fn synth_zipf(a: SynthZipfArgs) -> Result<()> {
    let corpus = match (&a.preset, a.entries) {
        (Some(p), None) => ZipfCorpus::preset(p)?,
        (None, Some(e)) => ZipfCorpus::with_entries(e),
        _ => return Err(Error::InvalidParameter("give exactly one of --preset or --entries".into()).into()),
    };
    let sets = corpus.generate(RunSeed(a.seed))?;
    ingest::write_pairs_tsv(&Dataset::from_sets(sets), &a.output)?;
    Ok(())
}

pub fn coverage(a: CoverageArgs) -> Result<()> {
    let (data, _) = load(&a.input)?;
    let text = fs::read_to_string(&a.selected).map_err(|e| Error::Io {
        path: a.selected.clone(),
        source: e,
    })?;
    let mut selected = Vec::new();
    for name in text.lines().filter(|l| !l.is_empty()) {
        let k = data
            .item_names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_err(|_| Error::InvalidParameter(format!("selected item {name:?} is not in the input")))
            .with_context(|| format!("reading {}", a.selected.display()))?;
        selected.push(ItemId(k as u32));
    }
    selected.sort_unstable();
    selected.dedup();
    let report = coverage_report(&data.sets, &selected)?;
    write_json(&report, None)
}
