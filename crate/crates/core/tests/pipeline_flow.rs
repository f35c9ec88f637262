use partsel::pipeline::{add_noise, cap_degrees, threshold};
use partsel::synth::ZipfCorpus;
use partsel::{
    calibrate, dp_sips, mad2r, observed_union, weight_and_threshold, ItemId, Mad2rConfig, PipelineConfig,
    PrivacyBudget, Purpose, RoundBudgetSplit, RunSeed, SelectionResult, SensitivityProfile, UserSets, WeightMap,
    Weighter,
};

fn budget() -> PrivacyBudget {
    PrivacyBudget::new(1.0, 1e-5).unwrap()
}

fn ones(n: usize) -> WeightMap {
    WeightMap::from_dense(vec![1.0; n], vec![true; n])
}

#[test]
fn noise_moments_over_a_million_items() {
    let n = 1_000_000;
    let sigma = 3.0;
    let noisy = add_noise(&ones(n), sigma, RunSeed(11).stream(Purpose::Noise(1)));
    let z: Vec<f64> = noisy.dense_values().iter().map(|x| x - 1.0).collect();
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 4.0 * sigma / 1000.0, "mean {mean}");
    assert!((var.sqrt() / sigma - 1.0).abs() < 0.01, "std {}", var.sqrt());
}

#[test]
fn noise_is_keyed_by_item() {
    let key = RunSeed(5).stream(Purpose::Noise(2));
    let a = add_noise(&ones(1000), 1.0, key);
    let b = add_noise(&ones(1000), 1.0, key);
    assert_eq!(a, b);
    // A longer id space does not move the draws of shared ids.
    let c = add_noise(&ones(5000), 1.0, key);
    assert_eq!(&c.dense_values()[..1000], a.dense_values());
    let other = add_noise(&ones(1000), 1.0, RunSeed(5).stream(Purpose::Noise(1)));
    assert_ne!(a, other);
}

#[test]
fn lone_user_item_rarely_crosses() {
    // One degree-1 user: weight 1 = h(1). Each item below is an independent
    // replay of the noise stage.
    let c = calibrate(budget(), 100, 0.0, SensitivityProfile::inv_sqrt(1.0)).unwrap();
    let n = 1_000_000;
    let noisy = add_noise(&ones(n), c.sigma, RunSeed(99).stream(Purpose::Noise(1)));
    let hits = threshold(&noisy, c.rho).len();
    assert!((hits as f64) / (n as f64) <= 1e-5 / 2.0, "{hits} crossings");
}

#[test]
fn threshold_is_inclusive() {
    let rho = 20.5;
    let w = WeightMap::from_dense(vec![rho, rho - 1e-9, 0.0], vec![true, true, false]);
    assert_eq!(threshold(&w, rho), vec![ItemId(0)]);
    assert!(threshold(&WeightMap::empty(0), rho).is_empty());
}

#[test]
fn capping_contract() {
    let data = UserSets::from_sets([(0..3).collect::<Vec<u32>>(), (0..200).collect()]);
    let key = RunSeed(3).stream(Purpose::Capping);
    let capped = cap_degrees(&data, 100, key);
    assert_eq!(capped.user(0), data.user(0));
    assert_eq!(capped.degree(1), 100);
    assert!(capped.user(1).iter().all(|i| i.0 < 200));
    assert_eq!(capped, cap_degrees(&data, 100, key));
}

fn corpus() -> UserSets {
    ZipfCorpus {
        users: 6000,
        items: 8000,
        item_exponent: 1.0,
        max_degree: 150,
        degree_exponent: 0.8,
    }
    .generate(RunSeed(21))
    .unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn fingerprint(r: &SelectionResult) -> (Vec<ItemId>, Vec<u64>) {
    let bits = r.noisy_weights_non_private().iter().map(|(_, w)| w.to_bits()).collect();
    (r.selected.clone(), bits)
}

#[test]
fn every_algorithm_is_thread_count_invariant() {
    let data = corpus();
    let seed = RunSeed(8);
    let runs: Vec<Box<dyn Fn() -> SelectionResult + Sync>> = vec![
        Box::new(|| {
            weight_and_threshold(&data, &PipelineConfig::new(budget(), 100, 2.0, seed), &Weighter::Basic).unwrap()
        }),
        Box::new(|| {
            weight_and_threshold(
                &data,
                &PipelineConfig::new(budget(), 100, 2.0, seed),
                &Weighter::mad(50.0),
            )
            .unwrap()
        }),
        Box::new(|| mad2r(&data, &Mad2rConfig::standard(budget()).unwrap(), seed).unwrap()),
        Box::new(|| {
            let split = RoundBudgetSplit::from_fractions(budget(), &[0.1, 0.9]).unwrap();
            dp_sips(&data, &split, 100, seed).unwrap()
        }),
    ];
    for run in &runs {
        let one = in_pool(1, run);
        assert!(!one.is_empty());
        for threads in [2, 4] {
            assert_eq!(fingerprint(&one), fingerprint(&in_pool(threads, run)));
        }
    }
}

#[test]
fn outputs_stay_inside_the_union() {
    let data = corpus();
    let union = observed_union(&data);
    for s in 0..3 {
        let r = mad2r(&data, &Mad2rConfig::standard(budget()).unwrap(), RunSeed(s)).unwrap();
        assert!(r.selected.iter().all(|i| union.binary_search(i).is_ok()));
        assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r.metrics.rounds.len(), 2);
        let eps: f64 = r.metrics.rounds.iter().map(|x| x.epsilon).sum();
        let delta: f64 = r.metrics.rounds.iter().map(|x| x.delta).sum();
        assert!((eps - 1.0).abs() < 1e-12 && (delta - 1e-5).abs() < 1e-18);
        assert_eq!(r.metrics.rounds.iter().map(|x| x.selected).sum::<usize>(), r.len());
    }
}

#[test]
fn basic_round_matches_closed_form_calibration() {
    let data = corpus();
    let r = weight_and_threshold(
        &data,
        &PipelineConfig::new(budget(), 100, 2.0, RunSeed(1)),
        &Weighter::Basic,
    )
    .unwrap();
    let c = calibrate(budget(), 100, 2.0, SensitivityProfile::inv_sqrt(1.0)).unwrap();
    assert_eq!(r.metrics.rounds[0].sigma.to_bits(), c.sigma.to_bits());
    assert_eq!(r.metrics.rounds[0].rho.to_bits(), c.rho.to_bits());
    assert_eq!(r.metrics.rounds[0].tau, None);
}

#[test]
fn empty_dataset_selects_nothing() {
    let empty = UserSets::new();
    let config = PipelineConfig::new(budget(), 100, 2.0, RunSeed(0));
    for w in [
        Weighter::Basic,
        Weighter::mad(50.0),
        Weighter::PolicyGaussian,
        Weighter::GreedyUpdate,
    ] {
        assert!(weight_and_threshold(&empty, &config, &w).unwrap().is_empty());
    }
    assert!(mad2r(&empty, &Mad2rConfig::standard(budget()).unwrap(), RunSeed(0))
        .unwrap()
        .is_empty());
}

#[test]
fn mismatched_profile_is_rejected() {
    let data = corpus();
    let mut config = PipelineConfig::new(budget(), 100, 2.0, RunSeed(0));
    config.profile = Some(SensitivityProfile::inv_sqrt(0.5));
    assert!(weight_and_threshold(&data, &config, &Weighter::Basic).is_err());
    config.allow_profile_override = true;
    assert!(weight_and_threshold(&data, &config, &Weighter::Basic).is_ok());
}

#[test]
fn sequential_baselines_select_frequent_items() {
    let data = corpus();
    let config = PipelineConfig::new(budget(), 100, 4.0, RunSeed(2));
    let freq = data.item_frequencies();
    for w in [Weighter::PolicyGaussian, Weighter::GreedyUpdate] {
        let r = weight_and_threshold(&data, &config, &w).unwrap();
        assert!(!r.is_empty(), "{}", w.name());
        assert!(r.contains(ItemId(0)));
        assert!(r.selected.iter().all(|i| freq[i.index()] > 0));
    }
}

#[test]
fn every_weighter_sees_capped_input() {
    let data = UserSets::from_sets([(0..500).collect::<Vec<u32>>(), vec![0, 1]]);
    let config = PipelineConfig::new(budget(), 100, 4.0, RunSeed(0));
    for w in [
        Weighter::Basic,
        Weighter::mad(50.0),
        Weighter::PolicyGaussian,
        Weighter::GreedyUpdate,
    ] {
        let r = weight_and_threshold(&data, &config, &w).unwrap();
        assert_eq!(r.metrics.entries_processed, 102, "{}", w.name());
        assert!(r.noisy_weights_non_private().len() <= 101);
    }
}
