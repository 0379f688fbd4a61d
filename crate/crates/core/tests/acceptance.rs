//! Acceptance suite. Every test prints one `criterion N ... PASS|FAIL` line
//! before asserting, so `cargo test --test acceptance -- --nocapture` gives a
//! readable scorecard.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use fedcca::baselines::fedavg_aggregate;
use fedcca::config::{Ablation, Algorithm, DataConfig, ExperimentConfig};
use fedcca::data::{self, PartitionScheme, SyntheticSpec};
use fedcca::exec::Executor;
use fedcca::model::{self, Activation, Batch, Matrix, ModelSpec, ParamVector};
use fedcca::orchestrator::{build_datasets, run_experiment_with, Federation};
use fedcca::output::{write_outputs, METRICS_FILE, SELECTION_FILE, SUMMARY_FILE};
use fedcca::protocol::{
    self, aggregation_weights, client_centric_selection, multi_source_aggregate, AggregationWeighting, ClientState,
    FedccaHyper, SelectionRule, SimilarityMatrix, WEIGHT_SUM_TOLERANCE,
};
use fedcca::sweep::{run_sweep, AxisValue, SweepAxis, SweepSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {name}: {verdict} ({detail})");
    assert!(pass, "criterion {id} {name} failed: {detail}");
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Matrix::from_vec(n, dim, features).unwrap(), labels).unwrap()
}

#[test]
fn criterion_01_gradient_matches_finite_differences() {
    let started = Instant::now();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut depths = BTreeSet::new();
    for case in 0..30 {
        let depth = case % 3;
        let input_dim = rng.random_range(1..=5);
        let classes = rng.random_range(2..=5);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
        let activation = if case % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let spec = ModelSpec::new(input_dim, hidden, classes).with_activation(activation);
        let mut params = model::init_params(&spec, &mut rng);
        for p in params.as_mut_slice() {
            *p += rng.random_range(-0.3..0.3);
        }
        let rows = rng.random_range(1..=8);
        let batch = random_batch(&mut rng, rows, input_dim, classes);
        let analytic = model::gradient(&params, &spec, &batch).unwrap();
        for k in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (model::cross_entropy_loss(&plus, &spec, &batch).unwrap()
                - model::cross_entropy_loss(&minus, &spec, &batch).unwrap())
                / (2.0 * h);
            let a = analytic.as_slice()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        depths.insert(depth);
        cases += 1;
    }
    let elapsed = started.elapsed();
    let pass = cases >= 20 && depths.len() == 3 && worst < 1e-4 && within(elapsed, 10);
    report(
        1,
        "gradient oracle",
        pass,
        &format!("{cases} cases, max relative error {worst:.2e}, {elapsed:.2?}"),
    );
}

fn equal_weight_mean(thetas: &[ParamVector]) -> ParamVector {
    let map: BTreeMap<usize, &ParamVector> = thetas.iter().enumerate().collect();
    let sizes: BTreeMap<usize, usize> = (0..thetas.len()).map(|i| (i, 1)).collect();
    fedavg_aggregate(&map, &sizes).unwrap()
}

fn max_abs_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn single_client_dataset(seed: u64) -> data::ClientDataset {
    let data = DataConfig {
        num_clients: 1,
        samples_per_class: 12,
        ..DataConfig::default()
    };
    let mut config = ExperimentConfig::new(Algorithm::Fedcca, data);
    config.seed = seed;
    build_datasets(&config).unwrap().remove(0)
}

#[test]
fn criterion_02_homogeneous_clients_reduce_to_fedavg() {
    let started = Instant::now();
    let dataset = single_client_dataset(3);
    let mut worst: f64 = 0.0;

    // Through the orchestrator, full-batch training.
    let mut config = ExperimentConfig::new(
        Algorithm::Fedcca,
        DataConfig {
            num_clients: 4,
            ..DataConfig::default()
        },
    );
    config.model.hidden_dims = vec![6];
    config.hyper.batch_size = 10_000;
    config.hyper.lr = 0.1;
    config.hyper.local_epochs = 2;
    config.rounds = 10;
    let mut fed = Federation::from_clients(config, vec![dataset.clone(); 4], Executor::sequential()).unwrap();
    for _ in 0..10 {
        fed.train_phase().unwrap();
        let trained: Vec<ParamVector> = fed.clients().iter().map(|c| c.theta.clone()).collect();
        fed.server_phase().unwrap();
        let expected = equal_weight_mean(&trained);
        let step = fed.last_server_step().unwrap();
        for (aggregated, client) in step.thetas.iter().zip(fed.clients()) {
            worst = worst.max(max_abs_diff(aggregated, &expected));
            worst = worst.max(max_abs_diff(&client.theta, &expected));
        }
    }

    // At protocol level with shuffled mini-batches driven by identical streams.
    let spec = ModelSpec::new(4, vec![5], 10);
    let hyper = FedccaHyper {
        batch_size: 8,
        lr: 0.05,
        local_epochs: 2,
        ..FedccaHyper::default()
    };
    let mut init = ChaCha8Rng::seed_from_u64(5);
    let theta0 = model::init_params(&spec, &mut init);
    let phi0 = model::init_params(&spec, &mut init);
    let mut clients: Vec<ClientState> = (0..4)
        .map(|id| ClientState {
            client_id: id,
            theta: theta0.clone(),
            phi: phi0.clone(),
            participating: true,
            dataset: dataset.clone(),
        })
        .collect();
    for round in 0..10u64 {
        let mut thetas = Vec::new();
        let mut phis = Vec::new();
        for c in &clients {
            thetas
                .push(protocol::local_training(c, &spec, &hyper, &mut ChaCha8Rng::seed_from_u64(100 + round)).unwrap());
            phis.push(
                protocol::client_specific_training(c, &spec, &hyper, &mut ChaCha8Rng::seed_from_u64(200 + round))
                    .unwrap(),
            );
        }
        let step = protocol::server_step(
            &thetas,
            &phis,
            &spec,
            &hyper,
            SelectionRule::Threshold,
            AggregationWeighting::Attention,
            round as usize,
        )
        .unwrap();
        let expected = equal_weight_mean(&thetas);
        for (c, aggregated) in clients.iter_mut().zip(&step.thetas) {
            worst = worst.max(max_abs_diff(aggregated, &expected));
            c.theta = aggregated.clone();
            c.phi = phis[c.client_id].clone();
            c.participating = step.report.next_participation[c.client_id];
        }
    }
    let elapsed = started.elapsed();
    let pass = worst <= 1e-12 && within(elapsed, 10);
    report(
        2,
        "homogeneous reduction",
        pass,
        &format!("max coordinate gap {worst:.1e} over 2 x 10 rounds, {elapsed:.2?}"),
    );
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> SimilarityMatrix {
    let coarse = rng.random_bool(0.3);
    let mut scores = vec![vec![0.0; n]; n];
    for (i, j) in (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))) {
        let u = if coarse {
            rng.random_range(1..5) as f64 * 0.2
        } else {
            rng.random_range(0.0..1.0)
        };
        scores[i][j] = u;
        scores[j][i] = u;
    }
    SimilarityMatrix::from_scores(scores, 0).unwrap()
}

fn oracle_selection(m: &SimilarityMatrix, n_max: usize) -> Vec<Vec<usize>> {
    let n = m.len();
    (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..n).map(|j| m.score(i, j)).collect();
            let criteria = (0..n).filter(|&j| j != i).map(|j| row[j]).sum::<f64>() / (2 * n) as f64;
            let mut admitted: Vec<usize> = (0..n).filter(|&j| j != i && row[j] <= criteria).collect();
            admitted.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
            admitted.truncate(n_max);
            admitted
        })
        .collect()
}

#[test]
fn criterion_03_selection_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for _ in 0..200 {
        let n = rng.random_range(3..=6);
        let n_max = rng.random_range(1..=5);
        let m = random_matrix(&mut rng, n);
        let report = client_centric_selection(&m, n_max).unwrap();
        let expected = oracle_selection(&m, n_max);
        let participation: Vec<bool> = (0..n).map(|j| expected.iter().any(|s| s.contains(&j))).collect();
        if report.selected != expected || report.next_participation != participation {
            mismatches += 1;
        }
        nonempty += expected.iter().filter(|s| !s.is_empty()).count();
    }
    report(
        3,
        "selection oracle",
        mismatches == 0 && nonempty > 0,
        &format!("200 matrices, {mismatches} mismatches, {nonempty} non-empty source sets"),
    );
}

#[test]
fn criterion_04_selection_is_not_symmetric() {
    let m =
        SimilarityMatrix::from_scores(vec![vec![0.0, 0.1, 0.9], vec![0.1, 0.0, 0.2], vec![0.9, 0.2, 0.0]], 0).unwrap();
    let r = client_centric_selection(&m, 2).unwrap();
    let pass = r.selected[0].contains(&1) && !r.selected[1].contains(&0);
    report(
        4,
        "selection asymmetry",
        pass,
        &format!("S0 = {:?}, S1 = {:?}", r.selected[0], r.selected[1]),
    );
}

#[test]
fn criterion_05_equal_scores_select_nobody() {
    let mut failures = Vec::new();
    for n in 2..=8 {
        for b in [1e-6, 0.1, 0.5, 0.999] {
            let scores = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { b }).collect())
                .collect();
            let m = SimilarityMatrix::from_scores(scores, 0).unwrap();
            let r = client_centric_selection(&m, 10).unwrap();
            let thetas: Vec<ParamVector> = (0..n).map(|i| ParamVector::from(vec![i as f64, 1.0])).collect();
            let map: BTreeMap<usize, &ParamVector> = thetas.iter().enumerate().collect();
            for i in 0..n {
                let w = aggregation_weights(
                    &m,
                    i,
                    &r.selected[i],
                    &r.next_participation,
                    AggregationWeighting::Attention,
                )
                .unwrap();
                let merged = multi_source_aggregate(&map, &w).unwrap();
                let self_only = w.len() == 1 && w[&i] == 1.0 && merged == thetas[i];
                if !r.selected[i].is_empty() || !self_only {
                    failures.push((n, b, i));
                }
            }
        }
    }
    report(
        5,
        "equal-distance degeneracy",
        failures.is_empty(),
        &format!("N = 2..8, 4 score levels, failures {failures:?}"),
    );
}

fn domain_config(seed: u64) -> ExperimentConfig {
    let data = DataConfig {
        num_classes: 4,
        feature_dim: 2,
        samples_per_class: 100,
        cluster_separation: 1.0,
        noise_std: 0.3,
        num_clients: 10,
        scheme: PartitionScheme::Pathological { classes_per_client: 4 },
        domain_angles: vec![0.0, 90.0],
        ..DataConfig::default()
    };
    let mut c = ExperimentConfig::new(Algorithm::Fedcca, data);
    c.rounds = 30;
    c.seed = seed;
    c
}

#[test]
fn criterion_06_selection_follows_feature_domains() {
    let started = Instant::now();
    let mut fractions = Vec::new();
    for seed in SEEDS {
        let mut fed = Federation::new(domain_config(seed), Executor::default()).unwrap();
        let domains: Vec<usize> = fed.clients().iter().map(|c| c.dataset.domain_id).collect();
        assert_eq!(domains.iter().filter(|&&d| d == 0).count(), 5);
        let (mut same, mut total) = (0usize, 0usize);
        for round in 0..30 {
            fed.run_round().unwrap();
            if round < 10 {
                continue;
            }
            let step = fed.last_server_step().unwrap();
            for (i, sources) in step.report.selected.iter().enumerate() {
                total += sources.len();
                same += sources.iter().filter(|&&j| domains[j] == domains[i]).count();
            }
        }
        fractions.push(if total == 0 { 0.0 } else { same as f64 / total as f64 });
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let elapsed = started.elapsed();
    report(
        6,
        "domain-clustered selection",
        mean >= 0.8 && within(elapsed, 60),
        &format!("same-domain fraction {mean:.3}, per seed {fractions:.3?}, {elapsed:.2?}"),
    );
}

fn label_shift_config(algorithm: Algorithm, ablation: Ablation, seed: u64) -> ExperimentConfig {
    let data = DataConfig {
        num_classes: 10,
        feature_dim: 2,
        samples_per_class: 100,
        cluster_separation: 1.0,
        noise_std: 0.5,
        num_clients: 10,
        scheme: PartitionScheme::Pathological { classes_per_client: 2 },
        ..DataConfig::default()
    };
    let mut c = ExperimentConfig::new(algorithm, data);
    c.rounds = 50;
    c.hyper.local_epochs = 5;
    c.hyper.batch_size = 32;
    c.hyper.lr = 0.01;
    c.ablation = ablation;
    c.seed = seed;
    c
}

fn mean_accuracy(config: &ExperimentConfig) -> f64 {
    run_experiment_with(config, &Executor::default()).unwrap().mean_accuracy
}

#[test]
fn criterion_07_personalization_beats_fedavg_under_label_shift() {
    let started = Instant::now();
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let ours = mean_accuracy(&label_shift_config(Algorithm::Fedcca, Ablation::Full, seed));
        let avg = mean_accuracy(&label_shift_config(Algorithm::Fedavg, Ablation::Full, seed));
        gaps.push(ours - avg);
    }
    let wins = gaps.iter().filter(|&&g| g >= 0.05).count();
    let elapsed = started.elapsed();
    report(
        7,
        "personalization gain",
        wins >= 4 && within(elapsed, 120),
        &format!("{wins}/5 seeds ahead by 5 pp, gaps {gaps:.3?}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_08_fedavg_improves_with_alpha() {
    let data = DataConfig {
        num_classes: 10,
        feature_dim: 2,
        samples_per_class: 100,
        cluster_separation: 1.0,
        noise_std: 0.3,
        num_clients: 10,
        ..DataConfig::default()
    };
    let mut base = ExperimentConfig::new(Algorithm::Fedavg, data);
    base.rounds = 50;
    base.hyper.local_epochs = 10;
    base.hyper.batch_size = 32;
    base.hyper.lr = 0.01;
    let spec = SweepSpec {
        base,
        axis: SweepAxis::parse("alpha", "0.2,0.8,100").unwrap(),
        seeds: SEEDS.to_vec(),
    };
    let dir = tempfile::tempdir().unwrap();
    let rows = run_sweep(&spec, dir.path(), &Executor::default()).unwrap();
    let mut monotone = 0;
    let mut table = Vec::new();
    for seed in SEEDS {
        let acc: Vec<f64> = [0.2, 0.8, 100.0]
            .iter()
            .map(|&a| {
                let row = rows
                    .iter()
                    .find(|r| r.seed == seed && r.axis_value == AxisValue::Alpha(a))
                    .unwrap();
                row.mean_accuracy.unwrap()
            })
            .collect();
        if acc[0] <= acc[1] && acc[1] <= acc[2] {
            monotone += 1;
        }
        table.push(acc);
    }
    report(
        8,
        "alpha monotonicity",
        monotone >= 4,
        &format!("{monotone}/5 seeds non-decreasing, accuracies {table:.3?}"),
    );
}

#[test]
fn criterion_09_attention_weighting_does_not_hurt() {
    let mut diffs = Vec::new();
    for seed in SEEDS {
        let full = mean_accuracy(&label_shift_config(Algorithm::Fedcca, Ablation::Full, seed));
        let plain = mean_accuracy(&label_shift_config(
            Algorithm::Fedcca,
            Ablation::NoAttentionAggregation,
            seed,
        ));
        diffs.push(full - plain);
    }
    let wins = diffs.iter().filter(|&&d| d >= 0.0).count();
    report(
        9,
        "ablation ordering",
        wins >= 4,
        &format!("{wins}/5 seeds full >= no_attention_aggregation, differences {diffs:.4?}"),
    );
}

fn output_bytes(config: &ExperimentConfig, executor: &Executor) -> Vec<Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment_with(config, executor).unwrap();
    write_outputs(&result, dir.path()).unwrap();
    [METRICS_FILE, SELECTION_FILE, SUMMARY_FILE]
        .iter()
        .map(|f| fs::read(dir.path().join(f)).unwrap())
        .collect()
}

#[test]
fn criterion_10_outputs_are_deterministic_across_schedules() {
    let mut checked = Vec::new();
    let mut pass = true;
    for algorithm in Algorithm::ALL {
        let data = DataConfig {
            num_clients: 6,
            samples_per_class: 40,
            ..DataConfig::default()
        };
        let mut config = ExperimentConfig::new(algorithm, data);
        config.rounds = 6;
        config.eval_every = 2;
        config.seed = 77;
        config.model.hidden_dims = vec![8];
        config.hyper.participation_fraction = 0.5;
        let reference = output_bytes(&config, &Executor::sequential());
        for executor in [Executor::sequential(), Executor::new(2), Executor::new(4)] {
            pass &= output_bytes(&config, &executor) == reference;
        }
        checked.push(algorithm.name());
    }
    report(
        10,
        "determinism across worker counts",
        pass,
        &format!("{checked:?} with 1, 2 and 4 workers"),
    );
}

#[test]
fn criterion_11_structural_invariants() {
    let mut problems = Vec::new();

    let mut config = domain_config(9);
    config.rounds = 12;
    config.eval_every = 5;
    let n = config.data.num_clients;
    let mut fed = Federation::new(config.clone(), Executor::default()).unwrap();
    for round in 0..config.rounds {
        fed.run_round().unwrap();
        let step = fed.last_server_step().unwrap();
        if !step.matrix.is_symmetric_zero_diagonal() {
            problems.push(format!("round {round}: matrix not symmetric with zero diagonal"));
        }
        for (i, w) in step.weights.iter().enumerate() {
            let total: f64 = w.values().sum();
            if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                problems.push(format!("round {round}: client {i} weights sum to {total}"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let rows = rng.random_range(1..20);
        let cols = 2 * rng.random_range(1..4);
        let features: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-10.0..10.0)).collect();
        let m = Matrix::from_vec(rows, cols, features).unwrap();
        let rotated = data::apply_domain_rotation(&m, rng.random_range(-360.0..360.0)).unwrap();
        for r in 0..rows {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm(m.row(r)) - norm(rotated.row(r))).abs() > 1e-9 {
                problems.push("rotation changed a norm".into());
            }
        }
    }

    for seed in 0..20 {
        let spec = SyntheticSpec {
            samples_per_class: 30,
            ..SyntheticSpec::default()
        };
        let pool = data::generate_base_pool(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for alpha in [0.1, 0.5, 100.0] {
            let parts = data::partition_dirichlet(&pool, 8, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            if all != (0..pool.len()).collect::<Vec<_>>() || parts.iter().any(Vec::is_empty) {
                problems.push(format!("seed {seed} alpha {alpha}: not an exact partition"));
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment_with(&config, &Executor::default()).unwrap();
    write_outputs(&result, dir.path()).unwrap();
    let rows = fs::read_to_string(dir.path().join(METRICS_FILE))
        .unwrap()
        .lines()
        .count()
        - 1;
    let expected = n * config.rounds.div_ceil(config.eval_every);
    if rows != expected {
        problems.push(format!("metrics.csv has {rows} rows, expected {expected}"));
    }

    report(
        11,
        "structural invariants",
        problems.is_empty(),
        &format!("{problems:?}"),
    );
}
