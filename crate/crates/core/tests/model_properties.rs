use std::collections::BTreeMap;

use fedcca::baselines::{fedavg_aggregate, fedprox_gradient};
use fedcca::model::{self, Activation, Batch, Matrix, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_spec() -> impl Strategy<Value = ModelSpec> {
    (
        1usize..5,
        prop::collection::vec(1usize..6, 0..=2),
        2usize..5,
        any::<bool>(),
    )
        .prop_map(|(input, hidden, classes, tanh)| {
            let act = if tanh { Activation::Tanh } else { Activation::Relu };
            ModelSpec::new(input, hidden, classes).with_activation(act)
        })
}

/// A spec together with a parameter vector and a batch that fit it.
fn arb_case(scale: f64) -> impl Strategy<Value = (ModelSpec, ParamVector, Batch)> {
    arb_spec().prop_flat_map(move |spec| {
        let p = spec.param_count();
        let (d, c) = (spec.input_dim, spec.num_classes);
        (
            Just(spec),
            prop::collection::vec(-scale..scale, p),
            (1usize..7).prop_flat_map(move |n| {
                (
                    prop::collection::vec(-3.0..3.0f64, n * d),
                    prop::collection::vec(0..c, n),
                )
            }),
        )
            .prop_map(move |(spec, params, (x, y))| {
                let n = y.len();
                let batch = Batch::new(Matrix::from_vec(n, d, x).unwrap(), y).unwrap();
                (spec, ParamVector::from(params), batch)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one((spec, params, batch) in arb_case(20.0)) {
        let probs = model::forward(&params, &spec, &batch.features).unwrap();
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row sums to {}", s);
            prop_assert!(probs.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn zero_parameters_give_log_c_loss((spec, params, batch) in arb_case(1.0)) {
        let zeros = ParamVector::zeros(params.len());
        let loss = model::cross_entropy_loss(&zeros, &spec, &batch).unwrap();
        prop_assert!((loss - (spec.num_classes as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity((spec, params, batch) in arb_case(1.0)) {
        let grad = model::gradient(&params, &spec, &batch).unwrap();
        prop_assert_eq!(model::sgd_step(&params, &grad, 0.0).unwrap(), params);
    }

    #[test]
    fn smooth_gradient_matches_central_differences((spec, params, batch) in arb_case(1.0)) {
        let spec = spec.with_activation(Activation::Tanh);
        let h = 1e-5;
        let g = model::gradient(&params, &spec, &batch).unwrap();
        for k in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (model::cross_entropy_loss(&plus, &spec, &batch).unwrap()
                - model::cross_entropy_loss(&minus, &spec, &batch).unwrap()) / (2.0 * h);
            let a = g.as_slice()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "coordinate {} analytic {} numeric {}", k, a, fd);
        }
    }

    #[test]
    fn model_functions_are_deterministic((spec, params, batch) in arb_case(2.0), seed in any::<u64>()) {
        let a = model::init_params(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = model::init_params(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
        prop_assert_eq!(
            model::forward(&params, &spec, &batch.features).unwrap(),
            model::forward(&params, &spec, &batch.features).unwrap()
        );
        prop_assert_eq!(
            model::gradient(&params, &spec, &batch).unwrap(),
            model::gradient(&params, &spec, &batch).unwrap()
        );
    }

    #[test]
    fn fedprox_without_penalty_is_plain_gradient((spec, params, batch) in arb_case(1.0)) {
        let anchor = ParamVector::zeros(params.len());
        let prox = fedprox_gradient(&params, &spec, &batch, &anchor, 0.0).unwrap();
        let plain = model::gradient(&params, &spec, &batch).unwrap();
        prop_assert!(prox.as_slice().iter().zip(plain.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fedavg_stays_in_coordinate_hull(
        models in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..6),
        sizes in prop::collection::vec(1usize..50, 6),
    ) {
        let params: Vec<ParamVector> = models.into_iter().map(ParamVector::from).collect();
        let thetas: BTreeMap<usize, &ParamVector> = params.iter().enumerate().collect();
        let sizes: BTreeMap<usize, usize> = (0..params.len()).map(|i| (i, sizes[i])).collect();
        let avg = fedavg_aggregate(&thetas, &sizes).unwrap();
        for k in 0..6 {
            let lo = params.iter().map(|p| p.as_slice()[k]).fold(f64::INFINITY, f64::min);
            let hi = params.iter().map(|p| p.as_slice()[k]).fold(f64::NEG_INFINITY, f64::max);
            let v = avg.as_slice()[k];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn relu_gradient_matches_central_differences_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    for hidden in [vec![], vec![7], vec![5, 4]] {
        let spec = ModelSpec::new(3, hidden, 4).with_activation(Activation::Relu);
        let mut params = model::init_params(&spec, &mut rng);
        for p in params.as_mut_slice() {
            *p += rng.random_range(-0.3..0.3);
        }
        let batch = Batch::new(
            Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.3, -0.7], vec![-2.0, 1.0, 0.1]]).unwrap(),
            vec![0, 3, 1],
        )
        .unwrap();
        let g = model::gradient(&params, &spec, &batch).unwrap();
        for k in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (model::cross_entropy_loss(&plus, &spec, &batch).unwrap()
                - model::cross_entropy_loss(&minus, &spec, &batch).unwrap())
                / (2.0 * h);
            let a = g.as_slice()[k];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "coordinate {k}: {a} vs {fd}"
            );
        }
    }
}
