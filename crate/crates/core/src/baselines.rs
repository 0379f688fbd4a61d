//! FedAvg, FedProx and local-only reference algorithms.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};
use crate::protocol::{ClientState, FedccaHyper};

/// `sum_k (K_k / sum K) * theta_k`.
pub fn fedavg_aggregate(thetas: &BTreeMap<usize, &ParamVector>, sizes: &BTreeMap<usize, usize>) -> Result<ParamVector> {
    if thetas.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    if thetas.len() != sizes.len() || thetas.keys().any(|k| !sizes.contains_key(k)) {
        return Err(Error::invalid("model and size maps have different clients"));
    }
    if sizes.values().any(|&k| k == 0) {
        return Err(Error::invalid("client sizes must be positive"));
    }
    let total: usize = sizes.values().sum();
    let len = thetas.values().next().unwrap().len();
    let mut out = vec![0.0; len];
    for (id, theta) in thetas {
        if theta.len() != len {
            return Err(Error::DimensionMismatch {
                context: "fedavg model",
                expected: len,
                found: theta.len(),
            });
        }
        let w = sizes[id] as f64 / total as f64;
        for (a, v) in out.iter_mut().zip(theta.as_slice()) {
            *a += w * v;
        }
    }
    Ok(ParamVector::from(out))
}

/// Gradient of cross-entropy plus `mu/2 * ||w - w_global||^2`.
pub fn fedprox_gradient(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    global_params: &ParamVector,
    mu: f64,
) -> Result<ParamVector> {
    if params.len() != global_params.len() {
        return Err(Error::DimensionMismatch {
            context: "fedprox global model",
            expected: params.len(),
            found: global_params.len(),
        });
    }
    let mut grad = model::gradient(params, spec, batch)?;
    if mu != 0.0 {
        for ((g, w), w0) in grad
            .as_mut_slice()
            .iter_mut()
            .zip(params.as_slice())
            .zip(global_params.as_slice())
        {
            *g += mu * (w - w0);
        }
    }
    Ok(grad)
}

/// `ceil(fraction * N)` distinct client ids drawn uniformly.
pub fn sample_participants<R: Rng + ?Sized>(num_clients: usize, fraction: f64, rng: &mut R) -> Result<BTreeSet<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..num_clients).collect());
    }
    let k = ((fraction * num_clients as f64).ceil() as usize).min(num_clients);
    Ok(index::sample(rng, num_clients, k).into_iter().collect())
}

/// Local SGD from `start`, with a proximal pull toward `start` when `mu > 0`.
pub fn fedprox_local_training<R: Rng + ?Sized>(
    start: &ParamVector,
    data: &Batch,
    spec: &ModelSpec,
    hyper: &FedccaHyper,
    mu: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    model::train_sgd(start, data, &hyper.sgd(), rng, |p, b| {
        fedprox_gradient(p, spec, b, start, mu)
    })
}

/// Every client trains its own model; nothing is shared.
pub fn local_only_round<R, F>(
    clients: &[ClientState],
    spec: &ModelSpec,
    hyper: &FedccaHyper,
    mut rng_for: F,
) -> Result<BTreeMap<usize, ParamVector>>
where
    R: Rng,
    F: FnMut(usize) -> R,
{
    clients
        .iter()
        .map(|c| {
            let mut rng = rng_for(c.client_id);
            let theta = model::train_sgd(&c.theta, &c.dataset.train, &hyper.sgd(), &mut rng, |p, b| {
                model::gradient(p, spec, b)
            })?;
            Ok((c.client_id, theta))
        })
        .collect()
}
