//! Central-difference checks of the analytic gradients, used by the
//! `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::model::{Network, Profile, Trace};
use crate::seed::mix_seed;
use crate::tensor::{self, LayerSpec, Params, Tensor};
use crate::trainer::{batch_loss_traced, batch_loss_with, TripletBatch};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so that two vanishing gradients
/// do not register as a large relative difference.
pub const FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < TOLERANCE
    }
}

fn gaussian_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    shifted_gaussian_tensor(shape, 0.0, std, rng)
}

fn shifted_gaussian_tensor(shape: Vec<usize>, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(mean, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Checks one layer on the scalar `sum(r * layer(x))` for a random `r`,
/// over every input and parameter coordinate.
pub fn check_layer(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_tensor(input_shape.to_vec(), 1.0, &mut rng);
    let mut params = Params::<f64>::zeros(spec);
    if let Some(p) = params.as_mut() {
        p.weight = gaussian_tensor(p.weight.shape().to_vec(), 0.5, &mut rng);
        p.bias = gaussian_tensor(p.bias.shape().to_vec(), 0.5, &mut rng);
    }
    let (y, cache) = tensor::forward(spec, params.as_ref(), &x)?;
    let r = gaussian_tensor(y.shape().to_vec(), 1.0, &mut rng);
    let objective = |x: &Tensor<f64>, p: Option<&Params<f64>>| -> Result<f64> {
        let (y, _) = tensor::forward(spec, p, x)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let (gx, gp) = tensor::backward(spec, params.as_ref(), &cache, &r)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += STEP;
        xm.data_mut()[i] -= STEP;
        let fd = (objective(&xp, params.as_ref())? - objective(&xm, params.as_ref())?) / (2.0 * STEP);
        worst = worst.max(relative_error(gx.data()[i], fd));
        checked += 1;
    }
    if let (Some(p), Some(g)) = (&params, &gp) {
        for (which, analytic) in [(0, &g.weight), (1, &g.bias)] {
            for i in 0..analytic.len() {
                let shifted = |delta: f64| {
                    let mut q = p.clone();
                    let t = if which == 0 { &mut q.weight } else { &mut q.bias };
                    t.data_mut()[i] += delta;
                    objective(&x, Some(&q))
                };
                let fd = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic[i], fd));
                checked += 1;
            }
        }
    }
    Ok(CheckResult {
        name: format!("{spec:?}"),
        checked,
        max_relative_error: worst,
    })
}

/// Small random instances of every layer kind.
pub fn layer_cases() -> Vec<(LayerSpec, Vec<usize>)> {
    vec![
        (
            LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 1 },
            vec![2, 7, 7],
        ),
        (LayerSpec::MaxPool { size: 2, stride: 2 }, vec![2, 6, 6]),
        (LayerSpec::Relu, vec![3, 4, 4]),
        (LayerSpec::Fc { inputs: 12, units: 5 }, vec![3, 2, 2]),
    ]
}

/// Random batch of `b` pairs, each from its own video, with `k` negatives.
pub fn random_batch(profile: Profile, b: usize, k: usize, seed: u64) -> Result<TripletBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = profile.input_shape().to_vec();
    let crop = |rng: &mut ChaCha8Rng| Tensor::from_fn(shape.clone(), |_| rng.random::<f32>());
    let anchors = (0..b).map(|_| crop(&mut rng)).collect();
    let positives = (0..b).map(|_| crop(&mut rng)).collect();
    let videos = (0..b).map(|i| format!("v{i}")).collect();
    let mut batch = TripletBatch::new(anchors, positives, videos)?;
    batch.assign_random_negatives(k, &mut rng)?;
    Ok(batch)
}

pub const BIAS_MEAN: f64 = 1.0;

/// A network whose activations stay of order one: weights with std
/// `sqrt(2 / fan_in)` and biases around [`BIAS_MEAN`] with std 0.1. Central
/// differences with a 1e-4 step are only meaningful at such a point; under
/// the 0.01 training init deep activations are far smaller than the step.
/// The positive bias keeps most pre-activations clear of the ReLU kink, so
/// few stencils straddle one.
pub fn well_scaled_network(profile: Profile, seed: u64) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::zeros(profile);
    for p in net.params.iter_mut().flatten() {
        let fan_in: usize = p.weight.shape()[1..].iter().product();
        p.weight = gaussian_tensor(p.weight.shape().to_vec(), (2.0 / fan_in as f64).sqrt(), &mut rng);
        p.bias = shifted_gaussian_tensor(p.bias.shape().to_vec(), BIAS_MEAN, 0.1, &mut rng);
    }
    net
}

/// Evaluation points tried per coordinate before giving up on it.
pub const MAX_POINTS: u64 = 64;

/// Objective at `net` plus whether it lies on the same smooth piece as
/// `reference`: every ReLU, max-pool and hinge takes the same branch.
fn objective_piece(
    net: &Network<f64>,
    batch: &TripletBatch,
    margin: f64,
    weight_decay: f64,
) -> Result<(f64, Vec<Trace>, Vec<bool>)> {
    let (loss, traces) = batch_loss_traced(net, batch, margin, weight_decay)?;
    let hinges = loss.losses.iter().flatten().map(|&l| l > 0.0).collect();
    Ok((loss.objective, traces, hinges))
}

/// Checks the triplet objective `lambda/2 |W|^2 + sum of hinges` on
/// `samples` coordinates per parameter tensor.
///
/// The objective is piecewise smooth. A central difference is only compared
/// when the `+h` and `-h` passes take the same branch everywhere; a
/// coordinate whose stencil straddles a kink is retried at a fresh
/// well-scaled point, and counts as a failure if no point works.
pub fn check_objective(
    profile: Profile,
    seed: u64,
    b: usize,
    k: usize,
    weight_decay: f64,
    samples: usize,
) -> Result<CheckResult> {
    let margin = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[3]));
    let layout = Network::<f64>::zeros(profile).param_ranges();
    let mut pending: Vec<usize> = Vec::new();
    for (start, len, _) in layout {
        if len <= samples {
            pending.extend(start..start + len);
        } else {
            pending.extend(rand::seq::index::sample(&mut rng, len, samples).into_iter().map(|j| start + j));
        }
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for point in 0..MAX_POINTS {
        if pending.is_empty() {
            break;
        }
        let mut net = well_scaled_network(profile, mix_seed(seed, &[1, point]));
        let batch = random_batch(profile, b, k, mix_seed(seed, &[2, point]))?;
        let analytic = batch_loss_with(&net, &batch, margin, weight_decay)?
            .objective_gradient(&net, weight_decay)
            .flatten();
        let mut kinked = Vec::new();
        for i in pending {
            let orig = *net.param_mut(i).expect("index in range");
            *net.param_mut(i).unwrap() = orig + STEP;
            let (plus, tp, hp) = objective_piece(&net, &batch, margin, weight_decay)?;
            *net.param_mut(i).unwrap() = orig - STEP;
            let (minus, tm, hm) = objective_piece(&net, &batch, margin, weight_decay)?;
            *net.param_mut(i).unwrap() = orig;
            let smooth = hp == hm && tp.iter().zip(&tm).all(|(a, b)| a.same_branches(b));
            if !smooth {
                kinked.push(i);
                continue;
            }
            let fd = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i], fd));
            checked += 1;
        }
        pending = kinked;
        log::debug!("point {point}: {} coordinates left", pending.len());
    }
    if !pending.is_empty() {
        log::warn!("coordinates {pending:?} straddled a kink at every point");
        worst = f64::INFINITY;
    }
    Ok(CheckResult {
        name: format!("{profile:?} triplet objective (B={b}, K={k})"),
        checked,
        max_relative_error: worst,
    })
}

/// Every layer kind plus the full objective.
pub fn run(profile: Profile, seed: u64) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (i, (spec, shape)) in layer_cases().iter().enumerate() {
        results.push(check_layer(spec, shape, mix_seed(seed, &[i as u64]))?);
    }
    let samples = match profile {
        Profile::Desk => 6,
        Profile::Paper => 1,
    };
    results.push(check_objective(profile, seed, 4, 2, 0.0005, samples)?);
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes() {
        for (spec, shape) in layer_cases() {
            let r = check_layer(&spec, &shape, 11).unwrap();
            assert!(r.max_relative_error < TOLERANCE, "{r:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }
}
