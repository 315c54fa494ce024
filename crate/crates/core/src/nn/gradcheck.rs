use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Cache, Mode, Network};
use super::tensor::Tensor;
use super::train::loss_and_grad;
use super::{NnError, Result};

/// Coordinates sampled per parameter tensor (all of them when smaller).
pub const COORDS_PER_TENSOR: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub node: usize,
    pub bias: bool,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn loss_on_piece(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], piece: &Cache<f64>) -> Result<f64> {
    let (logits, _) = net.forward_on_piece(x, Mode::Train, piece)?;
    Ok(loss_and_grad(&logits, labels)?.0)
}

fn param(net: &mut Network<f64>, node: usize, bias: bool, i: usize) -> &mut f64 {
    let lp = &mut net.params_mut()[node];
    let t = if bias { lp.bias.as_mut() } else { lp.weight.as_mut() };
    &mut t.expect("gradient implies parameter").data_mut()[i]
}

/// Compares backprop gradients of the mean cross-entropy with central
/// differences, in train mode (batch statistics) and double precision.
/// The perturbed passes keep the ReLU gates and pool winners of the
/// unperturbed one, so a ±ε step that would cross a kink still measures the
/// derivative of the piece the gradient belongs to.
pub fn gradient_check_report(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-3..=1e-1).contains(&epsilon) {
        return Err(NnError::InvalidConfig(format!("epsilon {epsilon} outside [1e-3, 1e-1]")));
    }
    let (logits, cache) = net.forward_pure(x, Mode::Train)?;
    let (_, dlogits) = loss_and_grad(&logits, labels)?;
    let grads = net.backward(&cache, &dlogits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let mut tensors = Vec::new();
    for (node, g) in grads.iter().enumerate() {
        for (bias, analytic) in [(false, &g.weight), (true, &g.bias)] {
            let Some(analytic) = analytic else { continue };
            let len = analytic.len();
            let mut coords = rand::seq::index::sample(&mut rng, len, len.min(COORDS_PER_TENSOR)).into_vec();
            coords.sort_unstable();
            let mut worst = 0.0f64;
            for &i in &coords {
                let orig = *param(&mut probe, node, bias, i);
                *param(&mut probe, node, bias, i) = orig + epsilon;
                let up = loss_on_piece(&probe, x, labels, &cache)?;
                *param(&mut probe, node, bias, i) = orig - epsilon;
                let down = loss_on_piece(&probe, x, labels, &cache)?;
                *param(&mut probe, node, bias, i) = orig;
                let numeric = (up - down) / (2.0 * epsilon);
                worst = worst.max(rel_error(analytic[i], numeric));
            }
            tensors.push(TensorCheck { node, bias, checked: coords.len(), max_rel_error: worst });
        }
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, tensors })
}

/// Largest relative error between analytic and numeric gradients.
pub fn gradient_check(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], epsilon: f64, seed: u64) -> Result<f64> {
    Ok(gradient_check_report(net, x, labels, epsilon, seed)?.max_rel_error)
}
