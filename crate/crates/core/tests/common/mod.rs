//! Finite-difference gradient checking shared by the MLP tests and the
//! acceptance run.
#![allow(dead_code)]

use lfq::mlp::Gradients;
use lfq::{Loss, Mlp, TrainStep};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub const EPS: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

/// Targets within two packets of the current output, as in training. Keeps
/// the loss O(1) so central differences resolve small gradients.
pub fn near_batch(net: &Mlp, rng: &mut Pcg64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dim = net.sizes()[0];
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..3.0)).collect())
        .collect();
    let targets = inputs
        .iter()
        .map(|x| net.forward(x).unwrap() + rng.random_range(-2.0..2.0))
        .collect();
    (inputs, targets)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Signs of every hidden pre-activation and of every residual `y - t`.
pub fn kink_signature(net: &Mlp, inputs: &[Vec<f64>], targets: &[f64]) -> Vec<bool> {
    let mut signs = Vec::new();
    for (x, t) in inputs.iter().zip(targets) {
        let mut a = x.clone();
        let n = net.layers().len();
        for (li, l) in net.layers().iter().enumerate() {
            let mut z = l.bias.clone();
            for (i, &xi) in a.iter().enumerate() {
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += xi * l.weights[i * l.outputs + o];
                }
            }
            if li + 1 < n {
                signs.extend(z.iter().map(|&v| v > 0.0));
                a = z.iter().map(|&v| if v > 0.0 { v } else { 0.01 * v }).collect();
            } else {
                signs.push(z[0] > *t);
            }
        }
    }
    signs
}

pub fn set(net: &mut Mlp, layer: usize, bias: bool, idx: usize, value: f64) {
    let l = &mut net.layers_mut()[layer];
    if bias {
        l.bias[idx] = value;
    } else {
        l.weights[idx] = value;
    }
}

/// Central difference, or `None` when a kink lies inside `±EPS`.
pub fn numeric(net: &mut Mlp, step: &TrainStep, layer: usize, bias: bool, idx: usize) -> Option<f64> {
    let l = &net.layers()[layer];
    let orig = if bias { l.bias[idx] } else { l.weights[idx] };
    set(net, layer, bias, idx, orig + EPS);
    let plus = net.loss(&step.inputs, &step.targets, step.loss).unwrap();
    let sig_plus = kink_signature(net, &step.inputs, &step.targets);
    set(net, layer, bias, idx, orig - EPS);
    let minus = net.loss(&step.inputs, &step.targets, step.loss).unwrap();
    let sig_minus = kink_signature(net, &step.inputs, &step.targets);
    set(net, layer, bias, idx, orig);
    (sig_plus == sig_minus).then(|| (plus - minus) / (2.0 * EPS))
}

/// Largest relative error over the checked parameters, per layer, and the
/// number of parameters skipped because a kink lay inside the stencil.
pub fn check(net: &mut Mlp, loss: Loss, per_layer: Option<usize>, seed: u64) -> (Vec<f64>, usize, usize) {
    let mut rng = Pcg64::seed_from_u64(seed);
    let (inputs, targets) = near_batch(net, &mut rng, 20);
    let step = TrainStep::new(inputs, targets, loss);
    let (_, grads): (f64, Gradients) = net.gradient(&step).unwrap();
    let mut worst = Vec::new();
    let (mut checked, mut skipped) = (0, 0);
    for layer in 0..net.layers().len() {
        let (nw, nb) = (net.layers()[layer].weights.len(), net.layers()[layer].bias.len());
        let picks: Vec<(bool, usize)> = match per_layer {
            None => (0..nw).map(|i| (false, i)).chain((0..nb).map(|i| (true, i))).collect(),
            Some(k) => {
                let mut v: Vec<(bool, usize)> = (0..k).map(|_| (false, rng.random_range(0..nw))).collect();
                v.extend((0..k.min(nb)).map(|_| (true, rng.random_range(0..nb))));
                v
            }
        };
        let mut w = 0.0f64;
        for (bias, idx) in picks {
            let g = &grads.layers[layer];
            let a = if bias { g.bias[idx] } else { g.weights[idx] };
            match numeric(net, &step, layer, bias, idx) {
                Some(n) => {
                    checked += 1;
                    w = w.max(rel_err(a, n));
                }
                None => skipped += 1,
            }
        }
        worst.push(w);
    }
    (worst, checked, skipped)
}
