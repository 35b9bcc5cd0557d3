//! Central finite-difference check of the analytic backward pass.

use super::{loss_and_grad, Architecture, Network};
use crate::rng::SplitMix64;

const FD_EPS: f64 = 1e-3;

fn param_mut(net: &mut Network<f64>, layer: usize, which: usize, j: usize) -> &mut f64 {
    let p = &mut net.params_mut()[layer];
    if which == 0 {
        &mut p.weight.data[j]
    } else {
        &mut p.bias.data[j]
    }
}

/// Max over all parameters of |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
pub fn grad_check_case(net: &Network<f64>, input: &[f64], label: usize) -> f64 {
    let (logits, cache) = net.forward(input).expect("input matches architecture");
    let (_, dlogits) = loss_and_grad(&logits, label);
    let analytic = net.backward(&cache, &dlogits);

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (li, g) in analytic.iter().enumerate() {
        for which in 0..2 {
            let grads = if which == 0 { &g.weight.data } else { &g.bias.data };
            for (j, &a) in grads.iter().enumerate() {
                let orig = *param_mut(&mut probe, li, which, j);
                *param_mut(&mut probe, li, which, j) = orig + FD_EPS;
                let lp = probe.loss(input, label).expect("shape checked");
                *param_mut(&mut probe, li, which, j) = orig - FD_EPS;
                let lm = probe.loss(input, label).expect("shape checked");
                *param_mut(&mut probe, li, which, j) = orig;
                let numeric = (lp - lm) / (2.0 * FD_EPS);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// Runs the check on the reduced 8×8×1 network with a seeded random input
/// and label.
pub fn grad_check(seed: u64) -> f64 {
    let net = Network::<f64>::init(Architecture::grad_check(), seed).expect("reduced arch is valid");
    let mut rng = SplitMix64::new(seed ^ 0x5E_ED0F_C4EC);
    let input: Vec<f64> = (0..net.input_shape().len()).map(|_| rng.next_f64()).collect();
    let label = rng.below(3);
    grad_check_case(&net, &input, label)
}
