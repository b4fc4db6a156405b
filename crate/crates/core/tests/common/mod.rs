#![allow(dead_code)]

use gradshield::model::{
    forward, loss, param_gradient, recon_loss, recon_loss_input_gradient, Activation, Example,
    InputShape, LayerSpec, Network, NetworkSpec, ParamSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Small random network (at most 200 parameters) with a labelled batch.
/// Every fourth configuration is convolutional.
pub fn fd_case(i: u64) -> (Network, ParamSet, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd00 + i);
    let act = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Sigmoid
    };
    let classes = rng.random_range(2..=4);
    let spec = if i % 4 == 3 {
        let out_channels = rng.random_range(1..=2);
        NetworkSpec {
            input: InputShape::new(1, 4, 4),
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels,
                    kernel: 3,
                    activation: act,
                },
                LayerSpec::Dense {
                    inputs: out_channels * 4,
                    outputs: classes,
                    activation: Activation::None,
                },
            ],
            classes,
        }
    } else {
        let side = rng.random_range(2..=3);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(2..=6))
            .collect();
        NetworkSpec::mlp(InputShape::new(1, side, side), &hidden, classes, act)
    };
    let net = Network::new(spec).unwrap();
    assert!(net.param_count() <= 200);
    let mut params = ParamSet::init(&net, &mut rng);
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = (0..rng.random_range(1..=3))
        .map(|_| Example {
            x: (0..net.input_len())
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
            y: rng.random_range(0..classes),
        })
        .collect();
    (net, params, batch)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn central<F: Fn(&[f64]) -> f64>(f: F, at: &[f64]) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            x[i] = at[i] + FD_STEP;
            let up = f(&x);
            x[i] = at[i] - FD_STEP;
            let down = f(&x);
            x[i] = at[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error of `param_gradient` against central differences of the
/// mean batch loss.
pub fn param_gradient_error(net: &Network, params: &ParamSet, batch: &[Example]) -> f64 {
    let shapes = net.param_shapes();
    let mean_loss = |theta: &[f64]| {
        let p = ParamSet::unflatten(theta, &shapes).unwrap();
        batch
            .iter()
            .map(|e| loss(&forward(net, &p, &e.x).unwrap(), e.y))
            .sum::<f64>()
            / batch.len() as f64
    };
    let analytic = param_gradient(net, params, batch).unwrap().flatten();
    rel_err(&analytic, &central(mean_loss, &params.flatten()))
}

/// Relative error of `recon_loss_input_gradient` against central
/// differences, with the target taken from a different input.
pub fn input_gradient_error(net: &Network, params: &ParamSet, batch: &[Example]) -> f64 {
    let truth = &batch[0];
    let target = param_gradient(net, params, std::slice::from_ref(truth))
        .unwrap()
        .flatten();
    let x: Vec<f64> = truth.x.iter().map(|v| 1.0 - v * 0.8).collect();
    let f = |x: &[f64]| recon_loss(net, params, x, truth.y, &target).unwrap();
    let analytic = recon_loss_input_gradient(net, params, &x, truth.y, &target).unwrap();
    rel_err(&analytic, &central(f, &x))
}
