//! Forward pass, softmax cross-entropy, parameter gradients and the
//! input-gradient of the cosine reconstruction objective.
//!
//! The reconstruction gradient uses reverse-over-forward differentiation:
//! with `v = ∂f/∂G` held fixed, `∇ₓ f = ∇ₓ <∇_θ L(x), v>`, and
//! `<∇_θ L(x), v>` is the forward-mode derivative of the loss along `v` in
//! parameter space. A tangent pass computes it, and a reverse sweep over
//! the primal and tangent values yields the input gradient exactly.

use super::network::Network;
use super::params::{GradientBuffer, ParamSet};
use super::{Example, ModelError, Result};
use crate::linalg::{dot, norm};

/// Symmetric linear projection applied to a flattened parameter gradient.
///
/// Used by the compression-aware attack variant, which compares the
/// projected candidate gradient with the observation.
pub trait GradientView {
    fn project(&self, g: &mut [f64]);
}

struct Trace {
    /// Activations a_0 = x, ..., a_L = logits.
    a: Vec<Vec<f64>>,
    /// Pre-activations z_0, ..., z_{L-1}.
    z: Vec<Vec<f64>>,
}

fn check_input(net: &Network, x: &[f64]) -> Result<()> {
    if x.len() != net.input_len() {
        return Err(ModelError::Shape {
            what: "input",
            expected: net.input_len(),
            got: x.len(),
        });
    }
    Ok(())
}

fn check_label(net: &Network, y: usize) -> Result<()> {
    if y >= net.classes() {
        return Err(ModelError::Label {
            label: y,
            classes: net.classes(),
        });
    }
    Ok(())
}

fn run_forward(net: &Network, params: &ParamSet, x: &[f64]) -> Trace {
    let mut a = Vec::with_capacity(net.layers.len() + 1);
    let mut z = Vec::with_capacity(net.layers.len());
    a.push(x.to_vec());
    for (l, layer) in net.layers.iter().enumerate() {
        let mut zl = vec![0.0; layer.out_len()];
        layer.affine(params.weight(l), params.bias(l), &a[l], &mut zl);
        let al = zl.iter().map(|&v| layer.activation.apply(v)).collect();
        z.push(zl);
        a.push(al);
    }
    Trace { a, z }
}

/// Logits for one input.
pub fn forward(net: &Network, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
    check_input(net, x)?;
    params.check_against(net)?;
    Ok(run_forward(net, params, x)
        .a
        .pop()
        .expect("at least one layer"))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Softmax cross-entropy `-log softmax(logits)[y]`.
///
/// # Panics
/// If `y` is not a valid index into `logits`.
pub fn loss(logits: &[f64], y: usize) -> f64 {
    assert!(
        y < logits.len(),
        "label {y} out of range for {} logits",
        logits.len()
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    lse - logits[y]
}

/// Offsets of each layer's weight and bias blocks in the flat gradient.
fn block_offsets(net: &Network) -> Vec<(usize, usize)> {
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut at = 0;
    for layer in &net.layers {
        let wlen = layer.fan_in() * layer.bias_len();
        offsets.push((at, at + wlen));
        at += wlen + layer.bias_len();
    }
    offsets
}

/// Accumulates `scale * ∇_θ L(x, y)` into the flat buffer `grad`.
fn backward_into(
    net: &Network,
    params: &ParamSet,
    trace: &Trace,
    y: usize,
    scale: f64,
    offsets: &[(usize, usize)],
    grad: &mut [f64],
) {
    let last = trace.a.len() - 1;
    let mut abar = softmax(&trace.a[last]);
    abar[y] -= 1.0;
    abar.iter_mut().for_each(|v| *v *= scale);
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let zbar: Vec<f64> = trace.z[l]
            .iter()
            .zip(&abar)
            .map(|(&z, &ab)| layer.activation.derivative(z) * ab)
            .collect();
        let (w_off, b_off) = offsets[l];
        let (head, tail) = grad.split_at_mut(b_off);
        layer.accumulate_param_grad(
            &zbar,
            &trace.a[l],
            &mut head[w_off..],
            &mut tail[..layer.bias_len()],
        );
        if l > 0 {
            let mut prev = vec![0.0; layer.in_len()];
            layer.apply_transpose(params.weight(l), &zbar, &mut prev);
            abar = prev;
        }
    }
}

/// Mean parameter gradient of the cross-entropy loss over `batch`.
pub fn param_gradient(
    net: &Network,
    params: &ParamSet,
    batch: &[Example],
) -> Result<GradientBuffer> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    params.check_against(net)?;
    let offsets = block_offsets(net);
    let mut flat = vec![0.0; params.dim()];
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        check_input(net, &ex.x)?;
        check_label(net, ex.y)?;
        let trace = run_forward(net, params, &ex.x);
        backward_into(net, params, &trace, ex.y, scale, &offsets, &mut flat);
    }
    GradientBuffer::unflatten(&flat, &net.param_shapes())
}

/// Value (and optionally input gradient) of the reconstruction objective.
#[derive(Debug, Clone)]
pub struct ReconEval {
    /// `1 - cos(view(∇_θ L(x, y)), target)`.
    pub loss: f64,
    pub cosine: f64,
    pub input_grad: Option<Vec<f64>>,
}

/// Evaluates `1 - cos(∇_θ L(x, y), target)` at a single example, optionally
/// through a projection `view`, and its exact gradient with respect to `x`
/// when `with_grad` is set.
pub fn recon_objective(
    net: &Network,
    params: &ParamSet,
    x: &[f64],
    y: usize,
    target: &[f64],
    view: Option<&dyn GradientView>,
    with_grad: bool,
) -> Result<ReconEval> {
    check_input(net, x)?;
    check_label(net, y)?;
    params.check_against(net)?;
    let d = params.dim();
    if target.len() != d {
        return Err(ModelError::Shape {
            what: "target gradient",
            expected: d,
            got: target.len(),
        });
    }
    let target_norm = norm(target);
    if target_norm == 0.0 {
        return Err(ModelError::ZeroTarget);
    }

    let offsets = block_offsets(net);
    let trace = run_forward(net, params, x);
    let mut g = vec![0.0; d];
    backward_into(net, params, &trace, y, 1.0, &offsets, &mut g);
    if let Some(view) = view {
        view.project(&mut g);
    }
    let g_norm = norm(&g);
    if g_norm == 0.0 || !g_norm.is_finite() {
        return Err(ModelError::UndefinedSimilarity);
    }
    let cosine = (dot(&g, target) / (g_norm * target_norm)).clamp(-1.0, 1.0);
    let loss = 1.0 - cosine;
    if !with_grad {
        return Ok(ReconEval {
            loss,
            cosine,
            input_grad: None,
        });
    }

    // v = ∂f/∂G for f = 1 - <G, t>/(|G||t|).
    let inv = 1.0 / (g_norm * target_norm);
    let c_over = cosine / (g_norm * g_norm);
    let mut v: Vec<f64> = g
        .iter()
        .zip(target)
        .map(|(&gi, &ti)| c_over * gi - inv * ti)
        .collect();
    if let Some(view) = view {
        view.project(&mut v);
    }

    Ok(ReconEval {
        loss,
        cosine,
        input_grad: Some(directional_input_gradient(
            net, params, &trace, y, &v, &offsets,
        )),
    })
}

/// `∇ₓ <∇_θ L(x, y), v>` for a fixed parameter-space direction `v`.
fn directional_input_gradient(
    net: &Network,
    params: &ParamSet,
    trace: &Trace,
    y: usize,
    v: &[f64],
    offsets: &[(usize, usize)],
) -> Vec<f64> {
    let layers = &net.layers;
    // Tangent pass: zdot_l = W_l adot_l + V_l a_l + v_b,l ; adot_{l+1} = σ'(z_l) zdot_l.
    let mut zdots: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut adot: Vec<f64> = vec![0.0; net.input_len()];
    for (l, layer) in layers.iter().enumerate() {
        let (w_off, b_off) = offsets[l];
        let vw = &v[w_off..b_off];
        let vb = &v[b_off..b_off + layer.bias_len()];
        let mut zdot = vec![0.0; layer.out_len()];
        layer.affine(vw, vb, &trace.a[l], &mut zdot);
        if l > 0 {
            layer.apply_weights(params.weight(l), &adot, &mut zdot);
        }
        adot = trace.z[l]
            .iter()
            .zip(&zdot)
            .map(|(&z, &zd)| layer.activation.derivative(z) * zd)
            .collect();
        zdots.push(zdot);
    }

    // h = <p - e_y, adot_L>, p = softmax(a_L).
    let logits = &trace.a[layers.len()];
    let p = softmax(logits);
    let p_dot = dot(&p, &adot);
    let mut abar: Vec<f64> = p
        .iter()
        .zip(&adot)
        .map(|(&pi, &ad)| pi * (ad - p_dot))
        .collect();
    let mut adotbar = p;
    adotbar[y] -= 1.0;

    for (l, layer) in layers.iter().enumerate().rev() {
        let act = layer.activation;
        let z = &trace.z[l];
        let zdot = &zdots[l];
        let mut zbar = Vec::with_capacity(z.len());
        let mut zdotbar = Vec::with_capacity(z.len());
        for i in 0..z.len() {
            let d1 = act.derivative(z[i]);
            zbar.push(d1 * abar[i] + act.second_derivative(z[i]) * zdot[i] * adotbar[i]);
            zdotbar.push(d1 * adotbar[i]);
        }
        let (w_off, b_off) = offsets[l];
        let w = params.weight(l);
        let vw = &v[w_off..b_off];
        let mut prev_abar = vec![0.0; layer.in_len()];
        layer.apply_transpose(w, &zbar, &mut prev_abar);
        layer.apply_transpose(vw, &zdotbar, &mut prev_abar);
        if l > 0 {
            let mut prev_adotbar = vec![0.0; layer.in_len()];
            layer.apply_transpose(w, &zdotbar, &mut prev_adotbar);
            adotbar = prev_adotbar;
        }
        abar = prev_abar;
    }
    abar
}

/// `1 - cos(∇_θ L(x, y), target)`.
pub fn recon_loss(
    net: &Network,
    params: &ParamSet,
    x: &[f64],
    y: usize,
    target: &[f64],
) -> Result<f64> {
    recon_objective(net, params, x, y, target, None, false).map(|r| r.loss)
}

/// Exact gradient of [`recon_loss`] with respect to `x`.
pub fn recon_loss_input_gradient(
    net: &Network,
    params: &ParamSet,
    x: &[f64],
    y: usize,
    target: &[f64],
) -> Result<Vec<f64>> {
    recon_objective(net, params, x, y, target, None, true)
        .map(|r| r.input_grad.expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, InputShape, LayerSpec, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.random_range(0.0..1.0)).collect()
    }

    /// Scalar-by-scalar forward for dense tanh networks.
    fn scalar_forward(spec: &NetworkSpec, p: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, layer) in spec.layers.iter().enumerate() {
            let LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } = *layer
            else {
                unreachable!()
            };
            let w = &p.tensors[2 * l].data;
            let b = &p.tensors[2 * l + 1].data;
            let mut next = vec![0.0; outputs];
            for o in 0..outputs {
                let mut s = b[o];
                for i in 0..inputs {
                    s += w[o * inputs + i] * a[i];
                }
                next[o] = activation.apply(s);
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_trivial_cases() {
        let spec = NetworkSpec::mlp(InputShape::new(1, 1, 2), &[], 2, Activation::Tanh);
        let net = Network::new(spec).unwrap();
        let zeros = ParamSet::zeros(&net);
        assert_eq!(forward(&net, &zeros, &[0.3, 0.9]).unwrap(), vec![0.0, 0.0]);

        let mut id = ParamSet::zeros(&net);
        id.tensors[0].data = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(forward(&net, &id, &[0.3, 0.9]).unwrap(), vec![0.3, 0.9]);
        assert!(forward(&net, &id, &[0.3]).is_err());
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let spec = NetworkSpec::mlp(InputShape::new(1, 3, 3), &[5], 4, Activation::Tanh);
        let net = Network::new(spec.clone()).unwrap();
        let mut r = rng(4);
        let p = ParamSet::init(&net, &mut r);
        let x = random_input(9, &mut r);
        let got = forward(&net, &p, &x).unwrap();
        for (a, b) in got.iter().zip(scalar_forward(&spec, &p, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_cases() {
        assert!((loss(&[0.7; 5], 2) - 5f64.ln()).abs() < 1e-14);
        assert!(loss(&[30.0, -30.0], 0) < 1e-12);
        let logits = [1.0f64, 2.0, 0.5];
        let direct = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp())).ln();
        assert!((loss(&logits, 1) - direct).abs() < 1e-14);
    }

    #[test]
    fn loss_is_permutation_equivariant() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
        for (new_label, &old_label) in perm.iter().enumerate() {
            assert!((loss(&logits, old_label) - loss(&permuted, new_label)).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_regression_gradient_closed_form() {
        let spec = NetworkSpec::mlp(InputShape::new(1, 1, 4), &[], 3, Activation::Tanh);
        let net = Network::new(spec).unwrap();
        let mut r = rng(8);
        let p = ParamSet::init(&net, &mut r);
        let x = random_input(4, &mut r);
        let g = param_gradient(&net, &p, &[Example { x: x.clone(), y: 1 }]).unwrap();
        let mut delta = softmax(&forward(&net, &p, &x).unwrap());
        delta[1] -= 1.0;
        for o in 0..3 {
            for i in 0..4 {
                assert!((g.tensors[0].data[o * 4 + i] - delta[o] * x[i]).abs() < 1e-14);
            }
            assert!((g.tensors[1].data[o] - delta[o]).abs() < 1e-14);
        }
    }

    #[test]
    fn dead_inputs_get_zero_gradient() {
        // Zero pixels contribute nothing to first-layer weight gradients.
        let spec = NetworkSpec::mlp(InputShape::new(1, 1, 3), &[2], 2, Activation::Tanh);
        let net = Network::new(spec).unwrap();
        let p = ParamSet::init(&net, &mut rng(1));
        let g = param_gradient(
            &net,
            &p,
            &[Example {
                x: vec![0.5, 0.0, 0.2],
                y: 0,
            }],
        )
        .unwrap();
        assert_eq!(g.tensors[0].data[1], 0.0);
        assert_eq!(g.tensors[0].data[4], 0.0);
    }

    #[test]
    fn param_gradient_errors() {
        let net = Network::new(NetworkSpec::conv_8x8(3, Activation::Tanh)).unwrap();
        let p = ParamSet::zeros(&net);
        assert!(matches!(
            param_gradient(&net, &p, &[]),
            Err(ModelError::EmptyBatch)
        ));
        let bad = Example {
            x: vec![0.0; 64],
            y: 3,
        };
        assert!(matches!(
            param_gradient(&net, &p, &[bad]),
            Err(ModelError::Label { .. })
        ));
    }

    #[test]
    fn recon_loss_zero_at_truth_and_two_when_antiparallel() {
        let net = Network::new(NetworkSpec::conv_8x8(4, Activation::Tanh)).unwrap();
        let mut r = rng(12);
        let p = ParamSet::init(&net, &mut r);
        let x = random_input(64, &mut r);
        let g = param_gradient(&net, &p, &[Example { x: x.clone(), y: 2 }])
            .unwrap()
            .flatten();
        assert!(recon_loss(&net, &p, &x, 2, &g).unwrap() < 1e-10);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((recon_loss(&net, &p, &x, 2, &neg).unwrap() - 2.0).abs() < 1e-10);
        let grad = recon_loss_input_gradient(&net, &p, &x, 2, &g).unwrap();
        assert!(norm(&grad) <= 1e-6);
        assert!(matches!(
            recon_loss(&net, &p, &x, 2, &vec![0.0; g.len()]),
            Err(ModelError::ZeroTarget)
        ));
    }

    #[test]
    fn zero_candidate_gradient_is_an_error() {
        let spec = NetworkSpec::mlp(InputShape::new(1, 1, 2), &[], 2, Activation::None);
        let net = Network::new(spec).unwrap();
        let mut p = ParamSet::zeros(&net);
        // Saturated correct prediction: gradient underflows to exactly zero.
        p.tensors[1].data = vec![800.0, -800.0];
        let err = recon_loss(&net, &p, &[0.0, 0.0], 0, &[1.0; 6]).unwrap_err();
        assert!(matches!(err, ModelError::UndefinedSimilarity));
    }
}
