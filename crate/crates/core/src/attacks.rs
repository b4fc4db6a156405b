//! Gradient inversion (cosine objective, Adam, restarts), the closed-form
//! inversion of a dense first layer, and threshold membership inference.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::{
    forward, loss, recon_objective, softmax, Example, GradientBuffer, GradientView, InputShape,
    ModelError, Network, NetworkSpec, ParamSet,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("observed gradient has zero norm")]
    ZeroTarget,
    #[error("label must be supplied when label_known is set")]
    LabelRequired,
    #[error("every restart ended with a non-finite loss")]
    AllRestartsFailed { traces: Vec<Vec<f64>> },
    #[error("linear inversion oracle inapplicable: {0}")]
    OracleInapplicable(String),
    #[error("membership inference needs nonempty member and non-member sets")]
    EmptyScores,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradInvConfig {
    pub iterations: usize,
    pub restarts: usize,
    pub step_size: f64,
    pub box_constraint: bool,
    pub tv_weight: f64,
    pub seed: u64,
    pub label_known: bool,
    /// Project candidate gradients through the observation's compression
    /// map before comparing.
    pub compression_aware: bool,
}

impl Default for GradInvConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            restarts: 4,
            step_size: 0.1,
            box_constraint: true,
            tv_weight: 0.0,
            seed: 0,
            label_known: true,
            compression_aware: false,
        }
    }
}

impl GradInvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: &str| {
            Err(AttackError::InvalidConfig {
                field,
                message: message.into(),
            })
        };
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size", "must be positive and finite");
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return bad("tv_weight", "must be non-negative and finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    /// Best candidate input found.
    pub x: Vec<f64>,
    /// Reconstruction loss `1 - cos` at `x`.
    pub loss: f64,
    pub label: usize,
    /// Index of the winning restart.
    pub restart: usize,
    /// Best loss reached by every restart (non-finite for failed ones).
    pub restart_losses: Vec<f64>,
    /// Per-iteration loss for every restart.
    pub traces: Vec<Vec<f64>>,
    /// Filled by the caller once ground truth is available.
    pub ssim: Option<f64>,
}

impl ReconResult {
    pub fn trace(&self) -> &[f64] {
        &self.traces[self.restart]
    }

    /// CSV with columns iteration, restart, loss.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "restart", "loss"])?;
        for (r, trace) in self.traces.iter().enumerate() {
            for (i, l) in trace.iter().enumerate() {
                out.write_record([i.to_string(), r.to_string(), l.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Label implied by the last layer's bias gradient: for a single example
/// it is `softmax - onehot`, negative only at the true class.
pub fn infer_label(net: &Network, target: &GradientBuffer) -> Result<usize> {
    let last = &target.tensors[2 * net.layer_count() - 1].data;
    last.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| AttackError::InvalidConfig {
            field: "label_known",
            message: "empty output layer".into(),
        })
}

/// Anisotropic total variation and its subgradient.
fn total_variation(x: &[f64], shape: InputShape, grad: Option<&mut [f64]>) -> f64 {
    let (h, w) = (shape.height, shape.width);
    let mut tv = 0.0;
    let mut g = grad;
    for c in 0..shape.channels {
        let base = c * h * w;
        for r in 0..h {
            for col in 0..w {
                let i = base + r * w + col;
                for j in [(col + 1 < w).then_some(i + 1), (r + 1 < h).then_some(i + w)]
                    .into_iter()
                    .flatten()
                {
                    let d = x[j] - x[i];
                    tv += d.abs();
                    if let Some(g) = g.as_deref_mut() {
                        let s = d.signum() * f64::from(d != 0.0);
                        g[j] += s;
                        g[i] -= s;
                    }
                }
            }
        }
    }
    tv
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let b1 = 1.0 - Self::BETA1.powi(self.t);
        let b2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / b1) / ((self.v[i] / b2).sqrt() + Self::EPS);
        }
    }
}

/// Gradient inversion against an observed gradient `target`.
///
/// Each restart starts from `N(0.5, 0.1)` pixels (clamped to [0, 1]) and
/// runs Adam on `1 - cos(∇_θ L(x, y), target) + tv_weight * TV(x)`. The
/// result is the lowest-loss iterate over all restarts.
pub fn grad_inversion(
    spec: &NetworkSpec,
    params: &ParamSet,
    target: &GradientBuffer,
    label: Option<usize>,
    cfg: &GradInvConfig,
) -> Result<ReconResult> {
    grad_inversion_with(spec, params, target, label, cfg, None, None)
}

/// [`grad_inversion`] with an optional observation map (used when
/// `cfg.compression_aware` is set) and an optional fixed starting point
/// shared by every restart.
pub fn grad_inversion_with(
    spec: &NetworkSpec,
    params: &ParamSet,
    target: &GradientBuffer,
    label: Option<usize>,
    cfg: &GradInvConfig,
    view: Option<&dyn GradientView>,
    init: Option<&[f64]>,
) -> Result<ReconResult> {
    cfg.validate()?;
    let net = Network::new(spec.clone())?;
    params.check_against(&net)?;
    if target.norm() == 0.0 {
        return Err(AttackError::ZeroTarget);
    }
    let y = match (label, cfg.label_known) {
        (Some(y), _) => y,
        (None, true) => return Err(AttackError::LabelRequired),
        (None, false) => infer_label(&net, target)?,
    };
    let flat_target = target.flatten();
    let view = if cfg.compression_aware { view } else { None };
    let n = net.input_len();
    let shape = spec.input;
    let objective = |x: &[f64], with_grad: bool| -> Result<(f64, f64, Option<Vec<f64>>)> {
        let eval = recon_objective(&net, params, x, y, &flat_target, view, with_grad)?;
        let mut total = eval.loss;
        let mut grad = eval.input_grad;
        if cfg.tv_weight > 0.0 {
            let mut tv_grad = vec![0.0; n];
            total += cfg.tv_weight * total_variation(x, shape, Some(&mut tv_grad));
            if let Some(g) = grad.as_mut() {
                g.iter_mut()
                    .zip(&tv_grad)
                    .for_each(|(a, b)| *a += cfg.tv_weight * b);
            }
        }
        Ok((eval.loss, total, grad))
    };

    let normal: Normal<f64> = Normal::new(0.5, 0.1).expect("valid normal");
    let mut traces = Vec::with_capacity(cfg.restarts);
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, f64, usize, Vec<f64>)> = None;
    for restart in 0..cfg.restarts {
        let mut x: Vec<f64> = match init {
            Some(x0) => {
                if x0.len() != n {
                    return Err(ModelError::Shape {
                        what: "initial input",
                        expected: n,
                        got: x0.len(),
                    }
                    .into());
                }
                x0.to_vec()
            }
            None => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1411, restart as u64]));
                (0..n)
                    .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0))
                    .collect()
            }
        };
        let mut adam = Adam::new(n);
        let mut trace = Vec::with_capacity(cfg.iterations + 1);
        // (objective, recon loss, iterate)
        let mut local: Option<(f64, f64, Vec<f64>)> = None;
        for it in 0..=cfg.iterations {
            let last = it == cfg.iterations;
            let (recon, total, grad) = match objective(&x, !last) {
                Ok(v) => v,
                Err(AttackError::Model(ModelError::UndefinedSimilarity)) => {
                    (f64::NAN, f64::NAN, None)
                }
                Err(e) => return Err(e),
            };
            trace.push(recon);
            if total.is_finite() && local.as_ref().is_none_or(|(b, _, _)| total < *b) {
                local = Some((total, recon, x.clone()));
            }
            let Some(grad) = grad else { break };
            if grad.iter().any(|g| !g.is_finite()) {
                break;
            }
            adam.step(&mut x, &grad, cfg.step_size);
            if cfg.box_constraint {
                x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
        }
        log::debug!(
            "restart {restart}: best loss {:?}",
            local.as_ref().map(|l| l.1)
        );
        restart_losses.push(local.as_ref().map_or(f64::NAN, |l| l.0));
        if let Some((total, recon, xb)) = local {
            if best.as_ref().is_none_or(|(b, _, _, _)| total < *b) {
                best = Some((total, recon, restart, xb));
            }
        }
        traces.push(trace);
    }
    let Some((_, loss, restart, x)) = best else {
        return Err(AttackError::AllRestartsFailed { traces });
    };
    Ok(ReconResult {
        x,
        loss,
        label: y,
        restart,
        restart_losses,
        traces,
        ssim: None,
    })
}

/// Recovers the input of a dense first layer from its weight and bias
/// gradients at batch size 1, where `∂L/∂W_i = (∂L/∂b_i) xᵀ`: returns row
/// `i` of `gw` over `gb_i` for the largest `|gb_i|`.
pub fn linear_inversion_oracle(gw: &Matrix, gb: &[f64]) -> Result<Vec<f64>> {
    if gw.rows() != gb.len() {
        return Err(AttackError::OracleInapplicable(format!(
            "{} weight rows but {} bias entries",
            gw.rows(),
            gb.len()
        )));
    }
    let (i, &b) = gb
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .ok_or_else(|| AttackError::OracleInapplicable("empty bias gradient".into()))?;
    if b.abs() <= 1e-9 {
        return Err(AttackError::OracleInapplicable(
            "every bias gradient entry is ~0".into(),
        ));
    }
    Ok(gw.row(i).iter().map(|v| v / b).collect())
}

/// [`linear_inversion_oracle`] applied to the first two tensors of a
/// gradient of a network whose first layer is dense.
pub fn linear_inversion_from_gradient(g: &GradientBuffer) -> Result<Vec<f64>> {
    let (w, b) = match (g.tensors.first(), g.tensors.get(1)) {
        (Some(w), Some(b)) if w.shape.len() == 2 => (w, b),
        _ => {
            return Err(AttackError::OracleInapplicable(
                "first layer is not dense".into(),
            ))
        }
    };
    let gw = Matrix::new(w.shape[0], w.shape[1], w.data.clone())
        .map_err(|e| AttackError::OracleInapplicable(e.to_string()))?;
    linear_inversion_oracle(&gw, &b.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaKind {
    Prediction,
    Loss,
    CrossEntropy,
}

impl MiaKind {
    pub const ALL: [MiaKind; 3] = [MiaKind::Prediction, MiaKind::Loss, MiaKind::CrossEntropy];

    pub fn name(self) -> &'static str {
        match self {
            MiaKind::Prediction => "prediction",
            MiaKind::Loss => "loss",
            MiaKind::CrossEntropy => "cross_entropy",
        }
    }
}

/// Per-example membership scores; higher means "member".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaScores {
    pub prediction: Vec<f64>,
    pub loss: Vec<f64>,
    pub cross_entropy: Vec<f64>,
}

impl MiaScores {
    pub fn get(&self, kind: MiaKind) -> &[f64] {
        match kind {
            MiaKind::Prediction => &self.prediction,
            MiaKind::Loss => &self.loss,
            MiaKind::CrossEntropy => &self.cross_entropy,
        }
    }
}

/// Max softmax probability, negated loss, and negated cross-entropy of the
/// predicted distribution against the one-hot label. The last is computed
/// from the probabilities rather than the logits.
pub fn mia_scores(
    spec: &NetworkSpec,
    params: &ParamSet,
    examples: &[Example],
) -> Result<MiaScores> {
    let net = Network::new(spec.clone())?;
    params.check_against(&net)?;
    let mut out = MiaScores {
        prediction: Vec::with_capacity(examples.len()),
        loss: Vec::with_capacity(examples.len()),
        cross_entropy: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        if ex.y >= net.classes() {
            return Err(ModelError::Label {
                label: ex.y,
                classes: net.classes(),
            }
            .into());
        }
        let logits = forward(&net, params, &ex.x)?;
        let p = softmax(&logits);
        out.prediction
            .push(p.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        out.loss.push(-loss(&logits, ex.y));
        out.cross_entropy.push(p[ex.y].max(f64::MIN_POSITIVE).ln());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub kind: MiaKind,
    pub balanced_accuracy: f64,
    pub auc: f64,
    /// Scores strictly above the threshold are called members.
    pub threshold: f64,
    pub member_mean: f64,
    pub nonmember_mean: f64,
}

/// Best balanced accuracy over thresholds at midpoints between adjacent
/// distinct scores (ties go to the lower threshold), plus rank-statistic AUC.
pub fn mia_attack(kind: MiaKind, members: &[f64], nonmembers: &[f64]) -> Result<MiaResult> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(AttackError::EmptyScores);
    }
    let (m, n) = (members.len() as f64, nonmembers.len() as f64);
    let mut pooled: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep upward: after consuming every score <= t, those members are
    // rejected and those non-members correctly rejected.
    let mut best_ba = 0.5;
    let mut best_t = pooled[0].0;
    let mut found = false;
    let mut members_below = 0.0;
    let mut nonmembers_below = 0.0;
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let score = pooled[i].0;
        let mut j = i;
        let (mut tie_members, mut tie_nonmembers) = (0.0, 0.0);
        while j < pooled.len() && pooled[j].0 == score {
            if pooled[j].1 {
                tie_members += 1.0;
            } else {
                tie_nonmembers += 1.0;
            }
            j += 1;
        }
        // Average 1-based rank of the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += tie_members * avg_rank;
        members_below += tie_members;
        nonmembers_below += tie_nonmembers;
        if j < pooled.len() {
            let t = 0.5 * (score + pooled[j].0);
            let tpr = (m - members_below) / m;
            let tnr = nonmembers_below / n;
            let ba = 0.5 * (tpr + tnr);
            if !found || ba > best_ba {
                best_ba = ba;
                best_t = t;
                found = true;
            }
        }
        i = j;
    }
    let auc = (rank_sum - m * (m + 1.0) / 2.0) / (m * n);
    Ok(MiaResult {
        kind,
        balanced_accuracy: best_ba,
        auc,
        threshold: best_t,
        member_mean: members.iter().sum::<f64>() / m,
        nonmember_mean: nonmembers.iter().sum::<f64>() / n,
    })
}

/// All three attacks for one model.
pub fn mia_all(
    spec: &NetworkSpec,
    params: &ParamSet,
    members: &[Example],
    nonmembers: &[Example],
) -> Result<Vec<MiaResult>> {
    let sm = mia_scores(spec, params, members)?;
    let sn = mia_scores(spec, params, nonmembers)?;
    MiaKind::ALL
        .iter()
        .map(|&k| mia_attack(k, sm.get(k), sn.get(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_gradient, recon_loss, Activation};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_net() -> NetworkSpec {
        NetworkSpec::mlp(InputShape::new(1, 3, 3), &[6], 3, Activation::Tanh)
    }

    fn brute_auc(m: &[f64], n: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in m {
            for b in n {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (m.len() * n.len()) as f64
    }

    #[test]
    fn mia_separable_and_indistinguishable() {
        let r = mia_attack(MiaKind::Loss, &[1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((r.balanced_accuracy, r.auc), (1.0, 1.0));
        assert_eq!(r.threshold, 0.5);
        let r = mia_attack(MiaKind::Loss, &[0.3, 0.6], &[0.6, 0.3]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert!((r.balanced_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mia_auc_counts_concordant_pairs() {
        let m = [0.9, 0.8, 0.4];
        let n = [0.7, 0.3, 0.2];
        let r = mia_attack(MiaKind::Prediction, &m, &n).unwrap();
        assert!((r.auc - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.auc - brute_auc(&m, &n)).abs() < 1e-12);
        assert!(mia_attack(MiaKind::Loss, &[], &[1.0]).is_err());
    }

    #[test]
    fn mia_threshold_ties_pick_lower() {
        // Thresholds 1.5 and 3.5 both reach 0.75.
        let r = mia_attack(MiaKind::Loss, &[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(r.balanced_accuracy, 0.75);
        assert_eq!(r.threshold, 1.5);
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force_and_is_monotone_invariant(
            m in prop::collection::vec(0u8..20, 1..50),
            n in prop::collection::vec(0u8..20, 1..50),
        ) {
            let m: Vec<f64> = m.into_iter().map(f64::from).collect();
            let n: Vec<f64> = n.into_iter().map(f64::from).collect();
            let r = mia_attack(MiaKind::Loss, &m, &n).unwrap();
            prop_assert!((r.auc - brute_auc(&m, &n)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.balanced_accuracy));
            let f = |v: &f64| (v * 0.3).exp() - 7.0;
            let mt: Vec<f64> = m.iter().map(f).collect();
            let nt: Vec<f64> = n.iter().map(f).collect();
            let rt = mia_attack(MiaKind::Loss, &mt, &nt).unwrap();
            prop_assert!((r.auc - rt.auc).abs() < 1e-12);
            prop_assert!((r.balanced_accuracy - rt.balanced_accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn mia_score_saturation_and_symmetry() {
        let spec = NetworkSpec::mlp(InputShape::new(1, 1, 2), &[], 4, Activation::None);
        let net = Network::new(spec.clone()).unwrap();
        let mut params = ParamSet::zeros(&net);
        let ex = Example {
            x: vec![0.3, 0.7],
            y: 2,
        };
        let s = mia_scores(&spec, &params, std::slice::from_ref(&ex)).unwrap();
        assert!((s.prediction[0] - 0.25).abs() < 1e-15);
        params.tensors[1].data[2] = 60.0;
        let s = mia_scores(&spec, &params, &[ex]).unwrap();
        assert!((s.prediction[0] - 1.0).abs() < 1e-15);
        assert!(s.loss[0] <= 0.0 && s.loss[0] > -1e-20);
        assert!((s.loss[0] - s.cross_entropy[0]).abs() < 1e-12);
    }

    #[test]
    fn oracle_recovers_dense_input() {
        let spec = tiny_net();
        let net = Network::new(spec).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let params = ParamSet::init(&net, &mut r);
        let x: Vec<f64> = (0..9).map(|_| r.random_range(0.0..1.0)).collect();
        let g = param_gradient(&net, &params, &[Example { x: x.clone(), y: 1 }]).unwrap();
        let rec = linear_inversion_from_gradient(&g).unwrap();
        for (a, b) in rec.iter().zip(&x) {
            assert!((a - b).abs() < 1e-8);
        }
        let zero = Matrix::zeros(2, 3);
        assert!(matches!(
            linear_inversion_oracle(&zero, &[0.0, 0.0]),
            Err(AttackError::OracleInapplicable(_))
        ));
    }

    #[test]
    fn inversion_with_zero_iterations_returns_init() {
        let spec = tiny_net();
        let net = Network::new(spec.clone()).unwrap();
        let params = ParamSet::init(&net, &mut ChaCha8Rng::seed_from_u64(5));
        let x0 = vec![0.5; 9];
        let g = param_gradient(
            &net,
            &params,
            &[Example {
                x: x0.clone(),
                y: 0,
            }],
        )
        .unwrap();
        let cfg = GradInvConfig {
            iterations: 0,
            restarts: 1,
            ..Default::default()
        };
        let res = grad_inversion_with(&spec, &params, &g, Some(0), &cfg, None, Some(&x0)).unwrap();
        assert_eq!(res.x, x0);
        let expected = recon_loss(&net, &params, &x0, 0, &g.flatten()).unwrap();
        assert_eq!(res.loss, expected);
        assert!(res.loss < 1e-12);
    }

    #[test]
    fn inversion_reaches_uncompressed_floor() {
        let spec = tiny_net();
        let net = Network::new(spec.clone()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let params = ParamSet::init(&net, &mut r);
        let x: Vec<f64> = (0..9).map(|_| r.random_range(0.1..0.9)).collect();
        let g = param_gradient(&net, &params, &[Example { x: x.clone(), y: 2 }]).unwrap();
        let cfg = GradInvConfig {
            iterations: 400,
            restarts: 2,
            seed: 1,
            ..Default::default()
        };
        let res = grad_inversion(&spec, &params, &g, Some(2), &cfg).unwrap();
        assert!(res.loss <= 1e-3, "loss {}", res.loss);
        for l in &res.restart_losses {
            assert!(res.loss <= *l + 1e-15);
        }
        assert!(res.x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(res.traces.len(), 2);
    }

    #[test]
    fn label_handling() {
        let spec = tiny_net();
        let net = Network::new(spec.clone()).unwrap();
        let params = ParamSet::init(&net, &mut ChaCha8Rng::seed_from_u64(7));
        let g = param_gradient(
            &net,
            &params,
            &[Example {
                x: vec![0.2; 9],
                y: 1,
            }],
        )
        .unwrap();
        assert_eq!(infer_label(&net, &g).unwrap(), 1);
        let cfg = GradInvConfig {
            iterations: 1,
            restarts: 1,
            ..Default::default()
        };
        assert!(matches!(
            grad_inversion(&spec, &params, &g, None, &cfg),
            Err(AttackError::LabelRequired)
        ));
        let unknown = GradInvConfig {
            label_known: false,
            ..cfg
        };
        assert_eq!(
            grad_inversion(&spec, &params, &g, None, &unknown)
                .unwrap()
                .label,
            1
        );
        let zero = GradientBuffer::zeros(&g.shapes());
        assert!(matches!(
            grad_inversion(&spec, &params, &zero, Some(1), &unknown),
            Err(AttackError::ZeroTarget)
        ));
    }

    #[test]
    fn total_variation_gradient_matches_differences() {
        let shape = InputShape::new(1, 3, 3);
        let x = [0.1, 0.5, 0.2, 0.9, 0.3, 0.4, 0.0, 0.8, 0.6];
        let mut g = vec![0.0; 9];
        let tv = total_variation(&x, shape, Some(&mut g));
        let h = 1e-7;
        for i in 0..9 {
            let mut xp = x;
            xp[i] += h;
            let fd = (total_variation(&xp, shape, None) - tv) / h;
            assert!((fd - g[i]).abs() < 1e-5, "pixel {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let res = ReconResult {
            x: vec![],
            loss: 0.0,
            label: 0,
            restart: 0,
            restart_losses: vec![0.0, 0.1],
            traces: vec![vec![0.5, 0.2], vec![0.4]],
            ssim: None,
        };
        let mut buf = Vec::new();
        res.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("iteration,restart,loss\n0,0,0.5\n"));
    }
}
