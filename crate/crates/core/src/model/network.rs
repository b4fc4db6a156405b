use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// First derivative. ReLU uses the subgradient 0 at exactly 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::None => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu | Activation::None => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer of a [`NetworkSpec`]. A convolution is valid (no padding),
/// stride 1, and its output is flattened channel-major before the next layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => {
                *activation
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Fully connected network over the flattened input. The output layer
    /// has no activation.
    pub fn mlp(
        input: InputShape,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input.len();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                activation,
            });
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: classes,
            activation: Activation::None,
        });
        Self {
            input,
            layers,
            classes,
        }
    }

    /// The 28x28 desk classifier: 784 -> 64 -> classes.
    pub fn mlp_784_64(classes: usize, activation: Activation) -> Self {
        Self::mlp(InputShape::new(1, 28, 28), &[64], classes, activation)
    }

    /// 1x8x8 input, 4-channel 3x3 convolution, then a dense classifier.
    pub fn conv_8x8(classes: usize, activation: Activation) -> Self {
        Self {
            input: InputShape::new(1, 8, 8),
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    activation,
                },
                LayerSpec::Dense {
                    inputs: 4 * 6 * 6,
                    outputs: classes,
                    activation: Activation::None,
                },
            ],
            classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LinearKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
}

/// A layer with its geometry resolved against the input shape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layer {
    pub kind: LinearKind,
    pub activation: Activation,
}

impl Layer {
    pub fn in_len(&self) -> usize {
        match self.kind {
            LinearKind::Dense { inputs, .. } => inputs,
            LinearKind::Conv {
                in_ch, in_h, in_w, ..
            } => in_ch * in_h * in_w,
        }
    }

    pub fn out_len(&self) -> usize {
        match self.kind {
            LinearKind::Dense { outputs, .. } => outputs,
            LinearKind::Conv {
                out_ch,
                out_h,
                out_w,
                ..
            } => out_ch * out_h * out_w,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LinearKind::Dense { inputs, outputs } => vec![outputs, inputs],
            LinearKind::Conv {
                in_ch, out_ch, k, ..
            } => vec![out_ch, in_ch, k, k],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LinearKind::Dense { outputs, .. } => outputs,
            LinearKind::Conv { out_ch, .. } => out_ch,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LinearKind::Dense { inputs, .. } => inputs,
            LinearKind::Conv { in_ch, k, .. } => in_ch * k * k,
        }
    }

    /// `out = bias + W a` (bias broadcast over positions for convolutions).
    pub fn affine(&self, w: &[f64], bias: &[f64], a: &[f64], out: &mut [f64]) {
        match self.kind {
            LinearKind::Dense { .. } => out.copy_from_slice(bias),
            LinearKind::Conv { out_h, out_w, .. } => {
                let positions = out_h * out_w;
                for (o, chunk) in out.chunks_mut(positions).enumerate() {
                    chunk.fill(bias[o]);
                }
            }
        }
        self.apply_weights(w, a, out);
    }

    /// `out += W a`.
    pub fn apply_weights(&self, w: &[f64], a: &[f64], out: &mut [f64]) {
        match self.kind {
            LinearKind::Dense { inputs, .. } => {
                for (o, row) in out.iter_mut().zip(w.chunks_exact(inputs)) {
                    *o += row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            LinearKind::Conv {
                in_ch,
                out_ch,
                k,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let fan = in_ch * k * k;
                for o in 0..out_ch {
                    let wo = &w[o * fan..(o + 1) * fan];
                    for i in 0..out_h {
                        for j in 0..out_w {
                            let mut acc = 0.0;
                            for c in 0..in_ch {
                                for u in 0..k {
                                    let arow = &a[c * in_h * in_w + (i + u) * in_w + j..][..k];
                                    let wrow = &wo[c * k * k + u * k..][..k];
                                    acc += arow.iter().zip(wrow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                            out[o * out_h * out_w + i * out_w + j] += acc;
                        }
                    }
                }
            }
        }
    }

    /// `abar += Wᵀ zbar`.
    pub fn apply_transpose(&self, w: &[f64], zbar: &[f64], abar: &mut [f64]) {
        match self.kind {
            LinearKind::Dense { inputs, .. } => {
                for (&zb, row) in zbar.iter().zip(w.chunks_exact(inputs)) {
                    if zb == 0.0 {
                        continue;
                    }
                    for (ab, wv) in abar.iter_mut().zip(row) {
                        *ab += zb * wv;
                    }
                }
            }
            LinearKind::Conv {
                in_ch,
                out_ch,
                k,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let fan = in_ch * k * k;
                for o in 0..out_ch {
                    let wo = &w[o * fan..(o + 1) * fan];
                    for i in 0..out_h {
                        for j in 0..out_w {
                            let zb = zbar[o * out_h * out_w + i * out_w + j];
                            if zb == 0.0 {
                                continue;
                            }
                            for c in 0..in_ch {
                                for u in 0..k {
                                    let arow =
                                        &mut abar[c * in_h * in_w + (i + u) * in_w + j..][..k];
                                    let wrow = &wo[c * k * k + u * k..][..k];
                                    for (ab, wv) in arow.iter_mut().zip(wrow) {
                                        *ab += zb * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `gw += zbar ⊗ a` summed over positions; `gb += zbar` likewise.
    pub fn accumulate_param_grad(&self, zbar: &[f64], a: &[f64], gw: &mut [f64], gb: &mut [f64]) {
        match self.kind {
            LinearKind::Dense { inputs, .. } => {
                for ((&zb, row), b) in zbar.iter().zip(gw.chunks_exact_mut(inputs)).zip(gb) {
                    *b += zb;
                    if zb == 0.0 {
                        continue;
                    }
                    for (g, av) in row.iter_mut().zip(a) {
                        *g += zb * av;
                    }
                }
            }
            LinearKind::Conv {
                in_ch,
                out_ch,
                k,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let fan = in_ch * k * k;
                for o in 0..out_ch {
                    let go = &mut gw[o * fan..(o + 1) * fan];
                    for i in 0..out_h {
                        for j in 0..out_w {
                            let zb = zbar[o * out_h * out_w + i * out_w + j];
                            gb[o] += zb;
                            if zb == 0.0 {
                                continue;
                            }
                            for c in 0..in_ch {
                                for u in 0..k {
                                    let arow = &a[c * in_h * in_w + (i + u) * in_w + j..][..k];
                                    let grow = &mut go[c * k * k + u * k..][..k];
                                    for (g, av) in grow.iter_mut().zip(arow) {
                                        *g += zb * av;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A validated [`NetworkSpec`] with per-layer geometry.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    pub(crate) layers: Vec<Layer>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let invalid = |msg: String| Err(ModelError::InvalidSpec(msg));
        if spec.layers.is_empty() {
            return invalid("network needs at least one layer".into());
        }
        if spec.input.is_empty() {
            return invalid("input shape has a zero dimension".into());
        }
        if spec.classes < 2 {
            return invalid(format!("class count must be >= 2, got {}", spec.classes));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        // (channels, height, width) of the current activation; a dense layer
        // produces (outputs, 1, 1).
        let (mut ch, mut h, mut w) = (spec.input.channels, spec.input.height, spec.input.width);
        for (idx, layer) in spec.layers.iter().enumerate() {
            let kind = match *layer {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    if inputs != ch * h * w {
                        return invalid(format!(
                            "layer {idx}: dense expects {inputs} inputs but receives {}",
                            ch * h * w
                        ));
                    }
                    if outputs == 0 {
                        return invalid(format!("layer {idx}: dense with zero outputs"));
                    }
                    (ch, h, w) = (outputs, 1, 1);
                    LinearKind::Dense { inputs, outputs }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    if in_channels != ch {
                        return invalid(format!(
                            "layer {idx}: conv expects {in_channels} channels but receives {ch}"
                        ));
                    }
                    if kernel == 0 || kernel > h || kernel > w || out_channels == 0 {
                        return invalid(format!(
                            "layer {idx}: kernel {kernel} does not fit {h}x{w} input"
                        ));
                    }
                    let kind = LinearKind::Conv {
                        in_ch: in_channels,
                        out_ch: out_channels,
                        k: kernel,
                        in_h: h,
                        in_w: w,
                        out_h: h - kernel + 1,
                        out_w: w - kernel + 1,
                    };
                    (ch, h, w) = (out_channels, h - kernel + 1, w - kernel + 1);
                    kind
                }
            };
            layers.push(Layer {
                kind,
                activation: layer.activation(),
            });
        }
        if ch * h * w != spec.classes {
            return invalid(format!(
                "final layer produces {} outputs, class count is {}",
                ch * h * w,
                spec.classes
            ));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Shapes of the parameter tensors in flatten order: weight then bias
    /// for each layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight_shape(), vec![l.bias_len()]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}
