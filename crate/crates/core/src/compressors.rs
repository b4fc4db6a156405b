//! Gradient compressors with error feedback: PowerSGD (rank-r power
//! iteration with warm-started right factors), Top-K sparsification, and an
//! uncompressed passthrough.
//!
//! Every compressor keeps the conservation law
//! `decompress(c) + e_new = grad + e_old`, where `e` is the per-worker error
//! memory held in [`CompressorState`].

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, matmul, matmul_a_bt, matmul_at_b, LinalgError, Matrix, SparseVector};
use crate::model::{GradientBuffer, GradientView, ModelError, Tensor};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid compressor: {0}")]
    InvalidKind(String),
    #[error("gradient shapes {got:?} do not match compressor state {expected:?}")]
    ShapeMismatch {
        expected: Vec<Vec<usize>>,
        got: Vec<Vec<usize>>,
    },
    #[error("all-reduce needs at least one worker with matching state")]
    NoWorkers,
    #[error("wire format error at byte {offset}: {message}")]
    Wire { offset: usize, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CompressError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorKind {
    Identity,
    PowerSgd {
        rank: usize,
        power_iterations: usize,
    },
    TopK {
        ratio: f64,
    },
}

impl CompressorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorKind::Identity => Ok(()),
            CompressorKind::PowerSgd {
                rank,
                power_iterations,
            } => {
                if rank == 0 {
                    Err(CompressError::InvalidKind(
                        "PowerSGD rank must be >= 1".into(),
                    ))
                } else if power_iterations == 0 {
                    Err(CompressError::InvalidKind(
                        "PowerSGD needs at least one power iteration".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            CompressorKind::TopK { ratio } => {
                if ratio > 0.0 && ratio <= 1.0 {
                    Ok(())
                } else {
                    Err(CompressError::InvalidKind(format!(
                        "Top-K ratio must be in (0, 1], got {ratio}"
                    )))
                }
            }
        }
    }

    pub fn tag(&self) -> KindTag {
        match self {
            CompressorKind::Identity => KindTag::Identity,
            CompressorKind::PowerSgd { .. } => KindTag::PowerSgd,
            CompressorKind::TopK { .. } => KindTag::TopK,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CompressorKind::Identity)
    }
}

/// Wire tag for the compressor that produced a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KindTag {
    Identity = 0,
    PowerSgd = 1,
    TopK = 2,
}

impl KindTag {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(KindTag::Identity),
            1 => Some(KindTag::PowerSgd),
            2 => Some(KindTag::TopK),
            _ => None,
        }
    }
}

/// Whether Top-K selects over the whole flattened gradient or per tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKScope {
    #[default]
    Global,
    PerLayer,
}

/// `(n, m)` view used by PowerSGD: first dimension by the product of the
/// rest. Tensors with a unit side (biases) are sent dense.
pub fn matrix_view(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let n = shape[0];
    let m: usize = shape[1..].iter().product();
    (n.min(m) > 1).then_some((n, m))
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `max(1, round(ratio * n))`, capped at `n`.
pub fn top_k_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Transmitted element count over gradient dimension for `kind`, with
/// global Top-K selection.
pub fn compression_ratio(kind: &CompressorKind, shapes: &[Vec<usize>]) -> f64 {
    Compressor::new(*kind).ratio(shapes)
}

/// Top-K ratio that transmits as many elements as PowerSGD at `rank`,
/// clamped to 1.
pub fn rank_equivalent_ratio(shapes: &[Vec<usize>], rank: usize) -> f64 {
    compression_ratio(
        &CompressorKind::PowerSgd {
            rank,
            power_iterations: 1,
        },
        shapes,
    )
    .min(1.0)
}

/// Per-tensor PowerSGD rank after clamping to `min(n, m)`; `None` for
/// tensors sent dense.
pub fn effective_ranks(rank: usize, shapes: &[Vec<usize>]) -> Vec<Option<usize>> {
    shapes
        .iter()
        .map(|s| matrix_view(s).map(|(n, m)| rank.min(n).min(m)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compressor {
    pub kind: CompressorKind,
    #[serde(default)]
    pub scope: TopKScope,
}

impl Compressor {
    pub fn new(kind: CompressorKind) -> Self {
        Self {
            kind,
            scope: TopKScope::Global,
        }
    }

    pub fn with_scope(mut self, scope: TopKScope) -> Self {
        self.scope = scope;
        self
    }

    /// Transmitted elements / d for gradients with these shapes.
    pub fn ratio(&self, shapes: &[Vec<usize>]) -> f64 {
        let d: usize = shapes.iter().map(|s| numel(s)).sum();
        if d == 0 {
            return 1.0;
        }
        let sent: usize = match self.kind {
            CompressorKind::Identity => d,
            CompressorKind::PowerSgd { rank, .. } => shapes
                .iter()
                .map(|s| match matrix_view(s) {
                    Some((n, m)) => rank.min(n).min(m) * (n + m),
                    None => numel(s),
                })
                .sum(),
            CompressorKind::TopK { ratio } => match self.scope {
                TopKScope::Global => top_k_count(ratio, d),
                TopKScope::PerLayer => shapes.iter().map(|s| top_k_count(ratio, numel(s))).sum(),
            },
        };
        sent as f64 / d as f64
    }

    /// Compresses `grad + e`, updates the error memory and warm factors in
    /// `state`, and returns the payload.
    pub fn compress(
        &self,
        state: &mut CompressorState,
        grad: &GradientBuffer,
    ) -> Result<CompressedGradient> {
        self.kind.validate()?;
        state.check(grad)?;
        let mut meta = CompressionMeta::default();
        let accumulated = state.accumulate(grad);
        let layers = match self.kind {
            CompressorKind::Identity => accumulated
                .tensors
                .into_iter()
                .map(|t| LayerPayload {
                    shape: t.shape,
                    payload: Payload::Dense(t.data),
                })
                .collect(),
            CompressorKind::PowerSgd {
                rank,
                power_iterations,
            } => {
                let mut layers = Vec::with_capacity(accumulated.tensors.len());
                for (idx, a) in accumulated.tensors.into_iter().enumerate() {
                    let Some((n, m)) = matrix_view(&a.shape) else {
                        meta.effective_ranks.push(None);
                        layers.push(LayerPayload {
                            shape: a.shape,
                            payload: Payload::Dense(a.data),
                        });
                        continue;
                    };
                    let r = note_rank(&mut meta, idx, rank, n, m);
                    let am = Matrix::new(n, m, a.data)?;
                    let mut q = state.warm_q[idx]
                        .clone()
                        .expect("warm factor for matrix tensor");
                    let mut p_hat = Matrix::zeros(n, r);
                    for _ in 0..power_iterations {
                        let p = matmul(&am, &q)?;
                        let ortho = linalg::orthonormalize(&p, &mut state.rng)?;
                        meta.reseeded_columns += ortho.reseeded.len();
                        p_hat = ortho.q;
                        q = matmul_at_b(&am, &p_hat)?;
                    }
                    let approx = matmul_a_bt(&p_hat, &q)?;
                    state.error.tensors[idx].data = am.sub(&approx)?.into_data();
                    state.warm_q[idx] = Some(q.clone());
                    layers.push(LayerPayload {
                        shape: a.shape,
                        payload: Payload::LowRank { p: p_hat, q },
                    });
                }
                layers
            }
            CompressorKind::TopK { ratio } => self.top_k(state, accumulated, ratio)?,
        };
        state.step += 1;
        Ok(CompressedGradient {
            kind: self.kind.tag(),
            layers,
            meta,
        })
    }

    fn top_k(
        &self,
        state: &mut CompressorState,
        accumulated: GradientBuffer,
        ratio: f64,
    ) -> Result<Vec<LayerPayload>> {
        let shapes = accumulated.shapes();
        let sparse_per_tensor: Vec<SparseVector> = match self.scope {
            TopKScope::Global => {
                let flat = accumulated.flatten();
                let kept = linalg::top_k_select(&flat, top_k_count(ratio, flat.len()))?;
                split_sparse(&kept, &shapes)?
            }
            TopKScope::PerLayer => accumulated
                .tensors
                .iter()
                .map(|t| linalg::top_k_select(&t.data, top_k_count(ratio, t.numel())))
                .collect::<std::result::Result<_, _>>()?,
        };
        let mut layers = Vec::with_capacity(shapes.len());
        for ((a, sparse), e) in accumulated
            .tensors
            .into_iter()
            .zip(sparse_per_tensor)
            .zip(state.error.tensors.iter_mut())
        {
            e.data = a.data;
            for &i in sparse.indices() {
                e.data[i] = 0.0;
            }
            layers.push(LayerPayload {
                shape: a.shape,
                payload: Payload::Sparse(sparse),
            });
        }
        Ok(layers)
    }
}

fn note_rank(meta: &mut CompressionMeta, idx: usize, rank: usize, n: usize, m: usize) -> usize {
    let r = rank.min(n).min(m);
    if r < rank {
        meta.warnings.push(format!(
            "tensor {idx} ({n}x{m}): rank {rank} clamped to {r}"
        ));
    }
    meta.effective_ranks.push(Some(r));
    r
}

fn split_sparse(kept: &SparseVector, shapes: &[Vec<usize>]) -> Result<Vec<SparseVector>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut start = 0;
    let mut cursor = 0;
    for shape in shapes {
        let n = numel(shape);
        let mut idx = Vec::new();
        let mut vals = Vec::new();
        while cursor < kept.nnz() && kept.indices()[cursor] < start + n {
            idx.push(kept.indices()[cursor] - start);
            vals.push(kept.values()[cursor]);
            cursor += 1;
        }
        out.push(SparseVector::new(n, idx, vals)?);
        start += n;
    }
    Ok(out)
}

/// PowerSGD with factor-space all-reduce across workers.
///
/// All workers share the left factor: `P = mean_w (A_w Q)` is orthonormalized
/// once, each worker sends `Q_w = A_wᵀ P̂`, and worker `w`'s contribution to
/// the aggregate is `P̂ Q_wᵀ`. The warm-start factor becomes `mean_w Q_w`.
/// Non-PowerSGD kinds fall back to independent per-worker compression.
pub fn compress_allreduce(
    compressor: &Compressor,
    states: &mut [CompressorState],
    grads: &[GradientBuffer],
) -> Result<Vec<CompressedGradient>> {
    compressor.kind.validate()?;
    if states.is_empty() || states.len() != grads.len() {
        return Err(CompressError::NoWorkers);
    }
    let CompressorKind::PowerSgd {
        rank,
        power_iterations,
    } = compressor.kind
    else {
        return states
            .iter_mut()
            .zip(grads)
            .map(|(s, g)| compressor.compress(s, g))
            .collect();
    };
    for (s, g) in states.iter().zip(grads) {
        s.check(g)?;
    }
    let workers = states.len();
    let scale = 1.0 / workers as f64;
    let accumulated: Vec<GradientBuffer> = states
        .iter()
        .zip(grads)
        .map(|(s, g)| s.accumulate(g))
        .collect();
    let shapes = grads[0].shapes();
    let mut metas = vec![CompressionMeta::default(); workers];
    let mut layers: Vec<Vec<LayerPayload>> = vec![Vec::with_capacity(shapes.len()); workers];

    for (idx, shape) in shapes.iter().enumerate() {
        let Some((n, m)) = matrix_view(shape) else {
            for w in 0..workers {
                metas[w].effective_ranks.push(None);
                layers[w].push(LayerPayload {
                    shape: shape.clone(),
                    payload: Payload::Dense(accumulated[w].tensors[idx].data.clone()),
                });
            }
            continue;
        };
        let mut r = 0;
        for meta in metas.iter_mut() {
            r = note_rank(meta, idx, rank, n, m);
        }
        let mats: Vec<Matrix> = accumulated
            .iter()
            .map(|a| Matrix::new(n, m, a.tensors[idx].data.clone()))
            .collect::<std::result::Result<_, _>>()?;
        let mut q_shared = states[0].warm_q[idx]
            .clone()
            .expect("warm factor for matrix tensor");
        let mut p_hat = Matrix::zeros(n, r);
        let mut q_workers: Vec<Matrix> = Vec::new();
        for _ in 0..power_iterations {
            let mut p_sum = Matrix::zeros(n, r);
            for am in &mats {
                let p = matmul(am, &q_shared)?;
                for (acc, v) in p_sum.data_mut().iter_mut().zip(p.data()) {
                    *acc += v * scale;
                }
            }
            let ortho = linalg::orthonormalize(&p_sum, &mut states[0].rng)?;
            for meta in metas.iter_mut() {
                meta.reseeded_columns += ortho.reseeded.len();
            }
            p_hat = ortho.q;
            q_workers = mats
                .iter()
                .map(|am| matmul_at_b(am, &p_hat))
                .collect::<std::result::Result<_, _>>()?;
            let mut q_mean = Matrix::zeros(m, r);
            for q in &q_workers {
                for (acc, v) in q_mean.data_mut().iter_mut().zip(q.data()) {
                    *acc += v * scale;
                }
            }
            q_shared = q_mean;
        }
        for (w, (am, q)) in mats.iter().zip(q_workers).enumerate() {
            let approx = matmul_a_bt(&p_hat, &q)?;
            states[w].error.tensors[idx].data = am.sub(&approx)?.into_data();
            states[w].warm_q[idx] = Some(q_shared.clone());
            layers[w].push(LayerPayload {
                shape: shape.clone(),
                payload: Payload::LowRank {
                    p: p_hat.clone(),
                    q,
                },
            });
        }
    }
    for s in states.iter_mut() {
        s.step += 1;
    }
    Ok(layers
        .into_iter()
        .zip(metas)
        .map(|(layers, meta)| CompressedGradient {
            kind: KindTag::PowerSgd,
            layers,
            meta,
        })
        .collect())
}

/// Per-worker compressor memory.
#[derive(Debug, Clone)]
pub struct CompressorState {
    error: GradientBuffer,
    warm_q: Vec<Option<Matrix>>,
    step: u64,
    rng: ChaCha8Rng,
}

impl CompressorState {
    /// Zero error memory. For PowerSGD, each matrix tensor gets a warm factor
    /// of unit Gaussian columns (seeded by `seed` and the tensor index only,
    /// so all workers start from the same factor) that is then orthonormalized.
    pub fn new(
        compressor: &Compressor,
        shapes: &[Vec<usize>],
        seed: u64,
        worker: usize,
    ) -> Result<Self> {
        compressor.kind.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5eed, worker as u64]));
        let warm_q = match compressor.kind {
            CompressorKind::PowerSgd { rank, .. } => shapes
                .iter()
                .enumerate()
                .map(|(idx, s)| {
                    matrix_view(s)
                        .map(|(n, m)| {
                            let r = rank.min(n).min(m);
                            let mut init_rng =
                                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9, idx as u64]));
                            let q = Matrix::random_normal(m, r, &mut init_rng);
                            linalg::orthonormalize(&q, &mut rng).map(|o| o.q)
                        })
                        .transpose()
                })
                .collect::<std::result::Result<_, _>>()?,
            _ => vec![None; shapes.len()],
        };
        Ok(Self {
            error: GradientBuffer::zeros(shapes),
            warm_q,
            step: 0,
            rng,
        })
    }

    pub fn error_memory(&self) -> &GradientBuffer {
        &self.error
    }

    /// Drops accumulated residuals, keeping warm factors.
    pub fn clear_error_memory(&mut self) {
        for t in &mut self.error.tensors {
            t.data.fill(0.0);
        }
    }

    pub fn warm_factor(&self, tensor: usize) -> Option<&Matrix> {
        self.warm_q.get(tensor).and_then(Option::as_ref)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn check(&self, grad: &GradientBuffer) -> Result<()> {
        let expected = self.error.shapes();
        let got = grad.shapes();
        if expected != got {
            return Err(CompressError::ShapeMismatch { expected, got });
        }
        Ok(())
    }

    fn accumulate(&self, grad: &GradientBuffer) -> GradientBuffer {
        let mut a = grad.clone();
        a.add_assign(&self.error);
        a
    }
}

/// Diagnostics attached to a compression call; not part of the wire format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressionMeta {
    pub effective_ranks: Vec<Option<usize>>,
    pub warnings: Vec<String>,
    pub reseeded_columns: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    /// `M̂ = p qᵀ` with `p` n x r (orthonormal columns) and `q` m x r.
    LowRank {
        p: Matrix,
        q: Matrix,
    },
    Sparse(SparseVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPayload {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl LayerPayload {
    pub fn transmitted_elements(&self) -> usize {
        match &self.payload {
            Payload::Dense(v) => v.len(),
            Payload::LowRank { p, q } => p.data().len() + q.data().len(),
            Payload::Sparse(s) => s.nnz(),
        }
    }

    fn decompress(&self) -> Vec<f64> {
        match &self.payload {
            Payload::Dense(v) => v.clone(),
            Payload::LowRank { p, q } => matmul_a_bt(p, q)
                .expect("well-formed low-rank payload")
                .into_data(),
            Payload::Sparse(s) => s.to_dense(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedGradient {
    pub kind: KindTag,
    pub layers: Vec<LayerPayload>,
    pub meta: CompressionMeta,
}

impl CompressedGradient {
    /// Uncompressed payload for a gradient.
    pub fn dense(grad: &GradientBuffer) -> Self {
        Self {
            kind: KindTag::Identity,
            layers: grad
                .tensors
                .iter()
                .map(|t| LayerPayload {
                    shape: t.shape.clone(),
                    payload: Payload::Dense(t.data.clone()),
                })
                .collect(),
            meta: CompressionMeta::default(),
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.shape.clone()).collect()
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| numel(&l.shape)).sum()
    }

    pub fn transmitted_elements(&self) -> usize {
        self.layers
            .iter()
            .map(LayerPayload::transmitted_elements)
            .sum()
    }

    pub fn ratio(&self) -> f64 {
        self.transmitted_elements() as f64 / self.dim().max(1) as f64
    }

    /// Linear map from a true gradient to what this payload keeps of it:
    /// the observed support for sparse layers, the left projection `P̂P̂ᵀ`
    /// for low-rank layers, identity for dense ones.
    pub fn observation_view(&self) -> ObservationView {
        ObservationView {
            layers: self
                .layers
                .iter()
                .map(|l| match &l.payload {
                    Payload::Dense(v) => ViewLayer::Identity(v.len()),
                    Payload::LowRank { p, q } => ViewLayer::LeftProjection {
                        p: p.clone(),
                        cols: q.rows(),
                    },
                    Payload::Sparse(s) => ViewLayer::Mask {
                        len: s.dim(),
                        indices: s.indices().to_vec(),
                    },
                })
                .collect(),
        }
    }

    /// Writes the little-endian wire format:
    /// kind tag u8, layer count u32, then per layer the rank u32, dims u32
    /// each, a payload tag u8 and the payload. Dense payloads are f64 values;
    /// low-rank payloads are n, m, r as u32 then `p` and `q` row-major f64;
    /// sparse payloads are nnz u32, u32 indices, then f64 values.
    pub fn write_wire<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_u8(self.kind as u8)?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for layer in &self.layers {
            w.write_u32::<LittleEndian>(layer.shape.len() as u32)?;
            for &d in &layer.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            match &layer.payload {
                Payload::Dense(v) => {
                    w.write_u8(0)?;
                    for &x in v {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                Payload::LowRank { p, q } => {
                    w.write_u8(1)?;
                    w.write_u32::<LittleEndian>(p.rows() as u32)?;
                    w.write_u32::<LittleEndian>(q.rows() as u32)?;
                    w.write_u32::<LittleEndian>(p.cols() as u32)?;
                    for &x in p.data().iter().chain(q.data()) {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                Payload::Sparse(s) => {
                    w.write_u8(2)?;
                    w.write_u32::<LittleEndian>(s.nnz() as u32)?;
                    for &i in s.indices() {
                        w.write_u32::<LittleEndian>(i as u32)?;
                    }
                    for &x in s.values() {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_wire_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_wire(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_wire<R: Read>(r: R) -> Result<Self> {
        let mut r = WireReader {
            inner: r,
            offset: 0,
        };
        let tag = r.u8()?;
        let kind = KindTag::from_u8(tag)
            .ok_or_else(|| r.error_at(0, format!("unknown kind tag {tag}")))?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.error_at(r.offset - 4, format!("implausible tensor rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n_el = numel(&shape);
            let at = r.offset;
            let payload = match r.u8()? {
                0 => Payload::Dense((0..n_el).map(|_| r.f64()).collect::<Result<_>>()?),
                1 => {
                    let n = r.u32()? as usize;
                    let m = r.u32()? as usize;
                    let k = r.u32()? as usize;
                    if n * m != n_el {
                        return Err(r.error_at(
                            at,
                            format!("low-rank {n}x{m} does not match shape {shape:?}"),
                        ));
                    }
                    let p = (0..n * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    let q = (0..m * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Payload::LowRank {
                        p: Matrix::new(n, k, p)?,
                        q: Matrix::new(m, k, q)?,
                    }
                }
                2 => {
                    let nnz = r.u32()? as usize;
                    if nnz > n_el {
                        return Err(r.error_at(at, format!("{nnz} entries exceed {n_el} elements")));
                    }
                    let idx = (0..nnz)
                        .map(|_| r.u32().map(|i| i as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let vals = (0..nnz).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Payload::Sparse(
                        SparseVector::new(n_el, idx, vals)
                            .map_err(|e| r.error_at(at, e.to_string()))?,
                    )
                }
                other => return Err(r.error_at(at, format!("unknown payload tag {other}"))),
            };
            layers.push(LayerPayload { shape, payload });
        }
        Ok(Self {
            kind,
            layers,
            meta: CompressionMeta::default(),
        })
    }
}

struct WireReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> WireReader<R> {
    fn error_at(&self, offset: usize, message: String) -> CompressError {
        CompressError::Wire { offset, message }
    }

    fn io(&self, e: std::io::Error) -> CompressError {
        self.error_at(self.offset, e.to_string())
    }

    fn u8(&mut self) -> Result<u8> {
        let v = self.inner.read_u8().map_err(|e| self.io(e))?;
        self.offset += 1;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32> {
        let v = self
            .inner
            .read_u32::<LittleEndian>()
            .map_err(|e| self.io(e))?;
        self.offset += 4;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        let v = self
            .inner
            .read_f64::<LittleEndian>()
            .map_err(|e| self.io(e))?;
        self.offset += 8;
        Ok(v)
    }
}

/// Dense gradient reconstructed from a payload.
pub fn decompress(c: &CompressedGradient) -> GradientBuffer {
    GradientBuffer {
        tensors: c
            .layers
            .iter()
            .map(|l| Tensor {
                shape: l.shape.clone(),
                data: l.decompress(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
enum ViewLayer {
    Identity(usize),
    LeftProjection { p: Matrix, cols: usize },
    Mask { len: usize, indices: Vec<usize> },
}

/// See [`CompressedGradient::observation_view`].
#[derive(Debug, Clone)]
pub struct ObservationView {
    layers: Vec<ViewLayer>,
}

impl GradientView for ObservationView {
    fn project(&self, g: &mut [f64]) {
        let mut offset = 0;
        for layer in &self.layers {
            match layer {
                ViewLayer::Identity(len) => offset += len,
                ViewLayer::Mask { len, indices } => {
                    let block = &mut g[offset..offset + len];
                    let mut keep = indices.iter().peekable();
                    for (i, v) in block.iter_mut().enumerate() {
                        if keep.peek() == Some(&&i) {
                            keep.next();
                        } else {
                            *v = 0.0;
                        }
                    }
                    offset += len;
                }
                ViewLayer::LeftProjection { p, cols } => {
                    let (n, r) = p.shape();
                    let m = *cols;
                    let block = &mut g[offset..offset + n * m];
                    // block <- P (Pᵀ block)
                    let mut coeff = vec![0.0; r * m];
                    for i in 0..n {
                        let row = &block[i * m..(i + 1) * m];
                        for k in 0..r {
                            let pik = p.get(i, k);
                            if pik == 0.0 {
                                continue;
                            }
                            for (c, &x) in coeff[k * m..(k + 1) * m].iter_mut().zip(row) {
                                *c += pik * x;
                            }
                        }
                    }
                    for i in 0..n {
                        let row = &mut block[i * m..(i + 1) * m];
                        row.fill(0.0);
                        for k in 0..r {
                            let pik = p.get(i, k);
                            for (x, &c) in row.iter_mut().zip(&coeff[k * m..(k + 1) * m]) {
                                *x += pik * c;
                            }
                        }
                    }
                    offset += n * m;
                }
            }
        }
    }
}
