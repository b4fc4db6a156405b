//! Deterministic N-worker data-parallel SGD with compressed gradient
//! exchange, and the tap through which an adversary observes one worker's
//! (or the aggregate) gradient.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressors::{
    compress_allreduce, decompress, CompressError, CompressedGradient, Compressor, CompressorState,
    ObservationView,
};
use crate::model::{
    forward, loss, param_gradient, Dataset, Example, GradientBuffer, ModelError, Network,
    NetworkSpec, ParamSet,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("cannot split {size} examples across {workers} workers")]
    TooManyWorkers { size: usize, workers: usize },
    #[error(
        "step {step}: worker {worker} produced a non-finite gradient in layer {layer} {tensor}"
    )]
    NonFinite {
        step: usize,
        worker: usize,
        layer: usize,
        tensor: &'static str,
    },
    #[error("tap request out of range: {0}")]
    OutOfRange(String),
    #[error("tap dump error at byte {offset}: {message}")]
    TapFormat { offset: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// How per-worker payloads are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every worker compresses on its own; the update is the mean of the
    /// decompressed gradients.
    #[default]
    DecompressThenMean,
    /// PowerSGD factors are averaged before decompression, so all workers
    /// share one left factor per layer. Other compressors ignore this.
    FactorSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub workers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub compressor: Compressor,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub network: NetworkSpec,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: &str| {
            Err(SimError::InvalidConfig {
                field,
                message: message.to_string(),
            })
        };
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        self.compressor
            .kind
            .validate()
            .map_err(|e| SimError::InvalidConfig {
                field: "compressor",
                message: e.to_string(),
            })
    }
}

/// Seeded shuffle of `0..size` cut into `n` shards; the first `size % n`
/// shards get one extra element.
pub fn partition(size: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > size {
        return Err(SimError::TooManyWorkers { size, workers: n });
    }
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5a7d])));
    let (base, extra) = (size / n, size % n);
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for w in 0..n {
        let len = base + usize::from(w < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

/// One worker's shard, sampling cursor and compressor memory.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    pub shard: Vec<usize>,
    pub compressor: CompressorState,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl WorkerState {
    fn new(id: usize, shard: Vec<usize>, compressor: CompressorState, seed: u64) -> Self {
        Self {
            id,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, id as u64])),
            shard,
            compressor,
        }
    }

    /// Without replacement within an epoch; the shard is reshuffled at the
    /// start of every epoch.
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = self.shard.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_loss: f64,
    pub ratio: f64,
    pub grad_norm_true: f64,
    pub grad_norm_observed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub final_params: ParamSet,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }
}

/// Which gradient the adversary sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSource {
    Worker(usize),
    Aggregate,
}

/// The adversary's observation at one step. `batch` is ground truth kept for
/// scoring only.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTap {
    pub step: usize,
    pub source: TapSource,
    /// Model parameters the gradient was computed at.
    pub params: ParamSet,
    pub true_grad: GradientBuffer,
    pub observed: CompressedGradient,
    pub batch: Vec<Example>,
}

pub const TAP_MAGIC: &[u8; 4] = b"GTAP";
pub const TAP_VERSION: u32 = 1;

impl GradientTap {
    pub fn observed_gradient(&self) -> GradientBuffer {
        decompress(&self.observed)
    }

    /// Map from a true gradient to what the payload retains of it. Exact for
    /// worker taps taken with empty error memory.
    pub fn observation_view(&self) -> ObservationView {
        self.observed.observation_view()
    }

    /// Energy of the true gradient missing from the observation.
    pub fn discarded_energy(&self) -> f64 {
        let g = self.true_grad.flatten();
        let o = self.observed_gradient().flatten();
        g.iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `GTAP` dump, little-endian: magic, version u32, step u32, worker i32
    /// (-1 for the aggregate), checkpoint length u64 and checkpoint bytes,
    /// the true gradient and the observed payload in the compressor wire
    /// format, then the image block: count u32 and per example label u32,
    /// pixel count u32, f64 pixels.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TAP_MAGIC)?;
        w.write_u32::<LittleEndian>(TAP_VERSION)?;
        w.write_u32::<LittleEndian>(self.step as u32)?;
        w.write_i32::<LittleEndian>(match self.source {
            TapSource::Worker(id) => id as i32,
            TapSource::Aggregate => -1,
        })?;
        let ckpt = self.params.to_checkpoint_bytes();
        w.write_u64::<LittleEndian>(ckpt.len() as u64)?;
        w.write_all(&ckpt)?;
        CompressedGradient::dense(&self.true_grad).write_wire(&mut w)?;
        self.observed.write_wire(&mut w)?;
        w.write_u32::<LittleEndian>(self.batch.len() as u32)?;
        for ex in &self.batch {
            w.write_u32::<LittleEndian>(ex.y as u32)?;
            w.write_u32::<LittleEndian>(ex.x.len() as u32)?;
            for &v in &ex.x {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_dump(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_dump(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| SimError::TapFormat { offset, message };
        let mut r = bytes;
        let pos = |r: &[u8]| bytes.len() - r.len();
        let io = |r: &[u8], e: std::io::Error| fail(bytes.len() - r.len(), e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| io(r, e))?;
        if &magic != TAP_MAGIC {
            return Err(fail(0, format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))?;
        if version != TAP_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let step = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
        let source = match r.read_i32::<LittleEndian>().map_err(|e| io(r, e))? {
            -1 => TapSource::Aggregate,
            w if w >= 0 => TapSource::Worker(w as usize),
            w => return Err(fail(pos(r) - 4, format!("bad worker id {w}"))),
        };
        let len = r.read_u64::<LittleEndian>().map_err(|e| io(r, e))? as usize;
        if len > r.len() {
            return Err(fail(
                pos(r) - 8,
                format!("checkpoint length {len} exceeds file"),
            ));
        }
        let at = pos(r);
        let params = ParamSet::read_checkpoint(&r[..len]).map_err(|e| match e {
            ModelError::Checkpoint { offset, message } => fail(at + offset, message),
            other => fail(at, other.to_string()),
        })?;
        r = &r[len..];
        let read_payload = |r: &mut &[u8]| -> Result<CompressedGradient> {
            let at = bytes.len() - r.len();
            let mut cursor = std::io::Cursor::new(*r);
            let c = CompressedGradient::read_wire(&mut cursor).map_err(|e| match e {
                CompressError::Wire { offset, message } => fail(at + offset, message),
                other => fail(at, other.to_string()),
            })?;
            *r = &r[cursor.position() as usize..];
            Ok(c)
        };
        let true_grad = decompress(&read_payload(&mut r)?);
        let observed = read_payload(&mut r)?;
        let count = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
        let mut batch = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let y = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
            let n = r.read_u32::<LittleEndian>().map_err(|e| io(r, e))? as usize;
            if n * 8 > r.len() {
                return Err(fail(
                    pos(r) - 4,
                    format!("image of {n} pixels exceeds file"),
                ));
            }
            let x = (0..n)
                .map(|_| r.read_f64::<LittleEndian>().map_err(|e| io(r, e)))
                .collect::<Result<Vec<_>>>()?;
            batch.push(Example { x, y });
        }
        if !r.is_empty() {
            return Err(fail(pos(r), format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            step,
            source,
            params,
            true_grad,
            observed,
            batch,
        })
    }
}

/// A running simulation over a borrowed dataset.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    config: SimConfig,
    net: Network,
    dataset: &'a Dataset,
    params: ParamSet,
    workers: Vec<WorkerState>,
    step: usize,
}

struct StepOutput {
    record: StepRecord,
    batches: Vec<Vec<Example>>,
    true_grads: Vec<GradientBuffer>,
    compressed: Vec<CompressedGradient>,
    true_mean: GradientBuffer,
    observed_mean: GradientBuffer,
}

impl<'a> Simulation<'a> {
    /// Fresh parameters drawn from the run seed.
    pub fn new(config: SimConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.network.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x1a17]));
        let params = ParamSet::init(&net, &mut rng);
        Self::with_params(config, dataset, params)
    }

    pub fn with_params(config: SimConfig, dataset: &'a Dataset, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.network.clone())?;
        params.check_against(&net)?;
        if dataset.shape.len() != net.input_len() || dataset.classes != net.classes() {
            return Err(SimError::InvalidConfig {
                field: "network",
                message: format!(
                    "network expects {} inputs and {} classes, dataset has {} and {}",
                    net.input_len(),
                    net.classes(),
                    dataset.shape.len(),
                    dataset.classes
                ),
            });
        }
        let shards = partition(dataset.len(), config.workers, config.seed)?;
        let shapes = net.param_shapes();
        let workers = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let state = CompressorState::new(&config.compressor, &shapes, config.seed, id)?;
                Ok(WorkerState::new(id, shard, state, config.seed))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            net,
            dataset,
            params,
            workers,
            step: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    /// Index of the next step to run.
    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        Ok(self.step_inner()?.record)
    }

    fn step_inner(&mut self) -> Result<StepOutput> {
        let n = self.workers.len();
        let scale = 1.0 / n as f64;
        let mut batches = Vec::with_capacity(n);
        let mut true_grads = Vec::with_capacity(n);
        let mut loss_sum = 0.0;
        for worker in &mut self.workers {
            let idx = worker.next_batch(self.config.batch_size);
            let batch: Vec<Example> = idx
                .iter()
                .map(|&i| self.dataset.examples[i].clone())
                .collect();
            let g = param_gradient(&self.net, &self.params, &batch)?;
            if let Some(t) = g.first_non_finite() {
                return Err(SimError::NonFinite {
                    step: self.step,
                    worker: worker.id,
                    layer: t / 2,
                    tensor: if t % 2 == 0 { "weight" } else { "bias" },
                });
            }
            let mut batch_loss = 0.0;
            for ex in &batch {
                batch_loss += loss(&forward(&self.net, &self.params, &ex.x)?, ex.y);
            }
            loss_sum += batch_loss / batch.len() as f64;
            batches.push(batch);
            true_grads.push(g);
        }
        let compressed = match self.config.aggregation {
            Aggregation::FactorSpace => {
                let mut states: Vec<CompressorState> =
                    self.workers.iter().map(|w| w.compressor.clone()).collect();
                let out = compress_allreduce(&self.config.compressor, &mut states, &true_grads)?;
                for (w, s) in self.workers.iter_mut().zip(states) {
                    w.compressor = s;
                }
                out
            }
            Aggregation::DecompressThenMean => self
                .workers
                .iter_mut()
                .zip(&true_grads)
                .map(|(w, g)| self.config.compressor.compress(&mut w.compressor, g))
                .collect::<std::result::Result<_, _>>()?,
        };
        let shapes = self.net.param_shapes();
        let mut true_mean = GradientBuffer::zeros(&shapes);
        let mut observed_mean = GradientBuffer::zeros(&shapes);
        let mut ratio = 0.0;
        for (g, c) in true_grads.iter().zip(&compressed) {
            let mut t = g.clone();
            t.scale(scale);
            true_mean.add_assign(&t);
            let mut o = decompress(c);
            o.scale(scale);
            observed_mean.add_assign(&o);
            ratio += c.ratio() * scale;
        }
        self.params
            .sgd_update(&observed_mean, self.config.learning_rate);
        let record = StepRecord {
            step: self.step,
            mean_loss: loss_sum * scale,
            ratio,
            grad_norm_true: true_mean.norm(),
            grad_norm_observed: observed_mean.norm(),
        };
        log::debug!(
            "step {} loss {:.6} ratio {:.5}",
            record.step,
            record.mean_loss,
            record.ratio
        );
        self.step += 1;
        Ok(StepOutput {
            record,
            batches,
            true_grads,
            compressed,
            true_mean,
            observed_mean,
        })
    }

    /// Runs the remaining steps of the configured budget.
    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            out.push(self.step()?);
        }
        Ok(out)
    }

    /// Advances to `step`, runs it, and returns the requested taps taken at
    /// that step without changing the trajectory.
    pub fn tap_at(&mut self, step: usize, sources: &[TapSource]) -> Result<Vec<GradientTap>> {
        if step < self.step {
            return Err(SimError::OutOfRange(format!(
                "step {step} already executed (at {})",
                self.step
            )));
        }
        for &s in sources {
            if let TapSource::Worker(w) = s {
                if w >= self.workers.len() {
                    return Err(SimError::OutOfRange(format!(
                        "worker {w} of {}",
                        self.workers.len()
                    )));
                }
            }
        }
        while self.step < step {
            self.step()?;
        }
        let params = self.params.clone();
        let out = self.step_inner()?;
        Ok(sources
            .iter()
            .map(|&source| match source {
                TapSource::Worker(w) => GradientTap {
                    step,
                    source,
                    params: params.clone(),
                    true_grad: out.true_grads[w].clone(),
                    observed: out.compressed[w].clone(),
                    batch: out.batches[w].clone(),
                },
                TapSource::Aggregate => GradientTap {
                    step,
                    source,
                    params: params.clone(),
                    true_grad: out.true_mean.clone(),
                    observed: CompressedGradient::dense(&out.observed_mean),
                    batch: out.batches.concat(),
                },
            })
            .collect())
    }
}

/// Runs `config.steps` steps from seeded initial parameters.
pub fn train(config: &SimConfig, dataset: &Dataset) -> Result<TrainLog> {
    let mut sim = Simulation::new(config.clone(), dataset)?;
    let records = sim.run()?;
    Ok(TrainLog {
        records,
        final_params: sim.params.clone(),
    })
}

/// Replays the run to `step` and returns the given worker's tap.
pub fn capture(
    config: &SimConfig,
    dataset: &Dataset,
    step: usize,
    worker: usize,
) -> Result<GradientTap> {
    capture_many(config, dataset, step, &[TapSource::Worker(worker)]).map(|mut t| t.remove(0))
}

/// Replays the run to `step` and returns one tap per source.
pub fn capture_many(
    config: &SimConfig,
    dataset: &Dataset,
    step: usize,
    sources: &[TapSource],
) -> Result<Vec<GradientTap>> {
    if step >= config.steps.max(1) {
        return Err(SimError::OutOfRange(format!(
            "step {step} beyond a {}-step run",
            config.steps
        )));
    }
    Simulation::new(config.clone(), dataset)?.tap_at(step, sources)
}

/// Compression ratio this config's compressor achieves on its network.
pub fn config_ratio(config: &SimConfig) -> Result<f64> {
    let net = Network::new(config.network.clone())?;
    Ok(config.compressor.ratio(&net.param_shapes()))
}
