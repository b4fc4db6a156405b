use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{ModelError, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn flatten_tensors(tensors: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tensors.iter().map(Tensor::numel).sum());
    for t in tensors {
        out.extend_from_slice(&t.data);
    }
    out
}

fn unflatten_tensors(v: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if v.len() != expected {
        return Err(ModelError::Shape {
            what: "flat vector",
            expected,
            got: v.len(),
        });
    }
    let mut offset = 0;
    Ok(shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let t = Tensor {
                shape: shape.clone(),
                data: v[offset..offset + n].to_vec(),
            };
            offset += n;
            t
        })
        .collect())
}

/// Model parameters: weight then bias tensor for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(net: &Network) -> Self {
        Self {
            tensors: net
                .param_shapes()
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect(),
        }
    }

    /// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weights and biases.
    pub fn init<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Self {
        let mut tensors = Vec::with_capacity(net.layers.len() * 2);
        for layer in &net.layers {
            let bound = (1.0 / layer.fan_in() as f64).sqrt();
            for shape in [layer.weight_shape(), vec![layer.bias_len()]] {
                let mut t = Tensor::zeros(&shape);
                t.data
                    .iter_mut()
                    .for_each(|x| *x = rng.random_range(-bound..bound));
                tensors.push(t);
            }
        }
        Self { tensors }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    pub fn dim(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_tensors(&self.tensors)
    }

    pub fn unflatten(v: &[f64], shapes: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            tensors: unflatten_tensors(v, shapes)?,
        })
    }

    pub(crate) fn weight(&self, layer: usize) -> &[f64] {
        &self.tensors[2 * layer].data
    }

    pub(crate) fn bias(&self, layer: usize) -> &[f64] {
        &self.tensors[2 * layer + 1].data
    }

    pub fn check_against(&self, net: &Network) -> Result<()> {
        if self.shapes() != net.param_shapes() {
            return Err(ModelError::InvalidSpec(format!(
                "parameter shapes {:?} do not match network {:?}",
                self.shapes(),
                net.param_shapes()
            )));
        }
        Ok(())
    }

    /// `self -= lr * grad`.
    pub fn sgd_update(&mut self, grad: &GradientBuffer, lr: f64) {
        for (p, g) in self.tensors.iter_mut().zip(&grad.tensors) {
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= lr * gv;
            }
        }
    }

    /// Writes the `GSHD` checkpoint format.
    ///
    /// Layout (little-endian): magic `GSHD`, version u32, layer count u32,
    /// then per layer the weight rank u32, weight dims u32 each and the bias
    /// length u32, then every parameter as f64 in flatten order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>((self.tensors.len() / 2) as u32)?;
        for pair in self.tensors.chunks(2) {
            w.write_u32::<LittleEndian>(pair[0].shape.len() as u32)?;
            for &d in &pair[0].shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            w.write_u32::<LittleEndian>(pair[1].numel() as u32)?;
        }
        for t in &self.tensors {
            for &v in &t.data {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut r = CountingReader {
            inner: r,
            offset: 0,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| r.error(e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(layers * 2);
        for _ in 0..layers {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(ModelError::Checkpoint {
                    offset: r.offset - 4,
                    message: format!("implausible weight rank {rank}"),
                });
            }
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            shapes.push(dims);
            shapes.push(vec![r.u32()? as usize]);
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let mut t = Tensor::zeros(&shape);
            for v in t.data.iter_mut() {
                *v = r.f64()?;
            }
            tensors.push(t);
        }
        Ok(Self { tensors })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSHD";
pub const CHECKPOINT_VERSION: u32 = 1;

struct CountingReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> CountingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> std::io::Result<()> {
        self.inner.read_exact(buf)?;
        self.offset += buf.len();
        Ok(())
    }

    fn error(&self, e: std::io::Error) -> ModelError {
        ModelError::Checkpoint {
            offset: self.offset,
            message: e.to_string(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let v = self
            .inner
            .read_u32::<LittleEndian>()
            .map_err(|e| self.error(e))?;
        self.offset += 4;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        let v = self
            .inner
            .read_f64::<LittleEndian>()
            .map_err(|e| self.error(e))?;
        self.offset += 8;
        Ok(v)
    }
}

/// Per-tensor gradients, congruent with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBuffer {
    pub tensors: Vec<Tensor>,
}

impl GradientBuffer {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        Self {
            tensors: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    pub fn dim(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_tensors(&self.tensors)
    }

    pub fn unflatten(v: &[f64], shapes: &[Vec<usize>]) -> Result<Self> {
        Ok(Self {
            tensors: unflatten_tensors(v, shapes)?,
        })
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Index of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors
            .iter()
            .position(|t| t.data.iter().any(|v| !v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
}
