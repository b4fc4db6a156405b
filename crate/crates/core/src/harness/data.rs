//! Dataset ingestion: MNIST IDX, CIFAR-10 binary batches, and the seeded
//! synthetic image generator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::model::{Dataset, Example, InputShape};
use crate::seed::derive_seed;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

fn parse_err(file: &str, offset: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        file: file.to_string(),
        offset,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            parse_err(
                file,
                offset,
                format!(
                    "header needs 4 bytes at offset {offset}, file has {}",
                    bytes.len()
                ),
            )
        })
}

/// IDX image file: magic, count, rows, cols (big-endian u32), then one byte
/// per pixel. Returns the shape and pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(parse_err(file, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(parse_err(
            file,
            16 + payload.len().min(expected),
            format!("expected {expected} pixel bytes, found {}", payload.len()),
        ));
    }
    Ok((
        count,
        rows,
        cols,
        payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
    ))
}

/// IDX label file: magic, count, then one byte per label.
pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(parse_err(file, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(parse_err(
            file,
            8 + payload.len().min(count),
            format!("expected {count} label bytes, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Parses an IDX image/label pair already in memory.
pub fn mnist_from_idx(images: &[u8], labels: &[u8], names: (&str, &str)) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images, names.0)?;
    let labels = parse_idx_labels(labels, names.1)?;
    if labels.len() != count {
        return Err(parse_err(
            names.1,
            4,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let n = rows * cols;
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y > 9 {
                return Err(parse_err(
                    names.1,
                    8 + i,
                    format!("label {y} is not a digit"),
                ));
            }
            Ok(Example {
                x: pixels[i * n..(i + 1) * n].to_vec(),
                y: usize::from(y),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        shape: InputShape::new(1, rows, cols),
        classes: 10,
        examples,
    })
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| HarnessError::Io {
            path: p.display().to_string(),
            source: e,
        })
    };
    mnist_from_idx(
        &read(images)?,
        &read(labels)?,
        (&images.display().to_string(), &labels.display().to_string()),
    )
}

/// CIFAR-10 binary batch: 3073-byte records, label byte then 32x32 red,
/// green and blue planes.
pub fn cifar10_from_bytes(bytes: &[u8], file: &str) -> Result<Vec<Example>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(parse_err(
            file,
            whole,
            format!(
                "trailing partial record of {} bytes (records are {CIFAR_RECORD})",
                bytes.len() - whole
            ),
        ));
    }
    bytes
        .chunks(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] > 9 {
                return Err(parse_err(
                    file,
                    i * CIFAR_RECORD,
                    format!("label {} out of range", rec[0]),
                ));
            }
            Ok(Example {
                x: rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect(),
                y: usize::from(rec[0]),
            })
        })
        .collect()
}

pub fn load_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut examples = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| HarnessError::Io {
            path: p.display().to_string(),
            source: e,
        })?;
        examples.extend(cifar10_from_bytes(&bytes, &p.display().to_string())?);
    }
    Ok(Dataset {
        shape: InputShape::new(3, 32, 32),
        classes: 10,
        examples,
    })
}

/// Luma-weighted average of three channels.
pub fn to_grayscale(data: &Dataset) -> Dataset {
    if data.shape.channels != 3 {
        return data.clone();
    }
    let n = data.shape.height * data.shape.width;
    Dataset {
        shape: InputShape::new(1, data.shape.height, data.shape.width),
        classes: data.classes,
        examples: data
            .examples
            .iter()
            .map(|ex| Example {
                x: (0..n)
                    .map(|i| 0.299 * ex.x[i] + 0.587 * ex.x[n + i] + 0.114 * ex.x[2 * n + i])
                    .collect(),
                y: ex.y,
            })
            .collect(),
    }
}

/// Overlap weights of source cells `0..src` onto each of `dst` output cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(src))
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resize of every image to `height x width`.
pub fn downsample(data: &Dataset, height: usize, width: usize) -> Result<Dataset> {
    let s = data.shape;
    if height == 0 || width == 0 || height > s.height || width > s.width {
        return Err(HarnessError::Invalid {
            path: "dataset.downsample".into(),
            line: None,
            message: format!("cannot resize {}x{} to {height}x{width}", s.height, s.width),
        });
    }
    let (wr, wc) = (area_weights(s.height, height), area_weights(s.width, width));
    let examples = data
        .examples
        .iter()
        .map(|ex| {
            let mut x = Vec::with_capacity(s.channels * height * width);
            for c in 0..s.channels {
                let plane = &ex.x[c * s.height * s.width..(c + 1) * s.height * s.width];
                for rw in &wr {
                    for cw in &wc {
                        let mut v = 0.0;
                        for &(r, a) in rw {
                            for &(col, b) in cw {
                                v += a * b * plane[r * s.width + col];
                            }
                        }
                        x.push(v);
                    }
                }
            }
            Example { x, y: ex.y }
        })
        .collect();
    Ok(Dataset {
        shape: InputShape::new(s.channels, height, width),
        classes: data.classes,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Class-mean contrast in units of the noise standard deviation.
    pub separation: f64,
    pub noise: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 1,
            height: 8,
            width: 8,
            separation: 8.0,
            noise: 0.1,
            size: 400,
            seed: 0,
        }
    }
}

/// Procedural pattern in [-1, 1] for class `c`: a product of sinusoids whose
/// frequencies and phases depend on the class.
fn class_pattern(c: usize, channel: usize, r: usize, col: usize, spec: &SyntheticSpec) -> f64 {
    let y = r as f64 / spec.height.max(1) as f64 * 8.0;
    let x = col as f64 / spec.width.max(1) as f64 * 8.0;
    let fx = 1.0 + (c % 3) as f64;
    let fy = 1.0 + (c / 3 % 4) as f64;
    let phase = c as f64 + 0.7 * channel as f64;
    (fx * x * 0.6 + phase).sin() * (fy * y * 0.5 + 0.3 * phase).cos()
}

/// Class-conditional Gaussian images around procedural class means, clamped
/// to [0, 1]. Examples cycle through the classes in order.
impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |path: &str, message: &str| {
            Err(HarnessError::Invalid {
                path: format!("dataset.synthetic.{path}"),
                line: None,
                message: message.into(),
            })
        };
        if self.classes < 2 {
            return invalid("classes", "need at least 2 classes");
        }
        if self.size < self.classes {
            return invalid("size", "must be at least the class count");
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return invalid("height", "image dimensions must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return invalid("noise", "must be non-negative");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return invalid("separation", "must be non-negative");
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let amplitude = 0.5 * spec.separation * spec.noise;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut m = Vec::with_capacity(spec.channels * spec.height * spec.width);
            for ch in 0..spec.channels {
                for r in 0..spec.height {
                    for col in 0..spec.width {
                        m.push(0.5 + amplitude * class_pattern(c, ch, r, col, spec));
                    }
                }
            }
            m
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| HarnessError::Invalid {
        path: "dataset.synthetic.noise".into(),
        line: None,
        message: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xda7a]));
    let examples = (0..spec.size)
        .map(|i| {
            let y = i % spec.classes;
            Example {
                x: means[y]
                    .iter()
                    .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect(),
                y,
            }
        })
        .collect();
    Ok(Dataset {
        shape: InputShape::new(spec.channels, spec.height, spec.width),
        classes: spec.classes,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_averages_blocks() {
        let data = Dataset {
            shape: InputShape::new(1, 4, 4),
            classes: 2,
            examples: vec![Example {
                x: (0..16).map(f64::from).collect(),
                y: 1,
            }],
        };
        let small = downsample(&data, 2, 2).unwrap();
        assert_eq!(small.examples[0].x, vec![2.5, 4.5, 10.5, 12.5]);
        let odd = downsample(&data, 3, 3).unwrap();
        let mean_in: f64 = data.examples[0].x.iter().sum::<f64>() / 16.0;
        let mean_out: f64 = odd.examples[0].x.iter().sum::<f64>() / 9.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
        assert!(downsample(&data, 5, 5).is_err());
    }

    #[test]
    fn grayscale_uses_luma_weights() {
        let data = Dataset {
            shape: InputShape::new(3, 1, 1),
            classes: 2,
            examples: vec![Example {
                x: vec![1.0, 0.0, 0.0],
                y: 0,
            }],
        };
        assert!((to_grayscale(&data).examples[0].x[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 7;
        let ex = cifar10_from_bytes(&bytes, "b").unwrap();
        assert_eq!(
            (ex[0].y, ex[1].y, ex[0].x[0], ex[0].x.len()),
            (3, 7, 1.0, 3072)
        );
        match cifar10_from_bytes(&bytes[..CIFAR_RECORD + 10], "b") {
            Err(HarnessError::Parse { offset, .. }) => assert_eq!(offset, CIFAR_RECORD),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.len(), 400);
        assert!(a
            .examples
            .iter()
            .flat_map(|e| &e.x)
            .all(|v| (0.0..=1.0).contains(v)));
        let flat = SyntheticSpec {
            separation: 0.0,
            noise: 0.0,
            ..spec.clone()
        };
        let b = generate_synthetic(&flat).unwrap();
        assert!(b.examples.iter().flat_map(|e| &e.x).all(|&v| v == 0.5));
        assert!(generate_synthetic(&SyntheticSpec { size: 3, ..spec }).is_err());
    }
}
