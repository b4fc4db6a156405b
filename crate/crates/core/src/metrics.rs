//! Reconstruction quality (windowed SSIM), gradient alignment, and the
//! aggregate rows of the SSIM report.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressors::matrix_view;
use crate::linalg::{self, svd, truncation_error, LinalgError, Matrix};
use crate::model::{GradientBuffer, InputShape};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("no values to summarize")]
    Empty,
    #[error("gradient shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: Vec<Vec<usize>>,
        right: Vec<Vec<usize>>,
    },
    #[error("true gradient has zero norm; alignment is undefined")]
    UndefinedAlignment,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Channel-major image with pixels nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(MetricsError::InvalidImage(format!(
                "zero dimension in {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(MetricsError::InvalidImage(format!(
                "{} pixels for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidImage(format!(
                "non-finite pixel at {i}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_flat(shape: InputShape, data: Vec<f64>) -> Result<Self> {
        Self::new(shape.channels, shape.height, shape.width, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Binary PGM (one channel) or PPM (three channels), 8-bit.
    pub fn write_netpbm<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(MetricsError::InvalidImage(format!(
                    "netpbm needs 1 or 3 channels, got {c}"
                )))
            }
        };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let n = self.height * self.width;
        let mut bytes = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                let v = self.data[c * n + i].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimDetail {
    pub value: f64,
    /// The image was smaller than the window, so one global window was used.
    pub global_fallback: bool,
    /// Pixels clamped into [0, 1] before comparison.
    pub clamped_pixels: usize,
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_detailed(a, b).map(|d| d.value)
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and
/// unit dynamic range, averaged over valid window positions and channels.
pub fn ssim_detailed(a: &Image, b: &Image) -> Result<SsimDetail> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let clamped_pixels = a
        .data
        .iter()
        .chain(&b.data)
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if clamped_pixels > 0 {
        log::warn!("ssim: clamping {clamped_pixels} pixels into [0, 1]");
    }
    let clamp = |v: &[f64]| v.iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    let global_fallback = a.height < SSIM_WINDOW || a.width < SSIM_WINDOW;
    if global_fallback {
        log::debug!(
            "ssim: {}x{} image is smaller than the window; using global statistics",
            a.height,
            a.width
        );
    }
    let mut total = 0.0;
    for c in 0..a.channels {
        let (x, y) = (clamp(a.channel(c)), clamp(b.channel(c)));
        total += if global_fallback {
            global_ssim(&x, &y)
        } else {
            windowed_ssim(&x, &y, a.height, a.width)
        };
    }
    Ok(SsimDetail {
        value: total / a.channels as f64,
        global_fallback,
        clamped_pixels,
    })
}

fn ssim_formula(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
}

fn global_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    ssim_formula(mx, my, sxx / n, syy / n, sxy / n)
}

/// Valid-region separable Gaussian filtering of one plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| taps[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| taps[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn windowed_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let ex2 = filter_valid(&xx, h, w, &taps);
    let ey2 = filter_valid(&yy, h, w, &taps);
    let exy = filter_valid(&xy, h, w, &taps);
    let n = mx.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        sum += ssim_formula(a, b, ex2[i] - a * a, ey2[i] - b * b, exy[i] - a * b);
    }
    sum / n as f64
}

/// Mean, population standard deviation, and percentage of a baseline mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimStats {
    pub mean: f64,
    pub std: f64,
    /// `100 * mean / baseline`; `None` when the baseline is not positive.
    pub percent: Option<f64>,
}

pub fn ssim_stats(values: &[f64], baseline_mean: f64) -> Result<SsimStats> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SsimStats {
        mean,
        std: var.sqrt(),
        percent: (baseline_mean > 0.0).then(|| 100.0 * mean / baseline_mean),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cosine: f64,
    /// `‖g_l - ĝ_l‖_F` per tensor.
    pub layer_frobenius: Vec<f64>,
    pub euclidean: f64,
    /// `1 - (‖ĝ‖/‖g‖)²`.
    pub discarded_energy_fraction: f64,
}

pub fn gradient_alignment_report(
    g: &GradientBuffer,
    ghat: &GradientBuffer,
) -> Result<AlignmentReport> {
    if g.shapes() != ghat.shapes() {
        return Err(MetricsError::ShapeMismatch {
            left: g.shapes(),
            right: ghat.shapes(),
        });
    }
    let gn = g.norm();
    if gn == 0.0 {
        return Err(MetricsError::UndefinedAlignment);
    }
    let layer_frobenius: Vec<f64> = g
        .tensors
        .iter()
        .zip(&ghat.tensors)
        .map(|(a, b)| {
            a.data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let euclidean = layer_frobenius.iter().map(|e| e * e).sum::<f64>().sqrt();
    let cosine = if ghat.norm() == 0.0 {
        0.0
    } else {
        linalg::cosine_similarity(&g.flatten(), &ghat.flatten())?
    };
    let ratio = ghat.norm() / gn;
    Ok(AlignmentReport {
        cosine,
        layer_frobenius,
        euclidean,
        discarded_energy_fraction: 1.0 - ratio * ratio,
    })
}

/// Eckart-Young floor `‖M - M_r‖_F` for every matrix-shaped tensor of `g`
/// at the given per-tensor ranks; `None` for tensors sent dense.
pub fn truncation_floors(g: &GradientBuffer, ranks: &[Option<usize>]) -> Result<Vec<Option<f64>>> {
    g.tensors
        .iter()
        .zip(ranks)
        .map(|(t, r)| match (matrix_view(&t.shape), r) {
            (Some((n, m)), Some(r)) => {
                let s = svd(&Matrix::new(n, m, t.data.clone())?)?.s;
                Ok(Some(truncation_error(&s, *r)?))
            }
            _ => Ok(None),
        })
        .collect()
}

/// One row of the SSIM report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algorithm: String,
    pub rank_or_ratio: String,
    pub dataset: String,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub percent_of_baseline: Option<f64>,
    pub n_samples: usize,
    pub attack_config_hash: String,
}

/// Writes `rows` as CSV, preceded by `# `-prefixed comment lines.
pub fn write_report_csv<W: Write>(mut w: W, comments: &[String], rows: &[ReportRow]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
        Image::new(
            c,
            h,
            w,
            (0..c * h * w).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct double sum over the 2-D window at every valid position.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let t = gaussian_taps();
        let k = SSIM_WINDOW;
        let (h, w) = (a.height, a.width);
        let mut total = 0.0;
        for c in 0..a.channels {
            let (x, y) = (a.channel(c), b.channel(c));
            let mut acc = 0.0;
            let mut count = 0;
            for r0 in 0..=h - k {
                for c0 in 0..=w - k {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let p = (r0 + i) * w + c0 + j;
                            mx += t[i] * t[j] * x[p];
                            my += t[i] * t[j] * y[p];
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let p = (r0 + i) * w + c0 + j;
                            let wt = t[i] * t[j];
                            vx += wt * (x[p] - mx) * (x[p] - mx);
                            vy += wt * (y[p] - my) * (y[p] - my);
                            cxy += wt * (x[p] - mx) * (y[p] - my);
                        }
                    }
                    acc += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                        / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / a.channels as f64
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for (c, h, w) in [(1, 16, 16), (3, 12, 20), (1, 8, 8)] {
            let a = random_image(c, h, w, &mut r);
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_images_closed_form() {
        let zero = Image::new(1, 16, 16, vec![0.0; 256]).unwrap();
        let one = Image::new(1, 16, 16, vec![1.0; 256]).unwrap();
        let expected = C1 * C2 / ((1.0 + C1) * C2);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_summation_and_is_symmetric() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for i in 0..50 {
            let (c, h, w) = if i % 5 == 0 { (3, 13, 14) } else { (1, 16, 16) };
            let a = random_image(c, h, w, &mut r);
            let b = random_image(c, h, w, &mut r);
            let s = ssim(&a, &b).unwrap();
            assert!((s - reference_ssim(&a, &b)).abs() < 1e-10);
            assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
            assert!(s < 1.0);
        }
    }

    #[test]
    fn small_images_use_global_statistics() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(1, 8, 8, &mut r);
        let b = random_image(1, 8, 8, &mut r);
        let d = ssim_detailed(&a, &b).unwrap();
        assert!(d.global_fallback);
        assert!((d.value - global_ssim(&a.data, &b.data)).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_pixels_are_clamped() {
        let a = Image::new(1, 4, 4, vec![1.5; 16]).unwrap();
        let b = Image::new(1, 4, 4, vec![1.0; 16]).unwrap();
        let d = ssim_detailed(&a, &b).unwrap();
        assert_eq!(d.clamped_pixels, 16);
        assert_eq!(d.value, 1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Image::new(1, 4, 4, vec![0.0; 16]).unwrap();
        let b = Image::new(1, 2, 8, vec![0.0; 16]).unwrap();
        assert!(matches!(
            ssim(&a, &b),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        assert!(Image::new(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = ssim_stats(&[0.7], 0.7).unwrap();
        assert_eq!((s.mean, s.std), (0.7, 0.0));
        assert!((s.percent.unwrap() - 100.0).abs() < 1e-12);
        let s = ssim_stats(&[0.2, 0.4], 0.4).unwrap();
        assert!((s.mean - 0.3).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-15);
        assert!((s.percent.unwrap() - 75.0).abs() < 1e-12);
        assert!(ssim_stats(&[], 1.0).is_err());
        assert_eq!(ssim_stats(&[0.1], 0.0).unwrap().percent, None);
    }

    #[test]
    fn alignment_of_identical_gradients() {
        let g = GradientBuffer {
            tensors: vec![Tensor {
                shape: vec![2, 2],
                data: vec![1.0, -2.0, 0.5, 3.0],
            }],
        };
        let rep = gradient_alignment_report(&g, &g).unwrap();
        assert!((rep.cosine - 1.0).abs() < 1e-15);
        assert_eq!(rep.euclidean, 0.0);
        assert_eq!(rep.discarded_energy_fraction, 0.0);
        let zero = GradientBuffer::zeros(&[vec![2, 2]]);
        assert!(matches!(
            gradient_alignment_report(&zero, &g),
            Err(MetricsError::UndefinedAlignment)
        ));
    }

    #[test]
    fn netpbm_header_and_size() {
        let img = Image::new(1, 2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0]).unwrap();
        let mut buf = Vec::new();
        img.write_netpbm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 128, 255, 255, 128, 0]);
    }
}
