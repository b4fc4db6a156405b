//! Sweep driver: expands a config into compressor settings, runs the
//! gradient-inversion and membership-inference protocols, and renders the
//! report bundle.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Config, DatasetConfig, DatasetKind, ModelConfig, ModelKind};
use super::data::{downsample, generate_synthetic, load_cifar10_bin, load_mnist_idx, to_grayscale};
use super::{io_err, HarnessError, Result};
use crate::attacks::{grad_inversion_with, mia_all, GradInvConfig, MiaKind, ReconResult};
use crate::compressors::{effective_ranks, rank_equivalent_ratio, Compressor, CompressorKind};
use crate::distsim::{train, GradientTap, SimConfig, Simulation, TapSource};
use crate::metrics::{ssim, ssim_stats, write_report_csv, Image, ReportRow};
use crate::model::{Dataset, GradientView, InputShape, Network, NetworkSpec};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Identity,
    PowerSgd,
    TopK,
}

impl Algorithm {
    pub fn display(self) -> &'static str {
        match self {
            Algorithm::Identity => "Original SGD",
            Algorithm::PowerSgd => "PowerSGD",
            Algorithm::TopK => "Top-K SGD",
        }
    }
}

/// One compressor configuration of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub algorithm: Algorithm,
    /// Requested PowerSGD rank, or the rank a Top-K level is matched to.
    pub level: Option<usize>,
    pub compressor: Compressor,
    /// Text of the rank/ratio table cell.
    pub rank_or_ratio: String,
    /// Directory-safe name for artifacts.
    pub slug: String,
    pub compression_ratio: f64,
}

impl Setting {
    pub fn new(
        algorithm: Algorithm,
        level: Option<usize>,
        compressor: Compressor,
        shapes: &[Vec<usize>],
    ) -> Self {
        let (rank_or_ratio, slug) = match (compressor.kind, level) {
            (CompressorKind::PowerSgd { rank, .. }, _) => {
                let mut eff: Vec<usize> = effective_ranks(rank, shapes)
                    .into_iter()
                    .flatten()
                    .collect();
                eff.dedup();
                let cell = if eff.iter().all(|&e| e == rank) {
                    rank.to_string()
                } else {
                    let list: Vec<String> = eff.iter().map(|e| e.to_string()).collect();
                    format!("{rank} (effective {})", list.join("/"))
                };
                (cell, format!("powersgd_r{rank}"))
            }
            (CompressorKind::TopK { ratio }, Some(l)) => (
                format!("level {l} (ratio {ratio:.6})"),
                format!("topk_l{l}"),
            ),
            (CompressorKind::TopK { ratio }, None) => {
                (format!("ratio {ratio:.6}"), format!("topk_{ratio:.6}"))
            }
            (CompressorKind::Identity, _) => ("-".to_string(), "identity".to_string()),
        };
        Self {
            algorithm,
            level,
            compression_ratio: compressor.ratio(shapes),
            compressor,
            rank_or_ratio,
            slug,
        }
    }
}

/// Identity, then PowerSGD at every rank, then Top-K at each rank's
/// element-matched ratio.
pub fn expand_settings(cfg: &Config, shapes: &[Vec<usize>]) -> Vec<Setting> {
    let s = &cfg.sweep;
    let scope = cfg.training.topk_scope;
    let mut out = Vec::new();
    if s.identity {
        out.push(Setting::new(
            Algorithm::Identity,
            None,
            Compressor::new(CompressorKind::Identity),
            shapes,
        ));
    }
    if s.powersgd {
        for &r in &s.ranks {
            let kind = CompressorKind::PowerSgd {
                rank: r,
                power_iterations: cfg.training.power_iterations,
            };
            out.push(Setting::new(
                Algorithm::PowerSgd,
                Some(r),
                Compressor::new(kind),
                shapes,
            ));
        }
    }
    if s.topk {
        for &r in &s.ranks {
            let kind = CompressorKind::TopK {
                ratio: rank_equivalent_ratio(shapes, r),
            };
            out.push(Setting::new(
                Algorithm::TopK,
                Some(r),
                Compressor::new(kind).with_scope(scope),
                shapes,
            ));
        }
    }
    out
}

/// Loads or generates the configured dataset and applies grayscale and
/// downsampling. Returns the dataset and its report name.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<(Dataset, String)> {
    let (mut data, base) = match cfg.kind {
        DatasetKind::Synthetic => (generate_synthetic(&cfg.synthetic)?, "synthetic"),
        DatasetKind::MnistIdx => {
            let (i, l) = (cfg.images.as_ref(), cfg.labels.as_ref());
            match (i, l) {
                (Some(i), Some(l)) => (load_mnist_idx(i, l)?, "mnist"),
                _ => {
                    return Err(HarnessError::Invalid {
                        path: "dataset.images".into(),
                        line: None,
                        message: "mnist_idx needs images and labels".into(),
                    })
                }
            }
        }
        DatasetKind::Cifar10Bin => (load_cifar10_bin(&cfg.files)?, "cifar10"),
    };
    if let Some(limit) = cfg.limit {
        data.examples.truncate(limit);
    }
    if cfg.grayscale {
        data = to_grayscale(&data);
    }
    if let Some([h, w]) = cfg.downsample {
        if (h, w) != (data.shape.height, data.shape.width) {
            data = downsample(&data, h, w)?;
        }
    }
    let name = cfg.name.clone().unwrap_or_else(|| {
        let s = data.shape;
        format!("{base}-{}x{}x{}", s.channels, s.height, s.width)
    });
    Ok((data, name))
}

pub fn network_spec(model: &ModelConfig, data: &Dataset) -> Result<NetworkSpec> {
    match model.kind {
        ModelKind::Mlp => Ok(NetworkSpec::mlp(
            data.shape,
            &model.hidden,
            data.classes,
            model.activation,
        )),
        ModelKind::Conv8x8 => {
            if data.shape != InputShape::new(1, 8, 8) {
                return Err(HarnessError::Invalid {
                    path: "model.kind".into(),
                    line: None,
                    message: format!(
                        "conv8x8 needs 1x8x8 inputs, dataset is {}x{}x{}",
                        data.shape.channels, data.shape.height, data.shape.width
                    ),
                });
            }
            Ok(NetworkSpec::conv_8x8(data.classes, model.activation))
        }
    }
}

/// Simulator config for runs whose worker gradients are attacked.
pub fn gradinv_sim_config(
    cfg: &Config,
    network: &NetworkSpec,
    compressor: Compressor,
) -> SimConfig {
    let t = &cfg.training;
    SimConfig {
        workers: t.workers,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        steps: t.steps,
        seed: cfg.seed,
        compressor,
        aggregation: t.aggregation,
        network: network.clone(),
    }
}

/// Simulator config for the membership-inference target models.
pub fn mia_sim_config(cfg: &Config, network: &NetworkSpec, compressor: Compressor) -> SimConfig {
    let m = &cfg.mia;
    SimConfig {
        workers: m.workers,
        batch_size: m.batch_size,
        learning_rate: m.learning_rate,
        steps: m.steps,
        seed: cfg.seed,
        compressor,
        aggregation: m.aggregation,
        network: network.clone(),
    }
}

/// Seeded disjoint member and non-member index sets.
pub fn mia_split(cfg: &Config, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let (m, n) = (cfg.mia.members, cfg.mia.nonmembers);
    if m + n > data.len() {
        return Err(HarnessError::Invalid {
            path: "mia.members".into(),
            line: None,
            message: format!(
                "{m} members + {n} non-members exceed the {} examples",
                data.len()
            ),
        });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[0x31a],
    )));
    Ok((idx[..m].to_vec(), idx[m..m + n].to_vec()))
}

/// Worker taps at `tap_step` and later steps until `samples` are collected.
pub fn collect_taps(
    sim_cfg: &SimConfig,
    data: &Dataset,
    tap_step: usize,
    samples: usize,
) -> Result<Vec<GradientTap>> {
    let mut sim = Simulation::new(sim_cfg.clone(), data)?;
    let mut taps = Vec::with_capacity(samples);
    let mut step = tap_step;
    while taps.len() < samples {
        let need = (samples - taps.len()).min(sim_cfg.workers);
        let sources: Vec<TapSource> = (0..need).map(TapSource::Worker).collect();
        taps.extend(sim.tap_at(step, &sources)?);
        step += 1;
    }
    Ok(taps)
}

/// Attack seed for sample `i`; shared by every setting so only the
/// observation differs between rows.
pub fn sample_attack_config(cfg: &Config, sample: usize) -> GradInvConfig {
    let mut a = cfg.attack.clone();
    a.seed = derive_seed(cfg.attack.seed, &[cfg.seed, sample as u64]);
    a
}

/// Runs gradient inversion on one tap and scores it against the first
/// example of the tap's batch.
pub fn attack_tap(
    spec: &NetworkSpec,
    tap: &GradientTap,
    attack: &GradInvConfig,
) -> Result<ReconResult> {
    let target = tap.observed_gradient();
    let label = attack.label_known.then(|| tap.batch[0].y);
    let view = tap.observation_view();
    let view_ref: Option<&dyn GradientView> = attack
        .compression_aware
        .then_some(&view as &dyn GradientView);
    let mut r = grad_inversion_with(spec, &tap.params, &target, label, attack, view_ref, None)?;
    let truth = Image::from_flat(spec.input, tap.batch[0].x.clone())?;
    let recon = Image::from_flat(spec.input, r.x.clone())?;
    r.ssim = Some(ssim(&recon, &truth)?);
    Ok(r)
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn attack_config_hash(cfg: &Config) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        attack: &'a GradInvConfig,
        training: &'a super::TrainingConfig,
        tap_step: usize,
    }
    let json = serde_json::to_vec(&Key {
        attack: &cfg.attack,
        training: &cfg.training,
        tap_step: cfg.sweep.tap_step,
    })
    .expect("serializable");
    hash_hex(&json)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub size: usize,
}

/// Everything a bundle was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: Config,
    pub dataset: DatasetInfo,
    pub network: NetworkSpec,
    pub settings: Vec<Setting>,
    pub attack_config_hash: String,
    /// Standard deviations in the SSIM table are population (divide by n).
    pub ssim_std: String,
    /// MIA thresholds are chosen on the evaluation sets themselves.
    pub mia_threshold: String,
    pub mia_members: Vec<usize>,
    pub mia_nonmembers: Vec<usize>,
}

impl Manifest {
    pub fn sha256(&self) -> String {
        hash_hex(&serde_json::to_vec(self).expect("serializable"))
    }
}

/// Per-sample gradient-inversion outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub setting: String,
    pub sample: usize,
    pub step: usize,
    pub worker: usize,
    pub label: usize,
    pub recon_loss: f64,
    pub ssim: f64,
    pub restart: usize,
}

/// One row of the MIA table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaRow {
    pub algorithm: String,
    pub rank_or_ratio: String,
    pub dataset: String,
    pub train_loss: f64,
    pub prediction_accuracy: f64,
    pub prediction_auc: f64,
    pub loss_accuracy: f64,
    pub loss_auc: f64,
    pub cross_entropy_accuracy: f64,
    pub cross_entropy_auc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

impl MiaRow {
    pub fn accuracy(&self, kind: MiaKind) -> f64 {
        match kind {
            MiaKind::Prediction => self.prediction_accuracy,
            MiaKind::Loss => self.loss_accuracy,
            MiaKind::CrossEntropy => self.cross_entropy_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub setting: String,
    pub stage: String,
    pub sample: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub manifest: Manifest,
    pub manifest_sha256: String,
    pub ssim_rows: Vec<ReportRow>,
    pub mia_rows: Vec<MiaRow>,
    pub samples: Vec<SampleRecord>,
    pub failures: Vec<Failure>,
    pub partial: bool,
}

pub const BUNDLE_FILE: &str = "bundle.json";

impl ReportBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let b: ReportBundle = serde_json::from_slice(&bytes)?;
        if b.manifest.sha256() != b.manifest_sha256 {
            return Err(HarnessError::Bundle(format!(
                "{}: manifest hash does not match its contents",
                path.display()
            )));
        }
        Ok(b)
    }

    fn comments(&self) -> Vec<String> {
        let mut c = vec![format!("manifest sha256={}", self.manifest_sha256)];
        if self.partial {
            c.push(format!(
                "partial: {} failure(s), see bundle.json",
                self.failures.len()
            ));
        }
        c
    }
}

/// A loaded dataset, its model, and the expanded settings.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: Config,
    pub dataset: Dataset,
    pub dataset_name: String,
    pub network: NetworkSpec,
    pub settings: Vec<Setting>,
}

impl ExperimentPlan {
    pub fn from_config(config: Config) -> Result<Self> {
        let (dataset, name) = load_dataset(&config.dataset)?;
        Self::with_dataset(config, dataset, name)
    }

    pub fn with_dataset(config: Config, dataset: Dataset, dataset_name: String) -> Result<Self> {
        config.validate()?;
        let network = network_spec(&config.model, &dataset)?;
        let shapes = Network::new(network.clone())?.param_shapes();
        let settings = expand_settings(&config, &shapes);
        Ok(Self {
            config,
            dataset,
            dataset_name,
            network,
            settings,
        })
    }
}

fn save(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn pgm(shape: InputShape, x: &[f64]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    Image::from_flat(shape, x.to_vec())?.write_netpbm(&mut buf)?;
    Ok(buf)
}

/// Runs the sweep. When `artifacts` is set, taps, images, traces and MIA
/// checkpoints are written beneath it.
pub fn run_plan(plan: &ExperimentPlan, artifacts: Option<&Path>) -> Result<ReportBundle> {
    let cfg = &plan.config;
    let artifacts = artifacts.filter(|_| cfg.sweep.save_artifacts);
    let hash = attack_config_hash(cfg);
    let mut failures = Vec::new();
    let mut samples = Vec::new();
    let mut per_setting: Vec<(usize, Vec<f64>)> = Vec::new();

    if cfg.sweep.gradinv {
        for (si, setting) in plan.settings.iter().enumerate() {
            info!(
                "gradinv: {} {}",
                setting.algorithm.display(),
                setting.rank_or_ratio
            );
            let sim_cfg = gradinv_sim_config(cfg, &plan.network, setting.compressor);
            let taps = match collect_taps(
                &sim_cfg,
                &plan.dataset,
                cfg.sweep.tap_step,
                cfg.sweep.samples,
            ) {
                Ok(t) => t,
                Err(e) => {
                    warn!("{}: capture failed: {e}", setting.slug);
                    failures.push(Failure {
                        setting: setting.slug.clone(),
                        stage: "capture".into(),
                        sample: None,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let mut values = Vec::new();
            for (i, tap) in taps.iter().enumerate() {
                let worker = match tap.source {
                    TapSource::Worker(w) => w,
                    TapSource::Aggregate => 0,
                };
                let attack = sample_attack_config(cfg, i);
                match attack_tap(&plan.network, tap, &attack) {
                    Ok(r) => {
                        let s = r.ssim.unwrap_or(f64::NAN);
                        values.push(s);
                        samples.push(SampleRecord {
                            setting: setting.slug.clone(),
                            sample: i,
                            step: tap.step,
                            worker,
                            label: r.label,
                            recon_loss: r.loss,
                            ssim: s,
                            restart: r.restart,
                        });
                        if let Some(dir) = artifacts {
                            let base = format!("{}/sample_{i:02}", setting.slug);
                            save(dir, &format!("taps/{base}.gtap"), &tap.to_dump_bytes())?;
                            save(
                                dir,
                                &format!("images/{base}_recon.pgm"),
                                &pgm(plan.network.input, &r.x)?,
                            )?;
                            save(
                                dir,
                                &format!("images/{base}_truth.pgm"),
                                &pgm(plan.network.input, &tap.batch[0].x)?,
                            )?;
                            let mut trace = Vec::new();
                            r.write_trace_csv(&mut trace)?;
                            save(dir, &format!("traces/{base}.csv"), &trace)?;
                        }
                    }
                    Err(e) => {
                        warn!("{} sample {i}: {e}", setting.slug);
                        failures.push(Failure {
                            setting: setting.slug.clone(),
                            stage: "gradinv".into(),
                            sample: Some(i),
                            message: e.to_string(),
                        });
                    }
                }
            }
            if !values.is_empty() {
                per_setting.push((si, values));
            }
        }
    }

    let baseline = per_setting
        .iter()
        .find(|(si, _)| plan.settings[*si].algorithm == Algorithm::Identity)
        .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64);
    let mut ssim_rows = Vec::new();
    for (si, values) in &per_setting {
        let setting = &plan.settings[*si];
        let stats = ssim_stats(values, baseline.unwrap_or(0.0))?;
        ssim_rows.push(ReportRow {
            algorithm: setting.algorithm.display().to_string(),
            rank_or_ratio: setting.rank_or_ratio.clone(),
            dataset: plan.dataset_name.clone(),
            mean_ssim: stats.mean,
            std_ssim: stats.std,
            percent_of_baseline: stats.percent,
            n_samples: values.len(),
            attack_config_hash: hash.clone(),
        });
    }

    let (members_idx, nonmembers_idx) = if cfg.mia.enabled {
        mia_split(cfg, &plan.dataset)?
    } else {
        (Vec::new(), Vec::new())
    };
    let mut mia_rows = Vec::new();
    if cfg.mia.enabled {
        let members = plan.dataset.select(&members_idx);
        let nonmembers = plan.dataset.select(&nonmembers_idx);
        for setting in &plan.settings {
            info!(
                "mia: {} {}",
                setting.algorithm.display(),
                setting.rank_or_ratio
            );
            let sim_cfg = mia_sim_config(cfg, &plan.network, setting.compressor);
            let outcome = train(&sim_cfg, &members)
                .map_err(HarnessError::from)
                .and_then(|log| {
                    let res = mia_all(
                        &plan.network,
                        &log.final_params,
                        &members.examples,
                        &nonmembers.examples,
                    )?;
                    Ok((log, res))
                });
            match outcome {
                Ok((log, res)) => {
                    if let Some(dir) = artifacts {
                        save(
                            dir,
                            &format!("checkpoints/{}.gshd", setting.slug),
                            &log.final_params.to_checkpoint_bytes(),
                        )?;
                    }
                    let get =
                        |k: MiaKind| res.iter().find(|r| r.kind == k).expect("all kinds present");
                    mia_rows.push(MiaRow {
                        algorithm: setting.algorithm.display().to_string(),
                        rank_or_ratio: setting.rank_or_ratio.clone(),
                        dataset: plan.dataset_name.clone(),
                        train_loss: log.final_loss().unwrap_or(f64::NAN),
                        prediction_accuracy: get(MiaKind::Prediction).balanced_accuracy,
                        prediction_auc: get(MiaKind::Prediction).auc,
                        loss_accuracy: get(MiaKind::Loss).balanced_accuracy,
                        loss_auc: get(MiaKind::Loss).auc,
                        cross_entropy_accuracy: get(MiaKind::CrossEntropy).balanced_accuracy,
                        cross_entropy_auc: get(MiaKind::CrossEntropy).auc,
                        n_members: members.len(),
                        n_nonmembers: nonmembers.len(),
                    });
                }
                Err(e) => {
                    warn!("{}: mia failed: {e}", setting.slug);
                    failures.push(Failure {
                        setting: setting.slug.clone(),
                        stage: "mia".into(),
                        sample: None,
                        message: e.to_string(),
                    });
                }
            }
        }
    }

    let s = plan.dataset.shape;
    let manifest = Manifest {
        tool: "gradshield".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        dataset: DatasetInfo {
            name: plan.dataset_name.clone(),
            channels: s.channels,
            height: s.height,
            width: s.width,
            classes: plan.dataset.classes,
            size: plan.dataset.len(),
        },
        network: plan.network.clone(),
        settings: plan.settings.clone(),
        attack_config_hash: hash,
        ssim_std: "population".into(),
        mia_threshold: "best balanced accuracy on the evaluation sets".into(),
        mia_members: members_idx,
        mia_nonmembers: nonmembers_idx,
    };
    Ok(ReportBundle {
        manifest_sha256: manifest.sha256(),
        manifest,
        ssim_rows,
        mia_rows,
        samples,
        partial: !failures.is_empty(),
        failures,
    })
}

fn write_csv<T: Serialize>(path: &Path, comments: &[String], rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for c in comments {
        writeln!(f, "# {c}").map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `ssim.csv`, `mia.csv`, `samples.csv`, `manifest.json` and
/// `bundle.json` into `dir`.
pub fn render(bundle: &ReportBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let comments = bundle.comments();
    let ssim_path = dir.join("ssim.csv");
    let f = fs::File::create(&ssim_path).map_err(io_err(&ssim_path))?;
    write_report_csv(std::io::BufWriter::new(f), &comments, &bundle.ssim_rows)?;
    write_csv(&dir.join("mia.csv"), &comments, &bundle.mia_rows)?;
    write_csv(&dir.join("samples.csv"), &comments, &bundle.samples)?;
    let manifest = serde_json::to_vec_pretty(&bundle.manifest)?;
    save(dir, "manifest.json", &manifest)?;
    save(dir, BUNDLE_FILE, &serde_json::to_vec_pretty(bundle)?)?;
    Ok(())
}
