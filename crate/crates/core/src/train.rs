//! Zero-reference training loop: ME-Net → enhance → losses → backward → Adam.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{adam_step, AdamState};
use crate::enhancer::enhance;
use crate::error::{Error, Result};
use crate::imageio::load_training_image;
use crate::losses::{total_loss_with_reference, ColorMode, FeatureExtractor, LossBreakdown, LossWeights, VggPrefix};
use crate::menet::{self, MeNetParams, DEFAULT_ITERATIONS, INIT_STD};
use crate::tensor::ImageTensor;
use crate::weights::save_weights;

/// Reference features are cached up to this many bytes; beyond it they are recomputed per step.
const FEATURE_CACHE_BUDGET: usize = 512 << 20;

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm", "pbm"];

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Random(u64),
    Pretrained(PathBuf),
}

impl FeatureSource {
    pub fn build(&self) -> Result<VggPrefix<f32>> {
        match self {
            FeatureSource::Random(seed) => Ok(VggPrefix::random(*seed)),
            FeatureSource::Pretrained(path) => VggPrefix::from_weight_file(path),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub color_mode: ColorMode,
    pub feature_extractor: FeatureSource,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub iterations: usize,
    /// Optional global gradient-norm clip.
    pub clip_grad_norm: Option<f32>,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            data_dir: data_dir.into(),
            output_dir: output_dir.into(),
            image_size: 256,
            batch_size: 32,
            epochs: 193,
            learning_rate: 1e-4,
            seed: 0,
            loss_weights: LossWeights::default(),
            color_mode: ColorMode::Literal,
            feature_extractor: FeatureSource::Random(0),
            checkpoint_every: 0,
            iterations: DEFAULT_ITERATIONS,
            clip_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.image_size < crate::losses::PATCH_SIZE {
            return bad(format!(
                "image size {} is smaller than one lightness patch",
                self.image_size
            ));
        }
        if self.iterations < 1 {
            return bad("iteration count must be at least 1".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        self.loss_weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub parts: LossBreakdown,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<StepRecord>,
    pub params: MeNetParams<f32>,
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if is_image && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

struct ItemResult {
    total: f64,
    parts: LossBreakdown,
    grads: MeNetParams<f32>,
}

#[allow(clippy::too_many_arguments)]
fn item_gradients(
    image: &ImageTensor,
    reference: Option<&ImageTensor>,
    params: &MeNetParams<f32>,
    fx: &VggPrefix<f32>,
    cfg: &TrainConfig,
) -> Result<ItemResult> {
    let (e, n, cache) = menet::forward(image, params)?;
    let result = enhance(image, &e, &n)?;
    let owned;
    let reference = match reference {
        Some(r) => r,
        None => {
            owned = fx.features(image)?;
            &owned
        }
    };
    let loss = total_loss_with_reference(image, &result, &e, &n, &cfg.loss_weights, cfg.color_mode, fx, reference)?;
    let grads = menet::backward(&cache, params, &loss.grad_e, &loss.grad_n)?;
    Ok(ItemResult {
        total: loss.total,
        parts: loss.parts,
        grads,
    })
}

fn check_finite(record: &StepRecord) -> Result<()> {
    for (name, v) in record.parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step: record.step,
            });
        }
    }
    if !record.total.is_finite() {
        return Err(Error::NonFinite {
            component: "total".into(),
            step: record.step,
        });
    }
    Ok(())
}

/// Batch-mean of per-item gradients, reduced in batch order in `f64`.
fn reduce_gradients(items: &[ItemResult], template: &MeNetParams<f32>, clip: Option<f32>) -> MeNetParams<f32> {
    let mut acc: Vec<Vec<f64>> = template.buffers().iter().map(|b| vec![0.0; b.len()]).collect();
    for item in items {
        for (a, g) in acc.iter_mut().zip(item.grads.buffers()) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += *y as f64;
            }
        }
    }
    let inv = 1.0 / items.len() as f64;
    let mut scale = inv;
    if let Some(max_norm) = clip {
        let norm = acc.iter().flatten().map(|v| (v * inv) * (v * inv)).sum::<f64>().sqrt();
        if norm > max_norm as f64 {
            scale *= max_norm as f64 / norm;
        }
    }
    let mut out = template.clone();
    for (dst, src) in out.buffers_mut().into_iter().zip(acc) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s * scale) as f32;
        }
    }
    out
}

/// CSV with header `step,total,col,cen,ill,sem,noi`, values as f32 with 9 significant digits.
pub fn history_csv(history: &[StepRecord]) -> String {
    let mut s = String::from("step,total,col,cen,ill,sem,noi\n");
    let f = |v: f64| format!("{:.8e}", v as f32);
    for r in history {
        let p = &r.parts;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            f(r.total),
            f(p.col),
            f(p.cen),
            f(p.ill),
            f(p.sem),
            f(p.noi)
        );
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let files = list_images(&cfg.data_dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no images found in {}", cfg.data_dir.display())));
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;

    let images = files
        .par_iter()
        .map(|p| load_training_image(p, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    let batch_size = if images.len() < cfg.batch_size {
        log::warn!(
            "only {} images for batch size {}; training on smaller batches",
            images.len(),
            cfg.batch_size
        );
        images.len()
    } else {
        cfg.batch_size
    };

    let fx = cfg.feature_extractor.build()?;
    let half = cfg.image_size / 2;
    let feature_bytes = images.len() * 128 * half * half * 4;
    let references = if feature_bytes <= FEATURE_CACHE_BUDGET {
        Some(
            images
                .par_iter()
                .map(|img| fx.features(img))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let mut params = MeNetParams::<f32>::init(cfg.seed, cfg.iterations, INIT_STD);
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::new();
    let csv_path = cfg.output_dir.join("loss_history.csv");

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let items = batch
                .par_iter()
                .map(|&i| {
                    let reference = references.as_ref().map(|r| &r[i]);
                    item_gradients(&images[i], reference, &params, &fx, cfg)
                })
                .collect::<Result<Vec<_>>>()?;

            let k = items.len() as f64;
            let mut parts = LossBreakdown::default();
            let mut total = 0.0;
            for it in &items {
                total += it.total;
                parts.col += it.parts.col;
                parts.cen += it.parts.cen;
                parts.ill += it.parts.ill;
                parts.sem += it.parts.sem;
                parts.noi += it.parts.noi;
            }
            let record = StepRecord {
                step: history.len() + 1,
                total: total / k,
                parts: LossBreakdown {
                    col: parts.col / k,
                    cen: parts.cen / k,
                    ill: parts.ill / k,
                    sem: parts.sem / k,
                    noi: parts.noi / k,
                },
            };
            if let Err(e) = check_finite(&record) {
                history.push(record);
                write_file(&csv_path, &history_csv(&history))?;
                return Err(e);
            }
            let grads = reduce_gradients(&items, &params, cfg.clip_grad_norm);
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            log::debug!("step {} loss {:.6}", record.step, record.total);
            history.push(record);
        }
        let last = history.last().map(|r| r.total).unwrap_or(f64::NAN);
        log::info!("epoch {epoch}/{} step {} loss {last:.6}", cfg.epochs, history.len());
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
            let path = cfg.output_dir.join(format!("checkpoint_epoch{epoch:04}.dlwt"));
            save_weights(&params, &path, Some(history.len() as u64))?;
            write_file(&csv_path, &history_csv(&history))?;
        }
    }

    let checkpoint = cfg.output_dir.join("final.dlwt");
    save_weights(&params, &checkpoint, Some(history.len() as u64))?;
    write_file(&csv_path, &history_csv(&history))?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        params,
    })
}
