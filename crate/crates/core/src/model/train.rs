//! Desk-scale fine-stage training: routed sub-batches, AdamW with decoupled
//! weight decay and a cosine learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{classify, forward_logits};
use super::params::is_no_decay;
use super::{ModelError, ModelParams};
use crate::complexity::{CoarseStage, DescriptorConfig, EstimatorParams, Granularity};
use crate::estimator::{compute_quantile_targets, train_estimator, CoarseTrainConfig, ComplexityCorpus, TraceRow};
use crate::image::{
    generate, load_image, resize_rgb_bilinear, to_grayscale, RgbImage, SyntheticKind, SyntheticSpec, TEXTURE_CLASSES,
};
use crate::tensor::{Graph, ParamStore, Tensor};

/// Images with integer class labels, all of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<RgbImage>,
    labels: Vec<usize>,
    classes: usize,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<RgbImage>, labels: Vec<usize>, classes: usize) -> Result<Self, ModelError> {
        let names = (0..classes).map(|c| c.to_string()).collect();
        Self::with_names(images, labels, names)
    }

    pub fn with_names(images: Vec<RgbImage>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self, ModelError> {
        let classes = class_names.len();
        if images.is_empty() {
            return Err(ModelError::Dataset("no images".into()));
        }
        if images.len() != labels.len() {
            return Err(ModelError::Dataset(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::Dataset(format!("label {l} out of range for {classes} classes")));
        }
        let (w, h) = (images[0].width(), images[0].height());
        if images.iter().any(|im| im.width() != w || im.height() != h) {
            return Err(ModelError::Dataset("images differ in size".into()));
        }
        Ok(Self { images, labels, classes, class_names })
    }

    /// `n` images of the three texture classes (smooth blobs, coarse
    /// gratings, fine gratings with speckle), labels cycling 0, 1, 2.
    pub fn synthetic_textures(n: usize, side: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % TEXTURE_CLASSES;
            let kind = SyntheticKind::TexturedClass { class, seed: rng.random() };
            images.push(generate(&SyntheticSpec { kind, width: side, height: side }).to_rgb());
            labels.push(class);
        }
        let names = ["blobs", "coarse-texture", "fine-texture"].map(String::from).to_vec();
        Self::with_names(images, labels, names)
    }

    /// One sub-directory per class (sorted by name); every image is resized
    /// to `side x side`.
    pub fn load_folder(dir: impl AsRef<Path>, side: usize) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let read = |p: &Path| fs::read_dir(p).map_err(|e| ModelError::Dataset(format!("{}: {e}", p.display())));
        let mut class_dirs: Vec<_> = read(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut names = Vec::new();
        for (label, cdir) in class_dirs.iter().enumerate() {
            names.push(cdir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            let mut files: Vec<_> = read(cdir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
            files.sort();
            for f in files {
                images.push(resize_rgb_bilinear(&load_image(&f)?, side, side)?);
                labels.push(label);
            }
        }
        Self::with_names(images, labels, names)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples (or all if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            class_names: self.class_names.clone(),
        }
    }
}

/// Where each image's granularity comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum RoutingSource {
    /// Frozen coarse stage.
    Adaptive(CoarseStage),
    Fixed(Granularity),
    /// Uniform draw per image from a seeded stream.
    Random { seed: u64 },
}

impl RoutingSource {
    pub fn assign(&self, images: &[RgbImage]) -> Result<Vec<Granularity>, ModelError> {
        Ok(match self {
            Self::Adaptive(stage) => images
                .par_iter()
                .map(|im| stage.decide(&to_grayscale(im)).map(|d| d.granularity))
                .collect::<Result<_, _>>()?,
            Self::Fixed(g) => vec![*g; images.len()],
            Self::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..images.len()).map(|_| Granularity::ALL[rng.random_range(0..3)]).collect()
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Self::Adaptive(_) => "adaptive".into(),
            Self::Fixed(g) => format!("fixed:{}", g.level()),
            Self::Random { seed } => format!("random:{seed}"),
        }
    }
}

/// Fit the coarse stage on a set of images: descriptors, quantile pseudo
/// labels scored with `init`, then estimator training.
pub fn calibrate_coarse_stage(
    images: &[RgbImage],
    descriptors: DescriptorConfig,
    resize: Option<usize>,
    init: EstimatorParams,
    cfg: &CoarseTrainConfig,
) -> Result<(CoarseStage, Vec<TraceRow>), ModelError> {
    let probe = CoarseStage { params: init, descriptors, resize };
    let features = images
        .par_iter()
        .map(|im| probe.features(&to_grayscale(im)))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = ComplexityCorpus::new(features.into_iter().enumerate().map(|(i, f)| (format!("{i}"), f)).collect())?;
    let targets = compute_quantile_targets(&corpus, &init)?;
    let (params, trace) = train_estimator(&corpus, &targets, init, cfg)?;
    Ok((CoarseStage { params, descriptors, resize }, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub flip: bool,
    pub seed: u64,
}

impl FineTrainConfig {
    /// Large-scale recipe: lr 1e-4, weight decay 1e-4.
    pub fn reference() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            flip: false,
            seed: 0,
        }
    }

    /// Tiny models trained for a few hundred steps need a larger step size.
    pub fn desk() -> Self {
        Self { lr: 5e-3, ..Self::reference() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be > 0");
        }
        Ok(())
    }
}

impl Default for FineTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Cosine annealing from `base` at step 0 to 0 at step `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// AdamW with decoupled weight decay; parameters matching [`is_no_decay`]
/// are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    t: i32,
    cfg: FineTrainConfig,
}

impl AdamW {
    pub fn new(cfg: FineTrainConfig) -> Self {
        Self { m: HashMap::new(), v: HashMap::new(), t: 0, cfg }
    }

    /// Apply one update with step size `lr` from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, value, grad) in store.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape()));
            let decay = if is_no_decay(name) { 0.0 } else { c.weight_decay };
            let it = value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (mi, vi)) in it {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *p -= lr * (update + decay * *p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-granularity row indices of a batch.
fn split_by_route(batch: &[usize], routes: &[Granularity]) -> [Vec<usize>; 3] {
    let mut out: [Vec<usize>; 3] = Default::default();
    for &i in batch {
        out[routes[i].index()].push(i);
    }
    out
}

struct SubBatchResult {
    loss: f64,
    correct: usize,
    grads: Vec<(String, Tensor)>,
}

/// Train on `data` with every image sent to its routed granularity. Each
/// mini-batch is split into per-granularity sub-batches whose losses are
/// weighted by their share of the batch; sub-batches run in parallel and
/// gradients are summed before the optimizer step.
pub fn train_fine_toy(
    mut params: ModelParams,
    data: &LabeledDataset,
    routing: &RoutingSource,
    cfg: &FineTrainConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>), ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Dataset("no images".into()));
    }
    if data.classes() > params.config.classes {
        return Err(ModelError::Dataset(format!(
            "dataset has {} classes, model head has {}",
            data.classes(),
            params.config.classes
        )));
    }
    let routes = routing.assign(data.images())?;
    for g in Granularity::ALL {
        if params.config.level(g).depth == 0 && routes.contains(&g) {
            return Err(ModelError::Config(format!("images routed to granularity {g}, which has no blocks")));
        }
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(*cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let flips: Vec<bool> = batch.iter().map(|_| cfg.flip && rng.random::<bool>()).collect();
            let flip_of: HashMap<usize, bool> = batch.iter().copied().zip(flips).collect();
            let parts = split_by_route(batch, &routes);
            let store = &params.store;
            let config = &params.config;
            let results: Vec<Option<SubBatchResult>> = parts
                .par_iter()
                .enumerate()
                .map(|(gi, idx)| -> Result<Option<SubBatchResult>, ModelError> {
                    if idx.is_empty() {
                        return Ok(None);
                    }
                    let flipped: Vec<RgbImage> = idx
                        .iter()
                        .filter(|i| flip_of[i])
                        .map(|&i| data.images()[i].flip_horizontal())
                        .collect();
                    let mut fl = flipped.iter();
                    let imgs: Vec<&RgbImage> = idx
                        .iter()
                        .map(|&i| if flip_of[&i] { fl.next().expect("flipped copy") } else { &data.images()[i] })
                        .collect();
                    let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
                    let mut graph = Graph::new();
                    let logits = forward_logits(&mut graph, config, store, &imgs, Granularity::ALL[gi], None)?;
                    let preds = classify(graph.value(logits));
                    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
                    let ce = graph.cross_entropy(logits, &labels)?;
                    let loss = graph.value(ce).item();
                    let weighted = graph.scale(ce, idx.len() as f64 / batch.len() as f64);
                    let grads = graph.param_grads(weighted)?;
                    Ok(Some(SubBatchResult { loss: loss * idx.len() as f64, correct, grads }))
                })
                .collect::<Result<_, _>>()?;
            params.store.zero_grads();
            for r in results.into_iter().flatten() {
                loss_sum += r.loss;
                correct += r.correct;
                for (name, g) in &r.grads {
                    params.store.accumulate_grad(name, g)?;
                }
            }
            let lr = cosine_lr(cfg.lr, step, total_steps);
            opt.step(&mut params.store, lr);
            params.store.round_to_f32();
            step += 1;
        }
        let loss = loss_sum / data.len() as f64;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { epoch, loss });
        }
        trace.push(EpochMetrics { epoch, loss, accuracy: correct as f64 / data.len() as f64 });
    }
    params.store.zero_grads();
    Ok((params, trace))
}

/// Top-1 accuracy of `params` on `data` under `routing`.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset, routing: &RoutingSource) -> Result<f64, ModelError> {
    let routes = routing.assign(data.images())?;
    let all: Vec<usize> = (0..data.len()).collect();
    let parts = split_by_route(&all, &routes);
    let correct: usize = parts
        .par_iter()
        .enumerate()
        .map(|(gi, idx)| -> Result<usize, ModelError> {
            let mut hits = 0;
            for chunk in idx.chunks(64) {
                let imgs: Vec<&RgbImage> = chunk.iter().map(|&i| &data.images()[i]).collect();
                let mut graph = Graph::new();
                let logits = forward_logits(&mut graph, &params.config, &params.store, &imgs, Granularity::ALL[gi], None)?;
                let preds = classify(graph.value(logits));
                hits += preds.iter().zip(chunk).filter(|(p, &i)| **p == data.labels()[i]).count();
            }
            Ok(hits)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}
