//! SGD training with polynomial learning-rate decay, the ablation
//! configuration matrix, checkpoints and CSV logging.
//!
//! Randomness is stateless per iteration: batch `t` and the augmentation of
//! its slot `s` come from named sub-streams keyed by `(seed, t)` and
//! `(seed, t·B + s)`. A checkpoint therefore only needs parameters,
//! momentum buffers and the iteration counter to resume exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;

use crate::autodiff::Graph;
use crate::backbone::BackboneConfig;
use crate::dataset::{augment, Scene};
use crate::error::{Error, Result};
use crate::head::MaskSource;
use crate::labels::LabelMap;
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{Centers, Model, ModelConfig};
use crate::params::Parameters;
use crate::seeds;
use crate::similarity::{AbsoluteScores, CenterDistance};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "iter,lr,intra,inter,dice,aux,total,acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterTarget {
    None,
    Global,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLoss {
    None,
    Ce,
    Dice,
}

/// Pixel reduction of the intra-class loss within one scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub prediction_centers: Centers,
    pub inter_target: InterTarget,
    pub intra_target: Centers,
    pub mask_loss: MaskLoss,
    pub intra_reduction: Reduction,
    pub inter_distance: CenterDistance,
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub normalize_mask: bool,
    /// Initial mask activation of the CCS head.
    pub mask_prior: f64,
    /// Square training crop; 0 trains on whole scenes.
    pub crop: usize,
    pub log_interval: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    /// Threads for per-scene passes. Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            max_iters: 2000,
            poly_power: 0.9,
            batch_size: 8,
            weights: LossWeights::default(),
            seed: 0,
            prediction_centers: Centers::Adaptive,
            inter_target: InterTarget::Adaptive,
            intra_target: Centers::Adaptive,
            mask_loss: MaskLoss::Dice,
            intra_reduction: Reduction::Mean,
            inter_distance: CenterDistance::SoftmaxCosine,
            classes: 6,
            backbone: BackboneConfig::default(),
            normalize_mask: true,
            mask_prior: 0.5,
            crop: 0,
            log_interval: 10,
            max_grad_norm: 0.0,
            workers: 1,
        }
    }
}

/// Named rows of the ablation matrix, from the global-center baseline to
/// the full model.
pub const PRESETS: [&str; 5] = ["baseline", "dataset-inter", "scene-inter", "ccs-no-inter", "ccsnet"];

fn parse_enum<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key} must be one of {}, got {value:?}", names.join("|")))
        })
}

fn enum_name<T: PartialEq>(value: T, options: &[(&'static str, T)]) -> &'static str {
    options.iter().find(|(_, v)| *v == value).map(|(n, _)| *n).expect("listed")
}

const CENTERS: [(&str, Centers); 2] = [("global", Centers::Global), ("adaptive", Centers::Adaptive)];
const INTER: [(&str, InterTarget); 3] = [
    ("none", InterTarget::None),
    ("global", InterTarget::Global),
    ("adaptive", InterTarget::Adaptive),
];
const MASK: [(&str, MaskLoss); 3] = [("none", MaskLoss::None), ("ce", MaskLoss::Ce), ("dice", MaskLoss::Dice)];
const REDUCTION: [(&str, Reduction); 2] = [("sum", Reduction::Sum), ("mean", Reduction::Mean)];
const DISTANCE: [(&str, CenterDistance); 2] = [
    ("softmax-cosine", CenterDistance::SoftmaxCosine),
    ("raw-cosine", CenterDistance::RawCosine),
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (pred, inter, intra) = match name {
            "baseline" => (Centers::Global, InterTarget::None, Centers::Global),
            "dataset-inter" => (Centers::Global, InterTarget::Global, Centers::Global),
            "scene-inter" => (Centers::Global, InterTarget::Adaptive, Centers::Global),
            "ccs-no-inter" => (Centers::Adaptive, InterTarget::None, Centers::Adaptive),
            "ccsnet" => (Centers::Adaptive, InterTarget::Adaptive, Centers::Adaptive),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            prediction_centers: pred,
            inter_target: inter,
            intra_target: intra,
            ..Self::default()
        })
    }

    /// The CCS head exists whenever any axis refers to adaptive centers.
    pub fn needs_ccs(&self) -> bool {
        self.prediction_centers == Centers::Adaptive
            || self.intra_target == Centers::Adaptive
            || self.inter_target == InterTarget::Adaptive
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            backbone: self.backbone.clone(),
            ccs: self.needs_ccs(),
            normalize_mask: self.normalize_mask,
            mask_prior: self.mask_prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.poly_power >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config("poly_power and max_grad_norm must be non-negative".into()));
        }
        if self.max_iters == 0 || self.batch_size == 0 || self.log_interval == 0 || self.workers == 0 {
            return Err(Error::Config(
                "max_iters, batch_size, log_interval and workers must be positive".into(),
            ));
        }
        if self.crop % self.backbone.stride != 0 {
            return Err(Error::Config("crop must be a multiple of the backbone stride".into()));
        }
        if !(self.mask_prior > 0.0 && self.mask_prior < 1.0) {
            return Err(Error::Config("mask_prior must lie in (0, 1)".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        self.weights.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "alpha" => self.weights.alpha = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "aux_weight" => self.weights.aux = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "prediction_centers" => self.prediction_centers = parse_enum(key, value, &CENTERS)?,
            "inter_target" => self.inter_target = parse_enum(key, value, &INTER)?,
            "intra_target" => self.intra_target = parse_enum(key, value, &CENTERS)?,
            "mask_loss" => self.mask_loss = parse_enum(key, value, &MASK)?,
            "intra_reduction" => self.intra_reduction = parse_enum(key, value, &REDUCTION)?,
            "inter_distance" => self.inter_distance = parse_enum(key, value, &DISTANCE)?,
            "classes" => self.classes = num(key, value)?,
            "widths" => {
                self.backbone.widths = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "stride" => self.backbone.stride = num(key, value)?,
            "normalize_mask" => self.normalize_mask = num(key, value)?,
            "mask_prior" => self.mask_prior = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "log_interval" => self.log_interval = num(key, value)?,
            "max_grad_norm" => self.max_grad_norm = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.backbone.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("base_lr", self.base_lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("max_iters", self.max_iters.to_string());
        kv("poly_power", self.poly_power.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha", self.weights.alpha.to_string());
        kv("beta", self.weights.beta.to_string());
        kv("aux_weight", self.weights.aux.to_string());
        kv("seed", self.seed.to_string());
        kv("prediction_centers", enum_name(self.prediction_centers, &CENTERS).into());
        kv("inter_target", enum_name(self.inter_target, &INTER).into());
        kv("intra_target", enum_name(self.intra_target, &CENTERS).into());
        kv("mask_loss", enum_name(self.mask_loss, &MASK).into());
        kv("intra_reduction", enum_name(self.intra_reduction, &REDUCTION).into());
        kv("inter_distance", enum_name(self.inter_distance, &DISTANCE).into());
        kv("classes", self.classes.to_string());
        kv("widths", widths.join(","));
        kv("stride", self.backbone.stride.to_string());
        kv("normalize_mask", self.normalize_mask.to_string());
        kv("mask_prior", self.mask_prior.to_string());
        kv("crop", self.crop.to_string());
        kv("log_interval", self.log_interval.to_string());
        kv("max_grad_norm", self.max_grad_norm.to_string());
        kv("workers", self.workers.to_string());
        s
    }
}

/// `base · (1 - iter/max)^power`.
pub fn poly_lr(iter: usize, max_iters: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iters || max_iters == 0 {
        return Err(Error::contract(format!("iteration {iter} outside 0..={max_iters}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iters as f64).powf(power))
}

/// Heavy-ball SGD: `v ← μv + g; p ← p - lr·v`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::contract("parameter, gradient and momentum lists differ in length"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::contract(format!(
                "shape mismatch: param {:?}, grad {:?}, momentum {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Outcome of one scene's forward/backward pass.
#[derive(Clone, Debug)]
pub struct ScenePass {
    pub grads: Vec<Tensor>,
    pub losses: LossBreakdown,
    /// Value of the differentiated objective, which adds the probe loss to
    /// `losses.total` when the probe is active.
    pub objective: f64,
    pub correct: usize,
    pub labeled: usize,
}

fn intra<'g>(scores: AbsoluteScores<'g>, labels: &LabelMap, reduction: Reduction) -> Result<crate::autodiff::Var<'g>> {
    match reduction {
        Reduction::Sum => losses::intra_loss(scores, labels),
        Reduction::Mean => losses::ce_loss(scores, labels),
    }
}

fn accuracy(scores: &Tensor, labels: &LabelMap) -> (usize, usize) {
    let (k, n) = (scores.shape()[0], scores.shape()[1]);
    let v = scores.data();
    let mut correct = 0;
    for i in 0..n {
        if let Some(y) = labels.class_at(i) {
            let best = (1..k).fold(0, |b, j| if v[j * n + i] > v[b * n + i] { j } else { b });
            correct += usize::from(best == y);
        }
    }
    (correct, labels.labeled_count())
}

/// Forward/backward of one scene. The logged `total` is the weighted sum of
/// the configured losses; when the global classifier plays no part in the
/// objective it is still fit, as a probe on detached features, so global
/// centers exist for analysis.
pub fn scene_pass(model: &Model, config: &TrainConfig, scene: &Scene) -> Result<ScenePass> {
    let g = Graph::new();
    let bound = model.bind(&g, true);
    let probe = config.intra_target != Centers::Global
        && config.inter_target != InterTarget::Global
        && config.prediction_centers != Centers::Global;
    let out = bound.forward(g.constant(scene.image.clone()), MaskSource::Predicted, probe)?;
    let labels = scene.labels.resize_nearest(out.features.height, out.features.width)?;

    let intra_loss = intra(out.scores(config.intra_target)?, &labels, config.intra_reduction)?;
    let inter_loss = match config.inter_target {
        InterTarget::None => None,
        InterTarget::Global => Some(losses::inter_loss_dataset(bound.global.weight(), config.inter_distance)?),
        InterTarget::Adaptive => {
            let ccs = out.ccs.as_ref().ok_or_else(|| Error::Config("scene inter loss needs the CCS head".into()))?;
            Some(losses::inter_loss_scene(ccs.centers, config.inter_distance)?)
        }
    };
    let mask_loss = match (&out.ccs, config.mask_loss) {
        (Some(c), MaskLoss::Dice) => Some(losses::dice_loss(c.mask, &labels)?),
        (Some(c), MaskLoss::Ce) => Some(losses::ce_loss(AbsoluteScores(c.mask_logits), &labels)?),
        _ => None,
    };
    let aux_loss = losses::ce_loss(out.aux, &labels)?;

    let w = &config.weights;
    let mut objective = intra_loss.add(aux_loss.scale(w.aux))?;
    if let Some(l) = inter_loss {
        objective = objective.add(l.scale(w.alpha))?;
    }
    if let Some(l) = mask_loss {
        objective = objective.add(l.scale(w.beta))?;
    }
    let value = |v: Option<crate::autodiff::Var<'_>>| v.map_or(Ok(0.0), |v| v.item());
    let breakdown = LossBreakdown::new(
        intra_loss.item()?,
        value(inter_loss)?,
        value(mask_loss)?,
        aux_loss.item()?,
        w,
    );
    if probe {
        objective = objective.add(losses::ce_loss(out.global, &labels)?)?;
    }
    let (correct, labeled) = accuracy(&out.scores(config.prediction_centers)?.var().value(), &labels);

    let vars = bound.vars();
    let objective_value = objective.item()?;
    let grads = g.backward(objective)?;
    Ok(ScenePass {
        grads: vars.iter().map(|&v| grads.get_or_zeros(v)).collect(),
        losses: breakdown,
        objective: objective_value,
        correct,
        labeled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Completed iterations, starting at 1.
    pub iter: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub acc: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.lr, l.intra, l.inter, l.dice, l.aux, l.total, self.acc
        )
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    velocity: Vec<Tensor>,
    iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), &mut seeds::substream(config.seed, seeds::INIT, 0))?;
        let velocity = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            model,
            velocity,
            iter: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Thread count is the one setting that may change mid-run: results do
    /// not depend on it.
    pub fn set_workers(&mut self, workers: usize) -> Result<()> {
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.config.workers = workers;
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.max_iters
    }

    /// The augmented scenes of iteration `iter`, in slot order.
    pub fn batch(&self, scenes: &[Scene], iter: usize) -> Result<Vec<Scene>> {
        if scenes.is_empty() {
            return Err(Error::contract("no training scenes"));
        }
        let b = self.config.batch_size.min(scenes.len());
        let picks = index::sample(&mut seeds::substream(self.config.seed, seeds::SAMPLE, iter as u64), scenes.len(), b);
        let crop = (self.config.crop > 0).then_some((self.config.crop, self.config.crop));
        picks
            .iter()
            .enumerate()
            .map(|(slot, i)| {
                let key = (iter * self.config.batch_size + slot) as u64;
                augment(&scenes[i], crop, &mut seeds::substream(self.config.seed, seeds::AUGMENT, key))
            })
            .collect()
    }

    fn passes(&self, batch: &[Scene]) -> Result<Vec<ScenePass>> {
        let workers = self.config.workers.min(batch.len());
        if workers <= 1 {
            return batch.iter().map(|s| scene_pass(&self.model, &self.config, s)).collect();
        }
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| scene_pass(&self.model, &self.config, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("scene worker panicked")?);
            }
            Ok(out)
        })
    }

    /// One SGD iteration over a sampled batch.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::contract("training already reached max_iters"));
        }
        let t = self.iter;
        let batch = self.batch(scenes, t)?;
        let passes = self.passes(&batch)?;

        let scale = 1.0 / passes.len() as f64;
        let mut grads = passes[0].grads.clone();
        for p in &passes[1..] {
            for (acc, g) in grads.iter_mut().zip(&p.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        let mut norm_sq = 0.0;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let losses = LossBreakdown::mean(&passes.iter().map(|p| p.losses).collect::<Vec<_>>(), &self.config.weights);
        if !losses.total.is_finite() || !norm_sq.is_finite() {
            return Err(Error::Divergence { iter: t + 1 });
        }
        let clip = self.config.max_grad_norm;
        if clip > 0.0 && norm_sq.sqrt() > clip {
            let f = clip / norm_sq.sqrt();
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= f));
        }

        let lr = poly_lr(t, self.config.max_iters, self.config.base_lr, self.config.poly_power)?;
        let mut params: Vec<&mut Tensor> = self.model.params_mut().into_iter().map(|(_, t)| t).collect();
        sgd_step(&mut params, &grads, &mut self.velocity, lr, self.config.momentum)?;
        self.iter += 1;

        let correct: usize = passes.iter().map(|p| p.correct).sum();
        let labeled: usize = passes.iter().map(|p| p.labeled).sum();
        Ok(StepLog {
            iter: self.iter,
            lr,
            losses,
            acc: correct as f64 / labeled.max(1) as f64,
        })
    }

    /// Steps until `until` iterations (capped at `max_iters`) are complete,
    /// calling `on_step` after each one.
    pub fn run_until(
        &mut self,
        scenes: &[Scene],
        until: usize,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.iter < until.min(self.config.max_iters) {
            let log = self.step(scenes)?;
            on_step(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Trains to completion, writing a CSV row every `log_interval`
    /// iterations and after the last one.
    pub fn run(&mut self, scenes: &[Scene], csv: &mut impl std::io::Write) -> Result<Vec<StepLog>> {
        let (interval, max) = (self.config.log_interval, self.config.max_iters);
        let io = |e: std::io::Error| Error::io("<training log>", e);
        if self.iter == 0 {
            writeln!(csv, "{LOG_HEADER}").map_err(io)?;
        }
        self.run_until(scenes, max, |log| {
            if log.iter % interval == 0 || log.iter == max {
                writeln!(csv, "{}", log.csv_row()).map_err(io)?;
            }
            Ok(())
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.model.params();
        Checkpoint {
            iteration: self.iter,
            config: self.config.to_text(),
            params: params.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect(),
            momentum: params
                .iter()
                .zip(&self.velocity)
                .map(|((n, _), v)| (n.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ckpt.train_config()?)?;
        load_named(&mut trainer.model.params_mut(), &ckpt.params)?;
        let names: Vec<String> = trainer.model.params().into_iter().map(|(n, _)| n).collect();
        let mut velocity: Vec<(String, &mut Tensor)> = names.into_iter().zip(trainer.velocity.iter_mut()).collect();
        load_named(&mut velocity, &ckpt.momentum)?;
        if ckpt.iteration > trainer.config.max_iters {
            return Err(Error::contract("checkpoint iteration exceeds max_iters"));
        }
        trainer.iter = ckpt.iteration;
        Ok(trainer)
    }
}

fn load_named(targets: &mut [(String, &mut Tensor)], source: &[(String, Tensor)]) -> Result<()> {
    if targets.len() != source.len() {
        return Err(Error::contract(format!(
            "checkpoint holds {} tensors where the model has {}",
            source.len(),
            targets.len()
        )));
    }
    for (name, t) in targets.iter_mut() {
        let (_, value) = source
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::contract(format!("checkpoint lacks {name}")))?;
        if value.shape() != t.shape() {
            return Err(Error::contract(format!("{name}: shape {:?} expected {:?}", value.shape(), t.shape())));
        }
        **t = value.clone();
    }
    Ok(())
}

// ------------------------------------------------------------ checkpoint

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCS1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";
const ITER_ENTRY: &str = "meta/iteration";
const CONFIG_ENTRY: &str = "meta/config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    /// Canonical [`TrainConfig`] text.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.bytes.len(), format!("truncated {what}")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config)
    }

    /// Rebuilds the trained model.
    pub fn model(&self) -> Result<(TrainConfig, Model)> {
        let trainer = Trainer::from_checkpoint(self)?;
        Ok((trainer.config, trainer.model))
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (ITER_ENTRY.to_string(), Tensor::scalar(self.iteration as f64)),
            (
                CONFIG_ENTRY.to_string(),
                Tensor::from_fn(&[self.config.len()], |i| self.config.as_bytes()[i] as f64),
            ),
        ];
        out.extend(self.params.iter().cloned());
        out.extend(
            self.momentum
                .iter()
                .map(|(n, t)| (format!("{MOMENTUM_PREFIX}{n}"), t.clone())),
        );
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("entry count")?;
        let (mut iteration, mut config) = (None, None);
        let (mut params, mut momentum) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let start = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(start + 4, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::format(r.pos - 4, format!("implausible rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::format(r.pos, "extents exceed file size"))?;
            let payload = r.take(8 * numel, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            match name.as_str() {
                ITER_ENTRY => iteration = Some(t.item()? as usize),
                CONFIG_ENTRY => {
                    let text: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
                    config = Some(
                        String::from_utf8(text).map_err(|_| Error::format(start, "config entry is not UTF-8"))?,
                    );
                }
                _ => match name.strip_prefix(MOMENTUM_PREFIX) {
                    Some(n) => momentum.push((n.to_string(), t)),
                    None => params.push((name, t)),
                },
            }
        }
        Ok(Self {
            iteration: iteration.ok_or_else(|| Error::format(bytes.len(), "missing iteration entry"))?,
            config: config.ok_or_else(|| Error::format(bytes.len(), "missing config entry"))?,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }
}
