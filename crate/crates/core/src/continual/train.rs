//! Per-stage optimization: AdamW with decoupled weight decay and a cosine schedule.

use serde::{Deserialize, Serialize};

use super::pseudo::{merge_pseudo_labels, PseudoLabelStore, PseudoMode};
use crate::distill::{ilt_loss, lwf_loss, plop_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::heads::{bce_grad_logits, bce_loss};
use crate::model::{ModelGrads, SegModel};
use crate::phantom::Sample;
use crate::tensor::Grid;
use crate::ClassId;

/// Continual-learning strategy for stages after the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Pseudo labels for old classes, no distillation.
    #[default]
    Ours,
    /// Pseudo labels plus prediction distillation.
    Lwf,
    /// Pseudo labels plus decoder-feature distillation.
    Ilt,
    /// Pseudo labels plus multi-scale pooled-feature distillation.
    Plop,
    /// New-class losses only.
    Finetune,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::Lwf, Method::Ilt, Method::Plop, Method::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Lwf => "lwf",
            Method::Ilt => "ilt",
            Method::Plop => "plop",
            Method::Finetune => "finetune",
        }
    }

    pub fn uses_pseudo_labels(self) -> bool {
        self != Method::Finetune
    }

    /// Whether training needs a second forward pass through a frozen teacher.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::Lwf | Method::Ilt | Method::Plop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pseudo_mode: PseudoMode,
    /// Prediction threshold `tau`.
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seed for model initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 8,
            pseudo_mode: PseudoMode::Hard,
            threshold: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Cosine decay from `lr` towards 0 over `total` iterations.
    pub fn lr_at(&self, iteration: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let progress = iteration as f64 / total as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW state; one moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u32,
}

impl AdamW {
    pub fn new(model: &SegModel<f32>) -> Self {
        let shapes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut SegModel<f32>, grads: &ModelGrads<f32>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, wd, eps) = (lr as f32, cfg.weight_decay as f32, cfg.adam_eps as f32);
        for (((p, g), m), v) in model
            .param_tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] -= lr * (update + wd * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub distill: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,iteration,lr,loss,bce,distill\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:e},{},{},{}\n",
                e.epoch, e.iteration, e.lr, e.loss, e.bce, e.distill
            ));
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

/// The frozen previous-stage model and the loss it contributes.
pub struct Distillation<'a> {
    pub teacher: &'a SegModel<f32>,
    pub method: Method,
    pub config: &'a DistillConfig,
}

/// Per-sample supervision: `(class index in the model, target values)`.
type SampleTargets = Vec<(usize, Vec<f32>)>;

fn build_targets(
    model: &SegModel<f32>,
    samples: &[Sample],
    pseudo: &PseudoLabelStore,
    method: Method,
) -> Result<Vec<SampleTargets>> {
    let use_pseudo = method.uses_pseudo_labels() && !pseudo.is_empty();
    if use_pseudo && pseudo.samples.len() != samples.len() {
        return Err(Error::Consistency(format!(
            "pseudo-label store covers {} samples, stage has {}",
            pseudo.samples.len(),
            samples.len()
        )));
    }
    let empty = Default::default();
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let old = if use_pseudo { &pseudo.samples[i] } else { &empty };
        let expected: Option<Vec<ClassId>> = if method.uses_pseudo_labels() {
            Some(model.class_ids())
        } else {
            None
        };
        let merged = merge_pseudo_labels(&s.mask, old, expected.as_deref())?;
        let mut targets = Vec::with_capacity(merged.planes.len());
        for (id, plane) in &merged.planes {
            targets.push((model.class_index(*id)?, plane.values()));
        }
        out.push(targets);
    }
    Ok(out)
}

/// Loss and gradients of one sample; returns `(bce, distill)`.
fn sample_step(
    model: &SegModel<f32>,
    sample: &Sample,
    targets: &SampleTargets,
    distill: Option<&Distillation>,
    grads: &mut ModelGrads<f32>,
) -> Result<(f64, f64)> {
    let x = sample.volume.to_grid::<f32>();
    let indices: Vec<usize> = targets.iter().map(|(k, _)| *k).collect();
    let trace = model.forward_traced(&x, &indices)?;
    let mut bce = 0.0f64;
    let mut dlogits: Vec<Option<Vec<f32>>> = Vec::with_capacity(targets.len());
    for (h, (_, y)) in trace.heads.iter().zip(targets) {
        bce += bce_loss(&h.head.probs, y)? as f64;
        dlogits.push(Some(bce_grad_logits(&h.head.probs, y)));
    }
    let mut level_grads: Vec<Option<Grid<f32>>> = Vec::new();
    let mut distill_loss = 0.0f64;
    if let Some(d) = distill.filter(|d| !d.teacher.registry.is_empty()) {
        let cfg = d.config;
        match d.method {
            Method::Lwf => {
                let old = d.teacher.class_ids();
                let teacher_idx = d.teacher.class_indices(&old)?;
                let t_trace = d.teacher.forward_traced(&x, &teacher_idx)?;
                let w = cfg.lwf_weight as f32;
                for (id, th) in old.iter().zip(&t_trace.heads) {
                    let k = model.class_index(*id)?;
                    let pos = indices.iter().position(|&i| i == k).ok_or_else(|| {
                        Error::Consistency(format!("old class {id} is not trained in this stage"))
                    })?;
                    let (l, g) = lwf_loss(&trace.heads[pos].head.logits.data, &th.head.logits.data, cfg.temperature)?;
                    distill_loss += cfg.lwf_weight * l as f64;
                    let slot = dlogits[pos].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, b) in slot.iter_mut().zip(g) {
                        *a += w * b;
                    }
                }
            }
            Method::Ilt => {
                let t_trace = d.teacher.forward_traced(&x, &[])?;
                let (l, mut g) = ilt_loss(trace.backbone.decoded(), t_trace.backbone.decoded())?;
                distill_loss += cfg.ilt_weight * l as f64;
                g.data.iter_mut().for_each(|v| *v *= cfg.ilt_weight as f32);
                level_grads = vec![None; trace.backbone.n_levels()];
                *level_grads.last_mut().expect("backbone has levels") = Some(g);
            }
            Method::Plop => {
                let t_trace = d.teacher.forward_traced(&x, &[])?;
                let levels = trace.backbone.n_levels();
                let w = cfg.plop_weight_for(levels);
                let (l, gs) = plop_loss(&trace.backbone.levels(), &t_trace.backbone.levels(), &cfg.plop_scales)?;
                distill_loss += w * l as f64;
                level_grads = gs
                    .into_iter()
                    .map(|mut g| {
                        g.data.iter_mut().for_each(|v| *v *= w as f32);
                        Some(g)
                    })
                    .collect();
            }
            Method::Ours | Method::Finetune => {}
        }
    }
    model.backward(&trace, &dlogits, level_grads, grads)?;
    Ok((bce, distill_loss))
}

/// Trains every parameter of `model` on one stage.
///
/// Targets are ground truth for the stage's new classes and, unless the method
/// is fine-tuning, the stored pseudo labels for every older class. `distill`
/// adds a baseline's auxiliary loss against the frozen previous model.
pub fn train_stage(
    model: &mut SegModel<f32>,
    samples: &[Sample],
    pseudo: &PseudoLabelStore,
    cfg: &TrainConfig,
    method: Method,
    distill: Option<&Distillation>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if method.uses_teacher() && !pseudo.is_empty() && distill.is_none() {
        return Err(Error::Config(format!("method {} needs a frozen teacher", method.name())));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || samples.is_empty() {
        return Ok(log);
    }
    let targets = build_targets(model, samples, pseudo, method)?;
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(model);
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        model.rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let (mut bce, mut dist) = (0.0, 0.0);
            for &i in batch {
                let (b, d) = sample_step(model, &samples[i], &targets[i], distill, &mut grads)?;
                bce += b;
                dist += d;
            }
            let nb = batch.len() as f64;
            let (bce, dist) = (bce / nb, dist / nb);
            let loss = bce + dist;
            if !loss.is_finite() || grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    components: format!("bce={bce}, distill={dist}"),
                });
            }
            grads.scale(1.0 / nb as f32);
            let lr = cfg.lr_at(iteration, total);
            opt.step(model, &grads, lr, cfg);
            log.entries.push(LogEntry {
                epoch,
                iteration,
                lr,
                loss,
                bce,
                distill: dist,
            });
            iteration += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 10), 1e-4);
        assert!((cfg.lr_at(5, 10) - 5e-5).abs() < 1e-18);
        assert!(cfg.lr_at(10, 10).abs() < 1e-18);
        for i in 0..10 {
            assert!(cfg.lr_at(i + 1, 10) <= cfg.lr_at(i, 10));
        }
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lr, cfg.weight_decay, cfg.epochs, cfg.batch_size), (1e-4, 1e-5, 30, 8));
        assert_eq!(cfg.threshold, 0.5);
        assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
    }
}
