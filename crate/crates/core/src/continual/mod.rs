//! The class-incremental trajectory: pseudo labels, model extension,
//! per-stage training and accumulated-class prediction.

use serde::{Deserialize, Serialize};

use crate::embeddings::{ClassDescriptor, EmbeddingSource};
use crate::error::Result;
use crate::model::SegModel;
use crate::phantom::{MultiLabelMask, StagedDataset, Volume};
use crate::ClassId;

mod pseudo;
mod train;

pub use pseudo::{
    dequantize_probability, hard_label, load_pseudo_labels, merge_pseudo_labels, precompute_pseudo_labels,
    pseudo_dir, quantize_probability, save_pseudo_labels, MergedTarget, PseudoLabelStore, PseudoLabels,
    PseudoMode, PseudoPlane, TargetPlane, HARD_THRESHOLD,
};
pub use train::{train_stage, AdamW, Distillation, LogEntry, Method, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// One label per pixel: the most probable class, or background.
    Exclusive,
    /// An independent binary plane per class.
    #[default]
    Multilabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segmentation {
    Multilabel(MultiLabelMask),
    Exclusive {
        height: usize,
        width: usize,
        /// `None` is background.
        labels: Vec<Option<ClassId>>,
    },
}

impl Segmentation {
    /// Binary plane per class; exclusive labels become disjoint planes.
    pub fn to_mask(&self, classes: &[ClassId]) -> MultiLabelMask {
        match self {
            Segmentation::Multilabel(m) => m.clone(),
            Segmentation::Exclusive { height, width, labels } => MultiLabelMask {
                height: *height,
                width: *width,
                planes: classes
                    .iter()
                    .map(|&c| (c, labels.iter().map(|l| (*l == Some(c)) as u8).collect()))
                    .collect(),
            },
        }
    }
}

/// Per-pixel argmax over classes, or background when the maximum is below `threshold`.
/// Ties resolve to the earliest class.
pub fn exclusive_labels(probs: &[Vec<f32>], ids: &[ClassId], threshold: f32) -> Vec<Option<ClassId>> {
    let n = probs.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, f32)> = None;
            for (k, p) in probs.iter().enumerate() {
                if best.map_or(true, |(_, b)| p[i] > b) {
                    best = Some((k, p[i]));
                }
            }
            best.filter(|&(_, p)| p >= threshold).map(|(k, _)| ids[k])
        })
        .collect()
}

/// Binary planes `p >= threshold` for every class.
pub fn multilabel_planes(probs: &[Vec<f32>], ids: &[ClassId], height: usize, width: usize, threshold: f32) -> MultiLabelMask {
    MultiLabelMask {
        height,
        width,
        planes: ids
            .iter()
            .zip(probs)
            .map(|(&id, p)| (id, p.iter().map(|&v| (v >= threshold) as u8).collect()))
            .collect(),
    }
}

/// Segments `x` over every registered class.
pub fn predict(model: &SegModel<f32>, x: &Volume, mode: PredictMode, threshold: f32) -> Result<Segmentation> {
    let ids = model.class_ids();
    let probs = crate::model::forward_all_classes(model, x, &ids)?;
    Ok(match mode {
        PredictMode::Multilabel => Segmentation::Multilabel(multilabel_planes(&probs, &ids, x.height, x.width, threshold)),
        PredictMode::Exclusive => Segmentation::Exclusive {
            height: x.height,
            width: x.width,
            labels: if ids.is_empty() {
                vec![None; x.height * x.width]
            } else {
                exclusive_labels(&probs, &ids, threshold)
            },
        },
    })
}

/// Descriptors for the classes a dataset introduces at `stage`.
pub fn stage_descriptors(ds: &StagedDataset, stage: usize, source: &EmbeddingSource) -> Result<Vec<ClassDescriptor>> {
    ds.stage(stage)?
        .new_classes
        .iter()
        .map(|&id| ClassDescriptor::new(id, &ds.class_name(id), stage, source))
        .collect()
}

/// Appends new classes to the model; alias of [`SegModel::extend`].
pub fn extend_model(model: &mut SegModel<f32>, new_classes: Vec<ClassDescriptor>) -> Result<()> {
    model.extend(new_classes)
}

/// Everything a stage run produces.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: SegModel<f32>,
    pub pseudo: PseudoLabelStore,
    pub log: TrainLog,
}

/// Pseudo labels a method needs for `stage`: a pass of `previous` over the
/// stage's training samples, or an empty store.
pub fn stage_pseudo_labels(
    previous: &SegModel<f32>,
    ds: &StagedDataset,
    stage: usize,
    method: Method,
    mode: PseudoMode,
) -> Result<PseudoLabelStore> {
    let data = ds.stage(stage)?;
    if method.uses_pseudo_labels() {
        precompute_pseudo_labels(Some(previous), &data.train, mode)
    } else {
        Ok(PseudoLabelStore::empty(mode, data.train.len()))
    }
}

/// Runs one stage of the trajectory: pseudo labels from `previous`, model
/// extension with the stage's classes, then training.
pub fn run_stage(
    previous: &SegModel<f32>,
    ds: &StagedDataset,
    stage: usize,
    source: &EmbeddingSource,
    cfg: &TrainConfig,
    method: Method,
    distill: &crate::distill::DistillConfig,
) -> Result<StageOutcome> {
    let pseudo = stage_pseudo_labels(previous, ds, stage, method, cfg.pseudo_mode)?;
    run_stage_with(previous, ds, stage, source, cfg, method, distill, pseudo)
}

/// [`run_stage`] with an already computed (or loaded) pseudo-label store.
#[allow(clippy::too_many_arguments)]
pub fn run_stage_with(
    previous: &SegModel<f32>,
    ds: &StagedDataset,
    stage: usize,
    source: &EmbeddingSource,
    cfg: &TrainConfig,
    method: Method,
    distill: &crate::distill::DistillConfig,
    pseudo: PseudoLabelStore,
) -> Result<StageOutcome> {
    let data = ds.stage(stage)?;
    let mut model = previous.clone();
    model.extend(stage_descriptors(ds, stage, source)?)?;
    let distillation = method.uses_teacher().then_some(Distillation {
        teacher: previous,
        method,
        config: distill,
    });
    let log = train_stage(&mut model, &data.train, &pseudo, cfg, method, distillation.as_ref())?;
    model.stage = stage;
    Ok(StageOutcome { model, pseudo, log })
}
