//! Pseudo labels for old classes and their merge with new-class ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::phantom::{MultiLabelMask, Sample};
use crate::ClassId;

pub const PSEUDO_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoMode {
    /// Binary planes, `p >= 0.5` is foreground.
    #[default]
    Hard,
    /// Probabilities quantized to 8 bits.
    Soft,
}

/// Hard pseudo-label threshold; ties count as foreground.
pub const HARD_THRESHOLD: f32 = 0.5;

pub fn hard_label(p: f32) -> u8 {
    (p >= HARD_THRESHOLD) as u8
}

/// `round(255 p)`; dequantization error is at most `1/510`.
pub fn quantize_probability(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) as f64 * 255.0).round() as u8
}

pub fn dequantize_probability(q: u8) -> f32 {
    q as f32 / 255.0
}

/// One old-class plane as stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PseudoPlane {
    Hard(Vec<u8>),
    Soft(Vec<u8>),
}

impl PseudoPlane {
    pub fn from_probabilities(probs: &[f32], mode: PseudoMode) -> Self {
        match mode {
            PseudoMode::Hard => PseudoPlane::Hard(probs.iter().map(|&p| hard_label(p)).collect()),
            PseudoMode::Soft => PseudoPlane::Soft(probs.iter().map(|&p| quantize_probability(p)).collect()),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        match self {
            PseudoPlane::Hard(b) | PseudoPlane::Soft(b) => b,
        }
    }

    /// Training target values in `[0, 1]`.
    pub fn values(&self) -> Vec<f32> {
        match self {
            PseudoPlane::Hard(b) => b.iter().map(|&v| v as f32).collect(),
            PseudoPlane::Soft(b) => b.iter().map(|&q| dequantize_probability(q)).collect(),
        }
    }
}

/// Old-class planes of a single sample.
pub type PseudoLabels = BTreeMap<ClassId, PseudoPlane>;

/// Pseudo labels over `C_{t-1}` for every training sample of stage `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    pub mode: PseudoMode,
    pub classes: Vec<ClassId>,
    /// Hash of the checkpoint that produced the labels (`None` for an empty store).
    pub provenance: Option<String>,
    pub samples: Vec<PseudoLabels>,
}

impl PseudoLabelStore {
    /// A store with no old classes, as used in the first stage.
    pub fn empty(mode: PseudoMode, n_samples: usize) -> Self {
        Self {
            mode,
            classes: Vec::new(),
            provenance: None,
            samples: vec![BTreeMap::new(); n_samples],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// One pass of the previous model over the new stage's samples.
///
/// `old_model == None` (or a model with no classes) yields an empty store.
pub fn precompute_pseudo_labels(
    old_model: Option<&SegModel<f32>>,
    samples: &[Sample],
    mode: PseudoMode,
) -> Result<PseudoLabelStore> {
    let Some(model) = old_model.filter(|m| !m.registry.is_empty()) else {
        return Ok(PseudoLabelStore::empty(mode, samples.len()));
    };
    let classes = model.class_ids();
    let indices = model.class_indices(&classes)?;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = model.probabilities(&s.volume.to_grid(), &indices)?;
        out.push(
            classes
                .iter()
                .zip(probs)
                .map(|(&id, p)| (id, PseudoPlane::from_probabilities(&p, mode)))
                .collect(),
        );
    }
    Ok(PseudoLabelStore {
        mode,
        classes,
        provenance: Some(crate::model::checkpoint_hash(model)),
        samples: out,
    })
}

/// Where a merged target plane came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetPlane {
    GroundTruth(Vec<u8>),
    Pseudo(PseudoPlane),
}

impl TargetPlane {
    pub fn values(&self) -> Vec<f32> {
        match self {
            TargetPlane::GroundTruth(b) => b.iter().map(|&v| v as f32).collect(),
            TargetPlane::Pseudo(p) => p.values(),
        }
    }
}

/// Training target over `C_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedTarget {
    pub planes: BTreeMap<ClassId, TargetPlane>,
}

/// Ground truth for new classes, pseudo labels for old ones.
///
/// The two plane sets must be disjoint; when `expected` is given their union
/// must equal it.
pub fn merge_pseudo_labels(
    gt_new: &MultiLabelMask,
    pseudo: &PseudoLabels,
    expected: Option<&[ClassId]>,
) -> Result<MergedTarget> {
    let n = gt_new.height * gt_new.width;
    let mut planes = BTreeMap::new();
    for (&id, plane) in &gt_new.planes {
        planes.insert(id, TargetPlane::GroundTruth(plane.clone()));
    }
    for (&id, plane) in pseudo {
        if plane.bytes().len() != n {
            return Err(Error::Consistency(format!(
                "pseudo plane for class {id} has {} pixels, expected {n}",
                plane.bytes().len()
            )));
        }
        if planes.insert(id, TargetPlane::Pseudo(plane.clone())).is_some() {
            return Err(Error::Consistency(format!(
                "class {id} has both ground truth and a pseudo label"
            )));
        }
    }
    if let Some(expected) = expected {
        for id in expected {
            if !planes.contains_key(id) {
                return Err(Error::Consistency(format!("no target plane for class {id}")));
            }
        }
        if let Some(extra) = planes.keys().find(|id| !expected.contains(id)) {
            return Err(Error::Consistency(format!("unexpected target plane for class {extra}")));
        }
    }
    Ok(MergedTarget { planes })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PseudoManifest {
    version: u32,
    stage: usize,
    mode: PseudoMode,
    classes: Vec<ClassId>,
    provenance: Option<String>,
    pixels: usize,
    samples: Vec<String>,
}

pub fn pseudo_dir(dataset_dir: &Path, stage: usize) -> PathBuf {
    dataset_dir.join("pseudo").join(format!("stage_{stage}"))
}

/// Persists the store under `<dataset>/pseudo/stage_<t>/`.
pub fn save_pseudo_labels(store: &PseudoLabelStore, dataset_dir: &Path, stage: usize) -> Result<PathBuf> {
    let dir = pseudo_dir(dataset_dir, stage);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pixels = store
        .samples
        .iter()
        .flat_map(|s| s.values())
        .map(|p| p.bytes().len())
        .next()
        .unwrap_or(0);
    let mut names = Vec::with_capacity(store.samples.len());
    for (i, s) in store.samples.iter().enumerate() {
        let name = format!("sample_{i:05}.u8");
        let bytes: Vec<u8> = store
            .classes
            .iter()
            .flat_map(|id| s[id].bytes().iter().copied())
            .collect();
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    let manifest = PseudoManifest {
        version: PSEUDO_MANIFEST_VERSION,
        stage,
        mode: store.mode,
        classes: store.classes.clone(),
        provenance: store.provenance.clone(),
        pixels,
        samples: names,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

pub fn load_pseudo_labels(dataset_dir: &Path, stage: usize) -> Result<PseudoLabelStore> {
    let dir = pseudo_dir(dataset_dir, stage);
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: PseudoManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("pseudo manifest", e.to_string()))?;
    if m.version != PSEUDO_MANIFEST_VERSION {
        return Err(Error::format("version", format!("expected {PSEUDO_MANIFEST_VERSION}, found {}", m.version)));
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for name in &m.samples {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != m.classes.len() * m.pixels {
            return Err(Error::format(name.clone(), "buffer length disagrees with manifest"));
        }
        let planes = m
            .classes
            .iter()
            .zip(bytes.chunks(m.pixels.max(1)))
            .map(|(&id, b)| {
                let plane = match m.mode {
                    PseudoMode::Hard => PseudoPlane::Hard(b.to_vec()),
                    PseudoMode::Soft => PseudoPlane::Soft(b.to_vec()),
                };
                (id, plane)
            })
            .collect();
        samples.push(planes);
    }
    Ok(PseudoLabelStore {
        mode: m.mode,
        classes: m.classes,
        provenance: m.provenance,
        samples,
    })
}
