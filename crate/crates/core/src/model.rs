//! The full segmentation model: shared backbone plus one hypernetwork per class.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneDims, BackboneParams, BackboneTrace};
use crate::embeddings::{ClassDescriptor, ClassRegistry};
use crate::error::{Error, Result};
use crate::heads::{
    apply_head_backward, apply_head_traced, head_param_layout, HeadLayout, HeadParams, HeadTrace,
    HypernetMlp, HypernetTrace, HYPERNET_HIDDEN,
};
use crate::nn::{gap, gap_backward};
use crate::phantom::Volume;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{cast_slice, Grid, Scalar};
use crate::ClassId;

mod checkpoint;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_hash, checkpoint_to_bytes, hex_digest, load_checkpoint, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

const BACKBONE_SEED_KEY: u64 = 0x4241_434b;
const HYPERNET_SEED_KEY: u64 = 0x4859_5045_0000;
const TRAIN_SEED_KEY: u64 = 0x5452_4149_4e;

/// Architecture hyperparameters fixed for a model's lifetime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dims: BackboneDims,
    /// Head convolution kernel size.
    #[serde(default = "default_head_kernel")]
    pub head_kernel: usize,
    /// Hypernetwork hidden width.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_head_kernel() -> usize {
    1
}

fn default_hidden() -> usize {
    HYPERNET_HIDDEN
}

impl ModelSpec {
    pub fn reference(height: usize, width: usize) -> Self {
        Self {
            dims: BackboneDims::reference(height, width),
            head_kernel: default_head_kernel(),
            hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        head_param_layout(self.dims.decoder_channels(), self.head_kernel)?;
        if self.hidden == 0 {
            return Err(Error::Config("hypernet hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    pub spec: ModelSpec,
    pub backbone: BackboneParams<T>,
    pub registry: ClassRegistry,
    /// One hypernetwork per registered class, aligned with `registry.classes`.
    pub hypernets: Vec<HypernetMlp<T>>,
    pub layout: HeadLayout,
    pub seed: u64,
    /// Number of completed training stages.
    pub stage: usize,
    /// Generator for batch shuffling; persisted in checkpoints.
    pub rng: SplitMix64,
}

/// Gradient buffers with the same layout as a model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub backbone: BackboneParams<T>,
    pub hypernets: Vec<HypernetMlp<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut v = self.backbone.tensors();
        for h in &self.hypernets {
            v.extend(h.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.backbone.tensors_mut();
        for h in &mut self.hypernets {
            v.extend(h.tensors_mut());
        }
        v
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flatten().copied().collect()
    }
}

/// One class head evaluated during a traced forward pass.
#[derive(Debug, Clone)]
pub struct HeadEval<T> {
    pub class_index: usize,
    hyper: HypernetTrace<T>,
    pub theta: HeadParams<T>,
    pub head: HeadTrace<T>,
}

/// Everything a traced forward pass records for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub backbone: BackboneTrace<T>,
    /// Global image feature `f = GAP(E(X))`.
    pub feature: Vec<T>,
    pub heads: Vec<HeadEval<T>>,
}

impl<T: Scalar> SegModel<T> {
    /// Builds a model with an empty registry.
    pub fn new(spec: ModelSpec, registry: ClassRegistry, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !registry.is_empty() {
            return Err(Error::Config("a new model starts with an empty registry".into()));
        }
        let layout = head_param_layout(spec.dims.decoder_channels(), spec.head_kernel)?;
        let backbone = BackboneParams::init(spec.dims.clone(), derive_seed(seed, BACKBONE_SEED_KEY))?;
        Ok(Self {
            spec,
            backbone,
            registry,
            hypernets: Vec::new(),
            layout,
            seed,
            stage: 0,
            rng: SplitMix64::new(derive_seed(seed, TRAIN_SEED_KEY)),
        })
    }

    /// Hypernet input length `C_e + E`.
    pub fn hypernet_input_dim(&self) -> usize {
        self.spec.dims.encoder_channels() + self.registry.dim
    }

    /// Seed of the freshly initialized hypernet for `id`; independent of when the class is added.
    pub fn hypernet_seed(&self, id: ClassId) -> u64 {
        derive_seed(self.seed, HYPERNET_SEED_KEY | id.0 as u64)
    }

    /// Appends classes and one freshly initialized hypernet per class.
    /// Existing parameters are untouched.
    pub fn extend(&mut self, new: Vec<ClassDescriptor>) -> Result<()> {
        self.registry.check_new(&new)?;
        let in_dim = self.hypernet_input_dim();
        for d in &new {
            self.hypernets.push(HypernetMlp::init(
                in_dim,
                self.spec.hidden,
                self.layout.total,
                self.hypernet_seed(d.id),
            ));
        }
        self.registry.extend(new)
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.registry.ids()
    }

    pub fn class_index(&self, id: ClassId) -> Result<usize> {
        self.registry
            .classes
            .iter()
            .position(|c| c.id == id)
            .ok_or(Error::UnknownClass(id))
    }

    pub fn class_indices(&self, ids: &[ClassId]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.class_index(id)).collect()
    }

    fn embedding(&self, index: usize) -> Vec<T> {
        cast_slice(&self.registry.classes[index].embedding)
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            backbone: self.backbone.zeros_like(),
            hypernets: self.hypernets.iter().map(HypernetMlp::zeros_like).collect(),
        }
    }

    /// Trainable buffers in declared order: backbone, then each hypernet in registry order.
    pub fn param_tensors(&self) -> Vec<&Vec<T>> {
        let mut v = self.backbone.tensors();
        for h in &self.hypernets {
            v.extend(h.tensors());
        }
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = self.backbone.tensors_mut();
        for h in &mut self.hypernets {
            v.extend(h.tensors_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.param_tensors().into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.param_tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            spec: self.spec.clone(),
            backbone: self.backbone.cast(),
            registry: self.registry.clone(),
            hypernets: self.hypernets.iter().map(HypernetMlp::cast).collect(),
            layout: self.layout.clone(),
            seed: self.seed,
            stage: self.stage,
            rng: self.rng,
        }
    }

    /// Shared backbone pass followed by the heads of the classes at `indices`.
    pub fn forward_traced(&self, x: &Grid<T>, indices: &[usize]) -> Result<ForwardTrace<T>> {
        let backbone = self.backbone.forward(x)?;
        let feature = gap(backbone.encoded());
        let mut heads = Vec::with_capacity(indices.len());
        for &k in indices {
            let mlp = self
                .hypernets
                .get(k)
                .ok_or_else(|| Error::Shape(format!("no hypernet at index {k}")))?;
            let (theta, hyper) = mlp.forward(&feature, &self.embedding(k))?;
            let head = apply_head_traced(backbone.decoded(), &theta, &self.layout)?;
            heads.push(HeadEval {
                class_index: k,
                hyper,
                theta,
                head,
            });
        }
        Ok(ForwardTrace {
            backbone,
            feature,
            heads,
        })
    }

    /// Backpropagates through a traced forward pass, accumulating into `grads`.
    ///
    /// `dlogits[i]` is the loss gradient w.r.t. the logits of `trace.heads[i]`
    /// (`None` means the head receives no gradient). `level_grads`, when
    /// non-empty, adds direct gradients on every backbone level (encoder
    /// levels first), as used by feature-distillation losses.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        dlogits: &[Option<Vec<T>>],
        mut level_grads: Vec<Option<Grid<T>>>,
        grads: &mut ModelGrads<T>,
    ) -> Result<()> {
        if dlogits.len() != trace.heads.len() {
            return Err(Error::Shape(format!(
                "{} logit gradients for {} heads",
                dlogits.len(),
                trace.heads.len()
            )));
        }
        let n_levels = trace.backbone.n_levels();
        if level_grads.is_empty() {
            level_grads = vec![None; n_levels];
        } else if level_grads.len() != n_levels {
            return Err(Error::Shape(format!(
                "{} level gradients for {} backbone levels",
                level_grads.len(),
                n_levels
            )));
        }
        let dec = trace.backbone.decoded();
        let c_e = trace.feature.len();
        let mut ddec: Option<Grid<T>> = None;
        let mut dfeature = vec![T::zero(); c_e];
        for (eval, dl) in trace.heads.iter().zip(dlogits) {
            let Some(dl) = dl else { continue };
            let logits = &eval.head.logits;
            let dl = Grid::from_vec(logits.channels, logits.height, logits.width, dl.clone())?;
            let (dtheta, dd) = apply_head_backward(&eval.head, &dl, &eval.theta, &self.layout);
            match &mut ddec {
                Some(acc) => acc.add_assign(&dd),
                None => ddec = Some(dd),
            }
            let k = eval.class_index;
            let dinput = self.hypernets[k].backward(&eval.hyper, &dtheta, &mut grads.hypernets[k]);
            for (a, &d) in dfeature.iter_mut().zip(&dinput[..c_e]) {
                *a = *a + d;
            }
        }
        if let Some(dd) = ddec {
            debug_assert_eq!(dd.shape(), dec.shape());
            add_level_grad(&mut level_grads[n_levels - 1], dd);
        }
        if trace.heads.iter().zip(dlogits).any(|(_, d)| d.is_some()) {
            let enc = trace.backbone.encoded();
            let g = gap_backward(&dfeature, enc.channels, enc.height, enc.width);
            add_level_grad(&mut level_grads[self.spec.dims.encoder.len() - 1], g);
        }
        self.backbone.backward(&trace.backbone, level_grads, &mut grads.backbone, false);
        Ok(())
    }

    /// Probability maps for the classes at `indices`, from one shared backbone pass.
    pub fn probabilities(&self, x: &Grid<T>, indices: &[usize]) -> Result<Vec<Vec<T>>> {
        let trace = self.forward_traced(x, indices)?;
        Ok(trace.heads.into_iter().map(|h| h.head.probs).collect())
    }
}

fn add_level_grad<T: Scalar>(slot: &mut Option<Grid<T>>, g: Grid<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Per-class probability maps for `ids`, in request order.
pub fn forward_all_classes<T: Scalar>(model: &SegModel<T>, x: &Volume, ids: &[ClassId]) -> Result<Vec<Vec<T>>> {
    let indices = model.class_indices(ids)?;
    model.probabilities(&x.to_grid(), &indices)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embeddings::EmbeddingSource;
    use crate::gradcheck::grad_check_limited;
    use crate::heads::{bce_grad_logits, bce_loss};
    use crate::backbone::EncoderLevel;

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            dims: BackboneDims {
                in_channels: 1,
                height: 8,
                width: 8,
                kernel: 3,
                encoder: vec![
                    EncoderLevel { channels: 3, stride: 1 },
                    EncoderLevel { channels: 4, stride: 2 },
                ],
                decoder: vec![2],
            },
            head_kernel: 1,
            hidden: 6,
        }
    }

    fn tiny_model(n_classes: u16) -> SegModel<f64> {
        let src = EmbeddingSource::Hash { dim: 4, seed: 0 };
        let mut m = SegModel::new(tiny_spec(), ClassRegistry::new(4, "hash"), 5).unwrap();
        let descs = (0..n_classes)
            .map(|i| ClassDescriptor::new(ClassId(i), &format!("organ {i}"), 1, &src).unwrap())
            .collect();
        m.extend(descs).unwrap();
        // Enlarge the output layers so gradients are well above the check floor.
        for h in &mut m.hypernets {
            for w in &mut h.w2 {
                *w *= 100.0;
            }
        }
        m
    }

    fn volume(seed: u64, h: usize, w: usize) -> Volume {
        let mut rng = SplitMix64::new(seed);
        Volume::new(h, w, (0..h * w).map(|_| rng.next_f64() as f32).collect()).unwrap()
    }

    fn targets(seed: u64, n: usize, count: usize) -> Vec<Vec<f64>> {
        let mut rng = SplitMix64::new(seed);
        (0..count)
            .map(|_| (0..n).map(|_| (rng.next_f64() < 0.4) as u8 as f64).collect())
            .collect()
    }

    fn loss_and_grad(m: &SegModel<f64>, x: &Grid<f64>, classes: &[usize], ys: &[Vec<f64>]) -> (f64, ModelGrads<f64>) {
        let trace = m.forward_traced(x, classes).unwrap();
        let mut loss = 0.0;
        let mut dl = Vec::new();
        for (h, y) in trace.heads.iter().zip(ys) {
            loss += bce_loss(&h.head.probs, y).unwrap();
            dl.push(Some(bce_grad_logits(&h.head.probs, y)));
        }
        let mut g = m.zero_grads();
        m.backward(&trace, &dl, Vec::new(), &mut g).unwrap();
        (loss, g)
    }

    #[test]
    fn reference_shapes() {
        let src = EmbeddingSource::Hash { dim: 32, seed: 0 };
        let mut m: SegModel<f32> =
            SegModel::new(ModelSpec::reference(64, 64), ClassRegistry::new(32, "hash"), 0).unwrap();
        m.extend(vec![ClassDescriptor::new(ClassId(0), "liver", 1, &src).unwrap()]).unwrap();
        assert_eq!(m.hypernet_input_dim(), 96);
        let x = volume(1, 64, 64);
        let t = m.forward_traced(&x.to_grid(), &[0]).unwrap();
        assert_eq!(t.feature.len(), 64);
        assert_eq!(t.backbone.decoded().shape(), (16, 64, 64));
        assert_eq!(t.heads[0].head.probs.len(), 64 * 64);
        assert!(t.heads[0].head.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn empty_request_and_unknown_class() {
        let m = tiny_model(2);
        let x = volume(2, 8, 8);
        assert!(forward_all_classes(&m, &x, &[]).unwrap().is_empty());
        assert!(matches!(
            forward_all_classes(&m, &x, &[ClassId(7)]),
            Err(Error::UnknownClass(ClassId(7)))
        ));
        let a = forward_all_classes(&m, &x, &[ClassId(1)]).unwrap();
        assert_eq!(a, forward_all_classes(&m, &x, &[ClassId(1)]).unwrap());
    }

    #[test]
    fn extension_leaves_old_outputs_untouched() {
        let src = EmbeddingSource::Hash { dim: 4, seed: 0 };
        let mut m = tiny_model(2);
        let x = volume(3, 8, 8);
        let before = forward_all_classes(&m, &x, &[ClassId(0), ClassId(1)]).unwrap();
        let snapshot = m.clone();
        m.extend(vec![]).unwrap();
        assert_eq!(m, snapshot);
        m.extend(vec![ClassDescriptor::new(ClassId(9), "tumor", 2, &src).unwrap()]).unwrap();
        assert_eq!(m.registry.len(), 3);
        assert_eq!(m.backbone, snapshot.backbone);
        assert_eq!(m.hypernets[..2], snapshot.hypernets[..]);
        assert_eq!(forward_all_classes(&m, &x, &[ClassId(0), ClassId(1)]).unwrap(), before);
        let dup = ClassDescriptor::new(ClassId(0), "again", 2, &src).unwrap();
        assert!(matches!(m.extend(vec![dup]), Err(Error::DuplicateClass(_))));
    }

    #[test]
    fn multilabel_overlap_is_possible() {
        let mut m = tiny_model(2);
        for h in &mut m.hypernets {
            h.w2.iter_mut().for_each(|w| *w = 0.0);
            h.b2.iter_mut().for_each(|b| *b = 0.0);
            let last = m.layout.layers[2];
            h.b2[last.bias_offset] = 3.0;
        }
        let maps = forward_all_classes(&m, &volume(4, 8, 8), &[ClassId(0), ClassId(1)]).unwrap();
        assert!((0..64).all(|i| maps[0][i] > 0.5 && maps[1][i] > 0.5));
    }

    #[test]
    fn composed_model_passes_gradient_check() {
        let m = tiny_model(2);
        let x = volume(5, 8, 8).to_grid::<f64>();
        let ys = targets(6, 64, 2);
        let op = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_flat_params(p)?;
            let (l, g) = loss_and_grad(&mm, &x, &[0, 1], &ys);
            Ok((l, g.flatten()))
        };
        let report = grad_check_limited(op, &m.flat_params(), 1e-5, 0, 1500).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn other_class_hypernets_get_exactly_zero_gradient() {
        let m = tiny_model(4);
        let x = volume(7, 8, 8).to_grid::<f64>();
        let ys = targets(8, 64, 1);
        for j in 0..4 {
            let (_, g) = loss_and_grad(&m, &x, &[j], &ys);
            for k in 0..4 {
                let nonzero = g.hypernets[k].tensors().iter().any(|t| t.iter().any(|&v| v != 0.0));
                assert_eq!(nonzero, k == j, "class {j} loss vs hypernet {k}");
            }
        }
    }
}
