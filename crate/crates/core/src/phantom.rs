//! Synthetic organ phantoms and staged, partially annotated datasets.
//!
//! A phantom is a 2D intensity image with one binary plane per class.
//! Organ-like structures never overlap each other; inset lesions are painted
//! inside an instance of their host class, so their pixels belong to both
//! planes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::StagePlan;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Grid, Scalar};
use crate::ClassId;

mod io;

pub use io::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Single-channel intensity image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub height: usize,
    pub width: usize,
    pub intensities: Vec<f32>,
}

impl Volume {
    pub fn new(height: usize, width: usize, intensities: Vec<f32>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Shape(format!("volume {height}x{width} smaller than 8x8")));
        }
        if intensities.len() != height * width {
            return Err(Error::Shape(format!(
                "volume {height}x{width} needs {} intensities, got {}",
                height * width,
                intensities.len()
            )));
        }
        if intensities.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("volume intensities must be finite and in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            intensities,
        })
    }

    pub fn to_grid<T: Scalar>(&self) -> Grid<T> {
        Grid {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.intensities.iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }
}

/// Per-class binary planes, keyed (and therefore ordered) by class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelMask {
    pub height: usize,
    pub width: usize,
    pub planes: BTreeMap<ClassId, Vec<u8>>,
}

impl MultiLabelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            planes: BTreeMap::new(),
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.planes.keys().copied().collect()
    }

    /// Keeps only the planes for `classes`.
    pub fn restricted(&self, classes: &[ClassId]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            planes: self
                .planes
                .iter()
                .filter(|(id, _)| classes.contains(id))
                .map(|(id, p)| (*id, p.clone()))
                .collect(),
        }
    }

    /// Number of pixels set in two or more planes.
    pub fn overlap_pixels(&self) -> usize {
        (0..self.height * self.width)
            .filter(|&i| self.planes.values().filter(|p| p[i] != 0).count() >= 2)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShapeFamily {
    Disk,
    /// Ring whose hole radius is `inner_ratio` times the outer radius.
    Annulus { inner_ratio: f64 },
    /// Rotated ellipse; the minor axis is `aspect` (drawn from the range) times the major.
    Blob { aspect: [f64; 2] },
    /// Disk placed entirely inside an instance of `host`.
    InsetLesion { host: ClassId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomClass {
    pub id: ClassId,
    pub name: String,
    pub shape: ShapeFamily,
    /// Intensity band `[lo, hi]`.
    pub intensity: [f64; 2],
    /// Radius range in pixels (major semi-axis for blobs).
    pub size: [f64; 2],
    /// Instance count range, inclusive.
    pub count: [u32; 2],
    /// Probability that the class appears in a phantom at all.
    pub presence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    /// Standard deviation of per-pixel Gaussian noise. With `noise == 0` every
    /// structure is rendered at its band midpoint.
    pub noise: f64,
    pub classes: Vec<PhantomClass>,
}

fn class(id: u16, name: &str, shape: ShapeFamily, intensity: [f64; 2], size: [f64; 2], count: [u32; 2]) -> PhantomClass {
    PhantomClass {
        id: ClassId(id),
        name: name.into(),
        shape,
        intensity,
        size,
        count,
        presence: 1.0,
    }
}

impl PhantomSpec {
    /// Seven organ-like classes for the three-step trajectory.
    pub fn jhh_like() -> Self {
        use ShapeFamily::*;
        Self {
            height: 64,
            width: 64,
            background: 0.1,
            noise: 0.03,
            classes: vec![
                class(0, "liver-like", Blob { aspect: [0.6, 0.85] }, [0.50, 0.56], [10.0, 13.0], [1, 1]),
                class(1, "spleen-like", Disk, [0.72, 0.78], [6.0, 8.0], [1, 1]),
                class(2, "kidney-like", Annulus { inner_ratio: 0.5 }, [0.30, 0.36], [6.0, 8.0], [1, 1]),
                class(3, "stomach-like", Blob { aspect: [0.5, 0.8] }, [0.86, 0.92], [6.0, 8.0], [1, 1]),
                class(4, "colon-like", Annulus { inner_ratio: 0.55 }, [0.62, 0.68], [7.0, 9.0], [1, 1]),
                class(5, "aorta-like", Disk, [0.94, 0.99], [3.0, 5.0], [1, 1]),
                class(6, "vein-like", Blob { aspect: [0.4, 0.6] }, [0.40, 0.45], [4.0, 6.0], [1, 1]),
            ],
        }
    }

    /// Three organ-like classes plus a tumor inset in the liver-like class.
    pub fn btcv_lits_like() -> Self {
        use ShapeFamily::*;
        Self {
            height: 64,
            width: 64,
            background: 0.1,
            noise: 0.03,
            classes: vec![
                class(0, "liver-like", Blob { aspect: [0.6, 0.85] }, [0.50, 0.56], [12.0, 16.0], [1, 1]),
                class(1, "spleen-like", Disk, [0.72, 0.78], [6.0, 8.0], [1, 1]),
                class(2, "kidney-like", Annulus { inner_ratio: 0.5 }, [0.30, 0.36], [6.0, 8.0], [1, 1]),
                class(3, "tumor-like", InsetLesion { host: ClassId(0) }, [0.82, 0.88], [3.0, 5.0], [1, 2]),
            ],
        }
    }

    pub fn class(&self, id: ClassId) -> Option<&PhantomClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "phantom dims {}x{} below 8x8",
                self.height, self.width
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.background) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("background must be in [0,1] and noise >= 0".into()));
        }
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.id) {
                return Err(Error::Config(format!("class id {} declared twice", c.id)));
            }
            if c.name.is_empty() {
                return Err(Error::Config(format!("class {} has an empty name", c.id)));
            }
            let [lo, hi] = c.intensity;
            if !(in_unit(lo) && in_unit(hi) && lo <= hi) {
                return Err(Error::Config(format!("class '{}' intensity band outside [0,1]", c.name)));
            }
            if !(c.size[0] >= 1.0 && c.size[0] <= c.size[1]) {
                return Err(Error::Config(format!("class '{}' has an invalid size range", c.name)));
            }
            if c.count[0] > c.count[1] || !in_unit(c.presence) {
                return Err(Error::Config(format!("class '{}' has an invalid count/presence", c.name)));
            }
            match &c.shape {
                ShapeFamily::Annulus { inner_ratio } if !(0.0..1.0).contains(inner_ratio) => {
                    return Err(Error::Config(format!("class '{}' annulus ratio must be in [0,1)", c.name)));
                }
                ShapeFamily::Blob { aspect } if !(aspect[0] > 0.0 && aspect[0] <= aspect[1] && aspect[1] <= 1.0) => {
                    return Err(Error::Config(format!("class '{}' blob aspect must be in (0,1]", c.name)));
                }
                _ => {}
            }
        }
        for c in &self.classes {
            if let ShapeFamily::InsetLesion { host } = c.shape {
                match self.class(host) {
                    None => {
                        return Err(Error::Config(format!(
                            "lesion class '{}' references missing host {host}",
                            c.name
                        )))
                    }
                    Some(h) if matches!(h.shape, ShapeFamily::InsetLesion { .. }) => {
                        return Err(Error::Config(format!(
                            "lesion class '{}' cannot be hosted by another lesion",
                            c.name
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Checks that every plan class is declared and hosts are introduced no later than lesions.
    pub fn validate_with_plan(&self, plan: &StagePlan) -> Result<()> {
        self.validate()?;
        plan.validate()?;
        for c in plan.all_classes() {
            if self.class(c).is_none() {
                return Err(Error::Config(format!("plan class {c} is not declared in the phantom spec")));
            }
        }
        for c in &self.classes {
            if let ShapeFamily::InsetLesion { host } = c.shape {
                if let (Some(ls), hs) = (plan.stage_of(c.id), plan.stage_of(host)) {
                    if hs.map_or(true, |h| h > ls) {
                        return Err(Error::Config(format!(
                            "lesion class '{}' introduced before its host {host}",
                            c.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Instance {
    class_index: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    minor: f64,
    angle: f64,
    inner: f64,
    level: f64,
}

impl Instance {
    fn contains(&self, shape: &ShapeFamily, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match shape {
            ShapeFamily::Disk | ShapeFamily::InsetLesion { .. } => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeFamily::Annulus { .. } => {
                let r2 = dx * dx + dy * dy;
                r2 <= self.radius * self.radius && r2 >= self.inner * self.inner
            }
            ShapeFamily::Blob { .. } => {
                let (s, c) = self.angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / self.radius).powi(2) + (v / self.minor).powi(2) <= 1.0
            }
        }
    }
}

fn band_level(band: [f64; 2], noise: f64, rng: &mut SplitMix64) -> f64 {
    let mid = 0.5 * (band[0] + band[1]);
    let u = rng.next_f64();
    if noise == 0.0 {
        mid
    } else {
        band[0] + (band[1] - band[0]) * u
    }
}

/// Renders one phantom. Deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, MultiLabelMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = SplitMix64::new(derive_seed(seed, 0x5048_414e_544f_4d));
    let mut placed: Vec<Instance> = Vec::new();

    for (ci, c) in spec.classes.iter().enumerate() {
        if matches!(c.shape, ShapeFamily::InsetLesion { .. }) {
            continue;
        }
        let present = rng.next_f64() < c.presence;
        let count = rng.range_inclusive(c.count[0] as u64, c.count[1] as u64);
        if !present {
            continue;
        }
        for _ in 0..count {
            let radius = rng.uniform(c.size[0], c.size[1]);
            let (minor, angle) = match &c.shape {
                ShapeFamily::Blob { aspect } => {
                    (radius * rng.uniform(aspect[0], aspect[1]), rng.uniform(0.0, std::f64::consts::PI))
                }
                _ => (radius, 0.0),
            };
            let inner = match &c.shape {
                ShapeFamily::Annulus { inner_ratio } => radius * inner_ratio,
                _ => 0.0,
            };
            let level = band_level(c.intensity, spec.noise, &mut rng);
            let lo = radius + 1.0;
            let (hi_x, hi_y) = (w as f64 - radius - 2.0, h as f64 - radius - 2.0);
            if hi_x < lo || hi_y < lo {
                continue;
            }
            for _attempt in 0..200 {
                let cx = rng.uniform(lo, hi_x);
                let cy = rng.uniform(lo, hi_y);
                let clear = placed.iter().all(|o| {
                    let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                    d >= o.radius + radius + 2.0
                });
                if clear {
                    placed.push(Instance {
                        class_index: ci,
                        cx,
                        cy,
                        radius,
                        minor,
                        angle,
                        inner,
                        level,
                    });
                    break;
                }
            }
        }
    }

    let mut lesions: Vec<Instance> = Vec::new();
    for (ci, c) in spec.classes.iter().enumerate() {
        let ShapeFamily::InsetLesion { host } = c.shape else {
            continue;
        };
        let present = rng.next_f64() < c.presence;
        let count = rng.range_inclusive(c.count[0] as u64, c.count[1] as u64);
        let hosts: Vec<&Instance> = placed
            .iter()
            .filter(|o| spec.classes[o.class_index].id == host)
            .collect();
        if !present || hosts.is_empty() {
            continue;
        }
        for _ in 0..count {
            let host_inst = hosts[(rng.next_u64() % hosts.len() as u64) as usize];
            let host_shape = &spec.classes[host_inst.class_index].shape;
            let radius = rng.uniform(c.size[0], c.size[1]).min(host_inst.minor * 0.7);
            let level = band_level(c.intensity, spec.noise, &mut rng);
            for _attempt in 0..200 {
                let cx = host_inst.cx + rng.uniform(-host_inst.radius, host_inst.radius);
                let cy = host_inst.cy + rng.uniform(-host_inst.radius, host_inst.radius);
                let cand = Instance {
                    class_index: ci,
                    cx,
                    cy,
                    radius,
                    minor: radius,
                    angle: 0.0,
                    inner: 0.0,
                    level,
                };
                // Every lesion pixel must fall inside the host instance.
                let r = radius.ceil() as i64 + 1;
                let inside = (-r..=r).all(|oy| {
                    (-r..=r).all(|ox| {
                        let (px, py) = (cx.round() + ox as f64, cy.round() + oy as f64);
                        !cand.contains(&c.shape, px, py) || host_inst.contains(host_shape, px, py)
                    })
                });
                if inside {
                    lesions.push(cand);
                    break;
                }
            }
        }
    }

    let mut image = vec![spec.background; h * w];
    let mut planes: BTreeMap<ClassId, Vec<u8>> =
        spec.classes.iter().map(|c| (c.id, vec![0u8; h * w])).collect();
    for inst in placed.iter().chain(&lesions) {
        let c = &spec.classes[inst.class_index];
        let plane = planes.get_mut(&c.id).expect("plane per class");
        let r = inst.radius.ceil() as i64 + 1;
        let (x0, x1) = ((inst.cx as i64 - r).max(0), (inst.cx as i64 + r).min(w as i64 - 1));
        let (y0, y1) = ((inst.cy as i64 - r).max(0), (inst.cy as i64 + r).min(h as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inst.contains(&c.shape, x as f64, y as f64) {
                    let i = y as usize * w + x as usize;
                    image[i] = inst.level;
                    plane[i] = 1;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut image {
            *v += spec.noise * rng.normal();
        }
    }
    let intensities = image.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((
        Volume::new(h, w, intensities)?,
        MultiLabelMask {
            height: h,
            width: w,
            planes,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub mask: MultiLabelMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Eval,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
            Split::Eval => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub new_classes: Vec<ClassId>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl StageData {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Eval => &[],
        }
    }
}

/// Staged training data plus a fully annotated held-out evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedDataset {
    pub spec: PhantomSpec,
    pub plan: StagePlan,
    pub seed: u64,
    pub stages: Vec<StageData>,
    pub eval: Vec<Sample>,
}

impl StagedDataset {
    pub fn stage(&self, t: usize) -> Result<&StageData> {
        self.stages
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("dataset has no stage {t}")))
    }

    pub fn class_name(&self, id: ClassId) -> String {
        self.spec.class(id).map(|c| c.name.clone()).unwrap_or_else(|| format!("class-{id}"))
    }
}

/// Sizes of the validation/test splits and evaluation set for `n_per_stage` training samples.
pub fn split_sizes(n_per_stage: usize) -> (usize, usize, usize) {
    let holdout = n_per_stage.div_ceil(10).max(1);
    let eval = (n_per_stage / 4).max(4);
    (holdout, holdout, eval)
}

fn sample_seed(seed: u64, stage: usize, split: Split, index: usize) -> u64 {
    derive_seed(seed, ((stage as u64) << 40) | (split.key() << 32) | index as u64)
}

/// Generates the staged dataset: stage `t` samples carry planes only for `C_t - C_{t-1}`.
pub fn make_staged_dataset(
    plan: &StagePlan,
    spec: &PhantomSpec,
    n_per_stage: usize,
    seed: u64,
) -> Result<StagedDataset> {
    if n_per_stage == 0 {
        return Err(Error::Config("n_per_stage must be at least 1".into()));
    }
    spec.validate_with_plan(plan)?;
    let (n_val, n_test, n_eval) = split_sizes(n_per_stage);
    let gen_split = |stage: usize, split: Split, n: usize, classes: &[ClassId]| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| {
                let (volume, mask) = generate_phantom(spec, sample_seed(seed, stage, split, i))?;
                Ok(Sample {
                    volume,
                    mask: mask.restricted(classes),
                })
            })
            .collect()
    };
    let mut stages = Vec::with_capacity(plan.len());
    for (i, s) in plan.stages.iter().enumerate() {
        let t = i + 1;
        stages.push(StageData {
            new_classes: s.new_classes.clone(),
            train: gen_split(t, Split::Train, n_per_stage, &s.new_classes)?,
            val: gen_split(t, Split::Val, n_val, &s.new_classes)?,
            test: gen_split(t, Split::Test, n_test, &s.new_classes)?,
        });
    }
    let eval = gen_split(0, Split::Eval, n_eval, &plan.all_classes())?;
    Ok(StagedDataset {
        spec: spec.clone(),
        plan: plan.clone(),
        seed,
        stages,
        eval,
    })
}
