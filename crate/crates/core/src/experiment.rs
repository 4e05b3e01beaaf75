//! Experiment configuration, output layout and the multi-branch trajectory
//! runner shared by the command-line tool and the acceptance suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{run_stage, PredictMode, StageOutcome, TrainConfig, Method};
use crate::distill::DistillConfig;
use crate::embeddings::{ClassRegistry, EmbeddingProvider, EmbeddingSource};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, DiceReport};
use crate::model::{hex_digest, ModelSpec, SegModel};
use crate::phantom::{PhantomSpec, StagedDataset};
use crate::plan::StagePlan;
use crate::ClassId;

/// Environment variable that overrides `output` from the config file.
pub const OUTPUT_ROOT_ENV: &str = "CONTSEG_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub plan: StagePlan,
    pub spec: PhantomSpec,
    pub seed: u64,
    pub n_per_stage: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            plan: StagePlan::jhh_like(),
            spec: PhantomSpec::jhh_like(),
            seed: 0,
            n_per_stage: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub spec: ModelSpec,
    pub embedding: EmbeddingProvider,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spec: ModelSpec::reference(64, 64),
            embedding: EmbeddingProvider::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: PredictMode,
}

/// Everything needed to reproduce a run; serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub method: Method,
    pub eval: EvalConfig,
    pub output: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            method: Method::Ours,
            eval: EvalConfig::default(),
            output: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    /// The two-stage organ-then-tumor trajectory with the desk-scale
    /// schedule used by the forgetting comparison.
    pub fn two_stage() -> Self {
        Self {
            dataset: DatasetConfig {
                plan: StagePlan::btcv_lits_like(),
                spec: PhantomSpec::btcv_lits_like(),
                seed: 0,
                n_per_stage: 200,
            },
            train: TrainConfig {
                lr: 2e-3,
                epochs: 15,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "three-stage" => Ok(Self::default()),
            "two-stage" => Ok(Self::two_stage()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected three-stage or two-stage)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short digest of the canonical JSON form, recorded next to every output.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex_digest(canonical.as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.n_per_stage == 0 {
            return Err(Error::Config("dataset.n_per_stage must be at least 1".into()));
        }
        d.spec.validate_with_plan(&d.plan)?;
        let m = &self.model.spec;
        m.validate()?;
        if m.dims.in_channels != 1 || m.dims.height != d.spec.height || m.dims.width != d.spec.width {
            return Err(Error::Config(format!(
                "model input {}x{}x{} does not match phantom images 1x{}x{}",
                m.dims.in_channels, m.dims.height, m.dims.width, d.spec.height, d.spec.width
            )));
        }
        if let EmbeddingProvider::OneHot { dim } = self.model.embedding {
            if let Some(max) = d.plan.all_classes().iter().map(|c| c.0 as usize).max() {
                if max >= dim {
                    return Err(Error::Config(format!(
                        "one-hot dimension {dim} cannot encode class id {max}"
                    )));
                }
            }
        }
        self.train.validate()?;
        self.distill.validate()?;
        if self.output.is_empty() {
            return Err(Error::Config("output directory must be nonempty".into()));
        }
        Ok(())
    }

    /// The output root, honoring [`OUTPUT_ROOT_ENV`].
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(&self.output))
    }

    /// A model with no classes, initialized from the config's seed.
    pub fn initial_model(&self, source: &EmbeddingSource) -> Result<SegModel<f32>> {
        SegModel::new(
            self.model.spec.clone(),
            ClassRegistry::new(source.dim(), self.model.embedding.tag()),
            self.train.seed,
        )
    }
}

/// File locations under an output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.json")
    }

    pub fn stage_dir(&self, method: Method, stage: usize) -> PathBuf {
        self.root.join("runs").join(method.name()).join(format!("stage_{stage}"))
    }

    pub fn checkpoint(&self, method: Method, stage: usize) -> PathBuf {
        self.stage_dir(method, stage).join("model.ckpt")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn flops(&self) -> PathBuf {
        self.root.join("flops")
    }
}

/// Writes `provenance.json` recording the config hash and command-specific facts.
pub fn write_provenance(dir: &Path, config_hash: &str, command: &str, facts: BTreeMap<&str, String>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut map = BTreeMap::new();
    map.insert("command", command.to_string());
    map.insert("config_hash", config_hash.to_string());
    map.extend(facts);
    let path = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&map).expect("provenance serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Checks that a checkpoint's classes are exactly those accumulated by its stage.
pub fn check_registry(model: &SegModel<f32>, plan: &StagePlan) -> Result<()> {
    if model.stage == 0 || model.stage > plan.len() {
        return Err(Error::Consistency(format!(
            "checkpoint stage {} outside the {}-stage plan",
            model.stage,
            plan.len()
        )));
    }
    let expected = plan.accumulated(model.stage);
    let got = model.class_ids();
    if got != expected {
        return Err(Error::Consistency(format!(
            "checkpoint classes {} differ from the stage-{} classes {} of the evaluation set",
            fmt_ids(&got),
            model.stage,
            fmt_ids(&expected)
        )));
    }
    Ok(())
}

fn fmt_ids(ids: &[ClassId]) -> String {
    let parts: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Evaluates `model` on the dataset's evaluation set and appends the step to `report`.
pub fn evaluate_into(
    report: &mut DiceReport,
    label: &str,
    model: &SegModel<f32>,
    ds: &StagedDataset,
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<ClassId, f64>> {
    check_registry(model, &ds.plan)?;
    let per_class = evaluate_model(model, &ds.eval, cfg.eval.mode, cfg.train.threshold as f32)?;
    report.add_step(label, model.stage, &ds.plan, &per_class, |id| ds.class_name(id))?;
    Ok(per_class)
}

/// One line of a comparison: a label, a method and an embedding provider.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub label: String,
    pub method: Method,
    pub embedding: EmbeddingProvider,
}

impl Branch {
    pub fn method(cfg: &ExperimentConfig, method: Method) -> Self {
        Self {
            label: method.name().to_string(),
            method,
            embedding: cfg.model.embedding.clone(),
        }
    }
}

/// Every stage outcome of one branch, in stage order.
#[derive(Debug, Clone)]
pub struct BranchRun {
    pub branch: Branch,
    pub stages: Vec<StageOutcome>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: DiceReport,
    pub runs: Vec<BranchRun>,
}

/// Trains every branch through the plan and evaluates after each stage.
///
/// The first stage has no old classes, so every method trains it identically;
/// branches sharing an embedding provider reuse one first-stage model.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    ds: &StagedDataset,
    branches: &[Branch],
    mut progress: impl FnMut(&str),
) -> Result<Comparison> {
    let mut report = DiceReport::default();
    let mut first: Vec<(EmbeddingProvider, StageOutcome, BTreeMap<ClassId, f64>)> = Vec::new();
    let mut runs = Vec::with_capacity(branches.len());
    for b in branches {
        let source = b.embedding.resolve()?;
        let cached = first.iter().position(|(p, _, _)| *p == b.embedding);
        let idx = match cached {
            Some(i) => i,
            None => {
                let init = cfg.initial_model(&source)?;
                let out = run_stage(&init, ds, 1, &source, &cfg.train, Method::Ours, &cfg.distill)?;
                let per_class = evaluate_model(&out.model, &ds.eval, cfg.eval.mode, cfg.train.threshold as f32)?;
                progress(&format!("stage 1 ({}) trained", b.embedding.tag()));
                first.push((b.embedding.clone(), out, per_class));
                first.len() - 1
            }
        };
        let (_, stage1, per_class1) = &first[idx];
        report.add_step(&b.label, 1, &ds.plan, per_class1, |id| ds.class_name(id))?;
        let mut stages = vec![stage1.clone()];
        for t in 2..=ds.plan.len() {
            let prev = &stages.last().expect("stage 1 present").model;
            let out = run_stage(prev, ds, t, &source, &cfg.train, b.method, &cfg.distill)?;
            evaluate_into(&mut report, &b.label, &out.model, ds, cfg)?;
            progress(&format!("{} stage {t} trained", b.label));
            stages.push(out);
        }
        runs.push(BranchRun {
            branch: b.clone(),
            stages,
        });
    }
    Ok(Comparison { report, runs })
}
