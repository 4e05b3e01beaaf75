use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contseg::continual::{
    load_pseudo_labels, run_stage_with, save_pseudo_labels, stage_descriptors, stage_pseudo_labels, PseudoLabelStore,
};
use contseg::embeddings::{save_embedding_file, EmbeddingTable};
use contseg::experiment::{check_registry, evaluate_into, write_provenance, ExperimentConfig, Layout};
use contseg::flops::{audit_reference_net, gflops, growth_model, Audit, GrowthConstants, Strategy, PAPER_HEADS_PER_STEP};
use contseg::metrics::{emit_report, DiceReport, ReportFormat};
use contseg::model::{checkpoint_hash, load_checkpoint, save_checkpoint, SegModel};
use contseg::phantom::{load_dataset, make_staged_dataset, save_dataset, StagedDataset};

use crate::UsageError;

const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Table, ReportFormat::Plot];

fn layout(cfg: &ExperimentConfig) -> Layout {
    Layout::new(cfg.output_root())
}

fn facts<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn open_dataset(layout: &Layout) -> Result<StagedDataset> {
    let dir = layout.dataset();
    load_dataset(&dir).with_context(|| format!("loading dataset from {} (run gen-data first)", dir.display()))
}

pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let layout = layout(cfg);
    let dir = layout.dataset();
    if is_nonempty_dir(&dir) {
        if !force {
            return Err(UsageError(format!("{} is not empty; pass --force to replace it", dir.display())).into());
        }
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let d = &cfg.dataset;
    let ds = make_staged_dataset(&d.plan, &d.spec, d.n_per_stage, d.seed)?;
    save_dataset(&ds, &dir)?;
    write_provenance(&dir, &cfg.hash(), "gen-data", facts([("seed", d.seed.to_string())]))?;
    println!("dataset: {}", dir.display());
    for (i, (stage, data)) in d.plan.stages.iter().zip(&ds.stages).enumerate() {
        let names: Vec<String> = stage.new_classes.iter().map(|&id| ds.class_name(id)).collect();
        println!(
            "  stage {} [{}]: {} | train {} val {} test {}",
            i + 1,
            stage.group,
            names.join(", "),
            data.train.len(),
            data.val.len(),
            data.test.len()
        );
    }
    println!("  eval: {} fully annotated samples", ds.eval.len());
    Ok(())
}

pub fn embed(cfg: &ExperimentConfig, validate: Option<&Path>) -> Result<()> {
    let spec = &cfg.dataset.spec;
    let ids = cfg.dataset.plan.all_classes();
    let names: Vec<String> = ids
        .iter()
        .map(|&id| spec.class(id).map(|c| c.name.clone()).unwrap_or_else(|| format!("class-{id}")))
        .collect();
    if let Some(path) = validate {
        let table = contseg::embeddings::load_embedding_file(path)?;
        let missing: Vec<&str> = names.iter().filter(|n| !table.classes.contains_key(*n)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(UsageError(format!("{} lacks classes: {}", path.display(), missing.join(", "))).into());
        }
        println!("{}: {} classes, dim {} - ok", path.display(), table.classes.len(), table.dim);
        return Ok(());
    }
    let source = cfg.model.embedding.resolve()?;
    let mut table = EmbeddingTable {
        dim: source.dim(),
        classes: BTreeMap::new(),
    };
    for (&id, name) in ids.iter().zip(&names) {
        table.classes.insert(name.clone(), source.embed(id, name)?);
    }
    let layout = layout(cfg);
    fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
    let path = layout.embeddings();
    save_embedding_file(&table, &path)?;
    println!(
        "{}: {} classes, dim {} ({})",
        path.display(),
        table.classes.len(),
        table.dim,
        cfg.model.embedding.tag()
    );
    Ok(())
}

/// Pseudo labels stored for `stage` if they came from `previous`, else fresh ones (persisted).
fn pseudo_for(
    cfg: &ExperimentConfig,
    layout: &Layout,
    ds: &StagedDataset,
    stage: usize,
    previous: &SegModel<f32>,
) -> Result<PseudoLabelStore> {
    if !cfg.method.uses_pseudo_labels() || previous.registry.is_empty() {
        return Ok(stage_pseudo_labels(previous, ds, stage, cfg.method, cfg.train.pseudo_mode)?);
    }
    let producer = checkpoint_hash(previous);
    if let Ok(stored) = load_pseudo_labels(&layout.dataset(), stage) {
        if stored.provenance.as_deref() == Some(producer.as_str())
            && stored.mode == cfg.train.pseudo_mode
            && stored.classes == previous.class_ids()
        {
            return Ok(stored);
        }
    }
    let store = stage_pseudo_labels(previous, ds, stage, cfg.method, cfg.train.pseudo_mode)?;
    save_pseudo_labels(&store, &layout.dataset(), stage)?;
    Ok(store)
}

pub fn train(cfg: &ExperimentConfig, stage: usize, from: Option<&Path>) -> Result<()> {
    let n_stages = cfg.dataset.plan.len();
    if stage == 0 || stage > n_stages {
        return Err(UsageError(format!("--stage must lie in 1..={n_stages}")).into());
    }
    let previous = match (stage, from) {
        (1, None) => cfg.initial_model(&cfg.model.embedding.resolve()?)?,
        (1, Some(_)) => return Err(UsageError("stage 1 starts from scratch; drop --from".into()).into()),
        (_, None) => {
            return Err(UsageError(format!("stage {stage} needs --from <stage {} checkpoint>", stage - 1)).into())
        }
        (_, Some(path)) => {
            let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if model.stage != stage - 1 {
                bail!(contseg::Error::Consistency(format!(
                    "{} holds a stage-{} model; stage {stage} needs stage {}",
                    path.display(),
                    model.stage,
                    stage - 1
                )));
            }
            check_registry(&model, &cfg.dataset.plan)?;
            if model.spec != cfg.model.spec {
                bail!(contseg::Error::Consistency("checkpoint architecture differs from the config".into()));
            }
            model
        }
    };
    let layout = layout(cfg);
    let ds = open_dataset(&layout)?;
    if ds.plan != cfg.dataset.plan {
        bail!(contseg::Error::Consistency("dataset on disk was generated from a different plan".into()));
    }
    let source = cfg.model.embedding.resolve()?;
    let pseudo = pseudo_for(cfg, &layout, &ds, stage, &previous)?;
    let new_names: Vec<String> = stage_descriptors(&ds, stage, &source)?.into_iter().map(|d| d.name).collect();
    println!(
        "stage {stage}: method {}, new classes [{}], {} pseudo-labelled old classes",
        cfg.method.name(),
        new_names.join(", "),
        pseudo.classes.len()
    );
    let outcome = run_stage_with(&previous, &ds, stage, &source, &cfg.train, cfg.method, &cfg.distill, pseudo)?;
    let dir = layout.stage_dir(cfg.method, stage);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = layout.checkpoint(cfg.method, stage);
    let hash = save_checkpoint(&outcome.model, &ckpt)?;
    let log_path = dir.join("loss_log.csv");
    fs::write(&log_path, outcome.log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    let from_hash = if stage > 1 { checkpoint_hash(&previous) } else { String::new() };
    write_provenance(
        &dir,
        &cfg.hash(),
        "train",
        facts([
            ("checkpoint", hash.clone()),
            ("from", from_hash),
            ("method", cfg.method.name().to_string()),
            ("stage", stage.to_string()),
        ]),
    )?;
    println!(
        "loss {:.4} -> {:.4} over {} iterations",
        outcome.log.first_loss().unwrap_or(f64::NAN),
        outcome.log.last_loss().unwrap_or(f64::NAN),
        outcome.log.entries.len()
    );
    println!("checkpoint: {} (sha256 {hash})", ckpt.display());
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let layout = layout(cfg);
    let ds = open_dataset(&layout)?;
    let mut report = DiceReport::default();
    evaluate_into(&mut report, cfg.method.name(), &model, &ds, cfg)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    let written = emit_report(&report, &dir, "dice", &ALL_FORMATS)?;
    write_provenance(
        &dir,
        &cfg.hash(),
        "eval",
        facts([
            ("checkpoint", checkpoint_hash(&model)),
            ("method", cfg.method.name().to_string()),
            ("stage", model.stage.to_string()),
        ]),
    )?;
    print!("{}", report.render_table());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn collect_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let runs = root.join("runs");
    let mut found = Vec::new();
    let Ok(methods) = fs::read_dir(&runs) else {
        return Ok(found);
    };
    for m in methods {
        let m = m.with_context(|| format!("listing {}", runs.display()))?.path();
        let Ok(stages) = fs::read_dir(&m) else { continue };
        for s in stages {
            let p = s.with_context(|| format!("listing {}", m.display()))?.path().join("dice.csv");
            if p.is_file() {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn report(cfg: &ExperimentConfig) -> Result<()> {
    let layout = layout(cfg);
    let files = collect_reports(&layout.root)?;
    if files.is_empty() {
        bail!("no evaluated checkpoints under {} (run eval first)", layout.root.join("runs").display());
    }
    let mut merged = DiceReport::default();
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        merged.rows.extend(DiceReport::from_csv(&text)?.rows);
    }
    let dir = layout.report();
    let written = emit_report(&merged, &dir, "dice", &ALL_FORMATS)?;
    let sources: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(&layout.root).unwrap_or(f).display().to_string())
        .collect();
    write_provenance(&dir, &cfg.hash(), "report", facts([("sources", sources.join(";"))]))?;
    print!("{}", merged.render_table());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// The config's model with every class in the plan registered.
fn full_model(cfg: &ExperimentConfig) -> Result<SegModel<f32>> {
    let source = cfg.model.embedding.resolve()?;
    let mut model = cfg.initial_model(&source)?;
    let plan = &cfg.dataset.plan;
    for (i, stage) in plan.stages.iter().enumerate() {
        let descriptors = stage
            .new_classes
            .iter()
            .map(|&id| {
                let name = cfg.dataset.spec.class(id).map(|c| c.name.clone()).unwrap_or_else(|| format!("class-{id}"));
                contseg::embeddings::ClassDescriptor::new(id, &name, i + 1, &source)
            })
            .collect::<contseg::Result<Vec<_>>>()?;
        model.extend(descriptors)?;
    }
    Ok(model)
}

fn growth_rows(out: &mut String, scenario: &str, heads: &[usize], c: &GrowthConstants) -> Result<()> {
    for s in Strategy::ALL {
        let curve = growth_model(s, heads.len(), heads, c)?;
        for (t, f) in curve.flops.iter().enumerate() {
            out.push_str(&format!("{scenario},{s},{},{f},{}\n", t + 1, gflops(*f)));
        }
    }
    Ok(())
}

pub fn flops(cfg: &ExperimentConfig, paper_constants: bool) -> Result<()> {
    let model = full_model(cfg)?;
    let audits: Vec<Audit> = [1, 2]
        .into_iter()
        .map(|fpm| audit_reference_net(&model, fpm))
        .collect::<contseg::Result<_>>()?;
    for a in &audits {
        if !a.matches() {
            bail!(
                "analytic MAC count {} disagrees with the instrumented count {}",
                a.analytic_macs,
                a.instrumented_macs
            );
        }
    }
    let layout = layout(cfg);
    let dir = layout.flops();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut audit_csv = String::from("flops_per_mac,component,flops,params,growth_per_step\n");
    for a in &audits {
        for e in &a.entries {
            audit_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                a.flops_per_mac, e.component, e.flops, e.params, e.growth_per_step
            ));
        }
    }
    let audit_path = dir.join("audit.csv");
    fs::write(&audit_path, &audit_csv).with_context(|| format!("writing {}", audit_path.display()))?;

    let default_audit = &audits[1];
    let heads: Vec<usize> = cfg.dataset.plan.stages.iter().map(|s| s.new_classes.len()).collect();
    let mut growth_csv = String::from("scenario,strategy,step,flops,gflops\n");
    let measured = GrowthConstants::from_audit(default_audit, heads[0] as u64);
    growth_rows(&mut growth_csv, "reference-net", &heads, &measured)?;
    if paper_constants {
        growth_rows(&mut growth_csv, "paper-constants", &PAPER_HEADS_PER_STEP, &GrowthConstants::paper())?;
    }
    let growth_path = dir.join("growth.csv");
    fs::write(&growth_path, &growth_csv).with_context(|| format!("writing {}", growth_path.display()))?;
    write_provenance(
        &dir,
        &cfg.hash(),
        "flops",
        facts([("paper_constants", paper_constants.to_string())]),
    )?;

    println!("{:<22} {:>14} {:>14} {:>10}", "component", "flops (1/MAC)", "flops (2/MAC)", "params");
    for (e1, e2) in audits[0].entries.iter().zip(&audits[1].entries) {
        println!("{:<22} {:>14} {:>14} {:>10}", e1.component, e1.flops, e2.flops, e2.params);
    }
    println!(
        "forward pass over {} classes: {} MACs analytic = {} MACs instrumented",
        default_audit.n_classes, default_audit.analytic_macs, default_audit.instrumented_macs
    );
    print!("{growth_csv}");
    println!("wrote {} and {}", audit_path.display(), growth_path.display());
    Ok(())
}
