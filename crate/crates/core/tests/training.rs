use contseg::continual::{run_stage, Method, TrainConfig};
use contseg::distill::DistillConfig;
use contseg::embeddings::{ClassRegistry, EmbeddingProvider, EmbeddingSource};
use contseg::model::{checkpoint_from_bytes, checkpoint_to_bytes, ModelSpec, SegModel};
use contseg::phantom::{make_staged_dataset, PhantomSpec, StagedDataset};
use contseg::plan::StagePlan;

const SIDE: usize = 16;

fn small_spec() -> PhantomSpec {
    let mut spec = PhantomSpec::btcv_lits_like();
    spec.height = SIDE;
    spec.width = SIDE;
    for c in &mut spec.classes {
        c.size = [c.size[0] / 4.0 + 1.0, c.size[1] / 4.0 + 1.0];
    }
    spec
}

fn dataset(n: usize) -> StagedDataset {
    make_staged_dataset(&StagePlan::btcv_lits_like(), &small_spec(), n, 11).unwrap()
}

fn source() -> EmbeddingSource {
    EmbeddingProvider::default().resolve().unwrap()
}

fn fresh_model(seed: u64) -> SegModel<f32> {
    SegModel::new(ModelSpec::reference(SIDE, SIDE), ClassRegistry::new(source().dim(), "hash"), seed).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_single_batch() {
    let ds = dataset(4);
    let cfg = config(200);
    let out = run_stage(&fresh_model(0), &ds, 1, &source(), &cfg, Method::Ours, &DistillConfig::default()).unwrap();
    assert_eq!(out.log.entries.len(), 200);
    let first = out.log.first_loss().unwrap();
    let last = out.log.last_loss().unwrap();
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(6);
    let cfg = config(2);
    let run = || {
        let s1 = run_stage(&fresh_model(3), &ds, 1, &source(), &cfg, Method::Ours, &DistillConfig::default()).unwrap();
        let s2 = run_stage(&s1.model, &ds, 2, &source(), &cfg, Method::Plop, &DistillConfig::default()).unwrap();
        (checkpoint_to_bytes(&s2.model), s2.log.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_from_a_checkpoint_matches_uninterrupted_training() {
    let ds = dataset(6);
    let cfg = config(2);
    let s1 = run_stage(&fresh_model(5), &ds, 1, &source(), &cfg, Method::Ours, &DistillConfig::default()).unwrap();
    let restored = checkpoint_from_bytes(&checkpoint_to_bytes(&s1.model)).unwrap();
    for method in [Method::Ours, Method::Lwf] {
        let direct = run_stage(&s1.model, &ds, 2, &source(), &cfg, method, &DistillConfig::default()).unwrap();
        let resumed = run_stage(&restored, &ds, 2, &source(), &cfg, method, &DistillConfig::default()).unwrap();
        assert_eq!(checkpoint_to_bytes(&direct.model), checkpoint_to_bytes(&resumed.model));
        assert_eq!(direct.log, resumed.log);
    }
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let ds = dataset(4);
    let init = fresh_model(9);
    let out = run_stage(&init, &ds, 1, &source(), &config(0), Method::Ours, &DistillConfig::default()).unwrap();
    assert!(out.log.entries.is_empty());
    let mut extended = init.clone();
    extended
        .extend(contseg::continual::stage_descriptors(&ds, 1, &source()).unwrap())
        .unwrap();
    assert_eq!(out.model.flat_params(), extended.flat_params());
}

#[test]
fn finetuning_ignores_old_classes() {
    let ds = dataset(4);
    let cfg = config(3);
    let s1 = run_stage(&fresh_model(1), &ds, 1, &source(), &cfg, Method::Ours, &DistillConfig::default()).unwrap();
    let ft = run_stage(&s1.model, &ds, 2, &source(), &cfg, Method::Finetune, &DistillConfig::default()).unwrap();
    assert!(ft.pseudo.is_empty());
    let ours = run_stage(&s1.model, &ds, 2, &source(), &cfg, Method::Ours, &DistillConfig::default()).unwrap();
    assert_eq!(ours.pseudo.classes, s1.model.class_ids());
    assert_eq!(ours.model.class_ids().len(), 4);
}
