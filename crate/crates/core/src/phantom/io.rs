//! On-disk dataset format.
//!
//! A dataset is a directory holding `manifest.json` (dimensions, generator
//! spec, stage plan and a sample index) and a `samples/` directory with one
//! pair of raw buffers per sample: `<name>.f32` (little-endian intensities,
//! row-major) and `<name>.u8` (one byte per pixel per mask plane, planes in
//! the order listed by the manifest entry).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultiLabelMask, PhantomSpec, Sample, StageData, StagedDataset, Volume};
use crate::error::{Error, Result};
use crate::plan::StagePlan;
use crate::ClassId;

pub const DATASET_MAGIC: &str = "contseg-phantom-dataset";
pub const DATASET_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const SAMPLES: &str = "samples";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    magic: String,
    version: u32,
    height: usize,
    width: usize,
    seed: u64,
    spec: PhantomSpec,
    plan: StagePlan,
    stages: Vec<StageIndex>,
    eval: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageIndex {
    new_classes: Vec<ClassId>,
    train: Vec<SampleEntry>,
    val: Vec<SampleEntry>,
    test: Vec<SampleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    name: String,
    /// Class id of each plane stored in the mask buffer, in file order.
    planes: Vec<ClassId>,
}

fn write_sample(dir: &Path, name: &str, s: &Sample) -> Result<SampleEntry> {
    let f32_path = dir.join(format!("{name}.f32"));
    let bytes: Vec<u8> = s.volume.intensities.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&f32_path, bytes).map_err(|e| Error::io(&f32_path, e))?;
    let u8_path = dir.join(format!("{name}.u8"));
    let mask: Vec<u8> = s.mask.planes.values().flatten().copied().collect();
    fs::write(&u8_path, mask).map_err(|e| Error::io(&u8_path, e))?;
    Ok(SampleEntry {
        name: name.to_string(),
        planes: s.mask.class_ids(),
    })
}

/// Writes `ds` under `path`, creating the directory if needed.
pub fn save_dataset(ds: &StagedDataset, path: &Path) -> Result<()> {
    let samples = path.join(SAMPLES);
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let write_split = |prefix: &str, split: &[Sample]| -> Result<Vec<SampleEntry>> {
        split
            .iter()
            .enumerate()
            .map(|(i, s)| write_sample(&samples, &format!("{prefix}_{i:05}"), s))
            .collect()
    };
    let mut stages = Vec::with_capacity(ds.stages.len());
    for (i, st) in ds.stages.iter().enumerate() {
        let t = i + 1;
        stages.push(StageIndex {
            new_classes: st.new_classes.clone(),
            train: write_split(&format!("stage{t}_train"), &st.train)?,
            val: write_split(&format!("stage{t}_val"), &st.val)?,
            test: write_split(&format!("stage{t}_test"), &st.test)?,
        });
    }
    let manifest = Manifest {
        magic: DATASET_MAGIC.to_string(),
        version: DATASET_VERSION,
        height: ds.spec.height,
        width: ds.spec.width,
        seed: ds.seed,
        spec: ds.spec.clone(),
        plan: ds.plan.clone(),
        stages,
        eval: write_split("eval", &ds.eval)?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = path.join(MANIFEST);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

fn read_sample(dir: &Path, entry: &SampleEntry, height: usize, width: usize) -> Result<Sample> {
    let n = height * width;
    let f32_name = format!("{}.f32", entry.name);
    let f32_path = dir.join(&f32_name);
    let bytes = fs::read(&f32_path).map_err(|e| Error::io(&f32_path, e))?;
    if bytes.len() != 4 * n {
        return Err(Error::format(
            format!("samples/{f32_name}"),
            format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        ));
    }
    let intensities: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let volume = Volume::new(height, width, intensities)
        .map_err(|e| Error::format(format!("samples/{f32_name}"), e.to_string()))?;

    let u8_name = format!("{}.u8", entry.name);
    let u8_path = dir.join(&u8_name);
    let bytes = fs::read(&u8_path).map_err(|e| Error::io(&u8_path, e))?;
    if bytes.len() != entry.planes.len() * n {
        return Err(Error::format(
            format!("samples/{u8_name}"),
            format!("expected {} bytes, found {}", entry.planes.len() * n, bytes.len()),
        ));
    }
    if bytes.iter().any(|&b| b > 1) {
        return Err(Error::format(format!("samples/{u8_name}"), "mask values must be 0 or 1"));
    }
    let mut mask = MultiLabelMask::empty(height, width);
    for (id, chunk) in entry.planes.iter().zip(bytes.chunks_exact(n.max(1))) {
        if mask.planes.insert(*id, chunk.to_vec()).is_some() {
            return Err(Error::format(format!("{}.planes", entry.name), format!("class {id} listed twice")));
        }
    }
    Ok(Sample { volume, mask })
}

/// Reads a dataset written by [`save_dataset`]. Mask planes are canonicalized
/// to class-id order regardless of their order on disk.
pub fn load_dataset(path: &Path) -> Result<StagedDataset> {
    let mpath = path.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(DATASET_MAGIC) => {}
        other => {
            return Err(Error::format(
                "magic",
                format!("expected '{DATASET_MAGIC}', found {other:?}"),
            ))
        }
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        other => {
            return Err(Error::format(
                "version",
                format!("expected {DATASET_VERSION}, found {other:?}"),
            ))
        }
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    if m.spec.height != m.height || m.spec.width != m.width {
        return Err(Error::format("height", "manifest dimensions disagree with spec"));
    }
    if m.stages.len() != m.plan.len() {
        return Err(Error::format("stages", "stage count disagrees with plan"));
    }
    let dir = path.join(SAMPLES);
    let read = |entries: &[SampleEntry]| -> Result<Vec<Sample>> {
        entries.iter().map(|e| read_sample(&dir, e, m.height, m.width)).collect()
    };
    let mut stages = Vec::with_capacity(m.stages.len());
    for st in &m.stages {
        stages.push(StageData {
            new_classes: st.new_classes.clone(),
            train: read(&st.train)?,
            val: read(&st.val)?,
            test: read(&st.test)?,
        });
    }
    let eval = read(&m.eval)?;
    Ok(StagedDataset {
        spec: m.spec,
        plan: m.plan,
        seed: m.seed,
        stages,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::make_staged_dataset;

    fn small() -> StagedDataset {
        let mut spec = PhantomSpec::btcv_lits_like();
        spec.height = 32;
        spec.width = 32;
        for c in &mut spec.classes {
            c.size = [c.size[0] / 2.0, c.size[1] / 2.0];
        }
        make_staged_dataset(&StagePlan::btcv_lits_like(), &spec, 3, 11).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace(DATASET_MAGIC, "contseg-phantom-datasex");
        fs::write(&mpath, text).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_names_the_field() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { field, .. }) if field == "version"));
    }

    #[test]
    fn truncated_buffer_is_a_format_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join(SAMPLES).join("stage1_train_00001.f32");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { field, .. }) => assert!(field.contains("stage1_train_00001.f32")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn permuted_plane_order_loads_canonically() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // Rewrite every eval sample with its planes stored in reverse class order.
        let mpath = dir.path().join(MANIFEST);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        let n = ds.spec.height * ds.spec.width;
        for (entry, sample) in m.eval.iter_mut().zip(&ds.eval) {
            entry.planes.reverse();
            let bytes: Vec<u8> = entry
                .planes
                .iter()
                .flat_map(|id| sample.mask.planes[id].iter().copied())
                .collect();
            assert_eq!(bytes.len(), entry.planes.len() * n);
            fs::write(dir.path().join(SAMPLES).join(format!("{}.u8", entry.name)), bytes).unwrap();
        }
        fs::write(&mpath, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
