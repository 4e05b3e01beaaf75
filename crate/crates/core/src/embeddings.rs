//! Class-conditioning vectors and the append-only class registry.
//!
//! Three providers produce fixed-length embeddings: one-hot codes, seeded
//! hash pseudo-embeddings, and vectors imported from a JSON file written by
//! an external text encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::ClassId;

pub const PROMPT_TEMPLATE: &str = "a computerized tomography of a [CLS]";

/// Default embedding length for hash embeddings.
pub const DEFAULT_EMBEDDING_DIM: usize = 32;

pub fn prompt_for_class(name: &str) -> Result<String> {
    if name.is_empty() {
        return Err(Error::Config("class name must be nonempty".into()));
    }
    Ok(PROMPT_TEMPLATE.replace("[CLS]", name))
}

pub fn one_hot_embedding(index: usize, n: usize) -> Result<Vec<f64>> {
    if index >= n {
        return Err(Error::Config(format!("one-hot index {index} out of range for length {n}")));
    }
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    Ok(v)
}

/// Deterministic unit-norm pseudo-embedding of `name`.
pub fn hash_embedding(name: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::Config(format!("hash embedding dimension {dim} must be >= 2")));
    }
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = SplitMix64::new(key);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Contents of an embedding JSON file: `{"dim": E, "classes": {name: [..]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingTable {
    pub dim: usize,
    #[serde(deserialize_with = "unique_map")]
    pub classes: BTreeMap<String, Vec<f64>>,
}

fn unique_map<'de, D>(de: D) -> std::result::Result<BTreeMap<String, Vec<f64>>, D::Error>
where
    D: Deserializer<'de>,
{
    struct UniqueVisitor;
    impl<'de> Visitor<'de> for UniqueVisitor {
        type Value = BTreeMap<String, Vec<f64>>;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map of class names to float arrays")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("duplicate class name '{k}'")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }
    de.deserialize_map(UniqueVisitor)
}

impl EmbeddingTable {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in &self.classes {
            if v.len() != self.dim {
                return Err(Error::EmbeddingDim {
                    class: name.clone(),
                    expected: self.dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(format!("classes.{name}"), "non-finite entry"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: EmbeddingTable = serde_json::from_str(text)
            .map_err(|e| Error::format("embedding file", e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("embedding table serializes")
    }

    pub fn hashed<'a>(names: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for name in names {
            classes.insert(name.to_string(), hash_embedding(name, dim, seed)?);
        }
        Ok(Self { dim, classes })
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_json(&text)
}

pub fn save_embedding_file(table: &EmbeddingTable, path: &Path) -> Result<()> {
    table.validate()?;
    std::fs::write(path, table.to_json()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingProvider {
    /// One-hot codes of length `dim`, indexed by class id.
    OneHot { dim: usize },
    /// Seeded hash pseudo-embeddings.
    Hash { dim: usize, seed: u64 },
    /// Vectors read from an embedding JSON file.
    File {
        path: String,
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

fn default_true() -> bool {
    true
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        EmbeddingProvider::Hash {
            dim: DEFAULT_EMBEDDING_DIM,
            seed: 0,
        }
    }
}

impl EmbeddingProvider {
    pub fn tag(&self) -> &'static str {
        match self {
            EmbeddingProvider::OneHot { .. } => "one-hot",
            EmbeddingProvider::Hash { .. } => "hash",
            EmbeddingProvider::File { .. } => "file",
        }
    }

    /// Resolves the provider into a concrete source of vectors.
    pub fn resolve(&self) -> Result<EmbeddingSource> {
        Ok(match self {
            EmbeddingProvider::OneHot { dim } => EmbeddingSource::OneHot { dim: *dim },
            EmbeddingProvider::Hash { dim, seed } => {
                if *dim < 2 {
                    return Err(Error::Config(format!("hash embedding dimension {dim} must be >= 2")));
                }
                EmbeddingSource::Hash { dim: *dim, seed: *seed }
            }
            EmbeddingProvider::File { path, normalize } => EmbeddingSource::Table {
                table: load_embedding_file(Path::new(path))?,
                normalize: *normalize,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    OneHot { dim: usize },
    Hash { dim: usize, seed: u64 },
    Table { table: EmbeddingTable, normalize: bool },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::OneHot { dim } | EmbeddingSource::Hash { dim, .. } => *dim,
            EmbeddingSource::Table { table, .. } => table.dim,
        }
    }

    pub fn embed(&self, id: ClassId, name: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingSource::OneHot { dim } => one_hot_embedding(id.0 as usize, *dim),
            EmbeddingSource::Hash { dim, seed } => hash_embedding(name, *dim, *seed),
            EmbeddingSource::Table { table, normalize } => {
                let v = table.classes.get(name).ok_or_else(|| {
                    Error::Config(format!("class '{name}' missing from embedding file"))
                })?;
                Ok(if *normalize { crate::embeddings::normalize(v) } else { v.clone() })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDescriptor {
    pub id: ClassId,
    pub name: String,
    pub prompt: String,
    #[serde(skip)]
    pub embedding: Vec<f32>,
    pub stage_introduced: usize,
}

impl ClassDescriptor {
    pub fn new(id: ClassId, name: &str, stage: usize, source: &EmbeddingSource) -> Result<Self> {
        let prompt = prompt_for_class(name)?;
        let embedding = source.embed(id, name)?.into_iter().map(|v| v as f32).collect();
        Ok(Self {
            id,
            name: name.to_string(),
            prompt,
            embedding,
            stage_introduced: stage,
        })
    }
}

/// Append-only catalog of classes known to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub dim: usize,
    pub provider: String,
    pub classes: Vec<ClassDescriptor>,
}

impl ClassRegistry {
    pub fn new(dim: usize, provider: &str) -> Self {
        Self {
            dim,
            provider: provider.to_string(),
            classes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassDescriptor> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// Checks a batch of descriptors without modifying the registry.
    pub fn check_new(&self, new: &[ClassDescriptor]) -> Result<()> {
        let mut seen: Vec<ClassId> = self.ids();
        for d in new {
            if seen.contains(&d.id) {
                return Err(Error::DuplicateClass(d.id));
            }
            if d.embedding.len() != self.dim {
                return Err(Error::EmbeddingDim {
                    class: d.name.clone(),
                    expected: self.dim,
                    got: d.embedding.len(),
                });
            }
            seen.push(d.id);
        }
        Ok(())
    }

    pub fn extend(&mut self, new: Vec<ClassDescriptor>) -> Result<()> {
        self.check_new(&new)?;
        self.classes.extend(new);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_template() {
        assert_eq!(prompt_for_class("liver").unwrap(), "a computerized tomography of a liver");
        assert_eq!(
            prompt_for_class("portal vein").unwrap(),
            "a computerized tomography of a portal vein"
        );
        assert!(prompt_for_class("").is_err());
    }

    #[test]
    fn one_hot() {
        assert_eq!(one_hot_embedding(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot_embedding(0, 1).unwrap(), vec![1.0]);
        assert!(one_hot_embedding(4, 4).is_err());
        for i in 0..7 {
            assert_eq!(one_hot_embedding(i, 7).unwrap().iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn hash_embedding_is_unit_and_deterministic() {
        let a = hash_embedding("spleen", 32, 0).unwrap();
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a, hash_embedding("spleen", 32, 0).unwrap());
        assert_ne!(a, hash_embedding("spleen", 32, 1).unwrap());
        assert!(hash_embedding("x", 1, 0).is_err());
    }

    #[test]
    fn hash_embeddings_are_spread_out() {
        let names: Vec<String> = (0..100).map(|i| format!("organ-{i}")).collect();
        let vecs: Vec<Vec<f64>> = names.iter().map(|n| hash_embedding(n, 32, 0).unwrap()).collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let cos: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                assert!(cos.abs() < 0.9, "{i} vs {j}: {cos}");
            }
        }
    }

    #[test]
    fn minimal_file_parses() {
        let t = EmbeddingTable::from_json(r#"{"dim":4, "classes":{"liver":[1,0,0,0]}}"#).unwrap();
        assert_eq!(t.classes.len(), 1);
        assert_eq!(t.classes["liver"], vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_length_names_the_class() {
        let err = EmbeddingTable::from_json(r#"{"dim":4, "classes":{"liver":[1,0,0,0],"kidney":[1,0]}}"#)
            .unwrap_err();
        match err {
            Error::EmbeddingDim { class, expected, got } => {
                assert_eq!((class.as_str(), expected, got), ("kidney", 4, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_files_rejected() {
        let dup = r#"{"dim":1, "classes":{"a":[1],"a":[2]}}"#;
        assert!(matches!(EmbeddingTable::from_json(dup), Err(Error::Format { .. })));
        assert!(EmbeddingTable::from_json("{\"dim\":2}").is_err());
        assert!(EmbeddingTable::from_json("not json").is_err());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let table = EmbeddingTable::hashed(["liver", "spleen", "portal vein"], 32, 4).unwrap();
        save_embedding_file(&table, &path).unwrap();
        assert_eq!(load_embedding_file(&path).unwrap(), table);
    }

    #[test]
    fn registry_is_append_only() {
        let src = EmbeddingSource::Hash { dim: 8, seed: 0 };
        let mut reg = ClassRegistry::new(8, "hash");
        reg.extend(vec![ClassDescriptor::new(ClassId(0), "liver", 1, &src).unwrap()]).unwrap();
        let before = reg.classes[0].clone();
        reg.extend(vec![ClassDescriptor::new(ClassId(1), "tumor", 2, &src).unwrap()]).unwrap();
        assert_eq!(reg.classes[0], before);
        let dup = ClassDescriptor::new(ClassId(1), "again", 3, &src).unwrap();
        assert!(matches!(reg.extend(vec![dup]), Err(Error::DuplicateClass(ClassId(1)))));
        assert_eq!(reg.len(), 2);
    }
}
