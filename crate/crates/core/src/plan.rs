use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Name of the class group this stage introduces (a table column group).
    pub group: String,
    /// Classes first annotated in this stage.
    pub new_classes: Vec<ClassId>,
}

/// The continual trajectory: which classes arrive at each step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    /// Three steps with 3/2/2 classes, shaped like the organ/gastro/cardiac trajectory.
    pub fn jhh_like() -> Self {
        Self {
            stages: vec![
                StageSpec { group: "organ".into(), new_classes: ids(&[0, 1, 2]) },
                StageSpec { group: "gastro".into(), new_classes: ids(&[3, 4]) },
                StageSpec { group: "cardiac".into(), new_classes: ids(&[5, 6]) },
            ],
        }
    }

    /// Organs first, then a tumor class inside one of them.
    pub fn btcv_lits_like() -> Self {
        Self {
            stages: vec![
                StageSpec { group: "organ".into(), new_classes: ids(&[0, 1, 2]) },
                StageSpec { group: "tumor".into(), new_classes: ids(&[3]) },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan has no stages".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.new_classes.is_empty() {
                return Err(Error::Config(format!("stage {} introduces no classes", i + 1)));
            }
            for &c in &s.new_classes {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in more than one stage")));
                }
            }
        }
        Ok(())
    }

    /// `C_t - C_{t-1}` for 1-based stage `t`.
    pub fn new_classes(&self, stage: usize) -> &[ClassId] {
        &self.stages[stage - 1].new_classes
    }

    /// Accumulated classes through 1-based stage `t`.
    pub fn accumulated(&self, stage: usize) -> Vec<ClassId> {
        self.stages[..stage.min(self.stages.len())]
            .iter()
            .flat_map(|s| s.new_classes.iter().copied())
            .collect()
    }

    /// 1-based stage that introduces `class`.
    pub fn stage_of(&self, class: ClassId) -> Option<usize> {
        self.stages
            .iter()
            .position(|s| s.new_classes.contains(&class))
            .map(|i| i + 1)
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.accumulated(self.stages.len())
    }
}

fn ids(v: &[u16]) -> Vec<ClassId> {
    v.iter().map(|&i| ClassId(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulation_is_union_of_prefixes() {
        let p = StagePlan::jhh_like();
        assert_eq!(p.accumulated(1), ids(&[0, 1, 2]));
        assert_eq!(p.accumulated(2), ids(&[0, 1, 2, 3, 4]));
        assert_eq!(p.accumulated(3).len(), 7);
        assert_eq!(p.stage_of(ClassId(4)), Some(2));
        assert_eq!(p.stage_of(ClassId(9)), None);
    }

    #[test]
    fn repeated_class_rejected() {
        let mut p = StagePlan::btcv_lits_like();
        p.stages[1].new_classes.push(ClassId(1));
        let err = p.validate().unwrap_err();
        assert!(err.to_string().contains("class 1"));
        assert!(StagePlan { stages: vec![] }.validate().is_err());
    }
}
