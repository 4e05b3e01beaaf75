//! Brute-force oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use contseg::continual::{merge_pseudo_labels, PseudoLabels, PseudoMode, PseudoPlane};
use contseg::phantom::MultiLabelMask;
use contseg::rng::SplitMix64;
use contseg::ClassId;

/// Dice by counting set bits of two 16-pixel masks; both empty scores 1.
pub fn dice_bits(a: u16, b: u16) -> f64 {
    let denom = a.count_ones() + b.count_ones();
    if denom == 0 {
        return 1.0;
    }
    2.0 * (a & b).count_ones() as f64 / denom as f64
}

pub fn unpack(bits: u16, len: usize) -> Vec<u8> {
    (0..len).map(|i| ((bits >> i) & 1) as u8).collect()
}

/// A random merge instance: ground truth for new classes, probabilities for old ones.
pub struct MergeCase {
    pub gt_new: MultiLabelMask,
    pub old_probs: BTreeMap<ClassId, Vec<f32>>,
}

pub fn random_merge_case(rng: &mut SplitMix64) -> MergeCase {
    let height = rng.range_inclusive(1, 5) as usize;
    let width = rng.range_inclusive(1, 5) as usize;
    let n = height * width;
    let mut ids: Vec<u16> = (0..8).collect();
    rng.shuffle(&mut ids);
    let n_old = rng.range_inclusive(0, 3) as usize;
    let n_new = rng.range_inclusive(1, 3) as usize;
    let mut old_probs = BTreeMap::new();
    for &id in &ids[..n_old] {
        let plane = (0..n)
            .map(|_| match rng.range_inclusive(0, 9) {
                0 => 0.5,
                1 => 0.0,
                2 => 1.0,
                _ => rng.next_f64() as f32,
            })
            .collect();
        old_probs.insert(ClassId(id), plane);
    }
    let mut planes = BTreeMap::new();
    for &id in &ids[n_old..n_old + n_new] {
        planes.insert(ClassId(id), (0..n).map(|_| rng.range_inclusive(0, 1) as u8).collect());
    }
    MergeCase {
        gt_new: MultiLabelMask { height, width, planes },
        old_probs,
    }
}

/// Per pixel and class: ground truth if the class is new, else the previous
/// model's prediction (thresholded, or quantized in soft mode).
pub fn merge_oracle(case: &MergeCase, mode: PseudoMode) -> BTreeMap<ClassId, Vec<f32>> {
    let n = case.gt_new.height * case.gt_new.width;
    let mut classes: Vec<ClassId> = case.gt_new.planes.keys().chain(case.old_probs.keys()).copied().collect();
    classes.sort();
    let mut out = BTreeMap::new();
    for c in classes {
        let mut plane = Vec::with_capacity(n);
        for j in 0..n {
            let v = if let Some(gt) = case.gt_new.planes.get(&c) {
                gt[j] as f32
            } else {
                let p = case.old_probs[&c][j];
                match mode {
                    PseudoMode::Hard => {
                        if p >= 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    PseudoMode::Soft => (p as f64 * 255.0).round() as u8 as f32 / 255.0,
                }
            };
            plane.push(v);
        }
        out.insert(c, plane);
    }
    out
}

pub fn merged_values(case: &MergeCase, mode: PseudoMode) -> BTreeMap<ClassId, Vec<f32>> {
    let pseudo: PseudoLabels = case
        .old_probs
        .iter()
        .map(|(&id, p)| (id, PseudoPlane::from_probabilities(p, mode)))
        .collect();
    let merged = merge_pseudo_labels(&case.gt_new, &pseudo, None).expect("disjoint planes merge");
    merged.planes.iter().map(|(&id, p)| (id, p.values())).collect()
}
