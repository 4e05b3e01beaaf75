mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use contseg::continual::{dequantize_probability, exclusive_labels, quantize_probability, PseudoMode};
use contseg::distill::{ilt_loss, lwf_loss, plop_loss};
use contseg::embeddings::{hash_embedding, l2_norm, one_hot_embedding, ClassDescriptor, ClassRegistry, EmbeddingSource};
use contseg::flops::{conv_flops, growth_model, GrowthConstants, Strategy as Growth};
use contseg::metrics::{dice, DiceReport};
use contseg::model::{ModelSpec, SegModel};
use contseg::plan::StagePlan;
use contseg::rng::SplitMix64;
use contseg::tensor::Grid;
use contseg::ClassId;

fn mask(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..2, len), prop::collection::vec(0u8..2, len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in (1usize..64).prop_flat_map(mask)) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn adding_a_true_positive_never_lowers_dice((a, b) in (2usize..64).prop_flat_map(mask), pick in any::<prop::sample::Index>()) {
        let missed: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 0 && b[i] == 1).collect();
        prop_assume!(!missed.is_empty());
        let mut better = a.clone();
        better[missed[pick.index(missed.len())]] = 1;
        prop_assert!(dice(&better, &b).unwrap() >= dice(&a, &b).unwrap());
    }

    #[test]
    fn merge_matches_the_case_split_oracle(seed in any::<u64>(), soft in any::<bool>()) {
        let mode = if soft { PseudoMode::Soft } else { PseudoMode::Hard };
        let case = common::random_merge_case(&mut SplitMix64::new(seed));
        prop_assert_eq!(common::merged_values(&case, mode), common::merge_oracle(&case, mode));
    }

    #[test]
    fn quantization_error_is_bounded(p in 0.0f32..=1.0) {
        let back = dequantize_probability(quantize_probability(p));
        prop_assert!((back - p).abs() <= 1.0 / 510.0 + 1e-6);
    }

    #[test]
    fn exclusive_labels_follow_the_argmax(
        probs in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 6), 1..5),
        tau in 0.05f32..0.95,
    ) {
        let ids: Vec<ClassId> = (0..probs.len() as u16).map(ClassId).collect();
        let labels = exclusive_labels(&probs, &ids, tau);
        for (j, label) in labels.iter().enumerate() {
            let max = probs.iter().map(|p| p[j]).fold(f32::MIN, f32::max);
            match label {
                None => prop_assert!(max < tau),
                Some(c) => {
                    prop_assert!(max >= tau);
                    let k = c.0 as usize;
                    prop_assert_eq!(probs[k][j], max);
                    prop_assert!(probs[..k].iter().all(|p| p[j] < max), "earliest maximum wins");
                }
            }
        }
        // Relabelling the classes together with their planes relabels the output.
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.reverse();
        let rev_probs: Vec<Vec<f32>> = order.iter().map(|&k| probs[k].clone()).collect();
        let rev_ids: Vec<ClassId> = order.iter().map(|&k| ids[k]).collect();
        let rev = exclusive_labels(&rev_probs, &rev_ids, tau);
        for (j, (a, b)) in labels.iter().zip(&rev).enumerate() {
            let max = probs.iter().map(|p| p[j]).fold(f32::MIN, f32::max);
            if probs.iter().filter(|p| p[j] == max).count() == 1 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn distillation_losses_are_nonnegative_and_vanish_at_the_teacher(
        s in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 4),
        t in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 4),
    ) {
        let gs = Grid::from_vec(2, 4, 4, s.clone()).unwrap();
        let gt = Grid::from_vec(2, 4, 4, t.clone()).unwrap();
        let (plop, _) = plop_loss(&[&gs], &[&gt], &[1, 2, 4]).unwrap();
        prop_assert!(plop >= 0.0);
        prop_assert_eq!(plop_loss(&[&gt], &[&gt], &[1, 2, 4]).unwrap().0, 0.0);
        let (ilt, _) = ilt_loss(&gs, &gt).unwrap();
        prop_assert!(ilt >= 0.0);
        prop_assert_eq!(ilt_loss(&gt, &gt).unwrap().0, 0.0);
        // Soft cross-entropy is minimized by matching the teacher.
        let (at_teacher, grad) = lwf_loss(&t, &t, 2.0).unwrap();
        prop_assert!(grad.iter().all(|g| g.abs() < 1e-12));
        prop_assert!(lwf_loss(&s, &t, 2.0).unwrap().0 >= at_teacher - 1e-12);
    }

    #[test]
    fn embeddings_are_normalized_and_deterministic(name in "[a-z ]{1,12}", dim in 2usize..64, seed in any::<u64>()) {
        let v = hash_embedding(&name, dim, seed).unwrap();
        prop_assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
        prop_assert_eq!(v, hash_embedding(&name, dim, seed).unwrap());
    }

    #[test]
    fn one_hot_sums_to_one(n in 1usize..40, pick in any::<prop::sample::Index>()) {
        let v = one_hot_embedding(pick.index(n), n).unwrap();
        prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
        prop_assert!(one_hot_embedding(n, n).is_err());
    }

    #[test]
    fn conv_cost_is_linear(s in 1u64..10_000, cin in 1u64..64, cout in 1u64..64, kv in 1u64..27) {
        prop_assert_eq!(conv_flops(2 * s, cin, cout, kv, 2), 2 * conv_flops(s, cin, cout, kv, 2));
        prop_assert_eq!(conv_flops(s, cin, cout, kv, 2), 2 * conv_flops(s, cin, cout, kv, 1));
    }

    #[test]
    fn growth_curves_are_monotone(heads in prop::collection::vec(0usize..10, 1..8)) {
        let c = GrowthConstants::paper();
        let ours = growth_model(Growth::Ours, heads.len(), &heads, &c).unwrap();
        for s in Growth::ALL {
            let curve = growth_model(s, heads.len(), &heads, &c).unwrap();
            prop_assert!(curve.flops.windows(2).all(|w| w[0] <= w[1]));
        }
        for t in 1..heads.len() {
            prop_assert_eq!(ours.flops[t] - ours.flops[t - 1], heads[t] as u64 * c.per_head);
        }
        let dec = growth_model(Growth::DecoderPerStep, heads.len(), &heads, &c).unwrap();
        for t in 1..heads.len() {
            prop_assert_eq!(dec.flops[t] - dec.flops[t - 1], c.decoder);
        }
    }

    #[test]
    fn dice_report_csv_roundtrips(values in prop::collection::vec(0.0f64..=1.0, 4)) {
        let plan = StagePlan::btcv_lits_like();
        let per_class: BTreeMap<ClassId, f64> = (0..4u16).map(ClassId).zip(values).collect();
        let mut report = DiceReport::default();
        report.add_step("ours", 1, &plan, &per_class, |id| format!("c{id}")).unwrap();
        report.add_step("ours", 2, &plan, &per_class, |id| format!("c{id}")).unwrap();
        prop_assert_eq!(report.rows.len(), (3 + 1) + (4 + 2));
        prop_assert_eq!(DiceReport::from_csv(&report.to_csv()).unwrap(), report);
    }
}

fn tiny_model() -> (SegModel<f64>, EmbeddingSource) {
    let source = EmbeddingSource::Hash { dim: 4, seed: 1 };
    let mut spec = ModelSpec::reference(8, 8);
    spec.hidden = 16;
    let mut model = SegModel::new(spec, ClassRegistry::new(4, "hash"), 2).unwrap();
    let old: Vec<ClassDescriptor> = (0..2u16)
        .map(|i| ClassDescriptor::new(ClassId(i), &format!("old {i}"), 1, &source).unwrap())
        .collect();
    model.extend(old).unwrap();
    (model, source)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extension_leaves_old_classes_untouched(x in prop::collection::vec(0.0f64..1.0, 64), n_new in 1u16..4) {
        let (model, source) = tiny_model();
        let grid = Grid::from_vec(1, 8, 8, x).unwrap();
        let before = model.probabilities(&grid, &[0, 1]).unwrap();
        let mut grown = model.clone();
        let new: Vec<ClassDescriptor> = (0..n_new)
            .map(|i| ClassDescriptor::new(ClassId(10 + i), &format!("new {i}"), 2, &source).unwrap())
            .collect();
        grown.extend(new).unwrap();
        prop_assert_eq!(grown.registry.get(ClassId(0)), model.registry.get(ClassId(0)));
        let after = grown.probabilities(&grid, &[0, 1]).unwrap();
        prop_assert_eq!(before, after);
    }
}
