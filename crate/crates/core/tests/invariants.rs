mod common;

use iirc_core::evaluation::{jaccard, pw_js_sample};
use iirc_core::hierarchy::{ClassId, LabelSet};
use proptest::prelude::*;

const CASES: u32 = 1000;

#[test]
fn schedule_places_parents_first() {
    common::prop_schedule_parent_first(CASES).unwrap();
}

#[test]
fn exemplar_labels_are_frozen() {
    common::prop_exemplar_frozen_label(CASES).unwrap();
}

#[test]
fn expanding_outputs_preserves_logits() {
    common::prop_expand_preserves_logits(CASES).unwrap();
}

#[test]
fn snapshots_are_immutable() {
    common::prop_snapshot_immutable(CASES).unwrap();
}

#[test]
fn topk_is_within_threshold_activation() {
    common::prop_topk_subset(CASES).unwrap();
}

fn label_set() -> impl Strategy<Value = LabelSet> {
    prop::collection::btree_set((0usize..8).prop_map(ClassId), 0..8)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pw_js_is_bounded_by_jaccard(y in label_set(), p in label_set()) {
        prop_assume!(!y.is_empty());
        let v = pw_js_sample(&y, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(v <= jaccard(&y, &p));
    }

    #[test]
    fn pw_js_ignores_relabeling(y in label_set(), p in label_set(), perm in Just((0usize..8).collect::<Vec<_>>()).prop_shuffle()) {
        prop_assume!(!y.is_empty());
        let map = |s: &LabelSet| s.iter().map(|c| ClassId(perm[c.0])).collect::<LabelSet>();
        prop_assert_eq!(pw_js_sample(&y, &p).unwrap(), pw_js_sample(&map(&y), &map(&p)).unwrap());
    }
}
