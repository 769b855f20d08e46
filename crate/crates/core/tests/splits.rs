use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use zsd_align_core::embedding::{ClassEntry, ClassRegistry};
use zsd_align_core::splits::{
    coco_registry, filter_classification_classes, make_rare_split, shipped_exclusions,
    ExclusionList,
};

/// 981 filler names plus every shipped exclusion, interleaved.
fn thousand_names() -> Vec<String> {
    let ex = shipped_exclusions().names;
    let mut names: Vec<String> = (0..981).map(|i| format!("imagenet_{i:04}")).collect();
    for (k, e) in ex.iter().enumerate() {
        names.insert(k * 50, e.clone());
    }
    names
}

#[test]
fn thousand_classes_filter_to_981() {
    let names = thousand_names();
    assert_eq!(names.len(), 1000);
    let r = filter_classification_classes(&names, &shipped_exclusions());
    assert_eq!(r.kept.len(), 981);
    assert_eq!(r.matched.len(), 19);
    assert!(r.unmatched.is_empty());
    // order preserved
    let expected: Vec<String> = names
        .iter()
        .filter(|n| n.starts_with("imagenet_"))
        .cloned()
        .collect();
    assert_eq!(r.kept, expected);
}

#[test]
fn duplicate_exclusions_behave_like_a_set() {
    let names = thousand_names();
    let mut doubled = shipped_exclusions();
    doubled.names.extend(shipped_exclusions().names);
    assert_eq!(
        filter_classification_classes(&names, &doubled).kept,
        filter_classification_classes(&names, &shipped_exclusions()).kept
    );
}

#[test]
fn coco_split_respects_frequencies_within_superclasses() {
    let reg = coco_registry();
    let s = make_rare_split(&reg, 0.2).unwrap();
    assert_eq!(s.unseen.len(), 15);
    assert_eq!(s.seen.len(), 65);
    let unseen: BTreeSet<&str> = s.unseen.iter().map(String::as_str).collect();
    let mut groups: BTreeMap<&str, Vec<&ClassEntry>> = BTreeMap::new();
    for e in reg.entries() {
        groups
            .entry(e.superclass.as_deref().unwrap())
            .or_default()
            .push(e);
    }
    for members in groups.values() {
        let max_unseen = members
            .iter()
            .filter(|e| unseen.contains(e.name.as_str()))
            .map(|e| e.frequency.unwrap())
            .max();
        let min_seen = members
            .iter()
            .filter(|e| !unseen.contains(e.name.as_str()))
            .map(|e| e.frequency.unwrap())
            .min();
        if let (Some(u), Some(s)) = (max_unseen, min_seen) {
            assert!(u <= s);
        }
    }
}

fn registry_strategy() -> impl Strategy<Value = ClassRegistry> {
    prop::collection::vec((0u8..4, 0u64..50), 1..30).prop_map(|rows| {
        let entries = rows
            .into_iter()
            .enumerate()
            .map(|(i, (g, f))| ClassEntry {
                superclass: Some(format!("g{g}")),
                frequency: Some(f),
                ..ClassEntry::named(format!("n{i:02}"))
            })
            .collect();
        ClassRegistry::new(entries).unwrap()
    })
}

proptest! {
    #[test]
    fn split_partitions_the_registry(reg in registry_strategy(), fraction in 0.0f64..=1.0) {
        let s = make_rare_split(&reg, fraction).unwrap();
        let seen: BTreeSet<&String> = s.seen.iter().collect();
        let unseen: BTreeSet<&String> = s.unseen.iter().collect();
        prop_assert!(seen.is_disjoint(&unseen));
        let all: BTreeSet<String> = reg.names().map(str::to_string).collect();
        let union: BTreeSet<String> = s.seen.iter().chain(&s.unseen).cloned().collect();
        prop_assert_eq!(all, union);
    }

    #[test]
    fn unseen_classes_are_the_rarest(reg in registry_strategy()) {
        let s = make_rare_split(&reg, 0.2).unwrap();
        let unseen: BTreeSet<&str> = s.unseen.iter().map(String::as_str).collect();
        for a in reg.entries().iter().filter(|e| unseen.contains(e.name.as_str())) {
            for b in reg.entries().iter().filter(|e| !unseen.contains(e.name.as_str())) {
                if a.superclass == b.superclass {
                    prop_assert!(a.frequency <= b.frequency);
                }
            }
        }
    }

    #[test]
    fn filtering_is_idempotent(
        names in prop::collection::vec("[a-e]{1,2}", 0..40),
        ex in prop::collection::vec("[a-e]{1,2}", 0..10),
    ) {
        let ex = ExclusionList { names: ex };
        let once = filter_classification_classes(&names, &ex).kept;
        let twice = filter_classification_classes(&once, &ex).kept;
        prop_assert_eq!(&once, &twice);
        let banned: BTreeSet<&String> = ex.names.iter().collect();
        let want: Vec<String> = names.iter().filter(|n| !banned.contains(n)).cloned().collect();
        prop_assert_eq!(once, want);
    }
}
