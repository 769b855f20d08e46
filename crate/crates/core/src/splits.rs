//! Seen/unseen split construction, classification-class filtering and the
//! shipped prompt templates and exclusion list.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{ClassRegistry, PromptTemplateSet};
use crate::error::{Error, Result};

/// Prompt templates used to build class text embeddings.
pub const PROMPT_TEMPLATES: [&str; 7] = [
    "itap of a {class}.",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
];

/// ImageNet classes that are identical to, part of, or a specific kind of
/// an unseen COCO class in the 65/15 split.
pub const IMAGENET_EXCLUSIONS: [&str; 19] = [
    "airplane wing",
    "airliner",
    "military aircraft",
    "high-speed train",
    "parking meter",
    "tabby cat",
    "tiger cat",
    "Persian cat",
    "Siamese cat",
    "Egyptian Mau",
    "brown bear",
    "American black bear",
    "polar bear",
    "sloth bear",
    "hot dog",
    "toilet seat",
    "computer mouse",
    "toaster",
    "hair dryer",
];

/// COCO categories with supercategories and 2017 train instance counts.
pub const COCO_METADATA_JSON: &str = include_str!("../data/coco_classes.json");

pub fn shipped_templates() -> PromptTemplateSet {
    PromptTemplateSet::new(PROMPT_TEMPLATES).expect("shipped templates are valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionList {
    pub names: Vec<String>,
}

pub fn shipped_exclusions() -> ExclusionList {
    ExclusionList {
        names: IMAGENET_EXCLUSIONS.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn coco_registry() -> ClassRegistry {
    serde_json::from_str(COCO_METADATA_JSON).expect("bundled COCO metadata parses")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

/// Rounds half up, tolerating representation error in `fraction * n`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Marks the rarest `round(fraction * size)` classes of every superclass as
/// unseen. Frequency ties are broken by name. Output lists follow registry
/// order.
pub fn make_rare_split(registry: &ClassRegistry, fraction: f64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<(u64, &str)>> = BTreeMap::new();
    for e in registry.entries() {
        let superclass = e
            .superclass
            .as_deref()
            .ok_or_else(|| Error::MissingMetadata {
                name: e.name.clone(),
                field: "superclass",
            })?;
        let freq = e.frequency.ok_or_else(|| Error::MissingMetadata {
            name: e.name.clone(),
            field: "frequency",
        })?;
        groups
            .entry(superclass)
            .or_default()
            .push((freq, e.name.as_str()));
    }
    let mut unseen: HashSet<&str> = HashSet::new();
    for members in groups.values_mut() {
        members.sort_unstable();
        let k = round_half_up(fraction * members.len() as f64).min(members.len());
        unseen.extend(members[..k].iter().map(|(_, n)| *n));
    }
    let (unseen_names, seen_names): (Vec<&str>, Vec<&str>) =
        registry.names().partition(|n| unseen.contains(n));
    Ok(SplitSpec {
        seen: seen_names.into_iter().map(str::to_string).collect(),
        unseen: unseen_names.into_iter().map(str::to_string).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<String>,
    /// Exclusion entries that removed at least one name.
    pub matched: Vec<String>,
    /// Exclusion entries with no counterpart in the input.
    pub unmatched: Vec<String>,
}

/// Order-preserving removal of names that exactly match an exclusion entry.
pub fn filter_classification_classes(names: &[String], exclusion: &ExclusionList) -> FilterReport {
    let excluded: BTreeSet<&str> = exclusion.names.iter().map(String::as_str).collect();
    let present: HashSet<&str> = names.iter().map(String::as_str).collect();
    let kept = names
        .iter()
        .filter(|n| !excluded.contains(n.as_str()))
        .cloned()
        .collect();
    let (matched, unmatched): (Vec<&str>, Vec<&str>) =
        excluded.iter().partition(|e| present.contains(*e));
    FilterReport {
        kept,
        matched: matched.into_iter().map(str::to_string).collect(),
        unmatched: unmatched.into_iter().map(str::to_string).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ClassEntry;

    fn entry(name: &str, sup: &str, freq: u64) -> ClassEntry {
        ClassEntry {
            name: name.into(),
            superclass: Some(sup.into()),
            frequency: Some(freq),
            ..ClassEntry::named(name)
        }
    }

    #[test]
    fn five_member_group_loses_its_rarest() {
        let reg = ClassRegistry::new(vec![
            entry("a", "g", 50),
            entry("b", "g", 10),
            entry("c", "g", 70),
            entry("d", "g", 20),
            entry("e", "g", 30),
        ])
        .unwrap();
        let s = make_rare_split(&reg, 0.2).unwrap();
        assert_eq!(s.unseen, vec!["b"]);
        assert_eq!(s.seen, vec!["a", "c", "d", "e"]);
    }

    #[test]
    fn frequency_ties_break_by_name() {
        let reg = ClassRegistry::new(
            (0..5)
                .map(|i| entry(&format!("z{}", 4 - i), "g", 1))
                .collect(),
        )
        .unwrap();
        assert_eq!(make_rare_split(&reg, 0.2).unwrap().unseen, vec!["z0"]);
    }

    #[test]
    fn half_rounds_up() {
        // 0.25 * 2 = 0.5 -> 1
        let reg = ClassRegistry::new(vec![entry("a", "g", 1), entry("b", "g", 2)]).unwrap();
        assert_eq!(make_rare_split(&reg, 0.25).unwrap().unseen, vec!["a"]);
    }

    #[test]
    fn zero_fraction_keeps_everything_seen() {
        let s = make_rare_split(&coco_registry(), 0.0).unwrap();
        assert!(s.unseen.is_empty());
        assert_eq!(s.seen.len(), 80);
    }

    #[test]
    fn missing_metadata_names_the_entry() {
        let reg = ClassRegistry::new(vec![entry("a", "g", 1), ClassEntry::named("bare")]).unwrap();
        match make_rare_split(&reg, 0.2) {
            Err(Error::MissingMetadata { name, field }) => {
                assert_eq!((name.as_str(), field), ("bare", "superclass"))
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut e = entry("nofreq", "g", 0);
        e.frequency = None;
        let reg = ClassRegistry::new(vec![e]).unwrap();
        assert!(matches!(
            make_rare_split(&reg, 0.2),
            Err(Error::MissingMetadata {
                field: "frequency",
                ..
            })
        ));
    }

    #[test]
    fn coco_fixture_gives_sixty_five_fifteen() {
        let s = make_rare_split(&coco_registry(), 0.2).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (65, 15));
        for c in [
            "airplane",
            "train",
            "parking meter",
            "cat",
            "bear",
            "suitcase",
            "frisbee",
            "snowboard",
            "fork",
            "sandwich",
            "hot dog",
            "toilet",
            "mouse",
            "toaster",
            "hair drier",
        ] {
            assert!(s.unseen.iter().any(|u| u == c), "{c}");
        }
    }

    #[test]
    fn shipped_data() {
        let t = shipped_templates();
        assert_eq!(t.len(), 7);
        assert_eq!(t.templates()[0], "itap of a {class}.");
        assert!(t
            .templates()
            .iter()
            .all(|s| s.matches("{class}").count() == 1));
        let e = shipped_exclusions();
        assert_eq!(e.names.len(), 19);
        assert!(e.names.iter().any(|n| n == "hot dog"));
        assert!(!e.names.iter().any(|n| n == "cat"));
    }

    #[test]
    fn filter_basics() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let none = ExclusionList { names: vec![] };
        assert_eq!(filter_classification_classes(&names, &none).kept, names);
        let ex = ExclusionList {
            names: vec!["b".into(), "zz".into()],
        };
        let r = filter_classification_classes(&names, &ex);
        assert_eq!(r.kept, vec!["a", "c"]);
        assert_eq!(r.matched, vec!["b"]);
        assert_eq!(r.unmatched, vec!["zz"]);
    }
}
