//! Tagged scene annotations and per-object description lists.
//!
//! Annotations embed object tags such as `<wardrobe-0>` in free text.
//! Description lists hold one `tag: description` entry per line.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Category, ObjectTag};

static TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<([a-z0-9_]+)-([0-9]+)>").expect("tag regex"));

// anything bracketed that could have been meant as a tag
static PSEUDO_TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<[^<>\s][^<>\n]{0,62}>").expect("pseudo tag regex"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagOccurrence {
    pub tag: ObjectTag,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedAnnotation {
    pub text: String,
    /// Every tag mention, in text order.
    pub tags: Vec<TagOccurrence>,
    /// The text with all tags removed.
    pub scene_level_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TaggedAnnotation {
    /// Distinct tags in order of first mention.
    pub fn unique_tags(&self) -> Vec<ObjectTag> {
        let mut seen = HashSet::new();
        self.tags
            .iter()
            .filter(|o| seen.insert(&o.tag))
            .map(|o| o.tag.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

/// Finds every `<category-index>` tag. Bracketed text that does not form a
/// valid tag is left alone and reported as a warning.
pub fn extract_tags(annotation: &str) -> TaggedAnnotation {
    let mut tags = Vec::new();
    let mut warnings = Vec::new();
    for m in TAG_RE.captures_iter(annotation) {
        let whole = m.get(0).expect("group 0");
        // indices beyond u32 are not tags
        let Ok(index) = m[2].parse::<u32>() else {
            warnings.push(format!("ignoring out-of-range tag {}", whole.as_str()));
            continue;
        };
        let category = Category::new(&m[1]).expect("regex guarantees token charset");
        tags.push(TagOccurrence {
            tag: ObjectTag::new(category, index),
            span: whole.range(),
        });
    }
    for m in PSEUDO_TAG_RE.find_iter(annotation) {
        if !TAG_RE.is_match(m.as_str()) {
            warnings.push(format!("malformed tag {:?} left as text", m.as_str()));
        }
    }
    TaggedAnnotation {
        text: annotation.to_string(),
        scene_level_text: elide_tags(annotation),
        tags,
        warnings,
    }
}

/// Removes tags until none remain (removal can join fragments into a new tag).
fn elide_tags(text: &str) -> String {
    let mut out = text.to_string();
    while TAG_RE.is_match(&out) {
        out = TAG_RE.replace_all(&out, "").into_owned();
    }
    out
}

/// Rewrites common tag spelling variants into canonical `<category-index>`
/// form: upper case, spaces or underscores before the index, square brackets.
pub fn normalize_tag_variants(text: &str) -> String {
    static VARIANT_RE: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"[<\[]([A-Za-z][A-Za-z0-9_ ]*?)[-_ ]([0-9]+)[>\]]").expect("variant regex")
    });
    VARIANT_RE
        .replace_all(text, |c: &regex::Captures<'_>| {
            match Category::slugify(&c[1]) {
                Some(cat) => format!("<{}-{}>", cat, &c[2]),
                None => c[0].to_string(),
            }
        })
        .into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub tag: ObjectTag,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescriptionList {
    pub entries: Vec<DescriptionEntry>,
}

impl DescriptionList {
    pub fn get(&self, tag: &ObjectTag) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| &e.tag == tag)
            .map(|e| e.description.as_str())
    }

    /// One `tag: description` line per entry.
    pub fn serialize(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}: {}", e.tag, e.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn tags(&self) -> Vec<ObjectTag> {
        self.entries.iter().map(|e| e.tag.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescriptionParse {
    pub list: DescriptionList,
    pub missing: Vec<ObjectTag>,
    /// Lines that were not usable for any expected tag.
    pub surplus: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("no parseable `tag: description` lines in {0:?}")]
    NoEntries(String),
}

fn parse_line(line: &str) -> Option<(ObjectTag, String)> {
    let line = line.trim();
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    let (head, rest) = line.split_once(':')?;
    let head = head.trim().trim_matches('*').trim();
    let head = head
        .strip_prefix('<')
        .and_then(|h| h.strip_suffix('>'))
        .or_else(|| head.strip_prefix('[').and_then(|h| h.strip_suffix(']')))
        .unwrap_or(head);
    let tag: ObjectTag = head.parse().ok()?;
    let description = rest.trim();
    if description.is_empty() {
        return None;
    }
    Some((tag, description.to_string()))
}

/// Parses `tag: description` lines and aligns them to `expected`.
///
/// The returned list has one entry per expected tag that had a line, in
/// expected order. Repeated lines for one tag keep the first.
pub fn parse_description_list(
    text: &str,
    expected: &[ObjectTag],
) -> Result<DescriptionParse, AnnotationError> {
    let mut parsed = Vec::new();
    let mut surplus = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match parse_line(line) {
            Some(entry) => parsed.push(entry),
            None => surplus.push(line.to_string()),
        }
    }
    if parsed.is_empty() {
        return Err(AnnotationError::NoEntries(text.to_string()));
    }

    let wanted: HashSet<&ObjectTag> = expected.iter().collect();
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    let mut placed = HashSet::new();
    for tag in expected {
        if !placed.insert(tag) {
            continue;
        }
        match parsed.iter().find(|(t, _)| t == tag) {
            Some((t, d)) => entries.push(DescriptionEntry {
                tag: t.clone(),
                description: d.clone(),
            }),
            None => missing.push(tag.clone()),
        }
    }
    for (tag, desc) in &parsed {
        if !wanted.contains(tag) {
            surplus.push(format!("{tag}: {desc}"));
        }
    }
    Ok(DescriptionParse {
        list: DescriptionList { entries },
        missing,
        surplus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(s: &str) -> ObjectTag {
        s.parse().unwrap()
    }

    #[test]
    fn extracts_tags_in_order() {
        let a = extract_tags("A <bed-0> sits beside a <nightstand-1>.");
        assert_eq!(a.unique_tags(), vec![tag("bed-0"), tag("nightstand-1")]);
        assert_eq!(a.tags[0].span, 2..9);
        assert_eq!(a.scene_level_text, "A  sits beside a .");
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn empty_annotation() {
        let a = extract_tags("");
        assert!(a.tags.is_empty());
        assert_eq!(a.scene_level_text, "");
    }

    #[test]
    fn repeated_mentions_dedup() {
        let a = extract_tags("<bed-0> and <bed-0> again");
        assert_eq!(a.tags.len(), 2);
        assert_eq!(a.unique_tags(), vec![tag("bed-0")]);
    }

    #[test]
    fn malformed_tags_warn() {
        let a = extract_tags("a <Bed-0>, a <lamp> and <desk-2>");
        assert_eq!(a.unique_tags(), vec![tag("desk-2")]);
        assert_eq!(a.warnings.len(), 2, "{:?}", a.warnings);
        assert!(a.scene_level_text.contains("<Bed-0>"));
    }

    #[test]
    fn nested_fragments_are_fully_elided() {
        let a = extract_tags("x <<bed-0>bed-1> y");
        assert!(extract_tags(&a.scene_level_text).tags.is_empty());
    }

    #[test]
    fn normalizes_variants() {
        assert_eq!(
            normalize_tag_variants("a [Bed-0] by <Night Stand 1> and <lamp_2>"),
            "a <bed-0> by <night_stand-1> and <lamp-2>"
        );
        assert_eq!(normalize_tag_variants("<bed-0>"), "<bed-0>");
    }

    #[test]
    fn description_list_examples() {
        let text = "bed-0: a low platform bed\nnightstand-1: a walnut nightstand";
        let p = parse_description_list(text, &[tag("bed-0"), tag("nightstand-1")]).unwrap();
        assert_eq!(p.list.entries.len(), 2);
        assert_eq!(p.list.get(&tag("bed-0")), Some("a low platform bed"));
        assert!(p.missing.is_empty() && p.surplus.is_empty());

        let p = parse_description_list(text, &[tag("bed-0"), tag("nightstand-1"), tag("lamp-2")])
            .unwrap();
        assert_eq!(p.list.entries.len(), 2);
        assert_eq!(p.missing, vec![tag("lamp-2")]);

        let p = parse_description_list("<bed-0>: a bed", &[tag("bed-0")]).unwrap();
        assert_eq!(p.list.get(&tag("bed-0")), Some("a bed"));
    }

    #[test]
    fn description_list_reports_surplus_and_errors() {
        let p = parse_description_list(
            "Here you go:\n- **bed-0**: a bed\nsofa-3: a sofa\nbed-0: another bed",
            &[tag("bed-0")],
        )
        .unwrap();
        assert_eq!(p.list.get(&tag("bed-0")), Some("a bed"));
        assert_eq!(p.surplus, vec!["Here you go:", "sofa-3: a sofa"]);
        assert!(matches!(
            parse_description_list("no entries here", &[tag("bed-0")]),
            Err(AnnotationError::NoEntries(_))
        ));
        assert!(parse_description_list("", &[]).is_err());
    }

    fn arb_tag() -> impl Strategy<Value = ObjectTag> {
        ("[a-z][a-z0-9_]{0,8}", 0u32..20)
            .prop_map(|(c, i)| ObjectTag::new(Category::new(c).unwrap(), i))
    }

    proptest! {
        #[test]
        fn scene_level_text_has_no_tags(s in "[a-z<>0-9 -]{0,60}") {
            let a = extract_tags(&s);
            prop_assert!(extract_tags(&a.scene_level_text).tags.is_empty());
        }

        #[test]
        fn text_outside_tags_is_untouched(s in "[a-z<>0-9 .-]{0,60}") {
            let a = extract_tags(&s);
            let mut rebuilt = String::new();
            let mut last = 0;
            for o in &a.tags {
                rebuilt.push_str(&s[last..o.span.start]);
                last = o.span.end;
            }
            rebuilt.push_str(&s[last..]);
            let direct = TAG_RE.replace_all(&s, "");
            prop_assert_eq!(rebuilt, direct.into_owned());
            prop_assert_eq!(a.text, s);
        }

        #[test]
        fn description_list_round_trips(
            entries in proptest::collection::vec((arb_tag(), "[A-Za-z][A-Za-z ,.]{0,40}[a-z.]"), 1..8)
        ) {
            let mut seen = HashSet::new();
            let list = DescriptionList {
                entries: entries
                    .into_iter()
                    .filter(|(t, _)| seen.insert(t.clone()))
                    .map(|(tag, description)| DescriptionEntry { tag, description })
                    .collect(),
            };
            let parsed = parse_description_list(&list.serialize(), &list.tags()).unwrap();
            prop_assert_eq!(parsed.list, list);
            prop_assert!(parsed.missing.is_empty());
        }
    }
}
