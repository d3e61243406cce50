//! Instruction templates sent to the language models.
//!
//! The built-in strings are fixed; any of them can be overridden from the
//! config file. Every generated artifact records the SHA-256 of each template
//! actually used.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever a built-in template string changes.
pub const TEMPLATE_VERSION: &str = "1";

pub const SUMMARIZATION: &str = "Summarize the following grounded annotation into a shorter description that a user would use to describe what type of room they would like for their home:";

pub const DESCRIPTION: &str = "I'm going to give you a detailed scene annotation with object tags. For each tagged object give me a detailed object description so that all the objects match the overall theme of the room and any description details in the annotation. Put each object description on its own line (if there are several objects which are the same just repeat the same description) in the format [object tag]: [description]. Don't spend more than three sentences on a single object. Do not include the explicit object tag (e.g <wardrobe-0>) in your description just use natural language. Output the objects in the same order that they are listed in the scene annotation. Detailed annotation:";

pub const LAYOUT_GENERATION: &str =
    "Make a room layout in CSS format that matches the following annotation:";

pub const ANNOTATION_GENERATION: &str =
    "Generate a detailed room annotation with object tags from the following short user prompt:";

pub const DECORATE_SCORING: &str = "What is shown in this image?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    pub summarization: String,
    pub description: String,
    pub layout_generation: String,
    pub annotation_generation: String,
    pub decorate_scoring: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            summarization: SUMMARIZATION.into(),
            description: DESCRIPTION.into(),
            layout_generation: LAYOUT_GENERATION.into(),
            annotation_generation: ANNOTATION_GENERATION.into(),
            decorate_scoring: DECORATE_SCORING.into(),
        }
    }
}

/// Per-template replacements; absent fields keep the built-in text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateOverrides {
    pub summarization: Option<String>,
    pub description: Option<String>,
    pub layout_generation: Option<String>,
    pub annotation_generation: Option<String>,
    pub decorate_scoring: Option<String>,
}

impl PromptTemplateSet {
    pub fn with_overrides(o: &TemplateOverrides) -> Self {
        let d = PromptTemplateSet::default();
        PromptTemplateSet {
            summarization: o.summarization.clone().unwrap_or(d.summarization),
            description: o.description.clone().unwrap_or(d.description),
            layout_generation: o.layout_generation.clone().unwrap_or(d.layout_generation),
            annotation_generation: o
                .annotation_generation
                .clone()
                .unwrap_or(d.annotation_generation),
            decorate_scoring: o.decorate_scoring.clone().unwrap_or(d.decorate_scoring),
        }
    }

    pub fn is_builtin(&self) -> bool {
        *self == PromptTemplateSet::default()
    }

    /// Hex SHA-256 of each template, keyed by template name.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        [
            ("annotation_generation", &self.annotation_generation),
            ("decorate_scoring", &self.decorate_scoring),
            ("description", &self.description),
            ("layout_generation", &self.layout_generation),
            ("summarization", &self.summarization),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), sha256_hex(v)))
        .collect()
    }
}

pub fn sha256_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
