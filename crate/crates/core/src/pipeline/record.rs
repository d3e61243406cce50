use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{PipelineSettings, Stage};
use crate::annotation::{DescriptionList, TaggedAnnotation};
use crate::decorate::{DecorateEngine, PriorKind, RankedResult, RetrievalConfig};
use crate::layout::LayoutValidationReport;
use crate::scene::{FloorPlan, MeshAssetId, ObjectTag, Scene};
use crate::templates::{PromptTemplateSet, TEMPLATE_VERSION};

/// Monotonic time source for stage timings.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone)]
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        SystemClock(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Always reports zero so records are reproducible byte for byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    /// Chat calls made, including the accepted one.
    pub attempts: u32,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRetrieval {
    pub tag: ObjectTag,
    pub description: Option<String>,
    pub chosen: Option<MeshAssetId>,
    pub result: Option<RankedResult>,
    pub unfurnished_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub template_version: String,
    pub template_hashes: BTreeMap<String, String>,
    pub scoring_question: String,
    pub retrieval: RetrievalConfig,
    pub prior_kind: PriorKind,
    pub prior_alpha: f64,
    pub pipeline: PipelineSettings,
    /// Caller-supplied configuration echo, e.g. the resolved config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_config: Option<serde_json::Value>,
}

impl Provenance {
    pub fn new(
        templates: &PromptTemplateSet,
        engine: &DecorateEngine,
        settings: &PipelineSettings,
    ) -> Self {
        Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            template_version: TEMPLATE_VERSION.to_string(),
            template_hashes: templates.hashes(),
            scoring_question: engine.question().to_string(),
            retrieval: engine.config().clone(),
            prior_kind: engine.prior().kind,
            prior_alpha: engine.prior().alpha,
            pipeline: settings.clone(),
            effective_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub user_prompt: String,
    pub room: FloorPlan,
    pub annotation: TaggedAnnotation,
    /// Layout exactly as the model produced it.
    pub css_layout_raw: String,
    /// Canonical serialization of `scene`.
    pub css_layout: String,
    pub scene: Scene,
    pub descriptions: DescriptionList,
    pub retrieval: Vec<ObjectRetrieval>,
    pub stages: Vec<StageTrace>,
    pub timing_ms: BTreeMap<String, f64>,
    pub validation: LayoutValidationReport,
    pub provenance: Provenance,
}

impl GenerationRecord {
    pub fn chosen_assets(&self) -> BTreeMap<ObjectTag, MeshAssetId> {
        self.retrieval
            .iter()
            .filter_map(|r| r.chosen.clone().map(|id| (r.tag.clone(), id)))
            .collect()
    }

    pub fn unfurnished(&self) -> Vec<&ObjectRetrieval> {
        self.retrieval
            .iter()
            .filter(|r| r.chosen.is_none())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tag: ObjectTag,
    pub asset: Option<MeshAssetId>,
    pub total: Option<f64>,
    pub unfurnished_reason: Option<String>,
}

/// Compact per-object summary written next to the full record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalManifest {
    pub room: FloorPlan,
    pub objects: Vec<ManifestEntry>,
    pub template_version: String,
    pub template_hashes: BTreeMap<String, String>,
}

impl RetrievalManifest {
    pub fn from_record(record: &GenerationRecord) -> Self {
        let objects = record
            .retrieval
            .iter()
            .map(|r| ManifestEntry {
                tag: r.tag.clone(),
                asset: r.chosen.clone(),
                total: r
                    .result
                    .as_ref()
                    .and_then(|res| res.best())
                    .map(|s| s.total),
                unfurnished_reason: r.unfurnished_reason.clone(),
            })
            .collect();
        RetrievalManifest {
            room: record.room,
            objects,
            template_version: record.provenance.template_version.clone(),
            template_hashes: record.provenance.template_hashes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub record: PathBuf,
    pub layout: PathBuf,
    pub manifest: PathBuf,
}

fn to_json<T: Serialize>(value: &T) -> io::Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    Ok(s)
}

/// Writes `record.json`, `layout.css` and `manifest.json` into `dir`.
pub fn write_artifacts(record: &GenerationRecord, dir: &Path) -> io::Result<ArtifactPaths> {
    fs::create_dir_all(dir)?;
    let paths = ArtifactPaths {
        record: dir.join("record.json"),
        layout: dir.join("layout.css"),
        manifest: dir.join("manifest.json"),
    };
    fs::write(&paths.record, to_json(record)?)?;
    fs::write(&paths.layout, format!("{}\n", record.css_layout))?;
    fs::write(
        &paths.manifest,
        to_json(&RetrievalManifest::from_record(record))?,
    )?;
    Ok(paths)
}
