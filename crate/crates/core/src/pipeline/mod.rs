//! End-to-end scene generation: user prompt → tagged annotation → CSS layout
//! → per-object descriptions → retrieved assets. Also dataset preparation.

pub mod dataset;
mod record;
mod run;

pub use record::{
    write_artifacts, ArtifactPaths, Clock, FrozenClock, GenerationRecord, ObjectRetrieval,
    Provenance, RetrievalManifest, StageTrace, SystemClock,
};
pub use run::{run_generate, GenerateError, GenerateRequest};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    extract_tags, normalize_tag_variants, parse_description_list, DescriptionList, TaggedAnnotation,
};
use crate::decorate::{BatchQuery, DecorateEngine};
use crate::gateway::{ChatRequest, Completion, Gateway, GatewayError};
use crate::layout::{
    parse_layout_with, room_rule, serialize_layout, validate_layout, LayoutValidationReport,
    ParseOptions,
};
use crate::scene::{FloorPlan, Inventory, MeshAssetId, ObjectTag, Scene};
use crate::templates::PromptTemplateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Summarize,
    PromptToAnnotation,
    AnnotationToLayout,
    Descriptions,
    Retrieval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Summarize => "summarize",
            Stage::PromptToAnnotation => "prompt_to_annotation",
            Stage::AnnotationToLayout => "annotation_to_layout",
            Stage::Descriptions => "descriptions",
            Stage::Retrieval => "retrieval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("{stage}: {source}")]
    Gateway {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("{stage}: no usable output after {attempts} attempt(s); last problem: {last_problem}")]
    Exhausted {
        stage: Stage,
        attempts: u32,
        last_problem: String,
        raw_outputs: Vec<String>,
    },
    #[error("{stage}: {message}")]
    Consistency { stage: Stage, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Attempts per generation stage, including the first.
    pub max_attempts: u32,
    /// Temperature of the first attempt (greedy by default).
    pub first_temperature: f64,
    /// Temperature of regeneration attempts.
    pub retry_temperature: f64,
    /// Attempt `k` (1-based) sends `seed + k - 1`.
    pub seed: u64,
    pub max_tokens: u32,
    /// Allow retrieval from the whole inventory instead of the object's category.
    pub cross_category: bool,
    /// Meters an object footprint may leave the floor before it is reported.
    pub bounds_tolerance: f64,
    /// Square meters two footprints may overlap before they are reported.
    pub overlap_tolerance: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            max_attempts: 3,
            first_temperature: 0.0,
            retry_temperature: 0.7,
            seed: 0,
            max_tokens: 2048,
            cross_category: false,
            bounds_tolerance: 0.05,
            overlap_tolerance: 0.01,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_attempts == 0 {
            return Err(PipelineError::Validation(
                "max_attempts must be at least 1".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(PipelineError::Validation(
                "max_tokens must be at least 1".into(),
            ));
        }
        for (name, t) in [
            ("first_temperature", self.first_temperature),
            ("retry_temperature", self.retry_temperature),
        ] {
            if !t.is_finite() || t < 0.0 {
                return Err(PipelineError::Validation(format!(
                    "{name} must be non-negative, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Output of one generation stage plus its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub value: T,
    pub trace: StageTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutOutcome {
    /// The completion text as returned by the model.
    pub raw: String,
    pub scene: Scene,
    pub validation: LayoutValidationReport,
}

static SENTENCE_END: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[.!?]+(\s+|$)").expect("sentence regex"));
static SPACES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t]{2,}").expect("space regex"));

fn sentence_count(text: &str) -> usize {
    SENTENCE_END
        .split(text.trim())
        .filter(|s| !s.trim().is_empty())
        .count()
}

fn tag_list(tags: &[ObjectTag]) -> String {
    tags.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub struct Pipeline {
    gateway: Gateway,
    templates: PromptTemplateSet,
    settings: PipelineSettings,
    clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(
        gateway: Gateway,
        templates: PromptTemplateSet,
        settings: PipelineSettings,
    ) -> Result<Self, PipelineError> {
        settings.validate()?;
        Ok(Pipeline {
            gateway,
            templates,
            settings,
            clock: Arc::new(SystemClock::new()),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn templates(&self) -> &PromptTemplateSet {
        &self.templates
    }

    pub(crate) fn chat_workers(&self) -> usize {
        self.gateway.chat_endpoint().max_parallel()
    }

    fn request(&self, instruction: &str, content: &str, attempt: u32) -> ChatRequest {
        ChatRequest {
            instruction: instruction.to_string(),
            user_content: content.to_string(),
            max_tokens: self.settings.max_tokens,
            temperature: if attempt == 1 {
                self.settings.first_temperature
            } else {
                self.settings.retry_temperature
            },
            seed: Some(self.settings.seed.wrapping_add(u64::from(attempt - 1))),
        }
    }

    /// Calls the chat model until `accept` takes an output or attempts run out.
    fn attempts<T>(
        &self,
        stage: Stage,
        instruction: &str,
        content: &str,
        mut accept: impl FnMut(&Completion, &mut Vec<String>) -> Result<T, String>,
    ) -> Result<StageOutput<T>, PipelineError> {
        let mut raw_outputs = Vec::new();
        let mut warnings = Vec::new();
        let mut last_problem = String::new();
        for attempt in 1..=self.settings.max_attempts {
            let completion = self
                .gateway
                .generate(&self.request(instruction, content, attempt))
                .map_err(|source| PipelineError::Gateway { stage, source })?;
            if completion.truncated {
                warnings.push(format!("attempt {attempt}: output truncated at max_tokens"));
            }
            match accept(&completion, &mut warnings) {
                Ok(value) => {
                    return Ok(StageOutput {
                        value,
                        trace: StageTrace {
                            stage,
                            attempts: attempt,
                            warnings,
                        },
                    })
                }
                Err(problem) => {
                    log::warn!("{stage} attempt {attempt}: {problem}");
                    warnings.push(format!("attempt {attempt}: {problem}"));
                    raw_outputs.push(completion.text.clone());
                    last_problem = problem;
                }
            }
        }
        Err(PipelineError::Exhausted {
            stage,
            attempts: self.settings.max_attempts,
            last_problem,
            raw_outputs,
        })
    }

    /// Summarizes a grounded annotation into a short user-style prompt.
    pub fn synthesize_prompt(
        &self,
        annotation: &TaggedAnnotation,
    ) -> Result<StageOutput<String>, PipelineError> {
        if annotation.is_empty() {
            return Err(PipelineError::Validation("empty annotation".into()));
        }
        self.attempts(
            Stage::Summarize,
            &self.templates.summarization,
            &annotation.text,
            |c, warnings| {
                let text = c.text.trim();
                if text.is_empty() {
                    return Err("empty completion".into());
                }
                let parsed = extract_tags(text);
                if parsed.tags.is_empty() {
                    return Ok(text.to_string());
                }
                warnings.push(format!(
                    "removed object tags from prompt: {}",
                    tag_list(&parsed.unique_tags())
                ));
                let cleaned = SPACES.replace_all(&parsed.scene_level_text, " ");
                let cleaned = cleaned.replace(" .", ".").replace(" ,", ",");
                Ok(cleaned.trim().to_string())
            },
        )
    }

    pub fn prompt_to_annotation(
        &self,
        user_prompt: &str,
    ) -> Result<StageOutput<TaggedAnnotation>, PipelineError> {
        if user_prompt.trim().is_empty() {
            return Err(PipelineError::Validation("empty prompt".into()));
        }
        self.attempts(
            Stage::PromptToAnnotation,
            &self.templates.annotation_generation,
            user_prompt,
            |c, warnings| {
                let ann = extract_tags(&normalize_tag_variants(c.text.trim()));
                if ann.tags.is_empty() {
                    return Err("annotation contains no object tags".into());
                }
                warnings.extend(ann.warnings.iter().cloned());
                Ok(ann)
            },
        )
    }

    /// The room rule goes first in the user content so the model sees the
    /// floor dimensions in the same grammar it must produce.
    pub fn annotation_to_layout(
        &self,
        annotation: &TaggedAnnotation,
        floor: &FloorPlan,
    ) -> Result<StageOutput<LayoutOutcome>, PipelineError> {
        let tags = annotation.unique_tags();
        if tags.is_empty() {
            return Err(PipelineError::Validation(
                "annotation has no object tags".into(),
            ));
        }
        let content = format!("{}\n{}", room_rule(floor), annotation.text);
        let options = ParseOptions {
            default_floor: Some(*floor),
            ..ParseOptions::lenient()
        };
        let tol = (
            self.settings.bounds_tolerance,
            self.settings.overlap_tolerance,
        );
        self.attempts(
            Stage::AnnotationToLayout,
            &self.templates.layout_generation,
            &content,
            |c, warnings| {
                let parsed = parse_layout_with(&c.text, &options).map_err(|e| e.to_string())?;
                let mut scene = parsed.scene;
                if scene.floor != *floor {
                    warnings.push(format!(
                        "layout room {}x{} replaced by requested {}x{}",
                        scene.floor.width, scene.floor.depth, floor.width, floor.depth
                    ));
                    scene.floor = *floor;
                }
                let placed: BTreeSet<ObjectTag> = scene.tags().into_iter().collect();
                let annotated: BTreeSet<ObjectTag> = tags.iter().cloned().collect();
                let uncovered: Vec<ObjectTag> = annotated.difference(&placed).cloned().collect();
                if !uncovered.is_empty() {
                    warnings.push(format!(
                        "layout lacks annotated objects: {}",
                        tag_list(&uncovered)
                    ));
                }
                let extra: Vec<ObjectTag> = placed.difference(&annotated).cloned().collect();
                if !extra.is_empty() {
                    warnings.push(format!(
                        "layout adds unannotated objects: {}",
                        tag_list(&extra)
                    ));
                }
                let mut validation = validate_layout(&scene, tol.0, tol.1);
                validation.parse_warnings = parsed.warnings;
                Ok(LayoutOutcome {
                    raw: c.text.clone(),
                    scene,
                    validation,
                })
            },
        )
    }

    /// One description per annotated object. Regeneration attempts only fill
    /// tags still missing; descriptions already obtained are kept.
    pub fn generate_descriptions(
        &self,
        annotation: &TaggedAnnotation,
    ) -> Result<StageOutput<DescriptionList>, PipelineError> {
        let expected = annotation.unique_tags();
        if expected.is_empty() {
            return Err(PipelineError::Validation(
                "annotation has no object tags".into(),
            ));
        }
        let mut found: HashMap<ObjectTag, String> = HashMap::new();
        self.attempts(
            Stage::Descriptions,
            &self.templates.description,
            &annotation.text,
            |c, warnings| {
                let parsed =
                    parse_description_list(&c.text, &expected).map_err(|e| e.to_string())?;
                for e in parsed.list.entries {
                    found.entry(e.tag).or_insert(e.description);
                }
                for line in &parsed.surplus {
                    warnings.push(format!("ignored line {line:?}"));
                }
                let missing: Vec<ObjectTag> = expected
                    .iter()
                    .filter(|t| !found.contains_key(t))
                    .cloned()
                    .collect();
                if !missing.is_empty() {
                    return Err(format!("missing descriptions for {}", tag_list(&missing)));
                }
                let entries = expected
                    .iter()
                    .map(|t| crate::annotation::DescriptionEntry {
                        tag: t.clone(),
                        description: found[t].clone(),
                    })
                    .collect::<Vec<_>>();
                for e in &entries {
                    let n = sentence_count(&e.description);
                    if n > 3 {
                        warnings.push(format!("{} description has {n} sentences", e.tag));
                    }
                }
                Ok(DescriptionList { entries })
            },
        )
    }

    /// Runs every stage and retrieves one asset per placed object.
    pub fn generate_scene(
        &self,
        user_prompt: &str,
        floor: FloorPlan,
        inventory: &Inventory,
        engine: &DecorateEngine,
    ) -> Result<GenerationRecord, PipelineError> {
        let mut timing = BTreeMap::new();
        let start = self.clock.now();
        let mut lap = start;
        let mut tick = |name: &str, timing: &mut BTreeMap<String, f64>| {
            let now = self.clock.now();
            timing.insert(name.to_string(), (now - lap).as_secs_f64() * 1000.0);
            lap = now;
        };

        let annotation = self.prompt_to_annotation(user_prompt)?;
        tick("prompt_to_annotation", &mut timing);
        let layout = self.annotation_to_layout(&annotation.value, &floor)?;
        tick("annotation_to_layout", &mut timing);
        let descriptions = self.generate_descriptions(&annotation.value)?;
        tick("descriptions", &mut timing);

        let mut scene = layout.value.scene.clone();
        let retrieval = self.furnish(&mut scene, &descriptions.value, inventory, engine)?;
        tick("retrieval", &mut timing);
        timing.insert(
            "total".into(),
            (self.clock.now() - start).as_secs_f64() * 1000.0,
        );

        Ok(GenerationRecord {
            user_prompt: user_prompt.to_string(),
            room: floor,
            annotation: annotation.value,
            css_layout_raw: layout.value.raw,
            css_layout: serialize_layout(&scene),
            scene,
            descriptions: descriptions.value,
            retrieval,
            stages: vec![annotation.trace, layout.trace, descriptions.trace],
            timing_ms: timing,
            validation: layout.value.validation,
            provenance: Provenance::new(&self.templates, engine, &self.settings),
        })
    }

    fn furnish(
        &self,
        scene: &mut Scene,
        descriptions: &DescriptionList,
        inventory: &Inventory,
        engine: &DecorateEngine,
    ) -> Result<Vec<ObjectRetrieval>, PipelineError> {
        let mut slots: Vec<ObjectRetrieval> = Vec::with_capacity(scene.objects.len());
        let mut queries = Vec::new();
        let mut query_slot = Vec::new();
        for (i, obj) in scene.objects.iter().enumerate() {
            let tag = obj.tag();
            let description = descriptions.get(&tag).map(str::to_string);
            let mut slot = ObjectRetrieval {
                tag: tag.clone(),
                description: description.clone(),
                chosen: None,
                result: None,
                unfurnished_reason: None,
            };
            let candidates: Vec<MeshAssetId> = if self.settings.cross_category {
                inventory.assets.iter().map(|a| a.id.clone()).collect()
            } else {
                inventory
                    .in_category(&obj.category)
                    .map(|a| a.id.clone())
                    .collect()
            };
            match description {
                None => slot.unfurnished_reason = Some("no description for this object".into()),
                Some(_) if candidates.is_empty() => {
                    slot.unfurnished_reason = Some(format!(
                        "inventory has no assets of category {}",
                        obj.category
                    ))
                }
                Some(d) => {
                    queries.push(BatchQuery {
                        description: d,
                        candidates,
                    });
                    query_slot.push(i);
                }
            }
            slots.push(slot);
        }

        for (i, r) in query_slot
            .into_iter()
            .zip(engine.retrieve_batch(inventory, &queries))
        {
            match r {
                Ok(ranked) => {
                    match ranked.best() {
                        Some(best) => slots[i].chosen = Some(best.asset.clone()),
                        None => {
                            slots[i].unfurnished_reason =
                                Some("every candidate failed to score".into())
                        }
                    }
                    slots[i].result = Some(ranked);
                }
                Err(e) => slots[i].unfurnished_reason = Some(e.to_string()),
            }
        }

        for (obj, slot) in scene.objects.iter_mut().zip(&slots) {
            if let Some(reason) = &slot.unfurnished_reason {
                log::warn!("{} left unfurnished: {reason}", slot.tag);
            }
            if let Some(id) = &slot.chosen {
                let asset = inventory
                    .get(id)
                    .expect("retrieved ids come from the inventory");
                if !self.settings.cross_category && asset.category != obj.category {
                    return Err(PipelineError::Consistency {
                        stage: Stage::Retrieval,
                        message: format!(
                            "{} received asset {id} of category {}",
                            slot.tag, asset.category
                        ),
                    });
                }
                obj.mesh = Some(id.clone());
            }
        }
        Ok(slots)
    }
}
