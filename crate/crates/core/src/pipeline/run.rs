use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{
    write_artifacts, ArtifactPaths, FrozenClock, GenerationRecord, Pipeline, PipelineError,
};
use crate::config::{Config, ConfigError};
use crate::decorate::{DecorateEngine, DecorateError, ObjectPrior};
use crate::scene::{FloorPlan, Inventory};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Decorate(#[from] DecorateError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("writing artifacts: {0}")]
    Io(#[from] std::io::Error),
}

pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub room: FloorPlan,
    pub inventory: &'a Inventory,
    pub prior: ObjectPrior,
    /// Record zero timings so repeated runs serialize identically.
    pub frozen_clock: bool,
}

/// Builds the backends from `config`, generates one scene and writes its
/// artifacts into `out`. The record embeds `config` as provenance.
pub fn run_generate(
    config: &Config,
    jobs: Option<usize>,
    req: GenerateRequest<'_>,
    out: &Path,
) -> Result<(GenerationRecord, ArtifactPaths), GenerateError> {
    let gateway = config.gateway(jobs)?;
    let templates = config.templates();
    let engine = DecorateEngine::new(gateway.clone(), req.prior, config.retrieval.clone())?
        .with_question(templates.decorate_scoring.clone());
    let mut pipeline = Pipeline::new(gateway, templates, config.pipeline.clone())?;
    if req.frozen_clock {
        pipeline = pipeline.with_clock(Arc::new(FrozenClock));
    }
    let mut record = pipeline.generate_scene(req.prompt, req.room, req.inventory, &engine)?;
    record.provenance.effective_config = Some(config.to_json());
    let paths = write_artifacts(&record, out)?;
    Ok((record, paths))
}
