//! Likelihood-based furniture retrieval.
//!
//! Each candidate asset is scored by how likely a vision-language model finds
//! the object description given the asset's image, plus a weighted log prior:
//!
//! ```text
//! total = lambda_p * log p(asset) + sum_j log p(token_j | image, question, tokens_<j)
//! ```
//!
//! An optional embedding-similarity prefilter keeps only the top `m`
//! candidates before the (expensive) likelihood scoring.

mod prior;
mod sweep;

pub use prior::{read_counts, ObjectPrior, PriorKind};
pub use sweep::{SweepQuery, SweepRow};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{
    cosine, EmbedRequest, Gateway, GatewayError, ImageFeatures, ImageRef, TokenLogprob,
};
use crate::par::par_map;
use crate::scene::{Inventory, MeshAsset, MeshAssetId};
use crate::templates;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecorateError {
    #[error("{0}")]
    Validation(String),
    #[error("unknown asset id(s): {}", join_ids(.0))]
    UnknownAssets(Vec<MeshAssetId>),
    #[error("asset {asset}: {source}")]
    Asset {
        asset: MeshAssetId,
        #[source]
        source: GatewayError,
    },
    #[error("cannot embed description: {0}")]
    Description(#[source] GatewayError),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("cannot read {path}: {message}")]
    Input { path: String, message: String },
}

fn join_ids(ids: &[MeshAssetId]) -> String {
    ids.iter()
        .map(|i| i.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Size of the embedding prefilter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoarseM {
    #[default]
    All,
    Top(usize),
}

impl fmt::Display for CoarseM {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoarseM::All => f.write_str("all"),
            CoarseM::Top(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for CoarseM {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(CoarseM::All);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("expected a positive integer or \"all\", got {s:?}")),
            Ok(n) => Ok(CoarseM::Top(n)),
        }
    }
}

impl Serialize for CoarseM {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CoarseM::All => s.serialize_str("all"),
            CoarseM::Top(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CoarseM {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(0) => Err(serde::de::Error::custom("coarse_m must be positive")),
            Repr::N(n) => Ok(CoarseM::Top(n as usize)),
            Repr::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// What to do when one candidate cannot be scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Drop the candidate, record it, log a warning.
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Weight of the log prior. Values around 0.01 to 0.1 are typical.
    pub lambda_p: f64,
    pub coarse_m: CoarseM,
    /// Use the mean token log-probability instead of the sum.
    pub length_normalize: bool,
    /// Unset means abort for single queries and skip in batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_policy: Option<FailurePolicy>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            lambda_p: 0.1,
            coarse_m: CoarseM::All,
            length_normalize: false,
            failure_policy: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), DecorateError> {
        if !self.lambda_p.is_finite() || self.lambda_p < 0.0 {
            return Err(DecorateError::Validation(format!(
                "lambda_p must be a non-negative number, got {}",
                self.lambda_p
            )));
        }
        if self.coarse_m == CoarseM::Top(0) {
            return Err(DecorateError::Validation(
                "coarse_m must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub asset: MeshAssetId,
    pub log_prior_term: f64,
    pub token_loglik: f64,
    pub total: f64,
    pub token_detail: Vec<TokenLogprob>,
}

/// Candidates kept by the prefilter and those dropped from it.
type Prefiltered<'a> = (Vec<&'a MeshAsset>, Vec<SkippedAsset>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedAsset {
    pub asset: MeshAssetId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    /// Descending total; ties by ascending asset id.
    pub scores: Vec<RetrievalScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedAsset>,
}

pub fn compare_scores(a: &RetrievalScore, b: &RetrievalScore) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then_with(|| a.asset.cmp(&b.asset))
}

impl RankedResult {
    fn sorted(mut scores: Vec<RetrievalScore>, skipped: Vec<SkippedAsset>) -> Self {
        scores.sort_by(compare_scores);
        RankedResult { scores, skipped }
    }

    pub fn best(&self) -> Option<&RetrievalScore> {
        self.scores.first()
    }

    pub fn ids(&self) -> Vec<MeshAssetId> {
        self.scores.iter().map(|s| s.asset.clone()).collect()
    }

    /// The same scores re-totalled and re-sorted under another prior weight.
    pub fn reweighted(&self, lambda_p: f64) -> RankedResult {
        let scores = self
            .scores
            .iter()
            .map(|s| RetrievalScore {
                total: lambda_p * s.log_prior_term + s.token_loglik,
                ..s.clone()
            })
            .collect();
        RankedResult::sorted(scores, self.skipped.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseHit<'a> {
    pub asset: &'a MeshAsset,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchQuery {
    pub description: String,
    pub candidates: Vec<MeshAssetId>,
}

/// Audit document for one retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub description: String,
    pub question: String,
    pub config: RetrievalConfig,
    pub prior_kind: PriorKind,
    pub prior_alpha: f64,
    pub candidate_count: usize,
    pub result: RankedResult,
}

type Loaded = Result<Arc<ImageFeatures>, DecorateError>;
type Embedded = Result<Arc<Vec<f64>>, DecorateError>;

#[derive(Debug, Clone)]
pub struct DecorateEngine {
    gateway: Gateway,
    prior: ObjectPrior,
    config: RetrievalConfig,
    question: String,
}

impl DecorateEngine {
    pub fn new(
        gateway: Gateway,
        prior: ObjectPrior,
        config: RetrievalConfig,
    ) -> Result<Self, DecorateError> {
        config.validate()?;
        Ok(DecorateEngine {
            gateway,
            prior,
            config,
            question: templates::DECORATE_SCORING.to_string(),
        })
    }

    /// Replaces the question that precedes each description.
    pub fn with_question(mut self, question: impl Into<String>) -> Self {
        self.question = question.into();
        self
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn prior(&self) -> &ObjectPrior {
        &self.prior
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn workers(&self) -> usize {
        self.gateway.scorer_endpoint().max_parallel()
    }

    pub fn report(
        &self,
        description: &str,
        candidate_count: usize,
        result: RankedResult,
    ) -> RetrievalReport {
        RetrievalReport {
            description: description.to_string(),
            question: self.question.clone(),
            config: self.config.clone(),
            prior_kind: self.prior.kind,
            prior_alpha: self.prior.alpha,
            candidate_count,
            result,
        }
    }

    fn log_prior(&self, id: &MeshAssetId) -> Result<f64, DecorateError> {
        self.prior.log_prob(id).ok_or_else(|| {
            DecorateError::Validation(format!("asset {id} has no prior probability"))
        })
    }

    fn load(&self, asset: &MeshAsset) -> Loaded {
        self.gateway
            .load_image(&ImageRef::new(asset.image.as_str()))
            .map(Arc::new)
            .map_err(|source| DecorateError::Asset {
                asset: asset.id.clone(),
                source,
            })
    }

    fn asset_embedding(&self, asset: &MeshAsset) -> Embedded {
        if let Some(e) = &asset.embedding {
            return Ok(Arc::new(e.clone()));
        }
        if !self.gateway.can_embed_images() {
            return Err(DecorateError::Configuration(format!(
                "asset {} has no stored embedding and the embedding backend cannot embed images",
                asset.id
            )));
        }
        self.gateway
            .embed(&EmbedRequest::image(ImageRef::new(asset.image.as_str())))
            .map(|r| Arc::new(r.vector))
            .map_err(|source| DecorateError::Asset {
                asset: asset.id.clone(),
                source,
            })
    }

    fn score_loaded(
        &self,
        description: &str,
        asset: &MeshAsset,
        features: &ImageFeatures,
    ) -> Result<RetrievalScore, DecorateError> {
        let log_prior_term = self.log_prior(&asset.id)?;
        let resp = self
            .gateway
            .score_features(features, &self.question, description)
            .map_err(|source| DecorateError::Asset {
                asset: asset.id.clone(),
                source,
            })?;
        let token_loglik = if self.config.length_normalize {
            resp.sum_logprob / resp.token_logprobs.len() as f64
        } else {
            resp.sum_logprob
        };
        Ok(RetrievalScore {
            asset: asset.id.clone(),
            log_prior_term,
            token_loglik,
            total: self.config.lambda_p * log_prior_term + token_loglik,
            token_detail: resp.token_logprobs,
        })
    }

    pub fn score_object(
        &self,
        description: &str,
        asset: &MeshAsset,
    ) -> Result<RetrievalScore, DecorateError> {
        check_description(description)?;
        let features = self.load(asset)?;
        self.score_loaded(description, asset, &features)
    }

    fn rank_with(
        &self,
        description: &str,
        candidates: &[&MeshAsset],
        policy: FailurePolicy,
        load: impl Fn(&MeshAsset) -> Loaded + Sync,
    ) -> Result<RankedResult, DecorateError> {
        let results = par_map(candidates, self.workers(), |a| {
            load(a).and_then(|f| self.score_loaded(description, a, &f))
        });
        let mut scores = Vec::with_capacity(results.len());
        let mut skipped = Vec::new();
        for (asset, r) in candidates.iter().zip(results) {
            match r {
                Ok(s) => scores.push(s),
                Err(e) => skip_or_abort(e, &asset.id, policy, &mut skipped)?,
            }
        }
        Ok(RankedResult::sorted(scores, skipped))
    }

    /// Scores every candidate. Ignores `coarse_m`.
    pub fn rank_inventory(
        &self,
        description: &str,
        candidates: &[&MeshAsset],
    ) -> Result<RankedResult, DecorateError> {
        check_description(description)?;
        check_candidates(candidates)?;
        let policy = self.config.failure_policy.unwrap_or(FailurePolicy::Abort);
        self.rank_with(description, candidates, policy, |a| self.load(a))
    }

    fn embed_description(&self, description: &str) -> Result<Vec<f64>, DecorateError> {
        self.gateway
            .embed(&EmbedRequest::text(description))
            .map(|r| r.vector)
            .map_err(DecorateError::Description)
    }

    fn coarse_with<'a>(
        &self,
        query: &[f64],
        candidates: &[&'a MeshAsset],
        m: usize,
        policy: FailurePolicy,
        skipped: &mut Vec<SkippedAsset>,
        embed: impl Fn(&MeshAsset) -> Embedded + Sync,
    ) -> Result<Vec<CoarseHit<'a>>, DecorateError> {
        let embeddings = par_map(candidates, self.workers(), |a| embed(a));
        let mut hits = Vec::with_capacity(candidates.len());
        for (asset, e) in candidates.iter().zip(embeddings) {
            match e {
                Ok(v) if v.len() != query.len() => {
                    return Err(DecorateError::Configuration(format!(
                        "asset {} embedding has dimension {}, description embedding has {}",
                        asset.id,
                        v.len(),
                        query.len()
                    )))
                }
                Ok(v) => hits.push(CoarseHit {
                    asset,
                    similarity: cosine(query, &v),
                }),
                Err(e) => skip_or_abort(e, &asset.id, policy, skipped)?,
            }
        }
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.asset.id.cmp(&b.asset.id))
        });
        hits.truncate(m);
        Ok(hits)
    }

    /// The `m` candidates most cosine-similar to the description embedding,
    /// most similar first.
    pub fn coarse_filter<'a>(
        &self,
        description: &str,
        candidates: &[&'a MeshAsset],
        m: usize,
    ) -> Result<Vec<CoarseHit<'a>>, DecorateError> {
        check_description(description)?;
        if m == 0 {
            return Err(DecorateError::Validation("m must be positive".into()));
        }
        let query = self.embed_description(description)?;
        let mut skipped = Vec::new();
        self.coarse_with(
            &query,
            candidates,
            m,
            FailurePolicy::Abort,
            &mut skipped,
            |a| self.asset_embedding(a),
        )
    }

    /// Prefilters by embedding similarity when `coarse_m` is numeric, then
    /// scores the survivors.
    pub fn retrieve(
        &self,
        description: &str,
        candidates: &[&MeshAsset],
    ) -> Result<RankedResult, DecorateError> {
        check_description(description)?;
        check_candidates(candidates)?;
        let policy = self.config.failure_policy.unwrap_or(FailurePolicy::Abort);
        match self.config.coarse_m {
            CoarseM::All => self.rank_with(description, candidates, policy, |a| self.load(a)),
            CoarseM::Top(m) => {
                let query = self.embed_description(description)?;
                let mut skipped = Vec::new();
                let hits = self.coarse_with(&query, candidates, m, policy, &mut skipped, |a| {
                    self.asset_embedding(a)
                })?;
                let kept: Vec<&MeshAsset> = hits.iter().map(|h| h.asset).collect();
                let mut out = self.rank_with(description, &kept, policy, |a| self.load(a))?;
                skipped.append(&mut out.skipped);
                out.skipped = skipped;
                Ok(out)
            }
        }
    }

    pub fn retrieve_inventory(
        &self,
        description: &str,
        inventory: &Inventory,
    ) -> Result<RankedResult, DecorateError> {
        let all: Vec<&MeshAsset> = inventory.assets.iter().collect();
        self.retrieve(description, &all)
    }

    /// Runs many queries, one candidate category group at a time.
    ///
    /// Within a group every asset image is loaded (and, when the prefilter
    /// needs it, embedded) once and shared by all queries; the cache is
    /// dropped before the next group. Results are in query order and equal
    /// those of separate [`DecorateEngine::retrieve`] calls under the same
    /// failure policy.
    pub fn retrieve_batch(
        &self,
        inventory: &Inventory,
        queries: &[BatchQuery],
    ) -> Vec<Result<RankedResult, DecorateError>> {
        let policy = self.config.failure_policy.unwrap_or(FailurePolicy::Skip);
        let by_id: HashMap<&MeshAssetId, &MeshAsset> =
            inventory.assets.iter().map(|a| (&a.id, a)).collect();

        let mut out: Vec<Option<Result<RankedResult, DecorateError>>> = vec![None; queries.len()];
        let mut groups: BTreeMap<String, Vec<(usize, Vec<&MeshAsset>)>> = BTreeMap::new();
        for (qi, q) in queries.iter().enumerate() {
            let resolved = check_description(&q.description).and_then(|_| {
                let missing: Vec<MeshAssetId> = q
                    .candidates
                    .iter()
                    .filter(|id| !by_id.contains_key(id))
                    .cloned()
                    .collect();
                if !missing.is_empty() {
                    return Err(DecorateError::UnknownAssets(missing));
                }
                let assets: Vec<&MeshAsset> = q.candidates.iter().map(|id| by_id[id]).collect();
                check_candidates(&assets)?;
                Ok(assets)
            });
            match resolved {
                Ok(assets) => {
                    let key: BTreeSet<&str> = assets.iter().map(|a| a.category.as_str()).collect();
                    let key = key.into_iter().collect::<Vec<_>>().join("+");
                    groups.entry(key).or_default().push((qi, assets));
                }
                Err(e) => out[qi] = Some(Err(e)),
            }
        }

        for (category, members) in groups {
            log::debug!("batch group {category}: {} queries", members.len());
            let (results, cached) = self.run_group(queries, &members, policy);
            for ((qi, _), r) in members.iter().zip(results) {
                out[*qi] = Some(r);
            }
            drop(cached);
            log::debug!("released feature cache for {category}");
        }
        out.into_iter()
            .map(|r| r.expect("every query is answered"))
            .collect()
    }

    fn run_group(
        &self,
        queries: &[BatchQuery],
        members: &[(usize, Vec<&MeshAsset>)],
        policy: FailurePolicy,
    ) -> (
        Vec<Result<RankedResult, DecorateError>>,
        HashMap<MeshAssetId, Loaded>,
    ) {
        // Prefilter stage: shared asset embeddings, per-query description embeddings.
        let mut pre: Vec<Result<Prefiltered<'_>, DecorateError>> =
            Vec::with_capacity(members.len());
        match self.config.coarse_m {
            CoarseM::All => {
                for (_, assets) in members {
                    pre.push(Ok((assets.clone(), Vec::new())));
                }
            }
            CoarseM::Top(m) => {
                let needing: Vec<&MeshAsset> =
                    unique(members.iter().flat_map(|(_, a)| a.iter().copied()))
                        .into_iter()
                        .filter(|a| a.embedding.is_none())
                        .collect();
                let embedded: HashMap<MeshAssetId, Embedded> = needing
                    .iter()
                    .map(|a| a.id.clone())
                    .zip(par_map(&needing, self.workers(), |a| {
                        self.asset_embedding(a)
                    }))
                    .collect();
                let lookup = |a: &MeshAsset| match &a.embedding {
                    Some(e) => Ok(Arc::new(e.clone())),
                    None => embedded[&a.id].clone(),
                };
                for (qi, assets) in members {
                    let r = self
                        .embed_description(&queries[*qi].description)
                        .and_then(|query| {
                            let mut skipped = Vec::new();
                            let hits =
                                self.coarse_with(&query, assets, m, policy, &mut skipped, lookup)?;
                            Ok((hits.into_iter().map(|h| h.asset).collect(), skipped))
                        });
                    pre.push(r);
                }
            }
        }

        // Scoring stage: each surviving asset image is loaded once.
        let survivors: Vec<&MeshAsset> = unique(
            pre.iter()
                .filter_map(|r| r.as_ref().ok())
                .flat_map(|(assets, _)| assets.iter().copied()),
        );
        let cache: HashMap<MeshAssetId, Loaded> = survivors
            .iter()
            .map(|a| a.id.clone())
            .zip(par_map(&survivors, self.workers(), |a| self.load(a)))
            .collect();

        let results = members
            .iter()
            .zip(pre)
            .map(|((qi, _), p)| {
                let (assets, mut skipped) = p?;
                let mut r = self.rank_with(&queries[*qi].description, &assets, policy, |a| {
                    cache[&a.id].clone()
                })?;
                skipped.append(&mut r.skipped);
                r.skipped = skipped;
                Ok(r)
            })
            .collect();
        (results, cache)
    }
}

fn unique<'a>(assets: impl Iterator<Item = &'a MeshAsset>) -> Vec<&'a MeshAsset> {
    let mut seen = HashSet::new();
    assets.filter(|a| seen.insert(&a.id)).collect()
}

fn skip_or_abort(
    e: DecorateError,
    asset: &MeshAssetId,
    policy: FailurePolicy,
    skipped: &mut Vec<SkippedAsset>,
) -> Result<(), DecorateError> {
    match (&e, policy) {
        (DecorateError::Asset { .. }, FailurePolicy::Skip) => {
            log::warn!("skipping {e}");
            skipped.push(SkippedAsset {
                asset: asset.clone(),
                reason: e.to_string(),
            });
            Ok(())
        }
        _ => Err(e),
    }
}

fn check_description(description: &str) -> Result<(), DecorateError> {
    if description.trim().is_empty() {
        Err(DecorateError::Validation("empty description".into()))
    } else {
        Ok(())
    }
}

fn check_candidates(candidates: &[&MeshAsset]) -> Result<(), DecorateError> {
    if candidates.is_empty() {
        return Err(DecorateError::Validation("no candidates".into()));
    }
    let mut seen = HashSet::new();
    for a in candidates {
        if !seen.insert(&a.id) {
            return Err(DecorateError::Validation(format!(
                "duplicate candidate {}",
                a.id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
