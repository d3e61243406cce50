//! Top-K accuracy as a function of the prior weight.
//!
//! Token log-likelihoods and priors do not depend on the weight, so every
//! (query, candidate) pair is scored once and re-ranked per weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BatchQuery, DecorateEngine, DecorateError};
use crate::metrics::{top_k_accuracy, TopKRecord};
use crate::scene::{Inventory, MeshAssetId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepQuery {
    pub id: String,
    pub description: String,
    pub ground_truth: MeshAssetId,
    pub candidates: Vec<MeshAssetId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_p: f64,
    pub accuracy: BTreeMap<usize, f64>,
}

impl DecorateEngine {
    pub fn lambda_sweep(
        &self,
        inventory: &Inventory,
        queries: &[SweepQuery],
        lambdas: &[f64],
        ks: &[usize],
    ) -> Result<Vec<SweepRow>, DecorateError> {
        if let Some(bad) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(DecorateError::Validation(format!(
                "lambda_p must be non-negative, got {bad}"
            )));
        }
        let batch: Vec<BatchQuery> = queries
            .iter()
            .map(|q| BatchQuery {
                description: q.description.clone(),
                candidates: q.candidates.clone(),
            })
            .collect();
        let ranked = self
            .retrieve_batch(inventory, &batch)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        lambdas
            .iter()
            .map(|&lambda_p| {
                let records: Vec<TopKRecord> = queries
                    .iter()
                    .zip(&ranked)
                    .map(|(q, r)| TopKRecord {
                        id: q.id.clone(),
                        ground_truth: q.ground_truth.clone(),
                        ranked: r.reweighted(lambda_p).ids(),
                    })
                    .collect();
                let accuracy = top_k_accuracy(&records, ks)
                    .map_err(|e| DecorateError::Validation(e.to_string()))?;
                Ok(SweepRow { lambda_p, accuracy })
            })
            .collect()
    }
}
