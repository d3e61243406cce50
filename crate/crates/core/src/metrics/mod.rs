//! Evaluation metrics: textual fidelity rate, top-K retrieval accuracy,
//! and FID/KID distances between embedding sets.

mod distance;
mod matrix;

pub use distance::{fid, kid, kid_subsets, KidSubsetEstimate};
pub use matrix::EmbeddingSet;

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine, EmbedRequest, Gateway, GatewayError, ImageRef, ScoreRequest};
use crate::par::par_map;
use crate::scene::MeshAssetId;

/// Negative scenes drawn per TFR sample unless configured otherwise.
pub const DEFAULT_NEGATIVE_BATCH: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{0}")]
    Validation(String),
    #[error("embedding dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("{rows} row(s) given, at least {min} required")]
    TooFewRows { rows: usize, min: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cannot read {path}: {message}")]
    Input { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfrSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Log-likelihood of the prompt under each view of its own scene.
    pub positive_views: Vec<f64>,
    /// Log-likelihood of the prompt under each negative scene.
    pub negative_scores: Vec<f64>,
}

/// Median; an even count averages the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

fn check_finite(values: &[f64], what: &str) -> Result<(), MetricError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::Validation(format!(
            "non-finite value in {what}"
        )))
    }
}

/// Fraction of negatives scoring strictly below the median positive view.
pub fn tfr(sample: &TfrSample) -> Result<f64, MetricError> {
    if sample.negative_scores.is_empty() {
        return Err(MetricError::Validation("no negative scores".into()));
    }
    check_finite(&sample.positive_views, "positive views")?;
    check_finite(&sample.negative_scores, "negative scores")?;
    let pos = median(&sample.positive_views)
        .ok_or_else(|| MetricError::Validation("no positive views".into()))?;
    let below = sample.negative_scores.iter().filter(|&&s| s < pos).count();
    Ok(below as f64 / sample.negative_scores.len() as f64)
}

/// Fraction of TFR values at or above `k`.
pub fn tfr_at_k(scores: &[f64], k: f64) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Validation("no TFR values".into()));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(MetricError::Validation(format!(
            "k must lie in [0, 1], got {k}"
        )));
    }
    Ok(scores.iter().filter(|&&s| s >= k).count() as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKRecord {
    pub id: String,
    pub ground_truth: MeshAssetId,
    pub ranked: Vec<MeshAssetId>,
}

/// For each k, the fraction of records whose ground truth is within the
/// first k ranks.
pub fn top_k_accuracy(
    records: &[TopKRecord],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Validation("no records".into()));
    }
    if ks.contains(&0) {
        return Err(MetricError::Validation("k must be positive".into()));
    }
    let mut positions = Vec::with_capacity(records.len());
    for r in records {
        if r.ranked.is_empty() {
            return Err(MetricError::Validation(format!(
                "record {} has no ranking",
                r.id
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = r.ranked.iter().find(|id| !seen.insert(*id)) {
            return Err(MetricError::Validation(format!(
                "record {} ranks {dup} twice",
                r.id
            )));
        }
        positions.push(r.ranked.iter().position(|id| *id == r.ground_truth));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = positions
                .iter()
                .filter(|p| p.is_some_and(|i| i < k))
                .count();
            (k, hits as f64 / records.len() as f64)
        })
        .collect())
}

/// Summed token log-likelihood of `prompt` under each view.
pub fn score_scene_text(
    views: &[ImageRef],
    prompt: &str,
    question: &str,
    gateway: &Gateway,
) -> Result<Vec<f64>, MetricError> {
    if views.is_empty() {
        return Err(MetricError::Validation("no scene views".into()));
    }
    if prompt.trim().is_empty() {
        return Err(MetricError::Validation("empty prompt".into()));
    }
    let workers = gateway.scorer_endpoint().max_parallel();
    par_map(views, workers, |v| {
        gateway
            .score_text(&ScoreRequest {
                image: v.clone(),
                prefix_prompt: question.to_string(),
                target_text: prompt.to_string(),
            })
            .map(|r| r.sum_logprob)
            .map_err(MetricError::from)
    })
    .into_iter()
    .collect()
}

/// Cosine between the prompt embedding and the mean view embedding.
pub fn clip_score(prompt: &str, views: &[ImageRef], gateway: &Gateway) -> Result<f64, MetricError> {
    if views.is_empty() {
        return Err(MetricError::Validation("no scene views".into()));
    }
    let text = gateway.embed(&EmbedRequest::text(prompt))?.vector;
    let mut mean = vec![0.0; text.len()];
    for v in views {
        let e = gateway.embed(&EmbedRequest::image(v.clone()))?.vector;
        if e.len() != mean.len() {
            return Err(MetricError::DimensionMismatch {
                a: text.len(),
                b: e.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(&e) {
            *m += x / views.len() as f64;
        }
    }
    Ok(cosine(&text, &mean))
}

/// `batch` distinct indices from `0..pool` excluding `exclude`, seeded.
pub fn sample_negatives(
    pool: usize,
    exclude: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if pool < 2 {
        return Vec::new();
    }
    let take = batch.min(pool - 1);
    let mut picked: Vec<usize> = sample(rng, pool - 1, take)
        .into_iter()
        .map(|j| if j >= exclude { j + 1 } else { j })
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfrScene {
    pub id: String,
    pub prompt: String,
    pub views: Vec<ImageRef>,
}

/// Scores every scene's prompt against its own views and against a seeded
/// batch of other scenes. A negative scene's score is the median over its
/// views, matching the aggregation of the positive side.
pub fn build_tfr_samples(
    scenes: &[TfrScene],
    batch: usize,
    seed: u64,
    question: &str,
    gateway: &Gateway,
) -> Result<Vec<TfrSample>, MetricError> {
    if scenes.len() < 2 {
        return Err(MetricError::Validation(
            "at least two scenes are needed to draw negatives".into(),
        ));
    }
    if batch == 0 {
        return Err(MetricError::Validation(
            "negative batch must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let positive_views = score_scene_text(&scene.views, &scene.prompt, question, gateway)?;
        let mut negative_scores = Vec::new();
        for j in sample_negatives(scenes.len(), i, batch, &mut rng) {
            let views = score_scene_text(&scenes[j].views, &scene.prompt, question, gateway)?;
            negative_scores.push(median(&views).expect("views are non-empty"));
        }
        out.push(TfrSample {
            id: Some(scene.id.clone()),
            positive_views,
            negative_scores,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfrReport {
    pub samples: usize,
    pub mean_tfr: f64,
    /// Keyed by threshold formatted with two decimals.
    pub tfr_at: BTreeMap<String, f64>,
    pub per_sample: Vec<f64>,
}

pub fn tfr_report(samples: &[TfrSample], ks: &[f64]) -> Result<TfrReport, MetricError> {
    let per_sample = samples.iter().map(tfr).collect::<Result<Vec<_>, _>>()?;
    if per_sample.is_empty() {
        return Err(MetricError::Validation("no TFR samples".into()));
    }
    let mut tfr_at = BTreeMap::new();
    for &k in ks {
        tfr_at.insert(format!("{k:.2}"), tfr_at_k(&per_sample, k)?);
    }
    Ok(TfrReport {
        samples: per_sample.len(),
        mean_tfr: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        tfr_at,
        per_sample,
    })
}

/// Plain-text table with columns padded to their widest cell. The first
/// column is left-aligned, the rest right-aligned.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = fmt_row(headers.to_vec());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for r in rows {
        let mut cells: Vec<&str> = r.iter().map(String::as_str).collect();
        cells.resize(cols, "");
        out.push_str(&fmt_row(cells));
        out.push('\n');
    }
    out
}

pub fn percent(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockBackend;
    use crate::gateway::RetryPolicy;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn sample(pos: &[f64], neg: &[f64]) -> TfrSample {
        TfrSample {
            id: None,
            positive_views: pos.to_vec(),
            negative_scores: neg.to_vec(),
        }
    }

    fn brute_tfr(s: &TfrSample) -> f64 {
        let mut v = s.positive_views.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        let pos = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mut c = 0;
        for x in &s.negative_scores {
            if *x < pos {
                c += 1;
            }
        }
        c as f64 / s.negative_scores.len() as f64
    }

    #[test]
    fn tfr_examples() {
        assert_eq!(
            tfr(&sample(&[-5.0; 8], &[-6.0, -7.0, -4.0, -5.5])).unwrap(),
            0.75
        );
        assert_eq!(tfr(&sample(&[-1.0], &[-2.0, -3.0])).unwrap(), 1.0);
        assert_eq!(
            tfr(&sample(&[-2.0, -2.0], &[-2.0, -2.0, -2.0])).unwrap(),
            0.0
        );
        assert!(tfr(&sample(&[-1.0], &[])).is_err());
        assert!(tfr(&sample(&[], &[-1.0])).is_err());
        assert!(tfr(&sample(&[f64::NAN], &[-1.0])).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[-3.0, -4.0, -5.0]), Some(-4.0));
        assert_eq!(median(&[1.0, 4.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[7.0]), Some(7.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn tfr_at_k_examples() {
        assert_eq!(tfr_at_k(&[1.0, 0.9, 0.4, 0.5], 0.5).unwrap(), 0.75);
        assert_eq!(tfr_at_k(&[0.0, 0.3], 0.0).unwrap(), 1.0);
        assert!(tfr_at_k(&[], 0.5).is_err());
    }

    fn rec(gt: &str, ranked: &[&str]) -> TopKRecord {
        TopKRecord {
            id: gt.into(),
            ground_truth: MeshAssetId::new(gt),
            ranked: ranked.iter().map(|s| MeshAssetId::new(*s)).collect(),
        }
    }

    #[test]
    fn top_k_examples() {
        let acc = top_k_accuracy(&[rec("c", &["a", "b", "c", "d"])], &[1, 5, 10]).unwrap();
        assert_eq!(acc[&1], 0.0);
        assert_eq!(acc[&5], 1.0);
        assert_eq!(acc[&10], 1.0);
        let acc = top_k_accuracy(&[rec("z", &["a", "b"]), rec("a", &["a"])], &[1, 10]).unwrap();
        assert_eq!(acc[&1], 0.5);
        assert_eq!(acc[&10], 0.5);
        assert!(top_k_accuracy(&[rec("a", &["a", "a"])], &[1]).is_err());
        assert!(top_k_accuracy(&[rec("a", &[])], &[1]).is_err());
    }

    fn gateway(mock: MockBackend) -> Gateway {
        Gateway::single(Arc::new(mock), 4, RetryPolicy::none())
    }

    #[test]
    fn scene_text_scores_per_view() {
        let gw = gateway(
            MockBackend::new()
                .with_score("v1.png", "a bed", vec![-1.0, -2.0])
                .with_score("v2.png", "a bed", vec![-2.0, -2.0])
                .with_score("v3.png", "a bed", vec![-2.0, -3.0]),
        );
        let views: Vec<ImageRef> = ["v1.png", "v2.png", "v3.png"].map(ImageRef::new).into();
        let s = score_scene_text(&views, "a bed", "q", &gw).unwrap();
        assert_eq!(s, vec![-3.0, -4.0, -5.0]);
        assert_eq!(median(&s), Some(-4.0));
        assert!(score_scene_text(&[], "a bed", "q", &gw).is_err());
    }

    #[test]
    fn ground_truth_above_all_negatives() {
        let mut mock = MockBackend::new().with_default_token_logprob(-5.0);
        let scenes: Vec<TfrScene> = (0..60)
            .map(|i| {
                let view = format!("s{i}.png");
                mock = std::mem::take(&mut mock).with_score(
                    &view,
                    &format!("room {i}"),
                    vec![-0.1, -0.1],
                );
                TfrScene {
                    id: format!("s{i}"),
                    prompt: format!("room {i}"),
                    views: vec![ImageRef::new(view)],
                }
            })
            .collect();
        let gw = gateway(mock);
        let samples = build_tfr_samples(&scenes, DEFAULT_NEGATIVE_BATCH, 9, "q", &gw).unwrap();
        assert!(samples.iter().all(|s| s.negative_scores.len() == 50));
        assert!(samples.iter().all(|s| tfr(s).unwrap() == 1.0));
        let again = build_tfr_samples(&scenes, DEFAULT_NEGATIVE_BATCH, 9, "q", &gw).unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn negatives_exclude_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..10 {
            let n = sample_negatives(10, i, 50, &mut rng);
            assert_eq!(n.len(), 9);
            assert!(!n.contains(&i));
        }
    }

    #[test]
    fn clip_score_of_matching_embeddings() {
        let gw = gateway(
            MockBackend::new()
                .with_embed_dim(2)
                .with_text_embedding("p", vec![1.0, 0.0])
                .with_image_embedding("a.png", vec![1.0, 1.0])
                .with_image_embedding("b.png", vec![1.0, -1.0]),
        );
        let views = [ImageRef::new("a.png"), ImageRef::new("b.png")];
        assert!((clip_score("p", &views, &gw).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_alignment() {
        let t = text_table(
            &["lambda", "Top-1"],
            &[
                vec!["0.1".into(), "47.3%".into()],
                vec!["1.0".into(), "3.0%".into()],
            ],
        );
        assert_eq!(
            t,
            "lambda  Top-1\n------  -----\n0.1     47.3%\n1.0      3.0%\n"
        );
    }

    proptest! {
        #[test]
        fn tfr_matches_brute_force(
            pos in proptest::collection::vec(-20i32..0, 1..9),
            neg in proptest::collection::vec(-20i32..0, 1..60),
        ) {
            let s = sample(
                &pos.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &neg.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            );
            let t = tfr(&s).unwrap();
            prop_assert_eq!(t, brute_tfr(&s));
            prop_assert!((0.0..=1.0).contains(&t));
        }

        #[test]
        fn tfr_at_k_non_increasing(
            scores in proptest::collection::vec(0.0f64..=1.0, 1..40),
            k1 in 0.0f64..=1.0,
            k2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            prop_assert!(tfr_at_k(&scores, lo).unwrap() >= tfr_at_k(&scores, hi).unwrap());
        }

        #[test]
        fn top_k_non_decreasing(gt_pos in proptest::collection::vec(0usize..12, 1..20)) {
            let ids: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
            let records: Vec<TopKRecord> = gt_pos
                .iter()
                .enumerate()
                .map(|(n, &p)| TopKRecord {
                    id: n.to_string(),
                    ground_truth: MeshAssetId::new(format!("a{p}")),
                    ranked: ids.iter().map(|s| MeshAssetId::new(s.as_str())).collect(),
                })
                .collect();
            let acc = top_k_accuracy(&records, &[1, 2, 5, 10, 20]).unwrap();
            let v: Vec<f64> = acc.values().copied().collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
