use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::gateway::mock::MockBackend;
use crate::gateway::RetryPolicy;
use crate::scene::Category;

fn asset(id: &str, cat: &str, embedding: Option<Vec<f64>>) -> MeshAsset {
    MeshAsset {
        id: MeshAssetId::new(id),
        category: Category::new(cat).unwrap(),
        image: format!("{id}.png"),
        embedding,
    }
}

fn engine(
    mock: MockBackend,
    prior: ObjectPrior,
    lambda_p: f64,
    coarse_m: CoarseM,
) -> (Arc<MockBackend>, DecorateEngine) {
    let mock = Arc::new(mock);
    let gw = Gateway::single(mock.clone(), 4, RetryPolicy::none());
    let cfg = RetrievalConfig {
        lambda_p,
        coarse_m,
        ..RetrievalConfig::default()
    };
    (mock, DecorateEngine::new(gw, prior, cfg).unwrap())
}

fn refs(assets: &[MeshAsset]) -> Vec<&MeshAsset> {
    assets.iter().collect()
}

/// Independent scorer: reads the mock table directly and recomputes
/// `lambda * log prior + sum(logprobs)`, then sorts by (-total, id).
fn brute_force(
    table: &BTreeMap<String, Vec<f64>>,
    prior: &BTreeMap<String, f64>,
    lambda: f64,
) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for (id, lps) in table {
        let mut s = 0.0;
        for lp in lps {
            s += lp;
        }
        out.push((id.clone(), lambda * prior[id].ln() + s));
    }
    out.sort_by(|a, b| {
        if a.1 == b.1 {
            a.0.cmp(&b.0)
        } else {
            b.1.partial_cmp(&a.1).unwrap()
        }
    });
    out
}

#[test]
fn score_object_hand_example() {
    let assets = vec![asset("a1", "chair", None), asset("a2", "chair", None)];
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let mock = MockBackend::new()
        .with_score("a1.png", "red chair", vec![-0.1, -0.2])
        .with_score("a2.png", "red chair", vec![-1.0, -1.0]);
    let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::All);
    let s1 = eng.score_object("red chair", &assets[0]).unwrap();
    let s2 = eng.score_object("red chair", &assets[1]).unwrap();
    assert!((s1.total - -0.369_314_718_056).abs() < 1e-9, "{}", s1.total);
    assert!((s2.total - -2.069_314_718_056).abs() < 1e-9, "{}", s2.total);
    let ranked = eng.rank_inventory("red chair", &refs(&assets)).unwrap();
    assert_eq!(
        ranked.ids(),
        [MeshAssetId::new("a1"), MeshAssetId::new("a2")]
    );
    for s in &ranked.scores {
        assert!((s.total - (0.1 * s.log_prior_term + s.token_loglik)).abs() < 1e-9);
    }
}

#[test]
fn zero_weight_is_pure_likelihood() {
    let assets = vec![asset("a", "bed", None)];
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let counts: BTreeMap<MeshAssetId, u64> = [(MeshAssetId::new("a"), 3)].into();
    let prior = ObjectPrior::estimate(&counts, &inv, 1.0).unwrap();
    let (_, eng) = engine(MockBackend::new(), prior, 0.0, CoarseM::All);
    let s = eng.score_object("a low oak bed", &assets[0]).unwrap();
    assert_eq!(s.total, s.token_loglik);
}

#[test]
fn ties_break_by_id() {
    let assets = vec![asset("zeta", "bed", None), asset("alpha", "bed", None)];
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let (_, eng) = engine(
        MockBackend::new().with_default_token_logprob(-1.0),
        ObjectPrior::uniform(&inv).unwrap(),
        0.1,
        CoarseM::All,
    );
    let r = eng.rank_inventory("bed", &refs(&assets)).unwrap();
    assert_eq!(r.scores[0].total, r.scores[1].total);
    assert_eq!(
        r.ids(),
        [MeshAssetId::new("alpha"), MeshAssetId::new("zeta")]
    );
}

#[test]
fn single_candidate_and_validation() {
    let assets = vec![asset("only", "lamp", None)];
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let (_, eng) = engine(
        MockBackend::new(),
        ObjectPrior::uniform(&inv).unwrap(),
        0.1,
        CoarseM::All,
    );
    let r = eng.rank_inventory("brass lamp", &refs(&assets)).unwrap();
    assert_eq!(r.ids(), [MeshAssetId::new("only")]);
    assert!(matches!(
        eng.rank_inventory("brass lamp", &[]),
        Err(DecorateError::Validation(_))
    ));
    assert!(matches!(
        eng.rank_inventory("  ", &refs(&assets)),
        Err(DecorateError::Validation(_))
    ));
    let dup = [&assets[0], &assets[0]];
    assert!(eng.rank_inventory("lamp", &dup).is_err());
}

type Setup = (
    Vec<MeshAsset>,
    MockBackend,
    BTreeMap<String, Vec<f64>>,
    BTreeMap<String, f64>,
);

fn five_asset_setup() -> Setup {
    let desc = "a tall walnut wardrobe";
    let table: BTreeMap<String, Vec<f64>> = [
        ("w1", vec![-0.5, -1.0, -0.2, -0.3]),
        ("w2", vec![-0.1, -0.9, -0.9, -0.1]),
        ("w3", vec![-2.0, -0.1, -0.1, -0.1]),
        ("w4", vec![-0.4, -0.4, -0.4, -0.4]),
        ("w5", vec![-0.3, -0.3, -0.3, -0.3]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut mock = MockBackend::new();
    let mut assets = Vec::new();
    for (id, lps) in &table {
        mock = mock.with_score(&format!("{id}.png"), desc, lps.clone());
        assets.push(asset(id, "wardrobe", None));
    }
    let counts = [9u64, 0, 30, 2, 1];
    let total: u64 = counts.iter().sum();
    let prior: BTreeMap<String, f64> = table
        .keys()
        .zip(counts)
        .map(|(k, c)| (k.clone(), (c as f64 + 1.0) / (total as f64 + 5.0)))
        .collect();
    (assets, mock, table, prior)
}

#[test]
fn five_candidates_match_brute_force() {
    let (assets, mock, table, prior_p) = five_asset_setup();
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let counts: BTreeMap<MeshAssetId, u64> = ["w1", "w2", "w3", "w4", "w5"]
        .iter()
        .zip([9u64, 0, 30, 2, 1])
        .map(|(k, c)| (MeshAssetId::new(*k), c))
        .collect();
    let prior = ObjectPrior::estimate(&counts, &inv, 1.0).unwrap();
    let (_, eng) = engine(mock, prior, 0.5, CoarseM::All);
    let got = eng
        .rank_inventory("a tall walnut wardrobe", &refs(&assets))
        .unwrap();
    let want = brute_force(&table, &prior_p, 0.5);
    assert_eq!(got.scores.len(), want.len());
    for (g, (id, total)) in got.scores.iter().zip(&want) {
        assert_eq!(g.asset.as_str(), id);
        assert!((g.total - total).abs() < 1e-9);
    }
}

#[test]
fn permutation_invariance() {
    let (assets, mock, _, _) = five_asset_setup();
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::All);
    let base = eng
        .rank_inventory("a tall walnut wardrobe", &refs(&assets))
        .unwrap();
    let mut rev = refs(&assets);
    rev.reverse();
    rev.swap(0, 2);
    assert_eq!(
        eng.rank_inventory("a tall walnut wardrobe", &rev).unwrap(),
        base
    );
}

#[test]
fn coarse_orthogonal_geometry() {
    let assets = vec![
        asset("e1", "desk", Some(vec![1.0, 0.0, 0.0])),
        asset("e2", "desk", Some(vec![0.0, 1.0, 0.0])),
        asset("e3", "desk", Some(vec![0.0, 0.0, 1.0])),
    ];
    let inv = Inventory::new(assets.clone(), Some(3)).unwrap();
    let mock = MockBackend::new()
        .with_embed_dim(3)
        .with_text_embedding("desk", vec![0.0, 1.0, 0.0]);
    let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::All);
    let top = eng.coarse_filter("desk", &refs(&assets), 1).unwrap();
    assert_eq!(top.len(), 1);
    assert_eq!(top[0].asset.id.as_str(), "e2");
    let all = eng.coarse_filter("desk", &refs(&assets), 10).unwrap();
    let ids: Vec<&str> = all.iter().map(|h| h.asset.id.as_str()).collect();
    assert_eq!(ids, ["e2", "e1", "e3"]);
}

#[test]
fn coarse_top2_matches_exhaustive_cosine() {
    let vecs = [
        ("p", vec![0.9, 0.1, 0.3, -0.2]),
        ("q", vec![0.2, 0.8, -0.1, 0.4]),
        ("r", vec![0.5, 0.5, 0.5, 0.5]),
        ("s", vec![-0.3, 0.2, 0.9, 0.1]),
    ];
    let query = vec![0.7, 0.3, 0.4, 0.1];
    let assets: Vec<MeshAsset> = vecs
        .iter()
        .map(|(id, v)| asset(id, "sofa", Some(v.clone())))
        .collect();
    let inv = Inventory::new(assets.clone(), Some(4)).unwrap();
    let mock = MockBackend::new()
        .with_embed_dim(4)
        .with_text_embedding("sofa", query.clone());
    let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::All);
    let got: Vec<&str> = eng
        .coarse_filter("sofa", &refs(&assets), 2)
        .unwrap()
        .iter()
        .map(|h| h.asset.id.as_str())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sims: Vec<(f64, &str)> = vecs
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
            (dot / (norm(v) * norm(&query)), *id)
        })
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let want: Vec<&str> = sims[..2].iter().map(|s| s.1).collect();
    assert_eq!(got, want);
}

#[test]
fn missing_embeddings_without_image_capability() {
    let assets = vec![asset("x", "bed", None)];
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let fixture = crate::gateway::mock::MockFixture {
        image_embedding: false,
        ..Default::default()
    };
    let (_, eng) = engine(
        MockBackend::from_fixture(fixture),
        ObjectPrior::uniform(&inv).unwrap(),
        0.1,
        CoarseM::Top(1),
    );
    assert!(matches!(
        eng.retrieve("bed", &refs(&assets)),
        Err(DecorateError::Configuration(_))
    ));
}

/// Coarse winners are c and b, but a has the best likelihood.
fn inversion_setup() -> (Vec<MeshAsset>, MockBackend) {
    let assets = vec![
        asset("a", "bed", Some(vec![0.0, 1.0])),
        asset("b", "bed", Some(vec![0.8, 0.6])),
        asset("c", "bed", Some(vec![1.0, 0.0])),
    ];
    let mock = MockBackend::new()
        .with_embed_dim(2)
        .with_text_embedding("blue bed", vec![1.0, 0.0])
        .with_score("a.png", "blue bed", vec![-0.1, -0.1])
        .with_score("b.png", "blue bed", vec![-1.0, -1.0])
        .with_score("c.png", "blue bed", vec![-2.0, -2.0]);
    (assets, mock)
}

#[test]
fn coarse_to_fine_tradeoff() {
    let (assets, mock) = inversion_setup();
    let inv = Inventory::new(assets.clone(), Some(2)).unwrap();
    let prior = ObjectPrior::uniform(&inv).unwrap();
    let (_, full) = engine(mock, prior.clone(), 0.1, CoarseM::All);
    let (_, one) = engine(inversion_setup().1, prior.clone(), 0.1, CoarseM::Top(1));
    let (_, two) = engine(inversion_setup().1, prior, 0.1, CoarseM::Top(2));

    let all = full.retrieve("blue bed", &refs(&assets)).unwrap();
    assert_eq!(
        all,
        full.rank_inventory("blue bed", &refs(&assets)).unwrap()
    );
    assert_eq!(all.best().unwrap().asset.as_str(), "a");

    let r1 = one.retrieve("blue bed", &refs(&assets)).unwrap();
    assert_eq!(r1.ids(), [MeshAssetId::new("c")]);

    let r2 = two.retrieve("blue bed", &refs(&assets)).unwrap();
    assert_eq!(r2.ids(), [MeshAssetId::new("b"), MeshAssetId::new("c")]);
    assert_ne!(r2.best(), all.best());
}

#[test]
fn failure_policy_defaults() {
    let assets = vec![asset("ok", "bed", None), asset("bad", "bed", None)];
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let mock = MockBackend::new().with_failing_image("bad.png");
    let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::All);
    let err = eng.retrieve("bed", &refs(&assets)).unwrap_err();
    assert!(matches!(err, DecorateError::Asset { ref asset, .. } if asset.as_str() == "bad"));

    let q = BatchQuery {
        description: "bed".into(),
        candidates: vec![MeshAssetId::new("ok"), MeshAssetId::new("bad")],
    };
    let r = eng.retrieve_batch(&inv, &[q]).pop().unwrap().unwrap();
    assert_eq!(r.ids(), [MeshAssetId::new("ok")]);
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(r.skipped[0].asset.as_str(), "bad");
}

fn three_category_inventory() -> Inventory {
    let mut assets = Vec::new();
    for (ci, cat) in ["bed", "desk", "lamp"].iter().enumerate() {
        for k in 0..4 {
            let angle = (ci * 4 + k) as f64 * 0.37;
            assets.push(asset(
                &format!("{cat}{k}"),
                cat,
                Some(vec![angle.cos(), angle.sin(), 0.2]),
            ));
        }
    }
    Inventory::new(assets, Some(3)).unwrap()
}

fn category_queries(inv: &Inventory, per_category: usize) -> Vec<BatchQuery> {
    let mut out = Vec::new();
    for cat in ["lamp", "bed", "desk"] {
        let c = Category::new(cat).unwrap();
        for d in 0..per_category {
            out.push(BatchQuery {
                description: format!("{cat} variant {d}"),
                candidates: inv.in_category(&c).map(|a| a.id.clone()).collect(),
            });
        }
    }
    out
}

#[test]
fn batch_loads_each_asset_once() {
    let inv = three_category_inventory();
    for coarse in [CoarseM::All, CoarseM::Top(3)] {
        let (mock, eng) = engine(
            MockBackend::new().with_embed_dim(3),
            ObjectPrior::uniform(&inv).unwrap(),
            0.1,
            coarse,
        );
        let queries = category_queries(&inv, 2);
        let batch = eng.retrieve_batch(&inv, &queries);
        let stats = mock.stats();
        assert!(
            stats.image_loads.values().all(|&n| n == 1),
            "{:?}",
            stats.image_loads
        );
        if coarse == CoarseM::All {
            assert_eq!(stats.image_loads.len(), inv.len());
            assert_eq!(stats.score_calls, 6 * 4);
        }
        for (q, r) in queries.iter().zip(batch) {
            let cands: Vec<&MeshAsset> =
                q.candidates.iter().map(|id| inv.get(id).unwrap()).collect();
            assert_eq!(r.unwrap(), eng.retrieve(&q.description, &cands).unwrap());
        }
    }
}

#[test]
fn shared_candidate_scored_twice_loaded_once() {
    let assets = vec![asset("shared", "chair", None)];
    let inv = Inventory::new(assets, None).unwrap();
    let (mock, eng) = engine(
        MockBackend::new(),
        ObjectPrior::uniform(&inv).unwrap(),
        0.1,
        CoarseM::All,
    );
    let qs: Vec<BatchQuery> = ["red chair", "blue chair"]
        .iter()
        .map(|d| BatchQuery {
            description: d.to_string(),
            candidates: vec![MeshAssetId::new("shared")],
        })
        .collect();
    let out = eng.retrieve_batch(&inv, &qs);
    assert!(out.iter().all(Result::is_ok));
    let s = mock.stats();
    assert_eq!(s.image_loads["shared.png"], 1);
    assert_eq!(s.score_calls, 2);
}

#[test]
fn batch_of_one_equals_retrieve() {
    let (assets, mock, _, _) = five_asset_setup();
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::All);
    let q = BatchQuery {
        description: "a tall walnut wardrobe".into(),
        candidates: assets.iter().map(|a| a.id.clone()).collect(),
    };
    let batch = eng
        .retrieve_batch(&inv, std::slice::from_ref(&q))
        .pop()
        .unwrap()
        .unwrap();
    assert_eq!(batch, eng.retrieve(&q.description, &refs(&assets)).unwrap());
    let unknown = BatchQuery {
        description: "x".into(),
        candidates: vec![MeshAssetId::new("nope")],
    };
    assert!(matches!(
        eng.retrieve_batch(&inv, &[unknown]).pop().unwrap(),
        Err(DecorateError::UnknownAssets(_))
    ));
}

#[test]
fn serialized_results_are_deterministic() {
    let inv = three_category_inventory();
    let run = || {
        let (_, eng) = engine(
            MockBackend::new().with_embed_dim(3),
            ObjectPrior::uniform(&inv).unwrap(),
            0.1,
            CoarseM::Top(2),
        );
        let r = eng.retrieve_inventory("a wide oak desk", &inv).unwrap();
        serde_json::to_string(&eng.report("a wide oak desk", inv.len(), r)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn coarse_m_parses() {
    assert_eq!("all".parse::<CoarseM>().unwrap(), CoarseM::All);
    assert_eq!("10".parse::<CoarseM>().unwrap(), CoarseM::Top(10));
    assert!("0".parse::<CoarseM>().is_err());
    let cfg: RetrievalConfig = serde_json::from_str(r#"{"coarse_m": 5}"#).unwrap();
    assert_eq!(cfg.coarse_m, CoarseM::Top(5));
    assert_eq!(cfg.lambda_p, 0.1);
    let cfg: RetrievalConfig = serde_json::from_str(r#"{"coarse_m": "all"}"#).unwrap();
    assert_eq!(cfg.coarse_m, CoarseM::All);
    assert!(serde_json::from_str::<RetrievalConfig>(r#"{"coarse_m": 0}"#).is_err());
}

#[test]
fn sweep_matches_independent_runs() {
    let (assets, mock, table, prior_p) = five_asset_setup();
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let counts: BTreeMap<MeshAssetId, u64> = ["w1", "w2", "w3", "w4", "w5"]
        .iter()
        .zip([9u64, 0, 30, 2, 1])
        .map(|(k, c)| (MeshAssetId::new(*k), c))
        .collect();
    let prior = ObjectPrior::estimate(&counts, &inv, 1.0).unwrap();
    let (_, eng) = engine(mock, prior, 0.1, CoarseM::All);
    let q = SweepQuery {
        id: "q".into(),
        description: "a tall walnut wardrobe".into(),
        ground_truth: MeshAssetId::new("w1"),
        candidates: assets.iter().map(|a| a.id.clone()).collect(),
    };
    let lambdas = [0.0, 0.1, 1.0, 10.0];
    let rows = eng.lambda_sweep(&inv, &[q], &lambdas, &[1, 2]).unwrap();
    for row in rows {
        let order = brute_force(&table, &prior_p, row.lambda_p);
        let pos = order.iter().position(|(id, _)| id == "w1").unwrap();
        assert_eq!(row.accuracy[&1], if pos < 1 { 1.0 } else { 0.0 });
        assert_eq!(row.accuracy[&2], if pos < 2 { 1.0 } else { 0.0 });
    }
}

fn random_case(
    lps: &[Vec<f64>],
    counts: &[u64],
    shift: f64,
) -> (Vec<MeshAsset>, MockBackend, ObjectPrior) {
    let mut mock = MockBackend::new();
    let mut assets = Vec::new();
    for (i, row) in lps.iter().enumerate() {
        let id = format!("m{i:02}");
        let desc = description(row.len());
        let mut shifted = row.clone();
        shifted[0] += shift;
        mock = mock.with_score(&format!("{id}.png"), &desc, shifted);
        assets.push(asset(&id, "chair", None));
    }
    let inv = Inventory::new(assets.clone(), None).unwrap();
    let c: BTreeMap<MeshAssetId, u64> = assets
        .iter()
        .zip(counts)
        .map(|(a, &n)| (a.id.clone(), n))
        .collect();
    let prior = ObjectPrior::estimate(&c, &inv, 1.0).unwrap();
    (assets, mock, prior)
}

fn description(tokens: usize) -> String {
    (0..tokens)
        .map(|i| format!("t{i}"))
        .collect::<Vec<_>>()
        .join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn uniform_shift_keeps_order(
        n in 2usize..12,
        seed_lps in proptest::collection::vec(-8.0f64..-0.01, 12 * 6),
        counts in proptest::collection::vec(0u64..50, 12),
        shift in -5.0f64..0.0,
    ) {
        let lps: Vec<Vec<f64>> = (0..n).map(|i| seed_lps[i * 6..i * 6 + 6].to_vec()).collect();
        let (assets, mock, prior) = random_case(&lps, &counts, 0.0);
        let (_, eng) = engine(mock, prior.clone(), 0.1, CoarseM::All);
        let (_, mock2, _) = random_case(&lps, &counts, shift);
        let (_, eng2) = engine(mock2, prior, 0.1, CoarseM::All);
        let a = eng.rank_inventory(&description(6), &refs(&assets)).unwrap();
        let b = eng2.rank_inventory(&description(6), &refs(&assets)).unwrap();
        prop_assert_eq!(a.ids(), b.ids());
    }

    #[test]
    fn weight_limits(
        n in 2usize..10,
        seed_lps in proptest::collection::vec(-8.0f64..-0.01, 10 * 4),
        counts in proptest::collection::vec(0u64..1000, 10),
    ) {
        let lps: Vec<Vec<f64>> = (0..n).map(|i| seed_lps[i * 4..i * 4 + 4].to_vec()).collect();
        let desc = description(4);
        let (assets, mock, prior) = random_case(&lps, &counts, 0.0);
        let inv = Inventory::new(assets.clone(), None).unwrap();
        let (_, zero) = engine(mock, prior.clone(), 0.0, CoarseM::All);
        let (_, zero_uniform) = engine(random_case(&lps, &counts, 0.0).1, ObjectPrior::uniform(&inv).unwrap(), 0.0, CoarseM::All);
        prop_assert_eq!(
            zero.rank_inventory(&desc, &refs(&assets)).unwrap().ids(),
            zero_uniform.rank_inventory(&desc, &refs(&assets)).unwrap().ids()
        );

        let (_, huge) = engine(random_case(&lps, &counts, 0.0).1, prior.clone(), 1e6, CoarseM::All);
        let got = huge.rank_inventory(&desc, &refs(&assets)).unwrap().ids();
        let mut by_prior: Vec<(f64, f64, MeshAssetId)> = assets
            .iter()
            .zip(&lps)
            .map(|(a, l)| (prior.log_prob(&a.id).unwrap(), l.iter().sum::<f64>(), a.id.clone()))
            .collect();
        by_prior.sort_by(|x, y| {
            y.0.total_cmp(&x.0)
                .then_with(|| y.1.total_cmp(&x.1))
                .then_with(|| x.2.cmp(&y.2))
        });
        let want: Vec<MeshAssetId> = by_prior.into_iter().map(|t| t.2).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn numeric_coarse_result_is_subset(
        n in 2usize..15,
        m in 1usize..15,
        raw in proptest::collection::vec(-1.0f64..1.0, 15 * 3),
    ) {
        let assets: Vec<MeshAsset> = (0..n)
            .map(|i| asset(&format!("x{i}"), "rug", Some(vec![raw[3 * i], raw[3 * i + 1], raw[3 * i + 2] + 1.5])))
            .collect();
        let inv = Inventory::new(assets.clone(), Some(3)).unwrap();
        let mock = MockBackend::new().with_embed_dim(3);
        let (_, eng) = engine(mock, ObjectPrior::uniform(&inv).unwrap(), 0.1, CoarseM::Top(m));
        let coarse: Vec<MeshAssetId> = eng
            .coarse_filter("wool rug", &refs(&assets), m)
            .unwrap()
            .iter()
            .map(|h| h.asset.id.clone())
            .collect();
        prop_assert_eq!(coarse.len(), m.min(n));
        let got = eng.retrieve("wool rug", &refs(&assets)).unwrap();
        prop_assert!(got.ids().iter().all(|id| coarse.contains(id)));
        prop_assert_eq!(got.scores.len(), coarse.len());
    }
}
