//! Categorical prior over inventory assets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DecorateError;
use crate::scene::{Category, Inventory, MeshAssetId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    /// Per-asset counts plus `alpha` pseudo-counts.
    DirichletSmoothed,
    /// Per-category counts plus `alpha`; each category's mass is split
    /// equally among its assets.
    CategoryShared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrior {
    pub kind: PriorKind,
    pub alpha: f64,
    pub log_prior: BTreeMap<MeshAssetId, f64>,
}

fn check_alpha(alpha: f64) -> Result<(), DecorateError> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(DecorateError::Validation(format!(
            "alpha must be a positive finite number, got {alpha}"
        )))
    }
}

fn check_inventory(inventory: &Inventory) -> Result<(), DecorateError> {
    if inventory.is_empty() {
        Err(DecorateError::Validation("inventory is empty".into()))
    } else {
        Ok(())
    }
}

impl ObjectPrior {
    pub fn uniform(inventory: &Inventory) -> Result<Self, DecorateError> {
        check_inventory(inventory)?;
        let lp = -(inventory.len() as f64).ln();
        Ok(ObjectPrior {
            kind: PriorKind::Uniform,
            alpha: 1.0,
            log_prior: inventory
                .assets
                .iter()
                .map(|a| (a.id.clone(), lp))
                .collect(),
        })
    }

    /// `p(i) = (count_i + alpha) / (sum(count) + alpha * |I|)`, in log space.
    pub fn estimate(
        counts: &BTreeMap<MeshAssetId, u64>,
        inventory: &Inventory,
        alpha: f64,
    ) -> Result<Self, DecorateError> {
        check_alpha(alpha)?;
        check_inventory(inventory)?;
        let known: HashSet<&MeshAssetId> = inventory.assets.iter().map(|a| &a.id).collect();
        let unknown: Vec<MeshAssetId> = counts
            .keys()
            .filter(|id| !known.contains(id))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(DecorateError::UnknownAssets(unknown));
        }
        let total: f64 = counts.values().map(|&c| c as f64).sum();
        let log_norm = (total + alpha * inventory.len() as f64).ln();
        let log_prior = inventory
            .assets
            .iter()
            .map(|a| {
                let c = counts.get(&a.id).copied().unwrap_or(0) as f64;
                (a.id.clone(), (c + alpha).ln() - log_norm)
            })
            .collect();
        Ok(ObjectPrior {
            kind: PriorKind::DirichletSmoothed,
            alpha,
            log_prior,
        })
    }

    pub fn estimate_by_category(
        counts: &BTreeMap<Category, u64>,
        inventory: &Inventory,
        alpha: f64,
    ) -> Result<Self, DecorateError> {
        check_alpha(alpha)?;
        check_inventory(inventory)?;
        let mut members: BTreeMap<&Category, usize> = BTreeMap::new();
        for a in &inventory.assets {
            *members.entry(&a.category).or_insert(0) += 1;
        }
        let unknown: Vec<&str> = counts
            .keys()
            .filter(|c| !members.contains_key(c))
            .map(Category::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(DecorateError::Validation(format!(
                "categories absent from inventory: {}",
                unknown.join(", ")
            )));
        }
        let total: f64 = counts.values().map(|&c| c as f64).sum();
        let log_norm = (total + alpha * members.len() as f64).ln();
        let log_prior = inventory
            .assets
            .iter()
            .map(|a| {
                let c = counts.get(&a.category).copied().unwrap_or(0) as f64;
                let share = (members[&a.category] as f64).ln();
                (a.id.clone(), (c + alpha).ln() - log_norm - share)
            })
            .collect();
        Ok(ObjectPrior {
            kind: PriorKind::CategoryShared,
            alpha,
            log_prior,
        })
    }

    pub fn log_prob(&self, id: &MeshAssetId) -> Option<f64> {
        self.log_prior.get(id).copied()
    }

    pub fn total_mass(&self) -> f64 {
        self.log_prior.values().map(|lp| lp.exp()).sum()
    }

    pub fn len(&self) -> usize {
        self.log_prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prior.is_empty()
    }

    /// Ids whose prior is present here but which are missing from `inventory`,
    /// and vice versa.
    pub fn mismatches(&self, inventory: &Inventory) -> Vec<MeshAssetId> {
        let inv: BTreeSet<&MeshAssetId> = inventory.assets.iter().map(|a| &a.id).collect();
        let mine: BTreeSet<&MeshAssetId> = self.log_prior.keys().collect();
        inv.symmetric_difference(&mine)
            .map(|id| (*id).clone())
            .collect()
    }
}

#[derive(Deserialize)]
struct CountRow {
    asset_id: String,
    count: u64,
}

/// Reads a two-column CSV (`asset_id,count`, header required, `#` comments).
pub fn read_counts(path: &Path) -> Result<BTreeMap<MeshAssetId, u64>, DecorateError> {
    let input_err = |message: String| DecorateError::Input {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| input_err(e.to_string()))?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<CountRow>() {
        let row = row.map_err(|e| input_err(e.to_string()))?;
        let id = MeshAssetId::new(row.asset_id);
        if out.insert(id.clone(), row.count).is_some() {
            return Err(input_err(format!("duplicate asset id {id}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::MeshAsset;
    use proptest::prelude::*;

    fn inventory(ids: &[(&str, &str)]) -> Inventory {
        Inventory::new(
            ids.iter()
                .map(|(id, cat)| MeshAsset {
                    id: MeshAssetId::new(*id),
                    category: Category::new(*cat).unwrap(),
                    image: format!("{id}.png"),
                    embedding: None,
                })
                .collect(),
            None,
        )
        .unwrap()
    }

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<MeshAssetId, u64> {
        pairs
            .iter()
            .map(|(k, v)| (MeshAssetId::new(*k), *v))
            .collect()
    }

    fn p(prior: &ObjectPrior, id: &str) -> f64 {
        prior.log_prob(&MeshAssetId::new(id)).unwrap().exp()
    }

    #[test]
    fn smoothed_counts() {
        let inv = inventory(&[("a", "bed"), ("b", "bed"), ("c", "bed")]);
        let prior =
            ObjectPrior::estimate(&counts(&[("a", 2), ("b", 1), ("c", 0)]), &inv, 1.0).unwrap();
        assert_eq!(prior.kind, PriorKind::DirichletSmoothed);
        for (id, want) in [("a", 3.0 / 6.0), ("b", 2.0 / 6.0), ("c", 1.0 / 6.0)] {
            assert!((p(&prior, id) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_counts_are_uniform() {
        let inv = inventory(&[("a", "bed"), ("b", "bed"), ("c", "sofa"), ("d", "sofa")]);
        let prior = ObjectPrior::estimate(&BTreeMap::new(), &inv, 1.0).unwrap();
        let uniform = ObjectPrior::uniform(&inv).unwrap();
        for id in ["a", "b", "c", "d"] {
            assert!((p(&prior, id) - 0.25).abs() < 1e-15);
            assert!((p(&uniform, id) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_counts_keep_support() {
        let inv = inventory(&[("a", "bed"), ("b", "bed")]);
        let prior = ObjectPrior::estimate(&counts(&[("a", 999_999)]), &inv, 1.0).unwrap();
        assert!(p(&prior, "b") > 0.0);
        assert!((prior.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_ids_rejected() {
        let inv = inventory(&[("a", "bed")]);
        let err = ObjectPrior::estimate(&counts(&[("zz", 1), ("a", 1)]), &inv, 1.0).unwrap_err();
        assert!(
            matches!(err, DecorateError::UnknownAssets(ref v) if v == &[MeshAssetId::new("zz")])
        );
        assert!(ObjectPrior::estimate(&BTreeMap::new(), &inv, 0.0).is_err());
        assert!(ObjectPrior::estimate(&BTreeMap::new(), &inv, f64::NAN).is_err());
    }

    #[test]
    fn category_mode_shares_mass() {
        let inv = inventory(&[("a", "bed"), ("b", "bed"), ("c", "sofa")]);
        let cats: BTreeMap<Category, u64> = [(Category::new("bed").unwrap(), 3)].into();
        let prior = ObjectPrior::estimate_by_category(&cats, &inv, 1.0).unwrap();
        // bed: (3+1)/(3+2) split over two assets; sofa: 1/5.
        assert!((p(&prior, "a") - 0.4).abs() < 1e-12);
        assert!((p(&prior, "b") - 0.4).abs() < 1e-12);
        assert!((p(&prior, "c") - 0.2).abs() < 1e-12);
        let bad: BTreeMap<Category, u64> = [(Category::new("lamp").unwrap(), 1)].into();
        assert!(ObjectPrior::estimate_by_category(&bad, &inv, 1.0).is_err());
    }

    #[test]
    fn counts_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counts.csv");
        std::fs::write(&path, "asset_id,count\n# comment\na, 4\nb,0\n").unwrap();
        assert_eq!(read_counts(&path).unwrap(), counts(&[("a", 4), ("b", 0)]));
        std::fs::write(&path, "asset_id,count\na,1\na,2\n").unwrap();
        assert!(read_counts(&path).is_err());
        std::fs::write(&path, "asset_id,count\na,-1\n").unwrap();
        assert!(read_counts(&path).is_err());
    }

    proptest! {
        #[test]
        fn mass_sums_to_one(
            cs in proptest::collection::vec(0u64..1_000_000, 1..60),
            alpha in 1e-3f64..100.0,
        ) {
            let ids: Vec<String> = (0..cs.len()).map(|i| format!("m{i}")).collect();
            let pairs: Vec<(&str, &str)> = ids.iter().map(|s| (s.as_str(), "chair")).collect();
            let inv = inventory(&pairs);
            let c: BTreeMap<MeshAssetId, u64> =
                ids.iter().zip(&cs).map(|(id, &n)| (MeshAssetId::new(id.as_str()), n)).collect();
            let prior = ObjectPrior::estimate(&c, &inv, alpha).unwrap();
            prop_assert!((prior.total_mass() - 1.0).abs() < 1e-9);
            prop_assert!(prior.log_prior.values().all(|lp| lp.is_finite()));
        }
    }
}
