//! Dataset ingestion: rectangular-room filtering, annotation joining,
//! optional prompt synthesis and train/val/test splitting.
//!
//! Native formats are line-delimited JSON:
//! scenes `{"scene_id": "...", "floor_polygon": [[x, y], ...]}` and
//! annotations `{"scene_id": "...", "annotation": "..."}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{Pipeline, PipelineError};
use crate::annotation::{extract_tags, normalize_tag_variants};
use crate::par::par_map;
use crate::scene::{Category, Inventory, MeshAsset, MeshAssetId};

/// Reference split sizes of the filtered bedroom set.
pub const REFERENCE_SPLIT: SplitSizes = SplitSizes {
    train: 3397,
    val: 453,
    test: 423,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Validation(String),
}

/// Floor geometry as found in the source data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorShape {
    /// Boundary vertices in order.
    Polygon(Vec<[f64; 2]>),
    /// Triangulated floor mesh projected onto the ground plane.
    Triangles(Vec<[[f64; 2]; 3]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScene {
    pub scene_id: String,
    pub floor: FloorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub source: String,
    pub scene_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_id: String,
    pub annotation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Seeded shuffle of the retained ids cut by the given fractions.
    Random {
        seed: u64,
        fractions: [f64; 3],
    },
    Explicit(SplitLists),
}

impl SplitSpec {
    pub fn reference(seed: u64) -> Self {
        let total = (REFERENCE_SPLIT.train + REFERENCE_SPLIT.val + REFERENCE_SPLIT.test) as f64;
        SplitSpec::Random {
            seed,
            fractions: [
                REFERENCE_SPLIT.train as f64 / total,
                REFERENCE_SPLIT.val as f64 / total,
                REFERENCE_SPLIT.test as f64 / total,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Meters a floor may deviate from its bounding rectangle.
    pub rect_tolerance: f64,
    pub split: SplitSpec,
    pub expected_sizes: Option<SplitSizes>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            rect_tolerance: 0.01,
            split: SplitSpec::reference(0),
            expected_sizes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub sizes: SplitSizes,
    pub retained: usize,
    pub skipped: usize,
    pub split: SplitSpec,
    pub expected_sizes: Option<SplitSizes>,
    pub matches_expected: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub split: DatasetSplit,
    pub skipped: Vec<SkipEntry>,
    pub summary: PrepareSummary,
}

fn shoelace(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = points[i];
            let [x1, y1] = points[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

fn bbox<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> Option<[f64; 4]> {
    points.fold(None, |acc, p| {
        Some(match acc {
            None => [p[0], p[1], p[0], p[1]],
            Some([a, b, c, d]) => [a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])],
        })
    })
}

/// Whether the floor is an axis-aligned rectangle up to `tol` meters.
pub fn is_axis_aligned_rectangle(floor: &FloorShape, tol: f64) -> bool {
    let (area, b) = match floor {
        FloorShape::Polygon(points) => {
            let Some(b) = bbox(points.iter()) else {
                return false;
            };
            let on_edge = points.iter().all(|p| {
                (p[0] - b[0]).abs() <= tol
                    || (p[0] - b[2]).abs() <= tol
                    || (p[1] - b[1]).abs() <= tol
                    || (p[1] - b[3]).abs() <= tol
            });
            if !on_edge {
                return false;
            }
            (shoelace(points), b)
        }
        FloorShape::Triangles(tris) => {
            let Some(b) = bbox(tris.iter().flatten()) else {
                return false;
            };
            (tris.iter().map(|t| shoelace(t)).sum(), b)
        }
    };
    let (w, d) = (b[2] - b[0], b[3] - b[1]);
    if w <= tol || d <= tol {
        return false;
    }
    // A notch of depth `tol` along the longer side is the largest allowed gap.
    (w * d - area).abs() <= tol * w.max(d)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

#[derive(Deserialize)]
struct NativeScene {
    scene_id: String,
    floor_polygon: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct NativeAnnotation {
    scene_id: String,
    annotation: String,
}

/// Reads native scene records; malformed lines land in the skip list.
pub fn read_scenes_jsonl(path: &Path) -> Result<(Vec<RawScene>, Vec<SkipEntry>), DatasetError> {
    let mut scenes = Vec::new();
    let mut skips = Vec::new();
    for (line, text) in jsonl_lines(path)? {
        match serde_json::from_str::<NativeScene>(&text) {
            Ok(s) => scenes.push(RawScene {
                scene_id: s.scene_id,
                floor: FloorShape::Polygon(s.floor_polygon),
            }),
            Err(e) => skips.push(SkipEntry {
                source: format!("{}:{line}", path.display()),
                scene_id: None,
                reason: format!("unreadable scene record: {e}"),
            }),
        }
    }
    Ok((scenes, skips))
}

pub fn read_annotations_jsonl(
    path: &Path,
) -> Result<(BTreeMap<String, String>, Vec<SkipEntry>), DatasetError> {
    let mut out = BTreeMap::new();
    let mut skips = Vec::new();
    for (line, text) in jsonl_lines(path)? {
        let source = format!("{}:{line}", path.display());
        match serde_json::from_str::<NativeAnnotation>(&text) {
            Ok(a) if out.contains_key(&a.scene_id) => skips.push(SkipEntry {
                source,
                scene_id: Some(a.scene_id),
                reason: "duplicate annotation".into(),
            }),
            Ok(a) => {
                out.insert(a.scene_id, a.annotation);
            }
            Err(e) => skips.push(SkipEntry {
                source,
                scene_id: None,
                reason: format!("unreadable annotation record: {e}"),
            }),
        }
    }
    Ok((out, skips))
}

/// Reads rooms from one 3D-FRONT house file. Each room becomes a scene with
/// id `<house uid>/<room instanceid>`; its floor is the union of the `Floor`
/// meshes the room references, projected onto the x/z plane.
pub fn read_front_house(path: &Path) -> Result<(Vec<RawScene>, Vec<SkipEntry>), DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let house: Value = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    Ok(front_rooms(&house, &path.display().to_string(), None))
}

/// As [`read_front_house`] for an already parsed document, optionally
/// keeping only rooms whose `type` contains `room_type` (case-insensitive).
pub fn front_rooms(
    house: &Value,
    source: &str,
    room_type: Option<&str>,
) -> (Vec<RawScene>, Vec<SkipEntry>) {
    let mut scenes = Vec::new();
    let mut skips = Vec::new();
    let uid = house.get("uid").and_then(Value::as_str).unwrap_or("house");
    let floors: BTreeMap<&str, &Value> = house
        .get("mesh")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter(|m| m.get("type").and_then(Value::as_str) == Some("Floor"))
        .filter_map(|m| Some((m.get("uid")?.as_str()?, m)))
        .collect();
    let rooms = house
        .pointer("/scene/room")
        .and_then(Value::as_array)
        .cloned()
        .unwrap_or_default();
    for room in &rooms {
        let kind = room.get("type").and_then(Value::as_str).unwrap_or("");
        if let Some(want) = room_type {
            if !kind.to_lowercase().contains(&want.to_lowercase()) {
                continue;
            }
        }
        let id = room
            .get("instanceid")
            .and_then(Value::as_str)
            .unwrap_or("room");
        let scene_id = format!("{uid}/{id}");
        let refs = room
            .get("children")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(|c| c.get("ref").and_then(Value::as_str));
        let mut tris = Vec::new();
        let mut bad = None;
        for r in refs {
            let Some(mesh) = floors.get(r) else { continue };
            match mesh_triangles(mesh) {
                Ok(t) => tris.extend(t),
                Err(e) => bad = Some(e),
            }
        }
        match bad {
            Some(reason) => skips.push(SkipEntry {
                source: source.to_string(),
                scene_id: Some(scene_id),
                reason,
            }),
            None if tris.is_empty() => skips.push(SkipEntry {
                source: source.to_string(),
                scene_id: Some(scene_id),
                reason: "room has no floor mesh".into(),
            }),
            None => scenes.push(RawScene {
                scene_id,
                floor: FloorShape::Triangles(tris),
            }),
        }
    }
    (scenes, skips)
}

fn mesh_triangles(mesh: &Value) -> Result<Vec<[[f64; 2]; 3]>, String> {
    let xyz: Vec<f64> = mesh
        .get("xyz")
        .and_then(Value::as_array)
        .ok_or("floor mesh lacks xyz")?
        .iter()
        .map(|v| v.as_f64().ok_or("non-numeric vertex"))
        .collect::<Result<_, _>>()?;
    let faces: Vec<usize> = mesh
        .get("faces")
        .and_then(Value::as_array)
        .ok_or("floor mesh lacks faces")?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|u| u as usize)
                .ok_or("non-integer face index")
        })
        .collect::<Result<_, _>>()?;
    if !xyz.len().is_multiple_of(3) || !faces.len().is_multiple_of(3) {
        return Err("floor mesh arrays are not multiples of 3".into());
    }
    let vertex = |i: usize| -> Result<[f64; 2], String> {
        if 3 * i + 2 >= xyz.len() {
            return Err(format!("face index {i} out of range"));
        }
        Ok([xyz[3 * i], xyz[3 * i + 2]])
    };
    faces
        .chunks(3)
        .map(|f| Ok([vertex(f[0])?, vertex(f[1])?, vertex(f[2])?]))
        .collect()
}

/// Reads grounded scene descriptions keyed by scene id. Accepted shapes:
/// an object mapping ids to a string, to an object with a
/// `grounded_scene_description` or `description` field, or to a list of
/// those (first entry wins); or a list of objects carrying `scene_id`.
/// Tag spelling variants are normalized.
pub fn read_grand_annotations(
    path: &Path,
) -> Result<(BTreeMap<String, String>, Vec<SkipEntry>), DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    let source = path.display().to_string();
    let pairs: Vec<(String, &Value)> = match &doc {
        Value::Object(map) => map.iter().map(|(k, v)| (k.clone(), v)).collect(),
        Value::Array(items) => items
            .iter()
            .filter_map(|v| Some((v.get("scene_id")?.as_str()?.to_string(), v)))
            .collect(),
        _ => {
            return Err(DatasetError::Validation(format!(
                "{source}: expected an object or a list"
            )))
        }
    };
    fn text_of(v: &Value) -> Option<&str> {
        match v {
            Value::String(s) => Some(s),
            Value::Array(items) => items.first().and_then(text_of),
            Value::Object(m) => m
                .get("grounded_scene_description")
                .or_else(|| m.get("description"))
                .or_else(|| m.get("annotation"))
                .and_then(text_of),
            _ => None,
        }
    }
    let mut out = BTreeMap::new();
    let mut skips = Vec::new();
    for (id, v) in pairs {
        match text_of(v) {
            Some(t) => {
                out.insert(id, normalize_tag_variants(t));
            }
            None => skips.push(SkipEntry {
                source: source.clone(),
                scene_id: Some(id),
                reason: "no grounded description found".into(),
            }),
        }
    }
    Ok((out, skips))
}

/// Builds an inventory from a 3D-FUTURE `model_info.json`. Categories are
/// slugified from the `category` label (falling back to `super-category`);
/// each asset's image is `<root>/<model_id>/image.jpg`.
pub fn read_future_inventory(model_info: &Path, root: &Path) -> Result<Inventory, DatasetError> {
    let text = fs::read_to_string(model_info).map_err(|e| io_err(model_info, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| io_err(model_info, e))?;
    let items = doc
        .as_array()
        .ok_or_else(|| DatasetError::Validation("model_info must be a list".into()))?;
    let mut assets = Vec::new();
    for item in items {
        let Some(id) = item.get("model_id").and_then(Value::as_str) else {
            continue;
        };
        let label = item
            .get("category")
            .and_then(Value::as_str)
            .or_else(|| item.get("super-category").and_then(Value::as_str));
        let Some(category) = label.and_then(Category::slugify) else {
            log::warn!("3D-FUTURE model {id} has no usable category; skipped");
            continue;
        };
        assets.push(MeshAsset {
            id: MeshAssetId::new(id),
            category,
            image: root.join(id).join("image.jpg").display().to_string(),
            embedding: None,
        });
    }
    Inventory::new(assets, None).map_err(|e| DatasetError::Validation(e.to_string()))
}

fn assign(
    ids: &[String],
    spec: &SplitSpec,
    skips: &mut Vec<SkipEntry>,
) -> Result<[Vec<String>; 3], DatasetError> {
    match spec {
        SplitSpec::Random { seed, fractions } => {
            let sum: f64 = fractions.iter().sum();
            if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(DatasetError::Validation(format!(
                    "split fractions must be non-negative and sum to 1, got {fractions:?}"
                )));
            }
            let mut shuffled = ids.to_vec();
            shuffled.sort();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n = shuffled.len();
            let val = (n as f64 * fractions[1]).round() as usize;
            let test = ((n as f64 * fractions[2]).round() as usize).min(n - val);
            let train = n - val - test;
            let rest = shuffled.split_off(train);
            let (v, t) = rest.split_at(val);
            Ok([shuffled, v.to_vec(), t.to_vec()])
        }
        SplitSpec::Explicit(lists) => {
            let mut seen = BTreeSet::new();
            for id in lists.train.iter().chain(&lists.val).chain(&lists.test) {
                if !seen.insert(id) {
                    return Err(DatasetError::Validation(format!(
                        "scene {id} appears in more than one split list"
                    )));
                }
            }
            let available: BTreeSet<&String> = ids.iter().collect();
            for id in ids.iter().filter(|id| !seen.contains(id)) {
                skips.push(SkipEntry {
                    source: "split lists".into(),
                    scene_id: Some(id.clone()),
                    reason: "not listed in any split".into(),
                });
            }
            let keep = |l: &Vec<String>| -> Vec<String> {
                l.iter()
                    .filter(|id| available.contains(id))
                    .cloned()
                    .collect()
            };
            Ok([keep(&lists.train), keep(&lists.val), keep(&lists.test)])
        }
    }
}

/// Filters `scenes` to rectangular floors with an annotation, optionally
/// synthesizes a prompt per record, and splits.
pub fn prepare_dataset(
    scenes: &[RawScene],
    annotations: &BTreeMap<String, String>,
    options: &PrepareOptions,
    synthesizer: Option<&Pipeline>,
    mut skipped: Vec<SkipEntry>,
) -> Result<PreparedDataset, DatasetError> {
    if !options.rect_tolerance.is_finite() || options.rect_tolerance < 0.0 {
        return Err(DatasetError::Validation(
            "rect_tolerance must be non-negative".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    let mut retained: BTreeMap<String, DatasetRecord> = BTreeMap::new();
    for s in scenes {
        let skip = |reason: &str| SkipEntry {
            source: "scenes".into(),
            scene_id: Some(s.scene_id.clone()),
            reason: reason.to_string(),
        };
        if !seen.insert(s.scene_id.clone()) {
            skipped.push(skip("duplicate scene id"));
        } else if !is_axis_aligned_rectangle(&s.floor, options.rect_tolerance) {
            skipped.push(skip("floor is not an axis-aligned rectangle"));
        } else if let Some(a) = annotations.get(&s.scene_id) {
            retained.insert(
                s.scene_id.clone(),
                DatasetRecord {
                    scene_id: s.scene_id.clone(),
                    annotation: a.clone(),
                    prompt: None,
                },
            );
        } else {
            skipped.push(skip("no annotation"));
        }
    }

    if let Some(p) = synthesizer {
        let records: Vec<DatasetRecord> = retained.values().cloned().collect();
        let results: Vec<Result<String, PipelineError>> =
            par_map(&records, p.chat_workers(), |r| {
                p.synthesize_prompt(&extract_tags(&r.annotation))
                    .map(|o| o.value)
            });
        for (r, res) in records.into_iter().zip(results) {
            match res {
                Ok(prompt) => {
                    retained.get_mut(&r.scene_id).expect("retained").prompt = Some(prompt)
                }
                Err(e) => {
                    retained.remove(&r.scene_id);
                    skipped.push(SkipEntry {
                        source: "prompt synthesis".into(),
                        scene_id: Some(r.scene_id),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }

    let ids: Vec<String> = retained.keys().cloned().collect();
    let [train, val, test] = assign(&ids, &options.split, &mut skipped)?;
    let take = |l: Vec<String>| -> Vec<DatasetRecord> {
        l.into_iter().map(|id| retained[&id].clone()).collect()
    };
    let split = DatasetSplit {
        train: take(train),
        val: take(val),
        test: take(test),
    };
    let sizes = split.sizes();
    let summary = PrepareSummary {
        sizes,
        retained: sizes.train + sizes.val + sizes.test,
        skipped: skipped.len(),
        split: options.split.clone(),
        expected_sizes: options.expected_sizes,
        matches_expected: options.expected_sizes.map(|e| e == sizes),
    };
    Ok(PreparedDataset {
        split,
        skipped,
        summary,
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl`, `skipped.jsonl` and
/// `summary.json` into `dir`.
pub fn write_prepared(prepared: &PreparedDataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let summary = serde_json::to_string_pretty(&prepared.summary).expect("serializable") + "\n";
    for (name, body) in [
        ("train.jsonl", jsonl(&prepared.split.train)),
        ("val.jsonl", jsonl(&prepared.split.val)),
        ("test.jsonl", jsonl(&prepared.split.test)),
        ("skipped.jsonl", jsonl(&prepared.skipped)),
        ("summary.json", summary),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
