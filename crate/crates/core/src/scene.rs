//! Core scene types: floor plans, placed objects, mesh assets and inventories.
//!
//! Coordinates are in meters with the origin at the floor plan's top-left
//! corner, `x` growing rightward and `y` growing downward. An object's
//! `location` is the center of its footprint. Orientation is in degrees.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("non-finite value for {0}")]
    NonFinite(&'static str),
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("invalid category token {0:?} (expected [a-z0-9_]+)")]
    InvalidCategory(String),
    #[error("invalid object tag {0:?} (expected <category>-<index>)")]
    InvalidTag(String),
    #[error("duplicate object {0} in scene")]
    DuplicateObject(ObjectTag),
    #[error("duplicate asset id {0} in inventory")]
    DuplicateAsset(MeshAssetId),
    #[error("asset {id} has a {found}-dimensional embedding, inventory declares {expected}")]
    EmbeddingDim {
        id: MeshAssetId,
        expected: usize,
        found: usize,
    },
    #[error("embedding_dim must be positive")]
    ZeroEmbeddingDim,
}

/// Wraps any finite angle into `[0, 360)`.
pub fn normalize_orientation(deg: f64) -> Result<f64, SceneError> {
    if !deg.is_finite() {
        return Err(SceneError::NonFinite("orientation"));
    }
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    Ok(if r >= 360.0 { 0.0 } else { r })
}

fn check_positive(field: &'static str, value: f64) -> Result<(), SceneError> {
    if !value.is_finite() {
        return Err(SceneError::NonFinite(field));
    }
    if value <= 0.0 {
        return Err(SceneError::NonPositive { field, value });
    }
    Ok(())
}

/// Object category token, restricted to `[a-z0-9_]+`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Category(String);

impl Category {
    pub fn new(token: impl Into<String>) -> Result<Self, SceneError> {
        let token = token.into();
        if is_category_token(&token) {
            Ok(Category(token))
        } else {
            Err(SceneError::InvalidCategory(token))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Maps free-form labels such as `"King-size Bed"` onto a valid token
    /// (`"king_size_bed"`). Returns `None` when nothing usable remains.
    pub fn slugify(label: &str) -> Option<Self> {
        let mut out = String::with_capacity(label.len());
        let mut pending_sep = false;
        for c in label.chars() {
            if c.is_ascii_alphanumeric() {
                if pending_sep && !out.is_empty() {
                    out.push('_');
                }
                pending_sep = false;
                out.push(c.to_ascii_lowercase());
            } else {
                pending_sep = true;
            }
        }
        if out.is_empty() {
            None
        } else {
            Some(Category(out))
        }
    }
}

pub(crate) fn is_category_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl TryFrom<String> for Category {
    type Error = SceneError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Category::new(value)
    }
}

impl From<Category> for String {
    fn from(c: Category) -> String {
        c.0
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Category {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::new(s)
    }
}

/// `<category>-<index>` identity of an object within a scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectTag {
    pub category: Category,
    pub index: u32,
}

impl ObjectTag {
    pub fn new(category: Category, index: u32) -> Self {
        ObjectTag { category, index }
    }
}

impl fmt::Display for ObjectTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.category, self.index)
    }
}

impl FromStr for ObjectTag {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || SceneError::InvalidTag(s.to_string());
        let (cat, idx) = s.split_once('-').ok_or_else(invalid)?;
        if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
            return Err(invalid());
        }
        let category = Category::new(cat).map_err(|_| invalid())?;
        let index = idx.parse::<u32>().map_err(|_| invalid())?;
        Ok(ObjectTag { category, index })
    }
}

impl TryFrom<String> for ObjectTag {
    type Error = SceneError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ObjectTag> for String {
    fn from(t: ObjectTag) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeshAssetId(pub String);

impl MeshAssetId {
    pub fn new(id: impl Into<String>) -> Self {
        MeshAssetId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MeshAssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MeshAssetId {
    fn from(s: &str) -> Self {
        MeshAssetId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub width: f64,
    pub depth: f64,
}

impl FloorPlan {
    pub fn new(width: f64, depth: f64) -> Result<Self, SceneError> {
        check_positive("floor width", width)?;
        check_positive("floor depth", depth)?;
        Ok(FloorPlan { width, depth })
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            min_x: 0.0,
            min_y: 0.0,
            max_x: self.width,
            max_y: self.depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size3 {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

/// Axis-aligned rectangle in floor coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0) * (self.max_y - self.min_y).max(0.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Largest distance by which this rectangle pokes out of `outer` on any side.
    pub fn overhang(&self, outer: &Rect) -> f64 {
        [
            outer.min_x - self.min_x,
            outer.min_y - self.min_y,
            self.max_x - outer.max_x,
            self.max_y - outer.max_y,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    pub index: u32,
    pub size: Size3,
    pub location: Point2,
    pub orientation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshAssetId>,
}

impl SceneObject {
    pub fn new(
        tag: ObjectTag,
        size: Size3,
        location: Point2,
        orientation: f64,
    ) -> Result<Self, SceneError> {
        check_positive("length", size.length)?;
        check_positive("width", size.width)?;
        check_positive("height", size.height)?;
        if !location.x.is_finite() || !location.y.is_finite() {
            return Err(SceneError::NonFinite("location"));
        }
        Ok(SceneObject {
            category: tag.category,
            index: tag.index,
            size,
            location,
            orientation: normalize_orientation(orientation)?,
            mesh: None,
        })
    }

    pub fn tag(&self) -> ObjectTag {
        ObjectTag::new(self.category.clone(), self.index)
    }

    /// Axis-aligned bounds of the object's length x width footprint after
    /// rotating it about its center.
    pub fn footprint(&self) -> Rect {
        let (sin, cos) = quarter_exact_sin_cos(self.orientation);
        let hl = self.size.length / 2.0;
        let hw = self.size.width / 2.0;
        let hx = (hl * cos).abs() + (hw * sin).abs();
        let hy = (hl * sin).abs() + (hw * cos).abs();
        Rect {
            min_x: self.location.x - hx,
            min_y: self.location.y - hy,
            max_x: self.location.x + hx,
            max_y: self.location.y + hy,
        }
    }
}

/// sin/cos of the angle folded into `[0, 180)`, exact at quarter turns.
fn quarter_exact_sin_cos(deg: f64) -> (f64, f64) {
    let folded = deg.rem_euclid(180.0);
    if folded == 0.0 {
        (0.0, 1.0)
    } else if folded == 90.0 {
        (1.0, 0.0)
    } else {
        folded.to_radians().sin_cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub floor: FloorPlan,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(floor: FloorPlan, objects: Vec<SceneObject>) -> Result<Self, SceneError> {
        let mut seen = HashSet::with_capacity(objects.len());
        for o in &objects {
            if !seen.insert((o.category.as_str(), o.index)) {
                return Err(SceneError::DuplicateObject(o.tag()));
            }
        }
        Ok(Scene { floor, objects })
    }

    pub fn object(&self, tag: &ObjectTag) -> Option<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.index == tag.index && o.category == tag.category)
    }

    pub fn tags(&self) -> Vec<ObjectTag> {
        self.objects.iter().map(SceneObject::tag).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshAsset {
    pub id: MeshAssetId,
    pub category: Category,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    pub assets: Vec<MeshAsset>,
}

impl Inventory {
    pub fn new(assets: Vec<MeshAsset>, embedding_dim: Option<usize>) -> Result<Self, SceneError> {
        let inv = Inventory {
            embedding_dim,
            assets,
        };
        inv.validate()?;
        Ok(inv)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.embedding_dim == Some(0) {
            return Err(SceneError::ZeroEmbeddingDim);
        }
        let mut ids = BTreeSet::new();
        for a in &self.assets {
            if !ids.insert(&a.id) {
                return Err(SceneError::DuplicateAsset(a.id.clone()));
            }
            if let (Some(expected), Some(e)) = (self.embedding_dim, &a.embedding) {
                if e.len() != expected {
                    return Err(SceneError::EmbeddingDim {
                        id: a.id.clone(),
                        expected,
                        found: e.len(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn get(&self, id: &MeshAssetId) -> Option<&MeshAsset> {
        self.assets.iter().find(|a| &a.id == id)
    }

    pub fn contains(&self, id: &MeshAssetId) -> bool {
        self.get(id).is_some()
    }

    pub fn in_category<'a>(
        &'a self,
        category: &'a Category,
    ) -> impl Iterator<Item = &'a MeshAsset> {
        self.assets.iter().filter(move |a| &a.category == category)
    }
}
