//! Generators shared by integration tests.

use decorum::scene::{Category, FloorPlan, ObjectTag, Point2, Scene, SceneObject, Size3};
use proptest::prelude::*;

const CATEGORIES: [&str; 6] = [
    "bed",
    "nightstand",
    "wardrobe",
    "desk",
    "chair",
    "floor_lamp",
];

fn cm(k: i64) -> f64 {
    k as f64 / 100.0
}

prop_compose! {
    fn object()(
        cat in 0..CATEGORIES.len(),
        index in 0u32..4,
        size in (1i64..400, 1i64..400, 1i64..300),
        loc in (-100i64..800, -100i64..800),
        hundredths in 0i64..36000,
    ) -> SceneObject {
        let tag = ObjectTag::new(Category::new(CATEGORIES[cat]).unwrap(), index);
        SceneObject::new(
            tag,
            Size3 { length: cm(size.0), width: cm(size.1), height: cm(size.2) },
            Point2 { x: cm(loc.0), y: cm(loc.1) },
            hundredths as f64 / 100.0,
        )
        .unwrap()
    }
}

prop_compose! {
    pub fn scene()(w in 100i64..1200, d in 100i64..1200, objs in prop::collection::vec(object(), 0..10)) -> Scene {
        let mut seen = std::collections::HashSet::new();
        let objs: Vec<SceneObject> = objs.into_iter().filter(|o| seen.insert(o.tag())).collect();
        Scene::new(FloorPlan::new(cm(w), cm(d)).unwrap(), objs).unwrap()
    }
}
