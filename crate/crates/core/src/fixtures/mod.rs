//! Synthetic embodied scenes with exact ground truth for every perception
//! channel: a flat-shaded image, a depth map, the sender's segmentation
//! mask, a part-affinity-style gesture field, a short phrase and the
//! referent's box.

mod dataset;
mod flip;
mod generate;
mod resolver;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::BBox;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, DatasetManifest, DatasetReader, ManifestEntry,
    Split, SplitSizes,
};
pub use flip::horizontal_flip;
pub use generate::generate_scene;
pub use resolver::{relation_holds, resolve_referent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

/// Spatial relation between the sender and an object, interpreted in the
/// sender's own frame (facing direction = front).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
    Near,
}

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
            Relation::Near => "near",
        }
    }

    pub fn mirrored(self) -> Relation {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f32; 3],
}

/// Word table for the `<color> <shape> <relation>` phrase template.
///
/// Token ids are assigned in order: colors, then shapes, then relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub colors: Vec<NamedColor>,
    pub shapes: Vec<Shape>,
    pub relations: Vec<Relation>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let color = |name: &str, rgb: [f32; 3]| NamedColor {
            name: name.to_string(),
            rgb,
        };
        Vocabulary {
            colors: vec![
                color("red", [0.86, 0.14, 0.14]),
                color("green", [0.16, 0.68, 0.22]),
                color("blue", [0.14, 0.30, 0.90]),
                color("yellow", [0.96, 0.84, 0.10]),
                color("magenta", [0.84, 0.20, 0.80]),
                color("cyan", [0.10, 0.80, 0.86]),
            ],
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle],
            relations: vec![
                Relation::Left,
                Relation::Right,
                Relation::Front,
                Relation::Behind,
                Relation::Near,
            ],
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.colors.len() + self.shapes.len() + self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn color_token(&self, color: usize) -> u32 {
        color as u32
    }

    pub fn shape_token(&self, shape: Shape) -> Option<u32> {
        self.shapes
            .iter()
            .position(|&s| s == shape)
            .map(|i| (self.colors.len() + i) as u32)
    }

    pub fn relation_token(&self, relation: Relation) -> Option<u32> {
        self.relations
            .iter()
            .position(|&r| r == relation)
            .map(|i| (self.colors.len() + self.shapes.len() + i) as u32)
    }

    pub fn word(&self, id: u32) -> Option<String> {
        let id = id as usize;
        let (nc, ns) = (self.colors.len(), self.shapes.len());
        if id < nc {
            Some(self.colors[id].name.clone())
        } else if id < nc + ns {
            Some(self.shapes[id - nc].name().to_string())
        } else {
            self.relations
                .get(id - nc - ns)
                .map(|r| r.name().to_string())
        }
    }

    pub fn words(&self) -> Vec<String> {
        (0..self.len() as u32).filter_map(|i| self.word(i)).collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or_else(|| format!("<{t}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn color_of(&self, id: u32) -> Option<usize> {
        ((id as usize) < self.colors.len()).then_some(id as usize)
    }

    pub(crate) fn shape_of(&self, id: u32) -> Option<Shape> {
        (id as usize)
            .checked_sub(self.colors.len())
            .and_then(|i| self.shapes.get(i).copied())
    }

    pub(crate) fn relation_of(&self, id: u32) -> Option<Relation> {
        (id as usize)
            .checked_sub(self.colors.len() + self.shapes.len())
            .and_then(|i| self.relations.get(i).copied())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        for &id in tokens {
            if id as usize >= self.len() {
                return Err(Error::UnknownToken {
                    id,
                    vocab: self.len(),
                });
            }
        }
        Ok(())
    }

    /// Stable digest of the word table, used to detect manifest/sample drift.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for w in self.words() {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DepthNormalization {
    /// Per-image min-max scaling to [0, 1].
    MinMax,
    /// Fixed metric range mapped to [0, 1] and clamped.
    FixedRange { near: f64, far: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range as a fraction of the image size.
    pub object_size: (f64, f64),
    pub vocabulary: Vocabulary,
    /// Same-category distractors per scene (inclusive range, at least 1).
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub max_overlap_iou: f64,
    pub max_retries: usize,
    /// Probability that the sender faces away from the referent.
    pub turned_away_probability: f64,
    /// Width of the painted gesture band as a fraction of the image size.
    /// The visible arm is narrower.
    pub gesture_band_width: f64,
    pub depth_normalization: DepthNormalization,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 128,
            min_objects: 2,
            max_objects: 6,
            object_size: (0.14, 0.24),
            vocabulary: Vocabulary::default(),
            min_distractors: 1,
            max_distractors: 2,
            max_overlap_iou: 0.3,
            max_retries: 500,
            turned_away_probability: 0.1,
            gesture_band_width: 0.12,
            depth_normalization: DepthNormalization::MinMax,
        }
    }
}

impl GeneratorConfig {
    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.image_size = image_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range is empty");
        }
        if self.vocabulary.colors.is_empty()
            || self.vocabulary.shapes.is_empty()
            || self.vocabulary.relations.is_empty()
        {
            return bad("vocabulary needs at least one color, shape and relation");
        }
        if self.min_distractors == 0 || self.min_distractors > self.max_distractors {
            return bad("at least one same-category distractor is required");
        }
        if self.min_objects < self.min_distractors + 1 {
            return bad("min_objects must leave room for the referent and its distractors");
        }
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad("object_size must satisfy 0 < min <= max < 0.5");
        }
        if !(self.gesture_band_width > 0.0 && self.gesture_band_width < 0.5) {
            return bad("gesture_band_width must lie in (0, 0.5)");
        }
        if let DepthNormalization::FixedRange { near, far } = self.depth_normalization {
            if !(far > near) {
                return bad("depth range must satisfy far > near");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    /// Horizontal image coordinate (columns), continuous pixel units.
    pub x: f64,
    /// Vertical image coordinate (rows), continuous pixel units.
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Point2,
    pub end: Point2,
}

impl Segment {
    pub fn direction(&self) -> (f64, f64) {
        let (dx, dy) = (self.end.x - self.start.x, self.end.y - self.start.y);
        let n = (dx * dx + dy * dy).sqrt();
        if n == 0.0 {
            (0.0, 0.0)
        } else {
            (dx / n, dy / n)
        }
    }
}

/// Ground-truth sender pose.
///
/// 3-vectors use the coordinate-map frame `(row / H, col / W, depth)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePose {
    pub sender_center: [f64; 3],
    pub body_orientation: [f64; 3],
    pub pointing_direction: [f64; 3],
    pub arm_segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: Shape,
    pub bbox: BBox,
    /// Normalized depth of the object's surface.
    pub depth: f64,
}

impl SceneObject {
    /// Box centre in the coordinate-map frame.
    pub fn position(&self, height: usize, width: usize) -> [f64; 3] {
        let row = (self.bbox.y_min + self.bbox.y_max - 1.0) / 2.0;
        let col = (self.bbox.x_min + self.bbox.x_max - 1.0) / 2.0;
        [row / height as f64, col / width as f64, self.depth]
    }

    pub fn same_category(&self, other: &SceneObject) -> bool {
        self.color == other.color && self.shape == other.shape
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Array3<f32>,
    pub depth: Array2<f32>,
    pub sender_mask: Array2<u8>,
    pub gesture_field: Array3<f32>,
    pub tokens: Vec<u32>,
    pub gt_box: BBox,
    pub pose: ScenePose,
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub sample_id: String,
    pub rng_seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn validate(&self, vocabulary: &Vocabulary) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let b = &self.gt_box;
        if !(0.0 <= b.x_min && b.x_min < b.x_max && b.x_max <= w as f64)
            || !(0.0 <= b.y_min && b.y_min < b.y_max && b.y_max <= h as f64)
        {
            return Err(Error::Range {
                op: "scene",
                detail: format!("gt_box {b:?} outside {h}x{w} image"),
            });
        }
        if !self.sender_mask.iter().any(|&m| m != 0) {
            return Err(Error::EmptyMask);
        }
        vocabulary.check_tokens(&self.tokens)?;
        for (name, dims) in [
            ("depth", self.depth.dim()),
            ("sender_mask", self.sender_mask.dim()),
        ] {
            if dims != (h, w) {
                return Err(Error::shape(name, format!("{h}x{w}"), format!("{dims:?}")));
            }
        }
        if self.gesture_field.dim() != (h, w, 3) {
            return Err(Error::shape(
                "gesture_field",
                format!("{h}x{w}x3"),
                format!("{:?}", self.gesture_field.dim()),
            ));
        }
        Ok(())
    }

    pub fn gt_area(&self) -> f64 {
        self.gt_box.area()
    }
}
