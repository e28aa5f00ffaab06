use ndarray::{s, Axis};

use super::{Point2, SceneSample, Segment, Vocabulary};
use crate::evalmetrics::BBox;

fn mirror_box(b: &BBox, width: f64) -> BBox {
    BBox::new(width - b.x_max, b.y_min, width - b.x_min, b.y_max)
}

fn mirror_point(p: &Point2, width: f64) -> Point2 {
    Point2 {
        x: width - p.x,
        y: p.y,
    }
}

/// Mirrors a scene left-to-right. Pixel grids, boxes, the pose and the
/// horizontal gesture component are mirrored; `left`/`right` tokens swap so
/// the phrase still names the same object. Exact involution for
/// power-of-two widths.
pub fn horizontal_flip(sample: &SceneSample, vocabulary: &Vocabulary) -> SceneSample {
    let w = sample.width();
    let wf = w as f64;

    let image = sample.image.slice(s![.., ..;-1, ..]).as_standard_layout().into_owned();
    let depth = sample.depth.slice(s![.., ..;-1]).as_standard_layout().into_owned();
    let sender_mask = sample.sender_mask.slice(s![.., ..;-1]).as_standard_layout().into_owned();
    let mut gesture_field = sample.gesture_field.slice(s![.., ..;-1, ..]).as_standard_layout().into_owned();
    gesture_field
        .index_axis_mut(Axis(2), 0)
        .mapv_inplace(|v| -v);

    let tokens = sample
        .tokens
        .iter()
        .map(|&t| match vocabulary.relation_of(t) {
            Some(rel) => vocabulary.relation_token(rel.mirrored()).unwrap_or(t),
            None => t,
        })
        .collect();

    let mut pose = sample.pose.clone();
    // pixel j maps to w - 1 - j, so a normalized column c maps to (w - 1)/w - c
    pose.sender_center[1] = ((wf - 1.0) - pose.sender_center[1] * wf) / wf;
    pose.body_orientation[1] = -pose.body_orientation[1];
    pose.pointing_direction[1] = -pose.pointing_direction[1];
    pose.arm_segments = pose
        .arm_segments
        .iter()
        .map(|seg| Segment {
            start: mirror_point(&seg.start, wf),
            end: mirror_point(&seg.end, wf),
        })
        .collect();

    let objects = sample
        .objects
        .iter()
        .map(|o| {
            let mut o = o.clone();
            o.bbox = mirror_box(&o.bbox, wf);
            o
        })
        .collect();

    SceneSample {
        image,
        depth,
        sender_mask,
        gesture_field,
        tokens,
        gt_box: mirror_box(&sample.gt_box, wf),
        pose,
        objects,
        target: sample.target,
        sample_id: sample.sample_id.clone(),
        rng_seed: sample.rng_seed,
    }
}
