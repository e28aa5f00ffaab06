use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::resolver::unique_relations;
use super::{
    DepthNormalization, GeneratorConfig, Point2, SceneObject, ScenePose, SceneSample, Segment,
    Shape,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{iou, BBox};

const FLOOR_RGB: [f32; 3] = [0.78, 0.76, 0.72];
const TORSO_RGB: [f32; 3] = [0.30, 0.32, 0.40];
const SKIN_RGB: [f32; 3] = [0.92, 0.76, 0.62];
const MARKER_RGB: [f32; 3] = [0.08, 0.08, 0.08];
const NEAR_MARGIN: f64 = 1.2;
const PLACEMENT_TRIES: usize = 60;

/// Generates one scene. The result is a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.max_retries {
        if let Some(mut sample) = try_generate(&mut rng, config)? {
            sample.rng_seed = seed;
            sample.sample_id = format!("scene_{seed}");
            return Ok(sample);
        }
    }
    Err(Error::PlacementFailed {
        attempts: config.max_retries,
    })
}

/// Raw (unnormalized) distance of the floor at image row `row`; the top of
/// the image is farthest.
fn floor_distance(row: usize, size: usize) -> f64 {
    1.0 / (0.2 + 0.8 * (row as f64 + 0.5) / size as f64)
}

struct SenderLayout {
    torso: BBox,
    head: BBox,
}

impl SenderLayout {
    fn extent(&self) -> BBox {
        BBox::new(
            self.torso.x_min.min(self.head.x_min),
            self.head.y_min,
            self.torso.x_max.max(self.head.x_max),
            self.torso.y_max,
        )
    }
}

fn quantize(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

fn segment_distance(px: f64, py: f64, seg: &Segment) -> f64 {
    let (ax, ay, bx, by) = (seg.start.x, seg.start.y, seg.end.x, seg.end.y);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn inside_shape(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
    }
}

fn try_generate(rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> Result<Option<SceneSample>> {
    let size = config.image_size;
    let s = size as f64;
    let vocab = &config.vocabulary;

    // sender
    let torso_w = ((0.08 * s).round() as usize).max(4);
    let torso_h = ((0.18 * s).round() as usize).max(6);
    let head = ((0.07 * s).round() as usize).max(3);
    let row0 = rng.random_range(head + 2..size - torso_h - 1);
    let col0 = rng.random_range(2..size - torso_w - 2);
    let head_col = col0 + (torso_w.saturating_sub(head)) / 2;
    let sender = SenderLayout {
        torso: BBox::new(
            col0 as f64,
            row0 as f64,
            (col0 + torso_w) as f64,
            (row0 + torso_h) as f64,
        ),
        head: BBox::new(
            head_col as f64,
            (row0 - head) as f64,
            (head_col + head) as f64,
            row0 as f64,
        ),
    };
    let keep_out = sender.extent().dilate(3.0);

    // objects
    let n_distractors = rng.random_range(config.min_distractors..=config.max_distractors);
    let n_objects = rng
        .random_range(config.min_objects..=config.max_objects)
        .max(n_distractors + 1);
    let color = rng.random_range(0..vocab.colors.len());
    let shape = vocab.shapes[rng.random_range(0..vocab.shapes.len())];
    let n_categories = vocab.colors.len() * vocab.shapes.len();

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let (c, sh) = if k <= n_distractors {
            (color, shape)
        } else {
            loop {
                let c = rng.random_range(0..vocab.colors.len());
                let sh = vocab.shapes[rng.random_range(0..vocab.shapes.len())];
                if (c, sh) != (color, shape) || n_categories == 1 {
                    break (c, sh);
                }
            }
        };
        let (lo, hi) = config.object_size;
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let w = (rng.random_range(lo..=hi) * s).round().max(2.0) as usize;
            let h = (rng.random_range(lo..=hi) * s).round().max(2.0) as usize;
            let x = rng.random_range(0..=size - w);
            let y = rng.random_range(0..=size - h);
            let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            if b.intersection(&keep_out) > 0.0 {
                continue;
            }
            if objects.iter().any(|o| iou(&o.bbox, &b) > config.max_overlap_iou) {
                continue;
            }
            placed = Some(b);
            break;
        }
        let Some(bbox) = placed else {
            return Ok(None);
        };
        objects.push(SceneObject {
            color: c,
            shape: sh,
            bbox,
            depth: 0.0,
        });
    }
    let target = rng.random_range(0..=n_distractors);

    // pointing arm, drawn from the shoulder nearest the referent
    let tb = objects[target].bbox;
    let (tx, ty) = ((tb.x_min + tb.x_max) / 2.0, (tb.y_min + tb.y_max) / 2.0);
    let shoulder_x = if tx >= (sender.torso.x_min + sender.torso.x_max) / 2.0 {
        sender.torso.x_max
    } else {
        sender.torso.x_min
    };
    let shoulder = Point2 {
        x: shoulder_x,
        y: sender.torso.y_min + 1.5,
    };
    let (dx, dy) = (tx - shoulder.x, ty - shoulder.y);
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 0.12 * s {
        return Ok(None);
    }
    let arm_len = (0.35 * s).min(0.7 * dist);
    let (ux, uy) = (dx / dist, dy / dist);
    let bend = rng.random_range(-0.03..=0.03) * s;
    let elbow = Point2 {
        x: quantize(shoulder.x + ux * 0.45 * arm_len - uy * bend),
        y: quantize(shoulder.y + uy * 0.45 * arm_len + ux * bend),
    };
    let hand = Point2 {
        x: quantize(shoulder.x + ux * arm_len),
        y: quantize(shoulder.y + uy * arm_len),
    };
    let arm = vec![
        Segment {
            start: Point2 {
                x: quantize(shoulder.x),
                y: quantize(shoulder.y),
            },
            end: elbow,
        },
        Segment {
            start: elbow,
            end: hand,
        },
    ];
    let inside = |p: &Point2| p.x > 0.0 && p.x < s && p.y > 0.0 && p.y < s;
    if !arm.iter().all(|seg| inside(&seg.start) && inside(&seg.end)) {
        return Ok(None);
    }

    // raster
    let mut image = Array3::<f32>::zeros((size, size, 3));
    let mut raw_depth = Array2::<f64>::zeros((size, size));
    let mut mask = Array2::<u8>::zeros((size, size));
    let mut gesture = Array3::<f32>::zeros((size, size, 3));
    for r in 0..size {
        let shade = 0.85 + 0.15 * (r as f32 / size as f32);
        for c in 0..size {
            for ch in 0..3 {
                image[[r, c, ch]] = FLOOR_RGB[ch] * shade;
            }
            raw_depth[[r, c]] = floor_distance(r, size);
        }
    }

    enum Item {
        Object(usize),
        Sender,
    }
    let sender_z = floor_distance(sender.torso.y_max as usize - 1, size);
    let mut items: Vec<(f64, Item)> = objects
        .iter()
        .enumerate()
        .map(|(i, o)| (floor_distance(o.bbox.y_max as usize - 1, size), Item::Object(i)))
        .collect();
    items.push((sender_z, Item::Sender));
    // painter's order: far first
    items.sort_by(|a, b| b.0.total_cmp(&a.0));

    let paint = |image: &mut Array3<f32>, r: usize, c: usize, rgb: [f32; 3], k: f32| {
        for ch in 0..3 {
            image[[r, c, ch]] = (rgb[ch] * k).clamp(0.0, 1.0);
        }
    };
    for (z, item) in &items {
        match item {
            Item::Object(i) => {
                let o = &objects[*i];
                let rgb = vocab.colors[o.color].rgb;
                let b = o.bbox;
                let (w, h) = (b.width(), b.height());
                for r in b.y_min as usize..b.y_max as usize {
                    for c in b.x_min as usize..b.x_max as usize {
                        let u = (c as f64 + 0.5 - b.x_min) / w;
                        let v = (r as f64 + 0.5 - b.y_min) / h;
                        if inside_shape(o.shape, u, v) {
                            paint(&mut image, r, c, rgb, 1.0 - 0.15 * v as f32);
                            raw_depth[[r, c]] = *z;
                        }
                    }
                }
            }
            Item::Sender => {
                for (part, rgb) in [(&sender.torso, TORSO_RGB), (&sender.head, SKIN_RGB)] {
                    for r in part.y_min as usize..part.y_max as usize {
                        for c in part.x_min as usize..part.x_max as usize {
                            paint(&mut image, r, c, rgb, 1.0);
                            raw_depth[[r, c]] = *z;
                            mask[[r, c]] = 1;
                        }
                    }
                }
            }
        }
    }

    let arm_half_width = (0.025 * s).max(2.0) / 2.0;
    // like a part-affinity field, the gesture band is wider than the limb
    let band_half_width = (config.gesture_band_width * s).max(2.0) / 2.0;
    for seg in &arm {
        let (gx, gy) = seg.direction();
        let reach = arm_half_width.max(band_half_width);
        let lo_x = (seg.start.x.min(seg.end.x) - reach).floor().max(0.0) as usize;
        let hi_x = ((seg.start.x.max(seg.end.x) + reach).ceil() as usize).min(size);
        let lo_y = (seg.start.y.min(seg.end.y) - reach).floor().max(0.0) as usize;
        let hi_y = ((seg.start.y.max(seg.end.y) + reach).ceil() as usize).min(size);
        for r in lo_y..hi_y {
            for c in lo_x..hi_x {
                let d = segment_distance(c as f64 + 0.5, r as f64 + 0.5, seg);
                if d <= arm_half_width {
                    paint(&mut image, r, c, SKIN_RGB, 0.95);
                    raw_depth[[r, c]] = sender_z;
                    mask[[r, c]] = 1;
                }
                if d <= band_half_width {
                    gesture[[r, c, 0]] = gx as f32;
                    gesture[[r, c, 1]] = gy as f32;
                    gesture[[r, c, 2]] = 1.0;
                }
            }
        }
    }

    // depth normalization
    let normalize: Box<dyn Fn(f64) -> f64> = match config.depth_normalization {
        DepthNormalization::MinMax => {
            let lo = raw_depth.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw_depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            Box::new(move |z| (z - lo) / span)
        }
        DepthNormalization::FixedRange { near, far } => {
            Box::new(move |z| ((z - near) / (far - near)).clamp(0.0, 1.0))
        }
    };
    let depth = raw_depth.mapv(|z| normalize(z) as f32);
    for o in objects.iter_mut() {
        // the stored value is the f32 map value so positions agree with the map
        o.depth = normalize(floor_distance(o.bbox.y_max as usize - 1, size)) as f32 as f64;
    }
    let sender_depth = normalize(sender_z) as f32 as f64;

    let sender_center = [
        (sender.torso.y_min + sender.torso.y_max - 1.0) / 2.0 / s,
        (sender.torso.x_min + sender.torso.x_max - 1.0) / 2.0 / s,
        sender_depth,
    ];
    let tpos = objects[target].position(size, size);
    let to_target = [
        tpos[0] - sender_center[0],
        tpos[1] - sender_center[1],
        tpos[2] - sender_center[2],
    ];
    let norm = to_target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let floor_norm = (to_target[1].powi(2) + to_target[2].powi(2)).sqrt();
    if norm < 1e-6 || floor_norm < 1e-6 {
        return Ok(None);
    }
    let pointing = [
        to_target[0] / norm,
        to_target[1] / norm,
        to_target[2] / norm,
    ];

    let turned_away = rng.random_bool(config.turned_away_probability.clamp(0.0, 1.0));
    let theta = if turned_away {
        rng.random_range(120.0f64..240.0).to_radians()
    } else {
        rng.random_range(-70.0f64..70.0).to_radians()
    };
    let (fc0, fd0) = (to_target[1] / floor_norm, to_target[2] / floor_norm);
    let (fc, fd) = (
        fc0 * theta.cos() - fd0 * theta.sin(),
        fc0 * theta.sin() + fd0 * theta.cos(),
    );
    let fn_ = (fc * fc + fd * fd).sqrt();
    let body_orientation = [0.0, fc / fn_, fd / fn_];

    let pose = ScenePose {
        sender_center,
        body_orientation,
        pointing_direction: pointing,
        arm_segments: arm,
    };

    let relations = unique_relations(&objects, target, &pose, vocab, size, size, NEAR_MARGIN)?;
    if relations.is_empty() {
        return Ok(None);
    }
    let relation = relations[rng.random_range(0..relations.len())];

    // facing marker on the head
    if body_orientation[2] < 0.5 {
        let hb = sender.head;
        let cx = (hb.x_min + hb.x_max) / 2.0 + body_orientation[1] * hb.width() / 4.0;
        let cy = (hb.y_min + hb.y_max) / 2.0;
        for r in (cy - 1.0).floor() as usize..(cy + 1.0).floor() as usize {
            for c in (cx - 1.0).floor() as usize..(cx + 1.0).floor() as usize {
                if r < size && c < size && mask[[r, c]] == 1 {
                    paint(&mut image, r, c, MARKER_RGB, 1.0);
                }
            }
        }
    }

    let tokens = vec![
        vocab.color_token(color),
        vocab.shape_token(shape).expect("shape drawn from vocabulary"),
        vocab
            .relation_token(relation)
            .expect("relation drawn from vocabulary"),
    ];
    let gt_box = objects[target].bbox;
    Ok(Some(SceneSample {
        image,
        depth,
        sender_mask: mask,
        gesture_field: gesture,
        tokens,
        gt_box,
        pose,
        objects,
        target,
        sample_id: String::new(),
        rng_seed: 0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::resolve_referent;

    #[test]
    fn seed_zero_has_unique_referent() {
        let cfg = GeneratorConfig::default();
        let s = generate_scene(0, &cfg).unwrap();
        let hits = resolve_referent(
            &s.objects,
            &s.tokens,
            &s.pose,
            &cfg.vocabulary,
            s.height(),
            s.width(),
        )
        .unwrap();
        assert_eq!(hits, vec![s.target]);
        assert_eq!(s.gt_box, s.objects[s.target].bbox);
        s.validate(&cfg.vocabulary).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = GeneratorConfig::default();
        let a = generate_scene(0, &cfg).unwrap();
        let b = generate_scene(1, &cfg).unwrap();
        assert!(a.gt_box != b.gt_box || a.tokens != b.tokens);
    }

    #[test]
    fn rejects_empty_configs() {
        let mut cfg = GeneratorConfig::default();
        cfg.max_objects = 0;
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Config(_))));
        let mut cfg = GeneratorConfig::default();
        cfg.vocabulary.colors.clear();
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn impossible_placement_errors_after_bounded_retries() {
        let cfg = GeneratorConfig {
            min_objects: 6,
            max_objects: 6,
            object_size: (0.45, 0.49),
            max_overlap_iou: 0.0,
            max_retries: 5,
            ..GeneratorConfig::default()
        };
        assert!(matches!(
            generate_scene(3, &cfg),
            Err(Error::PlacementFailed { attempts: 5 })
        ));
    }

    #[test]
    fn farther_objects_have_larger_depth() {
        let cfg = GeneratorConfig::default();
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            for a in &s.objects {
                for b in &s.objects {
                    if a.bbox.y_max < b.bbox.y_max {
                        assert!(a.depth > b.depth);
                    }
                }
            }
        }
    }

    #[test]
    fn gesture_field_is_zero_off_the_arm() {
        let cfg = GeneratorConfig::default();
        let s = generate_scene(4, &cfg).unwrap();
        let band = (cfg.gesture_band_width * cfg.image_size as f64).max(2.0) / 2.0;
        for ((r, c), &g) in s.gesture_field.index_axis(ndarray::Axis(2), 2).indexed_iter() {
            let near = s
                .pose
                .arm_segments
                .iter()
                .any(|seg| segment_distance(c as f64 + 0.5, r as f64 + 0.5, seg) <= band);
            assert_eq!(g != 0.0, near, "pixel ({r}, {c})");
            let (dx, dy) = (s.gesture_field[[r, c, 0]], s.gesture_field[[r, c, 1]]);
            if near {
                assert!(((dx * dx + dy * dy).sqrt() - 1.0).abs() < 1e-5);
            } else {
                assert_eq!((dx, dy), (0.0, 0.0));
            }
        }
    }
}
