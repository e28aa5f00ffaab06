//! Attention panels: prediction boxes, spatial attention, gesture attention
//! and per-round verbal-fusion confidence maps with and without the spatial
//! gate.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::evalmetrics::BBox;
use crate::fixtures::{DatasetReader, SceneSample};
use crate::geometry::CoordinateMaps;
use crate::model::{batch_inputs, detections_from_raw, grid_values, prepare_sample, GroundingModel};
use crate::relation::{confidences, spatial_attention, Detection};

pub const GT_COLOR: [u8; 3] = [0, 200, 0];
pub const PRED_COLOR: [u8; 3] = [255, 220, 0];
pub const PANEL_NAMES: [&str; 5] = [
    "prediction",
    "spatial_attention",
    "gesture_attention",
    "verbal_with_gate",
    "verbal_without_gate",
];

pub struct SampleAttention {
    pub prediction: Detection,
    pub l: Option<[f64; 3]>,
    /// Full-resolution spatial attention in `[-1, 1]`.
    pub spatial: Option<Array2<f64>>,
    /// `H x W` gesture attention.
    pub gesture: Array2<f64>,
    /// Per-round best-anchor confidence maps.
    pub film_gated: Vec<Array2<f64>>,
    pub film_ungated: Vec<Array2<f64>>,
    /// `[BODY]` attention over body tokens, averaged over heads.
    pub body_attention: Option<Array2<f64>>,
    pub embodied: Array3<f64>,
}

fn round_maps(model: &GroundingModel, rounds: &[Tensor], a_gesture: &Tensor) -> Result<Vec<Array2<f64>>> {
    rounds
        .iter()
        .map(|f| {
            let raw = model.head.forward(f, a_gesture)?;
            grid_values(&confidences(&raw)?.max(D::Minus1)?, 0)
        })
        .collect()
}

pub fn attention_maps(model: &GroundingModel, sample: &SceneSample) -> Result<SampleAttention> {
    let dev = Device::Cpu;
    let prepared = prepare_sample(sample, &model.config)?;
    let inputs = batch_inputs(&[&prepared], &model.config, model.dtype(), &dev)?;
    let out = model.forward(&inputs)?;
    let cfg = &model.config;
    let prediction = detections_from_raw(&out.raw, cfg.grid, &cfg.anchors, cfg.image_size)?.remove(0);
    let maps = CoordinateMaps::build(sample.depth.view(), sample.sender_mask.view())?;
    let l = match &out.l {
        Some(l) => {
            let v = l.to_dtype(DType::F64)?.get(0)?.to_vec1::<f64>()?;
            Some([v[0], v[1], v[2]])
        }
        None => None,
    };
    let spatial = l.map(|l| spatial_attention(l, maps.embodied.view()));
    let words = model.language.forward(&inputs.tokens, &cfg.dims())?;
    let ungated = model.verbal.forward(&out.m, None, &words)?;
    let body_attention = match &out.body_attention {
        Some(att) => {
            // row 0 is the [BODY] query; drop its self-attention column
            let row = att.get(0)?.mean(0)?.get(0)?.narrow(0, 1, cfg.grid * cfg.grid)?;
            let v = row.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            Some(Array2::from_shape_vec((cfg.grid, cfg.grid), v).expect("grid cells"))
        }
        None => None,
    };
    Ok(SampleAttention {
        prediction,
        l,
        spatial,
        gesture: grid_values(&out.a_gesture, 0)?,
        film_gated: round_maps(model, &out.verbal.rounds, &out.a_gesture)?,
        film_ungated: round_maps(model, &ungated.rounds, &out.a_gesture)?,
        body_attention,
        embodied: maps.embodied,
    })
}

/// Whether the pose is unambiguous for the facing check: the sender faces
/// the camera-side floor within 60 degrees of where they point.
pub fn unambiguous_pose(sample: &SceneSample) -> bool {
    let f = sample.pose.body_orientation;
    let p = sample.pose.pointing_direction;
    let pn = (p[1] * p[1] + p[2] * p[2]).sqrt();
    pn > 1e-6 && (f[1] * p[1] + f[2] * p[2]) / pn >= 0.5
}

/// Whether the full-resolution spatial-attention argmax lies in the
/// half-space the sender faces. `None` when the model has no body vector.
pub fn argmax_in_facing_half_space(att: &SampleAttention, sample: &SceneSample) -> Option<bool> {
    let spatial = att.spatial.as_ref()?;
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for ((r, c), &v) in spatial.indexed_iter() {
        if v > best.0 {
            best = (v, r, c);
        }
    }
    let f = sample.pose.body_orientation;
    let p = &att.embodied;
    let dot: f64 = (0..3).map(|k| p[[best.1, best.2, k]] * f[k]).sum();
    Some(dot > 0.0)
}

fn base_image(sample: &SceneSample) -> RgbImage {
    let (h, w, _) = sample.image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (sample.image[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x_min.floor() as i64;
    let x1 = b.x_max.ceil() as i64 - 1;
    let y0 = b.y_min.floor() as i64;
    let y1 = b.y_max.ceil() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    };
    for t in 0..2 {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }
}

/// Blue-to-red ramp for values in `[0, 1]`.
fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Alpha-blends a heat map (any resolution dividing the image) over `base`,
/// nearest-neighbour upsampled to the image resolution.
pub fn overlay(base: &RgbImage, heat: &Array2<f64>, lo: f64, hi: f64, alpha: f64) -> RgbImage {
    let (hh, hw) = heat.dim();
    let (w, h) = (base.width() as usize, base.height() as usize);
    let span = (hi - lo).max(1e-12);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = heat[[y as usize * hh / h, x as usize * hw / w]];
        let c = heat_color((v - lo) / span);
        let p = base.get_pixel(x, y).0;
        let mix = |k: usize| ((1.0 - alpha) * f64::from(p[k]) + alpha * 255.0 * c[k]).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    })
}

fn strip(panels: &[RgbImage]) -> RgbImage {
    let w: u32 = panels.iter().map(|p| p.width()).sum();
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width();
    }
    out
}

fn max_of(a: &Array2<f64>) -> f64 {
    a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn render_panels(sample: &SceneSample, att: &SampleAttention, extras: bool) -> Vec<(String, RgbImage)> {
    let base = base_image(sample);
    let mut pred = base.clone();
    draw_box(&mut pred, &sample.gt_box, GT_COLOR);
    draw_box(&mut pred, &att.prediction.bbox, PRED_COLOR);
    let spatial = match &att.spatial {
        Some(s) => overlay(&base, s, -1.0, 1.0, 0.5),
        None => base.clone(),
    };
    let gesture = overlay(&base, &att.gesture, 0.0, max_of(&att.gesture), 0.5);
    let film = |maps: &[Array2<f64>]| strip(&maps.iter().map(|m| overlay(&base, m, 0.0, 1.0, 0.5)).collect::<Vec<_>>());
    let mut out = vec![
        (PANEL_NAMES[0].to_string(), pred),
        (PANEL_NAMES[1].to_string(), spatial),
        (PANEL_NAMES[2].to_string(), gesture),
        (PANEL_NAMES[3].to_string(), film(&att.film_gated)),
        (PANEL_NAMES[4].to_string(), film(&att.film_ungated)),
    ];
    if extras {
        let channels: Vec<RgbImage> = (0..3)
            .map(|k| {
                let ch = att.embodied.index_axis(ndarray::Axis(2), k).to_owned();
                let m = ch.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
                overlay(&base, &ch, -m, m, 0.8)
            })
            .collect();
        out.push(("extra_embodied_coords".into(), strip(&channels)));
        if let Some(b) = &att.body_attention {
            out.push(("extra_body_attention".into(), overlay(&base, b, 0.0, max_of(b), 0.5)));
        }
    }
    out
}

/// Writes `<id>_panel<k>_<name>.png` for each sample (plus `<id>_extra_*`
/// images when `extras` is set) and returns the paths.
pub fn visualize(
    model: &GroundingModel,
    reader: &DatasetReader,
    sample_ids: &[String],
    out_dir: &Path,
    extras: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for id in sample_ids {
        let sample = reader.get(id)?;
        let att = attention_maps(model, &sample)?;
        for (k, (name, img)) in render_panels(&sample, &att, extras).into_iter().enumerate() {
            let file = if k < PANEL_NAMES.len() {
                format!("{id}_panel{}_{name}.png", k + 1)
            } else {
                format!("{id}_{name}.png")
            };
            let path = out_dir.join(file);
            img.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
