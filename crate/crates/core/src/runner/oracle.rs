//! Brute-force oracle suites, runnable as a gate before training.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::body_language::{mask_body_features, pool_mask, BodyEncoder, PosEmbed, TransformerDims};
use crate::encoders::{avg_pool, encode_gesture, FeatureDims, Fusion, LanguageEncoder};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, iou, BBox, DEFAULT_THRESHOLDS};
use crate::fixtures::{generate_scene, resolve_referent, GeneratorConfig};
use crate::geometry::{build_coordinate_map, embody, sender_position};
use crate::gradcheck::{analytic_gradient, check_gradients};
use crate::losses::{
    assign_anchor, attention_loss, diverse_loss, regression_loss_batch, total_loss, yolo_loss, LossWeights,
    SupervisionTargets, YoloTargets,
};
use crate::nn::ParamStore;
use crate::relation::{anchor_box, decode, spatial_attention, top1, unit_directions, Anchors, DetectionHead, VerbalFusion};

pub const SUITES: [&str; 7] = ["fixtures", "geometry", "encoders", "body_language", "relation", "losses", "evalmetrics"];

/// Maps and masks are compared to this absolute tolerance.
pub const MAP_TOL: f64 = 1e-6;
/// Relative tolerance for gradient checks in double precision.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

struct Suite {
    name: &'static str,
    checks: Vec<OracleCheck>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Suite { name, checks: Vec::new() }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(OracleCheck {
            suite: self.name.into(),
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Records a max-error comparison.
    fn close(&mut self, name: &str, err: f64, tol: f64) {
        self.check(name, err <= tol, format!("max error {err:.3e} (tolerance {tol:.0e})"));
    }

    fn run(&mut self, name: &str, f: impl FnOnce(&mut Suite) -> Result<()>) {
        if let Err(e) = f(self) {
            self.check(name, false, format!("error: {e}"));
        }
    }
}

pub fn run_suite(name: &str) -> Result<Vec<OracleCheck>> {
    if name == "all" {
        let mut all = Vec::new();
        for s in SUITES {
            all.extend(run_suite(s)?);
        }
        return Ok(all);
    }
    let mut suite = match name {
        "fixtures" => Suite::new("fixtures"),
        "geometry" => Suite::new("geometry"),
        "encoders" => Suite::new("encoders"),
        "body_language" => Suite::new("body_language"),
        "relation" => Suite::new("relation"),
        "losses" => Suite::new("losses"),
        "evalmetrics" => Suite::new("evalmetrics"),
        other => {
            return Err(Error::Config(format!(
                "unknown oracle suite {other}; expected one of {SUITES:?} or all"
            )))
        }
    };
    match name {
        "fixtures" => fixtures_suite(&mut suite),
        "geometry" => geometry_suite(&mut suite),
        "encoders" => encoders_suite(&mut suite),
        "body_language" => body_suite(&mut suite),
        "relation" => relation_suite(&mut suite),
        "losses" => losses_suite(&mut suite),
        _ => evalmetrics_suite(&mut suite),
    }
    Ok(suite.checks)
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn fixtures_suite(s: &mut Suite) {
    let cfg = GeneratorConfig::default();
    s.run("seeds differ", |s| {
        let a = generate_scene(0, &cfg)?;
        let b = generate_scene(1, &cfg)?;
        s.check("seeds differ", a.gt_box != b.gt_box || a.tokens != b.tokens, "seed 0 vs seed 1");
        Ok(())
    });
    s.run("unique referent, pointing and depth", |s| {
        let (mut unique, mut pointing, mut depth, mut field) = (0, 0, 0, 0);
        let n = 20usize;
        for seed in 0..n as u64 {
            let x = generate_scene(seed, &cfg)?;
            let (h, w) = (x.height(), x.width());
            if resolve_referent(&x.objects, &x.tokens, &x.pose, &cfg.vocabulary, h, w)? == vec![x.target] {
                unique += 1;
            }
            // the shoulder-to-hand ray, extended, must cross the target box
            let arm = &x.pose.arm_segments;
            let (p0, p1) = (arm[0].start, arm[arm.len() - 1].end);
            let b = x.gt_box;
            let hit = (0..=4000).any(|i| {
                let t = i as f64 / 100.0;
                let (px, py) = (p0.x + t * (p1.x - p0.x), p0.y + t * (p1.y - p0.y));
                px >= b.x_min - 0.5 && px <= b.x_max + 0.5 && py >= b.y_min - 0.5 && py <= b.y_max + 0.5
            });
            pointing += usize::from(hit);
            // depth grows toward the top of the image for every object pair
            let consistent = x.objects.iter().all(|a| {
                x.objects.iter().all(|o| a.bbox.y_max >= o.bbox.y_max || a.depth >= o.depth)
            });
            depth += usize::from(consistent);
            let band = (cfg.gesture_band_width * x.width() as f64).max(2.0) / 2.0;
            let off_arm_zero = x.gesture_field.outer_iter().enumerate().all(|(r, row)| {
                row.outer_iter().enumerate().all(|(c, v)| {
                    let on = arm.iter().any(|seg| {
                        let (ax, ay, bx, by) = (seg.start.x, seg.start.y, seg.end.x, seg.end.y);
                        let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                        let (dx, dy) = (bx - ax, by - ay);
                        let len2 = dx * dx + dy * dy;
                        let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
                        let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                        (qx * qx + qy * qy).sqrt() <= band
                    });
                    on || v.iter().all(|&g| g == 0.0)
                })
            });
            field += usize::from(off_arm_zero);
        }
        s.check("unique referent", unique == n, format!("{unique}/{n} scenes"));
        s.check("pointing ray crosses target", pointing == n, format!("{pointing}/{n} scenes"));
        s.check("depth ordering", depth == n, format!("{depth}/{n} scenes"));
        s.check("gesture field zero off the arm", field == n, format!("{field}/{n} scenes"));
        Ok(())
    });
}

fn geometry_suite(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (48, 64);
    let depth = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
    let mask = Array2::from_shape_fn((h, w), |(r, c)| u8::from((10..20).contains(&r) && (5..9).contains(&c)));
    s.run("coordinate map", |s| {
        let (_, p) = build_coordinate_map(depth.view(), h, w)?;
        let mut err: f64 = 0.0;
        for r in 0..h {
            for c in 0..w {
                err = err
                    .max((p[[r, c, 0]] - r as f64 / h as f64).abs())
                    .max((p[[r, c, 1]] - c as f64 / w as f64).abs())
                    .max((p[[r, c, 2]] - depth[[r, c]]).abs());
            }
        }
        s.close("per-pixel coordinate loop", err, MAP_TOL);
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for r in 0..h {
            for c in 0..w {
                if mask[[r, c]] == 1 {
                    for k in 0..3 {
                        sum[k] += p[[r, c, k]];
                    }
                    n += 1.0;
                }
            }
        }
        let centre = sender_position(p.view(), mask.view())?;
        s.close("masked mean", max_abs_diff(&centre, &sum.map(|v| v / n)), MAP_TOL);
        let pr = embody(p.view(), centre)?;
        let m = sender_position(pr.view(), mask.view())?;
        s.close("re-origin masked mean is zero", m.iter().fold(0.0f64, |a, v| a.max(v.abs())), MAP_TOL);
        Ok(())
    });
}

fn small_dims() -> FeatureDims {
    FeatureDims {
        image_size: 64,
        grid: 4,
        channels: 8,
        max_tokens: 4,
        vocab_size: 14,
    }
}

fn small_transformer() -> TransformerDims {
    TransformerDims {
        channels: 8,
        layers: 2,
        heads: 2,
        ff_dim: 32,
    }
}

fn encoders_suite(s: &mut Suite) {
    let d = small_dims();
    let dev = Device::Cpu;
    s.run("gesture pooling", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(-1.0f32..1.0));
        let pooled = encode_gesture(field.view(), &d)?;
        let m_in = field.iter().map(|&v| f64::from(v)).sum::<f64>() / field.len() as f64;
        let m_out = pooled.iter().map(|&v| f64::from(v)).sum::<f64>() / pooled.len() as f64;
        s.close("mean preservation", (m_in - m_out).abs(), MAP_TOL);
        let x = generate_scene(4, &GeneratorConfig::default().with_image_size(64))?;
        let pooled = encode_gesture(x.gesture_field.view(), &d)?;
        let mut mismatch = 0;
        for r in 0..4 {
            for c in 0..4 {
                let any = (0..16).any(|i| (0..16).any(|j| x.gesture_field[[r * 16 + i, c * 16 + j, 2]] != 0.0));
                let nonzero = pooled[[r, c, 2]] != 0.0;
                mismatch += usize::from(any != nonzero);
            }
        }
        s.check("support is the pooled arm region", mismatch == 0, format!("{mismatch} mismatched cells"));
        Ok(())
    });
    s.run("language", |s| {
        let mut store = ParamStore::new(DType::F64, 1);
        let lang = LanguageEncoder::new(&mut store, "l", "toy_embed", &d)?;
        let a = lang.forward(&Tensor::new(&[[1u32, 7, 10]], &dev)?, &d)?;
        let b = lang.forward(&Tensor::new(&[[7u32, 1, 10]], &dev)?, &d)?;
        let diff = max_abs_diff(&to_vec(&a)?, &to_vec(&b)?);
        s.check("permuting tokens changes L", diff > 1e-6, format!("max difference {diff:.3e}"));
        Ok(())
    });
    s.run("fusion gradient", |s| {
        let mut store = ParamStore::new(DType::F64, 2);
        let fusion = Fusion::new(&mut store, "fusion", &d)?;
        let sv = store.normal("in.visual", &[2, 4, 4, 8], 1.0)?;
        let sg = store.normal("in.gesture", &[2, 4, 4, 3], 1.0)?;
        let pr = store.normal("in.coords", &[2, 4, 4, 3], 1.0)?;
        let probe = Tensor::randn(0.0f64, 1.0, (2, 4, 4, 8), &dev)?;
        let report = check_gradients(&store, |_| true, 6, 0, || {
            Ok((fusion.forward(&sv, &sg, &pr)?.tanh()? * &probe)?.sum_all()?)
        })?;
        s.check(
            "fuse_multimodal finite differences",
            report.max_rel_error < GRAD_TOL,
            format!("{} probes, max rel error {:.3e} {}", report.checked, report.max_rel_error, report.worst),
        );
        Ok(())
    });
}

fn body_suite(s: &mut Suite) {
    let dev = Device::Cpu;
    s.run("masking", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = Array2::from_shape_fn((64, 64), |_| u8::from(rng.random_bool(0.3)));
        let pooled = pool_mask(mask.view(), 4)?;
        let m = Tensor::randn(0.0f64, 1.0, (1, 4, 4, 8), &dev)?;
        let pm = Tensor::from_vec(pooled.iter().copied().collect::<Vec<_>>(), (1, 4, 4, 1), &dev)?;
        let out = to_vec(&mask_body_features(&m, &pm)?)?;
        let mv = to_vec(&m)?;
        let mut err: f64 = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                let mut cover = 0.0;
                for i in 0..16 {
                    for j in 0..16 {
                        cover += f64::from(mask[[r * 16 + i, c * 16 + j]]);
                    }
                }
                cover /= 256.0;
                for k in 0..8 {
                    let idx = (r * 4 + c) * 8 + k;
                    err = err.max((out[idx] - mv[idx] * cover).abs());
                }
            }
        }
        s.close("mask_body_features elementwise loop", err, 1e-7);
        Ok(())
    });
    s.run("body head gradient", |s| {
        let mut store = ParamStore::new(DType::F64, 7);
        let enc = BodyEncoder::new(&mut store, "body_language", small_transformer(), 16, PosEmbed::Learned)?;
        let x = Tensor::randn(0.0f64, 1.0, (2, 4, 4, 8), &dev)?;
        let p_box = Tensor::new(&[[0.3f64, -0.2, 0.5], [-0.1, 0.4, 0.2]], &dev)?;
        let valid = Tensor::new(&[1.0f64, 1.0], &dev)?;
        let report = check_gradients(&store, |n| n.starts_with("body_language.head"), 12, 1, || {
            regression_loss_batch(&enc.forward(&x)?.l, &p_box, &valid)
        })?;
        s.check(
            "loss_reg gradient w.r.t. head",
            report.max_rel_error < GRAD_TOL,
            format!("{} probes, max rel error {:.3e} {}", report.checked, report.max_rel_error, report.worst),
        );
        let all = check_gradients(&store, |_| true, 2, 2, || {
            regression_loss_batch(&enc.forward(&x)?.l, &p_box, &valid)
        })?;
        s.check(
            "loss_reg gradient w.r.t. every body parameter",
            all.max_rel_error < GRAD_TOL,
            format!("{} probes, max rel error {:.3e} {}", all.checked, all.max_rel_error, all.worst),
        );
        Ok(())
    });
}

fn relation_suite(s: &mut Suite) {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    s.run("spatial attention", |s| {
        let pr = Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(-1.0..1.0));
        let l = [0.48f64, -0.6, 0.64];
        let a = spatial_attention(l, pr.view());
        let mut err: f64 = 0.0;
        for r in 0..32 {
            for c in 0..32 {
                let v = [pr[[r, c, 0]], pr[[r, c, 1]], pr[[r, c, 2]]];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let want = if n < 1e-8 { 0.0 } else { (l[0] * v[0] + l[1] * v[1] + l[2] * v[2]) / n };
                err = err.max((a[[r, c]] - want).abs());
            }
        }
        s.close("per-pixel cosine loop", err, MAP_TOL);
        // gate: pooled A_sender + l · pooled directions == direct 16x16 sums
        let mask = Array2::from_shape_fn((64, 64), |(r, c)| u8::from(r > 40 && c < 12));
        let pr = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(-1.0..1.0));
        let dirs = avg_pool(unit_directions(pr.view()).view(), 4, 4)?;
        let sender = pool_mask(mask.view(), 4)?;
        let full = spatial_attention(l, pr.view());
        let mut err: f64 = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..16 {
                    for j in 0..16 {
                        acc += f64::from(mask[[r * 16 + i, c * 16 + j]]) + full[[r * 16 + i, c * 16 + j]];
                    }
                }
                let direct = (acc / 256.0).max(0.0);
                let fast = (sender[[r, c]] + (0..3).map(|k| l[k] * dirs[[r, c, k]]).sum::<f64>()).max(0.0);
                err = err.max((direct - fast).abs());
            }
        }
        s.close("pooled gate vs direct summation", err, MAP_TOL);
        Ok(())
    });
    s.run("verbal fusion gradient", |s| {
        let mut store = ParamStore::new(DType::F64, 4);
        let verbal = VerbalFusion::new(&mut store, "relation.verbal", 8)?;
        let m = store.normal("in.m", &[1, 4, 4, 8], 1.0)?;
        let gate = store.normal("in.gate", &[1, 4, 4, 1], 1.0)?;
        let words = store.normal("in.words", &[1, 3, 8], 1.0)?;
        let probe = Tensor::randn(0.0f64, 1.0, (1, 4, 4, 8), &dev)?;
        let report = check_gradients(&store, |_| true, 4, 3, || {
            Ok((verbal.forward(&m, Some(&gate), &words)?.m_verbal * &probe)?.sum_all()?)
        })?;
        s.check(
            "three FiLM rounds finite differences",
            report.max_rel_error < GRAD_TOL,
            format!("{} probes, max rel error {:.3e} {}", report.checked, report.max_rel_error, report.worst),
        );
        Ok(())
    });
    s.run("detection head", |s| {
        let mut store = ParamStore::new(DType::F32, 0);
        let head = DetectionHead::new(&mut store, "h", 8, 3)?;
        let raw = head.forward(&Tensor::zeros((1, 4, 4, 8), DType::F32, &dev)?, &Tensor::zeros((1, 4, 4), DType::F32, &dev)?)?;
        s.check("raw shape H x W x 15", raw.dims() == [1, 4, 4, 3, 5], format!("{:?}", raw.dims()));
        let anchors = Anchors::default_for(64);
        let mut flat = vec![-6.0f32; 4 * 4 * 3 * 5];
        for slot in 0..48 {
            for k in 0..4 {
                flat[slot * 5 + k] = 0.0;
            }
        }
        let slot = (2 * 4 + 1) * 3 + 2;
        flat[slot * 5 + 4] = 5.0;
        flat[slot * 5] = 1.0;
        flat[slot * 5 + 2] = 0.5f32.ln();
        let dets = decode(&flat, 4, &anchors, 64)?;
        let best = top1(&dets).expect("non-empty");
        let sx = 1.0 / (1.0 + (-1.0f64).exp());
        let want = BBox::from_center((1.0 + sx) * 16.0, 2.5 * 16.0, 16.0, 32.0);
        let strict = dets.iter().filter(|d| d.confidence >= best.confidence).count() == 1;
        let err = max_abs_diff(&best.bbox.to_array(), &want.to_array());
        s.check(
            "hand-decoded top-1",
            (best.row, best.col, best.anchor) == (2, 1, 2) && strict && err < 1e-5,
            format!("cell ({}, {}) anchor {}, box error {err:.2e}", best.row, best.col, best.anchor),
        );
        Ok(())
    });
}

fn losses_suite(s: &mut Suite) {
    let dev = Device::Cpu;
    s.run("loss values", |s| {
        let mut mask = vec![0f64; 1024];
        let mut cells = 0;
        for r in 0..32 {
            for c in 0..32 {
                if r >= 8 && r < 24 && c >= 4 && c < 20 {
                    mask[r * 32 + c] = 1.0;
                    cells += 1;
                }
            }
        }
        let enumerated = 1.0 - mask.iter().map(|m| m / 1024.0).sum::<f64>();
        let loss = attention_loss(
            &Tensor::full(1.0f64 / 1024.0, (1, 32, 32), &dev)?,
            &Tensor::from_vec(mask, (1, 32, 32), &dev)?,
        )?
        .to_scalar::<f64>()?;
        s.check(
            "uniform attention over 256 box cells",
            cells == 256 && (loss - 0.75).abs() < 1e-12 && (enumerated - 0.75).abs() < 1e-12,
            format!("loss {loss}, enumerated {enumerated}"),
        );
        let h = 0.5f64.sqrt();
        let d = diverse_loss(&Tensor::new(&[[[h, h]]], &dev)?)?.to_scalar::<f64>()?;
        // hand product: AᵀA = [[.5, .5], [.5, .5]], off-diagonal squares sum to 0.5
        s.close("diverse loss of (√.5, √.5)", (d - 0.5).abs(), 1e-12);
        Ok(())
    });
    s.run("minimizers of the attention loss", |s| {
        // on a 4x4 grid with a 2x2 box, enumerate all distributions with mass
        // in quarters; the loss is 0 exactly when every quarter is inside
        let inside = [5usize, 6, 9, 10];
        let mut mask = vec![0f64; 16];
        for &i in &inside {
            mask[i] = 1.0;
        }
        let mask_t = Tensor::from_vec(mask, (1, 4, 4), &dev)?;
        let mut ok = true;
        let mut count = 0;
        for a in 0..16 {
            for b in a..16 {
                for c in b..16 {
                    for d in c..16 {
                        let mut p = vec![0f64; 16];
                        for i in [a, b, c, d] {
                            p[i] += 0.25;
                        }
                        let v = attention_loss(&Tensor::from_vec(p, (1, 4, 4), &dev)?, &mask_t)?.to_scalar::<f64>()?;
                        let supported = [a, b, c, d].iter().all(|i| inside.contains(i));
                        ok &= (v.abs() < 1e-12) == supported;
                        count += 1;
                    }
                }
            }
        }
        s.check("zero exactly on in-box distributions", ok, format!("{count} distributions"));
        Ok(())
    });
    s.run("anchor assignment", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchors = Anchors::default_for(128);
        let mut mismatches = 0;
        for _ in 0..200 {
            let (w, h) = (rng.random_range(6.0..80.0), rng.random_range(6.0..80.0));
            let (x, y) = (rng.random_range(0.0..128.0 - w), rng.random_range(0.0..128.0 - h));
            let gt = BBox::new(x, y, x + w, y + h);
            let a = assign_anchor(&gt, &anchors, 8, 128)?;
            let mut best = (f64::NEG_INFINITY, 0, 0, 0);
            for r in 0..8 {
                for c in 0..8 {
                    for k in 0..3 {
                        let v = iou(&anchor_box(&anchors, k, r, c, 16.0), &gt);
                        if v > best.0 {
                            best = (v, r, c, k);
                        }
                    }
                }
            }
            let chosen = iou(&anchor_box(&anchors, a.anchor, a.row, a.col, 16.0), &gt);
            mismatches += usize::from((chosen - best.0).abs() > 1e-12);
        }
        s.check("max-IoU slot vs exhaustive search", mismatches == 0, format!("{mismatches}/200 mismatches"));
        Ok(())
    });
    s.run("loss gradients", |s| {
        let mut store = ParamStore::new(DType::F64, 8);
        let l_raw = store.normal("l", &[2, 3], 1.0)?;
        let logits = store.normal("gesture_logits", &[2, 16], 1.0)?;
        let sub = store.normal("sub_query_logits", &[2, 3, 4], 1.0)?;
        let raw = store.normal("raw", &[2, 4, 4, 3, 5], 1.0)?;
        let p_box = Tensor::new(&[[0.3f64, -0.2, 0.5], [-0.1, 0.4, 0.2]], &dev)?;
        let valid = Tensor::new(&[1.0f64, 1.0], &dev)?;
        let mut mask = vec![0f64; 32];
        for i in [5, 6, 9, 10, 16 + 0, 16 + 1] {
            mask[i] = 1.0;
        }
        let mask = Tensor::from_vec(mask, (2, 4, 4), &dev)?;
        let anchors = Anchors::default_for(64);
        let pr = Array3::from_elem((64, 64, 3), 0.25);
        let t1 = SupervisionTargets::build(pr.view(), &BBox::new(20.0, 6.0, 34.0, 22.0), &anchors, 4)?;
        let t2 = SupervisionTargets::build(pr.view(), &BBox::new(3.0, 30.0, 40.0, 60.0), &anchors, 4)?;
        let yolo_t = YoloTargets::new(&[&t1, &t2], 4, 3, DType::F64, &dev)?;
        let softmax = crate::nn::softmax_last;
        let terms: Vec<(&str, Box<dyn Fn() -> Result<Tensor>>)> = vec![
            ("loss_reg", Box::new(|| regression_loss_batch(&crate::nn::l2_normalize(&l_raw)?, &p_box, &valid))),
            ("loss_attn", Box::new(|| attention_loss(&softmax(&logits)?.reshape((2, 4, 4))?, &mask))),
            ("loss_div", Box::new(|| diverse_loss(&softmax(&sub)?))),
            ("loss_yolo", Box::new(|| yolo_loss(&raw, &yolo_t))),
        ];
        for (name, f) in &terms {
            let report = check_gradients(&store, |_| true, 6, 4, f)?;
            s.check(
                &format!("{name} finite differences"),
                report.max_rel_error < GRAD_TOL,
                format!("{} probes, max rel error {:.3e} {}", report.checked, report.max_rel_error, report.worst),
            );
        }
        // the gradient of the total is the sum of per-term gradients
        let total = || -> Result<Tensor> {
            let vals: Vec<Tensor> = terms.iter().map(|(_, f)| f()).collect::<Result<_>>()?;
            Ok(total_loss(vals[3].clone(), vals[2].clone(), vals[0].clone(), vals[1].clone(), &LossWeights::default())?.total)
        };
        let mut err: f64 = 0.0;
        for name in ["l", "gesture_logits", "sub_query_logits", "raw"] {
            let var = store.get(name).expect("registered");
            let whole = analytic_gradient(var, &total()?)?;
            let mut parts = vec![0.0; whole.len()];
            for (_, f) in &terms {
                for (p, g) in parts.iter_mut().zip(analytic_gradient(var, &f()?)?) {
                    *p += g;
                }
            }
            err = err.max(max_abs_diff(&whole, &parts));
        }
        s.close("total gradient equals sum of term gradients", err, 1e-6);
        Ok(())
    });
}

fn evalmetrics_suite(s: &mut Suite) {
    let raster_iou = |a: &BBox, b: &BBox, scale: f64| {
        // count pixels of a fine grid covering [0, 8)^2
        let n = (8.0 * scale) as usize;
        let (mut inter, mut uni) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((j as f64 + 0.5) / scale, (i as f64 + 0.5) / scale);
                let ina = x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max;
                let inb = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
                inter += usize::from(ina && inb);
                uni += usize::from(ina || inb);
            }
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    };
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 0.0, 3.0, 2.0);
    let v = iou(&a, &b);
    s.close("iou (0,0,2,2) vs (1,0,3,2) by pixel count", (v - raster_iou(&a, &b, 4.0)).abs().max((v - 1.0 / 3.0).abs()), 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut err: f64 = 0.0;
    for _ in 0..100 {
        let mut rand_box = || {
            let (x0, y0) = (rng.random_range(0..7) as f64, rng.random_range(0..7) as f64);
            let (w, h) = (rng.random_range(1..=(8 - x0 as i32)) as f64, rng.random_range(1..=(8 - y0 as i32)) as f64);
            BBox::new(x0, y0, x0 + w, y0 + h)
        };
        let (p, q) = (rand_box(), rand_box());
        err = err.max((iou(&p, &q) - raster_iou(&p, &q, 1.0)).abs());
    }
    s.close("iou of integer boxes by pixel count", err, 1e-12);

    // ten hand-built pairs with IoUs 1, 0.8, 0.6, 0.6, 0.5, 0.4, 0.3, 0.25, 0.1, 0
    let gt = |i: usize| BBox::new(0.0, 10.0 * i as f64, 10.0, 10.0 * i as f64 + 10.0);
    let widths = [10.0, 8.0, 6.0, 6.0, 5.0, 4.0, 3.0, 2.5, 1.0];
    let mut preds = BTreeMap::new();
    let mut gts = Vec::new();
    for i in 0..10 {
        let g = gt(i);
        gts.push((format!("s{i}"), g));
        let p = match widths.get(i) {
            Some(w) => BBox::new(0.0, g.y_min, *w, g.y_max),
            None => BBox::new(50.0, g.y_min, 60.0, g.y_max),
        };
        preds.insert(format!("s{i}"), p);
    }
    let report = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS);
    // strictly greater: > .25 → 7 (1, .8, .6, .6, .5, .4, .3); > .5 → 4; > .75 → 2
    let want = [70.0, 40.0, 20.0];
    let got: Vec<f64> = report.rows.iter().map(|r| r.all).collect();
    s.check("ten hand-enumerated pairs", got == want, format!("got {got:?}, want {want:?}"));
}

/// Formats results one per line with a final tally.
pub fn format_report(checks: &[OracleCheck]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "[{}] {}::{} - {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.suite,
            c.name,
            c.detail
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    out
}

