//! Training losses: body-vector regression, gesture attention, sub-query
//! diversity and single-scale anchor detection, plus their weighted sum.

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{iou, BBox};
use crate::nn::{l2_normalize, sigmoid};
use crate::relation::{anchor_box, Anchors};

/// IoU above which a non-assigned slot is left out of the objectness term.
pub const IGNORE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub yolo: f64,
    pub div: f64,
    pub reg: f64,
    pub attn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            yolo: 1.0,
            div: 1.0,
            reg: 1.0,
            attn: 1.0,
        }
    }
}

/// Scalar loss tensors of one batch.
pub struct LossBundle {
    pub yolo: Tensor,
    pub div: Tensor,
    pub reg: Tensor,
    pub attn: Tensor,
    pub total: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub loss_yolo: f64,
    pub loss_div: f64,
    pub loss_reg: f64,
    pub loss_attn: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self) -> Result<LossValues> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            loss_yolo: v(&self.yolo)?,
            loss_div: v(&self.div)?,
            loss_reg: v(&self.reg)?,
            loss_attn: v(&self.attn)?,
            total: v(&self.total)?,
        })
    }
}

/// Weighted sum of the four terms; a non-finite term aborts with its name.
pub fn total_loss(yolo: Tensor, div: Tensor, reg: Tensor, attn: Tensor, w: &LossWeights) -> Result<LossBundle> {
    for (name, t) in [("loss_yolo", &yolo), ("loss_div", &div), ("loss_reg", &reg), ("loss_attn", &attn)] {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { what: name.to_string() });
        }
    }
    let total = ((((&yolo * w.yolo)? + (&div * w.div)?)? + (&reg * w.reg)?)? + (&attn * w.attn)?)?;
    Ok(LossBundle {
        yolo,
        div,
        reg,
        attn,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    /// `(x offset in cell, y offset in cell, log width ratio, log height ratio)`.
    pub offsets: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    /// Mean embodied coordinate over the box pixels.
    pub p_box: [f64; 3],
    /// `H x W`, 1 where the cell center is inside the box.
    pub box_mask: Array2<u8>,
    pub assignment: AnchorAssignment,
    /// `H * W * anchors` flags, row-major; true where objectness is ignored.
    pub ignore: Vec<bool>,
}

impl SupervisionTargets {
    pub fn build(embodied: ArrayView3<'_, f64>, gt: &BBox, anchors: &Anchors, grid: usize) -> Result<Self> {
        let (h, w, _) = embodied.dim();
        if h != w {
            return Err(Error::shape("supervision targets", "square image", format!("{h}x{w}")));
        }
        let assignment = assign_anchor(gt, anchors, grid, h)?;
        Ok(SupervisionTargets {
            p_box: p_box(embodied, gt)?,
            box_mask: box_mask(gt, grid, h),
            ignore: ignore_mask(gt, anchors, grid, h, &assignment),
            assignment,
        })
    }

    pub fn p_box_valid(&self) -> bool {
        self.p_box.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-8
    }
}

/// Mean of `P_r` over the pixels whose centers fall inside `gt`.
pub fn p_box(embodied: ArrayView3<'_, f64>, gt: &BBox) -> Result<[f64; 3]> {
    let (h, w, _) = embodied.dim();
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for r in 0..h {
        let y = r as f64 + 0.5;
        if y < gt.y_min || y > gt.y_max {
            continue;
        }
        for c in 0..w {
            let x = c as f64 + 0.5;
            if x < gt.x_min || x > gt.x_max {
                continue;
            }
            for k in 0..3 {
                sum[k] += embodied[[r, c, k]];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateTarget);
    }
    Ok(sum.map(|v| v / n as f64))
}

/// Cells whose centers lie in `gt`; if none do, the cell holding the box
/// center so the mask is never empty.
pub fn box_mask(gt: &BBox, grid: usize, image_size: usize) -> Array2<u8> {
    let stride = image_size as f64 / grid as f64;
    let mut mask = Array2::from_shape_fn((grid, grid), |(r, c)| {
        let (x, y) = ((c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride);
        u8::from(x >= gt.x_min && x <= gt.x_max && y >= gt.y_min && y <= gt.y_max)
    });
    if mask.iter().all(|&v| v == 0) {
        let (cx, cy) = gt.center();
        let r = ((cy / stride) as usize).min(grid - 1);
        let c = ((cx / stride) as usize).min(grid - 1);
        mask[[r, c]] = 1;
    }
    mask
}

/// The cell containing the box center, and the anchor whose prior at that
/// cell overlaps the box most. Since IoU with a fixed-size prior falls off
/// with center distance along each axis, this is also the best slot over
/// the whole grid.
pub fn assign_anchor(gt: &BBox, anchors: &Anchors, grid: usize, image_size: usize) -> Result<AnchorAssignment> {
    let s = image_size as f64;
    let (cx, cy) = gt.center();
    if anchors.is_empty() || gt.is_degenerate() || !(0.0..s).contains(&cx) || !(0.0..s).contains(&cy) {
        return Err(Error::NoAnchor(gt.to_array()));
    }
    let stride = s / grid as f64;
    let col = (cx / stride).floor() as usize;
    let row = (cy / stride).floor() as usize;
    let mut anchor = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..anchors.len() {
        let v = iou(&anchor_box(anchors, k, row, col, stride), gt);
        if v > best {
            best = v;
            anchor = k;
        }
    }
    let (aw, ah) = anchors.0[anchor];
    Ok(AnchorAssignment {
        row,
        col,
        anchor,
        offsets: [
            cx / stride - col as f64,
            cy / stride - row as f64,
            (gt.width() / aw).ln(),
            (gt.height() / ah).ln(),
        ],
    })
}

pub fn ignore_mask(
    gt: &BBox,
    anchors: &Anchors,
    grid: usize,
    image_size: usize,
    assignment: &AnchorAssignment,
) -> Vec<bool> {
    let stride = image_size as f64 / grid as f64;
    let a = anchors.len();
    let mut out = vec![false; grid * grid * a];
    for r in 0..grid {
        for c in 0..grid {
            for k in 0..a {
                let assigned = (r, c, k) == (assignment.row, assignment.col, assignment.anchor);
                out[(r * grid + c) * a + k] =
                    !assigned && iou(&anchor_box(anchors, k, r, c, stride), gt) > IGNORE_IOU;
            }
        }
    }
    out
}

/// `1 - L2Norm(p_box) · l` for one sample.
pub fn regression_loss(l: [f64; 3], p_box: [f64; 3]) -> Result<f64> {
    let n = p_box.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-8 {
        return Err(Error::DegenerateTarget);
    }
    Ok(1.0 - (0..3).map(|k| l[k] * p_box[k] / n).sum::<f64>())
}

/// Batched regression loss. `l` and `p_box` are `(B, 3)`; `valid` is `(B)`
/// with 0 for samples whose `p_box` is degenerate. Averages over valid
/// samples.
pub fn regression_loss_batch(l: &Tensor, p_box: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let cos = (l * l2_normalize(p_box)?)?.sum(D::Minus1)?;
    let per = (1.0 - cos)?;
    let n = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    Ok(((per * valid)?.sum_all()? / n)?)
}

/// `1 - Σ A_gesture ⊙ box_mask`, averaged over the batch. Both `(B, H, W)`.
pub fn attention_loss(a_gesture: &Tensor, box_mask: &Tensor) -> Result<Tensor> {
    let captured = (a_gesture * box_mask)?.flatten_from(1)?.sum(1)?;
    Ok((1.0 - captured)?.mean_all()?)
}

/// `||AᵀA ⊙ (1 - I)||²_F` with `A` `(B, rounds, T)`, averaged over the batch.
pub fn diverse_loss(a: &Tensor) -> Result<Tensor> {
    let (_, _, t) = a.dims3()?;
    let gram = a.transpose(1, 2)?.contiguous()?.matmul(a)?;
    let off = (Tensor::ones((t, t), a.dtype(), a.device())? - Tensor::eye(t, a.dtype(), a.device())?)?;
    let masked = gram.broadcast_mul(&off)?;
    Ok(masked.sqr()?.flatten_from(1)?.sum(1)?.mean_all()?)
}

/// `max(x, 0) - x * y + log(1 + exp(-|x|))`.
pub fn bce_with_logits(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((x.relu()? - (x * y)?)? + soft)?)
}

/// Dense per-slot detection targets for a batch.
pub struct YoloTargets {
    /// `(B, H, W, A)`: 1 at the assigned slot.
    pub positive: Tensor,
    /// `(B, H, W, A)`: 1 where objectness should be 0.
    pub negative: Tensor,
    /// `(B, H, W, A, 4)` offset targets, zero away from the assigned slot.
    pub offsets: Tensor,
}

impl YoloTargets {
    pub fn new(targets: &[&SupervisionTargets], grid: usize, anchors: usize, dtype: DType, device: &Device) -> Result<Self> {
        let b = targets.len();
        let slots = grid * grid * anchors;
        let mut pos = vec![0f64; b * slots];
        let mut neg = vec![0f64; b * slots];
        let mut off = vec![0f64; b * slots * 4];
        for (i, t) in targets.iter().enumerate() {
            let a = &t.assignment;
            let slot = (a.row * grid + a.col) * anchors + a.anchor;
            for s in 0..slots {
                if s == slot {
                    pos[i * slots + s] = 1.0;
                } else if !t.ignore[s] {
                    neg[i * slots + s] = 1.0;
                }
            }
            off[(i * slots + slot) * 4..(i * slots + slot + 1) * 4].copy_from_slice(&a.offsets);
        }
        let shape = (b, grid, grid, anchors);
        Ok(YoloTargets {
            positive: Tensor::from_vec(pos, shape, device)?.to_dtype(dtype)?,
            negative: Tensor::from_vec(neg, shape, device)?.to_dtype(dtype)?,
            offsets: Tensor::from_vec(off, (b, grid, grid, anchors, 4), device)?.to_dtype(dtype)?,
        })
    }
}

/// Squared error on `(sigmoid(tx), sigmoid(ty), tw, th)` at the assigned
/// slot, objectness cross-entropy at the assigned slot, and the mean
/// cross-entropy toward 0 over non-ignored other slots. Averaged over the
/// batch.
pub fn yolo_loss(raw: &Tensor, targets: &YoloTargets) -> Result<Tensor> {
    let b = raw.dim(0)?;
    let centers = sigmoid(&raw.narrow(4, 0, 2)?)?;
    let sizes = raw.narrow(4, 2, 2)?;
    let pred = Tensor::cat(&[&centers, &sizes], 4)?;
    let coord = (pred - &targets.offsets)?
        .sqr()?
        .sum(4)?
        .mul(&targets.positive)?
        .flatten_from(1)?
        .sum(1)?;
    let logits = raw.narrow(4, 4, 1)?.squeeze(4)?;
    let pos_bce = bce_with_logits(&logits, &targets.positive)?;
    let obj_pos = (&pos_bce * &targets.positive)?.flatten_from(1)?.sum(1)?;
    let n_neg = targets.negative.flatten_from(1)?.sum(1)?.clamp(1.0, f64::INFINITY)?;
    let obj_neg = ((pos_bce * &targets.negative)?.flatten_from(1)?.sum(1)? / n_neg)?;
    Ok((((coord + obj_pos)? + obj_neg)?.sum_all()? / b as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn regression_cases() {
        assert_eq!(regression_loss([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(regression_loss([-1.0, 0.0, 0.0], [2.0, 0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(regression_loss([0.0, 1.0, 0.0], [2.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            regression_loss([1.0, 0.0, 0.0], [0.0; 3]),
            Err(Error::DegenerateTarget)
        ));
    }

    #[test]
    fn batched_regression_skips_invalid() {
        let l = Tensor::new(&[[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]], &Device::Cpu).unwrap();
        let p = Tensor::new(&[[3.0f64, 0.0, 0.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let loss = regression_loss_batch(&l, &p, &t1(&[1.0, 0.0])).unwrap();
        assert!(scalar(&loss).abs() < 1e-8);
    }

    #[test]
    fn attention_cases() {
        let dev = Device::Cpu;
        let mut mask = vec![0f64; 1024];
        for r in 0..16 {
            for c in 0..16 {
                mask[r * 32 + c] = 1.0;
            }
        }
        let mask = Tensor::from_vec(mask, (1, 32, 32), &dev).unwrap();
        let uniform = Tensor::full(1.0f64 / 1024.0, (1, 32, 32), &dev).unwrap();
        assert!((scalar(&attention_loss(&uniform, &mask).unwrap()) - 0.75).abs() < 1e-12);
        let inside = (&mask / 256.0).unwrap();
        assert!(scalar(&attention_loss(&inside, &mask).unwrap()).abs() < 1e-12);
        let outside = ((1.0 - &mask).unwrap() / 768.0).unwrap();
        assert!((scalar(&attention_loss(&outside, &mask).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diverse_cases() {
        let dev = Device::Cpu;
        let one_hot = Tensor::new(&[[[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]], &dev).unwrap();
        assert_eq!(scalar(&diverse_loss(&one_hot).unwrap()), 0.0);
        let h = 0.5f64.sqrt();
        let a = Tensor::new(&[[[h, h]]], &dev).unwrap();
        assert!((scalar(&diverse_loss(&a).unwrap()) - 0.5).abs() < 1e-12);
        let single = Tensor::new(&[[[1.0f64], [1.0], [1.0]]], &dev).unwrap();
        assert_eq!(scalar(&diverse_loss(&single).unwrap()), 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let b = total_loss(t1(&[0.1]).squeeze(0).unwrap(), t1(&[0.2]).squeeze(0).unwrap(), t1(&[0.3]).squeeze(0).unwrap(), t1(&[0.4]).squeeze(0).unwrap(), &w).unwrap();
        assert!((b.values().unwrap().total - 1.0).abs() < 1e-12);
        let zero = || t1(&[0.0]).squeeze(0).unwrap();
        assert_eq!(total_loss(zero(), zero(), zero(), zero(), &w).unwrap().values().unwrap().total, 0.0);
        let nan = t1(&[f64::NAN]).squeeze(0).unwrap();
        match total_loss(zero(), zero(), nan, zero(), &w) {
            Err(Error::NonFinite { what }) => assert_eq!(what, "loss_reg"),
            _ => panic!("expected a non-finite error"),
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn targets_for(gt: BBox) -> (SupervisionTargets, Anchors) {
        let anchors = Anchors::default_for(64);
        let p = Array3::from_elem((64, 64, 3), 0.5);
        (SupervisionTargets::build(p.view(), &gt, &anchors, 4).unwrap(), anchors)
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let (t, anchors) = targets_for(BBox::new(20.0, 6.0, 34.0, 22.0));
        let mut raw = vec![0f64; 4 * 4 * 3 * 5];
        for s in 0..48 {
            raw[s * 5 + 4] = -20.0;
        }
        let a = t.assignment;
        let slot = (a.row * 4 + a.col) * 3 + a.anchor;
        raw[slot * 5] = logit(a.offsets[0]);
        raw[slot * 5 + 1] = logit(a.offsets[1]);
        raw[slot * 5 + 2] = a.offsets[2];
        raw[slot * 5 + 3] = a.offsets[3];
        raw[slot * 5 + 4] = 20.0;
        let raw = Tensor::from_vec(raw, (1, 4, 4, 3, 5), &Device::Cpu).unwrap();
        let y = YoloTargets::new(&[&t], 4, anchors.len(), DType::F64, &Device::Cpu).unwrap();
        assert!(scalar(&yolo_loss(&raw, &y).unwrap()) < 1e-3);
    }

    #[test]
    fn assignment_matches_exhaustive_search() {
        let anchors = Anchors::default_for(64);
        for (i, gt) in [
            BBox::new(20.0, 6.0, 34.0, 22.0),
            BBox::new(0.0, 0.0, 9.0, 9.0),
            BBox::new(30.0, 30.0, 64.0, 63.0),
            BBox::new(2.0, 40.0, 50.0, 60.0),
        ]
        .iter()
        .enumerate()
        {
            let a = assign_anchor(gt, &anchors, 4, 64).unwrap();
            let mut best = (f64::NEG_INFINITY, 0, 0, 0);
            for r in 0..4 {
                for c in 0..4 {
                    for k in 0..3 {
                        let v = iou(&anchor_box(&anchors, k, r, c, 16.0), gt);
                        if v > best.0 {
                            best = (v, r, c, k);
                        }
                    }
                }
            }
            assert_eq!((a.row, a.col, a.anchor), (best.1, best.2, best.3), "case {i}");
        }
        assert!(matches!(
            assign_anchor(&BBox::new(70.0, 70.0, 80.0, 80.0), &anchors, 4, 64),
            Err(Error::NoAnchor(_))
        ));
    }

    proptest! {
        #[test]
        fn lowering_a_negative_logit_never_raises_the_loss(
            raw in proptest::collection::vec(-4.0..4.0f64, 240),
            slot in 0usize..48,
            delta in 0.0..3.0f64,
        ) {
            let (t, anchors) = targets_for(BBox::new(20.0, 6.0, 34.0, 22.0));
            let a = t.assignment;
            prop_assume!(slot != (a.row * 4 + a.col) * 3 + a.anchor);
            let y = YoloTargets::new(&[&t], 4, anchors.len(), DType::F64, &Device::Cpu).unwrap();
            let before = Tensor::from_vec(raw.clone(), (1, 4, 4, 3, 5), &Device::Cpu).unwrap();
            let mut lowered = raw;
            lowered[slot * 5 + 4] -= delta;
            let after = Tensor::from_vec(lowered, (1, 4, 4, 3, 5), &Device::Cpu).unwrap();
            let l0 = scalar(&yolo_loss(&before, &y).unwrap());
            let l1 = scalar(&yolo_loss(&after, &y).unwrap());
            prop_assert!(l1 <= l0 + 1e-12);
            prop_assert!(l0 >= 0.0);
        }

        #[test]
        fn attention_loss_is_bounded(
            logits in proptest::collection::vec(-5.0..5.0f64, 16),
            bits in proptest::collection::vec(any::<bool>(), 16),
        ) {
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let a: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            let m: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            let a = Tensor::from_vec(a, (1, 4, 4), &Device::Cpu).unwrap();
            let m = Tensor::from_vec(m, (1, 4, 4), &Device::Cpu).unwrap();
            let v = scalar(&attention_loss(&a, &m).unwrap());
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }
}
