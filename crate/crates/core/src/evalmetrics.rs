//! Box overlap and Prec@X reporting, bucketed by referent size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.25, 0.50, 0.75];

/// Axis-aligned box in pixel units: `x` is horizontal, `y` is vertical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn dilate(&self, by: f64) -> BBox {
        BBox::new(
            self.x_min - by,
            self.y_min - by,
            self.x_max + by,
            self.y_max + by,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }
}

/// Intersection over union. Zero-area boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        log::warn!("iou on degenerate box: {a:?} vs {b:?}");
        return 0.0;
    }
    let inter = a.intersection(b);
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub iou: f64,
    pub gt_area: f64,
    pub bucket: SizeBucket,
    pub predicted: bool,
    pub hits: Vec<bool>,
}

/// One row per IoU threshold; percentages in [0, 100].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecRow {
    pub threshold: f64,
    pub all: f64,
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<PrecRow>,
    pub bucket_thresholds: [f64; 2],
    pub bucket_counts: BTreeMap<SizeBucket, usize>,
    pub bucket_note: String,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    pub fn prec(&self, threshold: f64) -> Option<&PrecRow> {
        self.rows.iter().find(|r| r.threshold == threshold)
    }

    /// Thresholds x buckets table, one line per threshold block.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "");
        for r in &self.rows {
            let _ = write!(out, "| IoU={:<31.2}", r.threshold);
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "");
        for _ in &self.rows {
            let _ = write!(out, "| {:>7} {:>7} {:>7} {:>7} ", "all", "small", "medium", "large");
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "Prec");
        for r in &self.rows {
            let _ = write!(
                out,
                "| {:>7.1} {:>7.1} {:>7.1} {:>7.1} ",
                r.all, r.small, r.medium, r.large
            );
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "size buckets ({}): small < {:.1} <= medium < {:.1} <= large px^2; counts {:?}",
            self.bucket_note, self.bucket_thresholds[0], self.bucket_thresholds[1], self.bucket_counts
        );
        out
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample_id,iou,gt_area,bucket,predicted");
        for r in &self.rows {
            let _ = write!(out, ",hit@{:.2}", r.threshold);
        }
        out.push('\n');
        for s in &self.per_sample {
            let _ = write!(
                out,
                "{},{:.6},{:.1},{:?},{}",
                s.sample_id, s.iou, s.gt_area, s.bucket, s.predicted
            );
            for h in &s.hits {
                let _ = write!(out, ",{}", *h as u8);
            }
            out.push('\n');
        }
        out
    }
}

/// Tertile boundaries of the ground-truth areas.
pub fn tertile_thresholds(areas: &[f64]) -> [f64; 2] {
    if areas.is_empty() {
        return [0.0, 0.0];
    }
    let mut sorted = areas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    [sorted[n / 3], sorted[(2 * n) / 3]]
}

pub fn bucket_of(area: f64, thresholds: [f64; 2]) -> SizeBucket {
    if area < thresholds[0] {
        SizeBucket::Small
    } else if area < thresholds[1] {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Prec@X over top-1 predictions. A sample counts as a hit at `X` when its
/// IoU is strictly greater than `X`; samples without a prediction are misses.
pub fn evaluate(
    predictions: &BTreeMap<String, BBox>,
    ground_truths: &[(String, BBox)],
    thresholds: &[f64],
) -> EvalReport {
    let areas: Vec<f64> = ground_truths.iter().map(|(_, b)| b.area()).collect();
    let bucket_thresholds = tertile_thresholds(&areas);

    let mut per_sample: Vec<SampleResult> = ground_truths
        .iter()
        .map(|(id, gt)| {
            let pred = predictions.get(id);
            if pred.is_none() {
                log::warn!("no prediction for sample {id}; counted as a miss");
            }
            let v = pred.map(|p| iou(p, gt)).unwrap_or(0.0);
            SampleResult {
                sample_id: id.clone(),
                iou: v,
                gt_area: gt.area(),
                bucket: bucket_of(gt.area(), bucket_thresholds),
                predicted: pred.is_some(),
                hits: thresholds
                    .iter()
                    .map(|&t| pred.is_some() && v > t)
                    .collect(),
            }
        })
        .collect();
    per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let mut bucket_counts = BTreeMap::new();
    for b in [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large] {
        bucket_counts.insert(b, per_sample.iter().filter(|s| s.bucket == b).count());
    }

    let pct = |k: usize, filter: &dyn Fn(&SampleResult) -> bool| {
        let (mut n, mut hit) = (0usize, 0usize);
        for s in per_sample.iter().filter(|s| filter(s)) {
            n += 1;
            hit += s.hits[k] as usize;
        }
        if n == 0 {
            0.0
        } else {
            100.0 * hit as f64 / n as f64
        }
    };
    let rows = thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| PrecRow {
            threshold: t,
            all: pct(k, &|_| true),
            small: pct(k, &|s| s.bucket == SizeBucket::Small),
            medium: pct(k, &|s| s.bucket == SizeBucket::Medium),
            large: pct(k, &|s| s.bucket == SizeBucket::Large),
        })
        .collect();

    EvalReport {
        rows,
        bucket_thresholds,
        bucket_counts,
        bucket_note: "unofficial: tertiles of the evaluation split".into(),
        per_sample,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)), 0.0);
    }

    fn gts(n: usize) -> Vec<(String, BBox)> {
        (0..n)
            .map(|i| {
                let s = 2.0 + i as f64;
                (format!("s{i:02}"), BBox::new(0.0, 0.0, s, s))
            })
            .collect()
    }

    #[test]
    fn perfect_and_null_predictors() {
        let g = gts(9);
        let perfect: BTreeMap<_, _> = g.iter().cloned().collect();
        let r = evaluate(&perfect, &g, &DEFAULT_THRESHOLDS);
        for row in &r.rows {
            assert_eq!((row.all, row.small, row.medium, row.large), (100.0, 100.0, 100.0, 100.0));
        }
        let null: BTreeMap<_, _> = g
            .iter()
            .map(|(id, _)| (id.clone(), BBox::new(100.0, 100.0, 101.0, 101.0)))
            .collect();
        let r = evaluate(&null, &g, &DEFAULT_THRESHOLDS);
        for row in &r.rows {
            assert_eq!((row.all, row.small, row.medium, row.large), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn missing_prediction_is_a_miss() {
        let g = gts(3);
        let mut p: BTreeMap<_, _> = g.iter().cloned().collect();
        p.remove("s01");
        let r = evaluate(&p, &g, &[0.5]);
        assert!((r.rows[0].all - 200.0 / 3.0).abs() < 1e-12);
        assert!(!r.per_sample[1].predicted);
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64),
            b in (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64),
        ) {
            let a = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let b = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn prec_is_monotone_and_order_invariant(
            offsets in proptest::collection::vec((-4.0..4.0f64, -4.0..4.0f64), 6..20),
            rot in 0usize..20,
        ) {
            let g: Vec<(String, BBox)> = offsets
                .iter()
                .enumerate()
                .map(|(i, _)| (format!("s{i:02}"), BBox::new(0.0, 0.0, 6.0 + i as f64, 6.0)))
                .collect();
            let p: BTreeMap<String, BBox> = g
                .iter()
                .zip(&offsets)
                .map(|((id, b), (dx, dy))| {
                    (id.clone(), BBox::new(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy))
                })
                .collect();
            let r = evaluate(&p, &g, &DEFAULT_THRESHOLDS);
            for w in r.rows.windows(2) {
                prop_assert!(w[0].all >= w[1].all);
            }
            let mut rotated = g.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            prop_assert_eq!(evaluate(&p, &rotated, &DEFAULT_THRESHOLDS), r.clone());
            for row in &r.rows {
                let n = |b| r.bucket_counts[&b] as f64;
                let weighted = (row.small * n(SizeBucket::Small)
                    + row.medium * n(SizeBucket::Medium)
                    + row.large * n(SizeBucket::Large))
                    / r.per_sample.len() as f64;
                prop_assert!((weighted - row.all).abs() < 1e-9);
            }
        }
    }
}
