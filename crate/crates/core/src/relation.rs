//! Relation reasoning from the sender's perspective: spatial attention,
//! gesture attention, verbal FiLM fusion and the anchor-based detection head.

use candle_core::{Tensor, D};
use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::body_language::PosEmbed;
use crate::error::{Error, Result};
use crate::evalmetrics::{iou, BBox};
use crate::nn::{
    ensure_finite, sigmoid, softmax_last, Conv3x3, Linear, ParamStore, TransformerEncoder,
};

pub const FILM_ROUNDS: usize = 3;

/// Per-pixel unit direction of `P_r`; pixels with norm below 1e-8 map to 0.
pub fn unit_directions(embodied: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = embodied.to_owned();
    for mut p in out.rows_mut() {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n < 1e-8 {
            p.fill(0.0);
        } else {
            p.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// `A_spatial(x, y) = l · L2Norm(P_r(x, y))` at full resolution.
pub fn spatial_attention(l: [f64; 3], embodied: ArrayView3<'_, f64>) -> Array2<f64> {
    let dirs = unit_directions(embodied);
    let (h, w, _) = dirs.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        (0..3).map(|k| l[k] * dirs[[r, c, k]]).sum::<f64>()
    })
}

/// Pooled spatial attention from pooled unit directions. Pooling is linear,
/// so `AvgPool(l · d) = l · AvgPool(d)`. `l` is `(B, 3)`, `pooled_dirs` is
/// `(B, H, W, 3)`; returns `(B, H, W, 1)`.
pub fn pooled_spatial_attention(l: &Tensor, pooled_dirs: &Tensor) -> Result<Tensor> {
    let b = l.dim(0)?;
    Ok(pooled_dirs
        .broadcast_mul(&l.reshape((b, 1, 1, 3))?)?
        .sum_keepdim(D::Minus1)?)
}

pub struct GestureAttention {
    pub positions: Option<Tensor>,
    pub encoder: TransformerEncoder,
    pub score: Linear,
    /// Weight of the log-gate prior added to the cell scores.
    pub gate_prior: Tensor,
}

impl GestureAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: crate::body_language::TransformerDims,
        cells: usize,
        pos_embed: PosEmbed,
    ) -> Result<Self> {
        let c = dims.channels;
        let positions = match pos_embed {
            PosEmbed::Learned => Some(store.normal(&format!("{name}.positions"), &[cells, c], 0.02)?),
            PosEmbed::None => None,
        };
        Ok(GestureAttention {
            positions,
            encoder: TransformerEncoder::new(
                store,
                &format!("{name}.encoder"),
                c,
                dims.layers,
                dims.heads,
                dims.ff_dim,
            )?,
            score: Linear::new(store, &format!("{name}.score"), c, 1)?,
            gate_prior: store.constant(&format!("{name}.gate_prior"), &[1], 1.0)?,
        })
    }

    /// `gate` is the pooled `A_sender + A_spatial` (before rectification),
    /// `(B, H, W, 1)`. Returns `M_gesture` and `A_gesture` `(B, H, W)`.
    pub fn forward(&self, m: &Tensor, gate: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = m.dims4()?;
        let m_gesture = m.broadcast_mul(&gate.relu()?)?;
        let tokens = m_gesture.reshape((b, h * w, c))?;
        // cells closed by the gate carry no content and are not attended to
        let occupied = tokens.abs()?.sum(2)?.gt(0.0)?.to_dtype(tokens.dtype())?;
        let mut x = tokens;
        if let Some(pos) = &self.positions {
            x = x.broadcast_add(pos)?;
        }
        let (encoded, _) = self.encoder.forward_masked(&x, Some(&occupied))?;
        // The layer norms make every token blind to its own gate value, so
        // the gate re-enters the scores as a learned log prior.
        let prior = gate.relu()?.reshape((b, h * w))?.clamp(1e-4, f64::INFINITY)?.log()?;
        let scores = self.score.forward(&encoded)?.squeeze(2)?.add(&prior.broadcast_mul(&self.gate_prior)?)?;
        ensure_finite(&scores, "gesture attention scores")?;
        let a = softmax_last(&scores)?.reshape((b, h, w))?;
        Ok((m_gesture, a))
    }
}

/// Word attention per FiLM round and the pooled query vectors.
pub struct SubQueryState {
    /// `(B, rounds, T)`, rows sum to 1.
    pub attention: Tensor,
    /// `(B, rounds, C)`.
    pub queries: Tensor,
}

pub struct VerbalOutput {
    pub m_verbal: Tensor,
    pub sub_query: SubQueryState,
    /// Feature map after each round.
    pub rounds: Vec<Tensor>,
}

pub struct FilmRound {
    pub state: Tensor,
    pub gamma: Linear,
    pub beta: Linear,
}

pub struct VerbalFusion {
    pub compat: Tensor,
    pub rounds: Vec<FilmRound>,
}

impl VerbalFusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        let compat = store.normal(&format!("{name}.compat"), &[c, c], 1.0 / c as f64)?;
        let rounds = (0..FILM_ROUNDS)
            .map(|r| {
                let p = format!("{name}.round{r}");
                Ok(FilmRound {
                    state: store.normal(&format!("{p}.state"), &[c, 1], 1.0)?,
                    gamma: Linear {
                        weight: store.normal(&format!("{p}.gamma.weight"), &[c, c], 0.1 / (c as f64).sqrt())?,
                        bias: store.constant(&format!("{p}.gamma.bias"), &[c], 1.0)?,
                    },
                    beta: Linear::new(store, &format!("{p}.beta"), c, c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(VerbalFusion { compat, rounds })
    }

    /// `gate` is the pooled `A_spatial` `(B, H, W, 1)`; `None` skips gating.
    /// `words` is `(B, T, C)`.
    pub fn forward(&self, m: &Tensor, gate: Option<&Tensor>, words: &Tensor) -> Result<VerbalOutput> {
        let (b, t, c) = words.dims3()?;
        if t == 0 {
            return Err(Error::EmptyTokens);
        }
        let mut f = match gate {
            Some(g) => m.broadcast_mul(&g.relu()?)?,
            None => m.clone(),
        };
        let keys = words.reshape((b * t, c))?.matmul(&self.compat)?;
        let mut rows = Vec::with_capacity(self.rounds.len());
        let mut queries = Vec::with_capacity(self.rounds.len());
        let mut maps = Vec::with_capacity(self.rounds.len());
        for round in &self.rounds {
            let scores = keys.matmul(&round.state)?.reshape((b, t))?;
            let a = softmax_last(&scores)?;
            let q = a.unsqueeze(1)?.matmul(words)?.squeeze(1)?;
            let gamma = round.gamma.forward(&q)?.reshape((b, 1, 1, c))?;
            let beta = round.beta.forward(&q)?.reshape((b, 1, 1, c))?;
            let modulated = f.broadcast_mul(&gamma)?.broadcast_add(&beta)?.relu()?;
            f = (f + modulated)?;
            rows.push(a.unsqueeze(1)?);
            queries.push(q.unsqueeze(1)?);
            maps.push(f.clone());
        }
        ensure_finite(&f, "verbal fusion output")?;
        Ok(VerbalOutput {
            m_verbal: f,
            sub_query: SubQueryState {
                attention: Tensor::cat(&rows, 1)?,
                queries: Tensor::cat(&queries, 1)?,
            },
            rounds: maps,
        })
    }
}

/// Square anchor priors in pixels, `(width, height)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors(pub Vec<(f64, f64)>);

impl Anchors {
    pub fn relative(image_size: usize, fractions: &[f64]) -> Self {
        let s = image_size as f64;
        Anchors(fractions.iter().map(|f| (f * s, f * s)).collect())
    }

    pub fn default_for(image_size: usize) -> Self {
        Self::relative(image_size, &[0.1, 0.25, 0.5])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// k-means over box sizes with `1 - IoU` of co-centered boxes as the
    /// distance, initialized at area quantiles.
    pub fn kmeans(sizes: &[(f64, f64)], k: usize) -> Result<Self> {
        if k == 0 || sizes.len() < k {
            return Err(Error::Config(format!(
                "k-means needs at least {k} box sizes, got {}",
                sizes.len()
            )));
        }
        let shape_iou = |a: (f64, f64), b: (f64, f64)| {
            let inter = a.0.min(b.0) * a.1.min(b.1);
            inter / (a.0 * a.1 + b.0 * b.1 - inter)
        };
        let mut sorted = sizes.to_vec();
        sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let n = sorted.len();
        let mut centers: Vec<(f64, f64)> = (0..k).map(|i| sorted[(2 * i + 1) * n / (2 * k)]).collect();
        for _ in 0..100 {
            let mut sums = vec![(0.0, 0.0, 0usize); k];
            for &s in sizes {
                let best = (0..k)
                    .max_by(|&i, &j| shape_iou(s, centers[i]).total_cmp(&shape_iou(s, centers[j])))
                    .expect("k > 0");
                sums[best].0 += s.0;
                sums[best].1 += s.1;
                sums[best].2 += 1;
            }
            let next: Vec<(f64, f64)> = sums
                .iter()
                .zip(&centers)
                .map(|(&(w, h, n), &old)| if n == 0 { old } else { (w / n as f64, h / n as f64) })
                .collect();
            if next == centers {
                break;
            }
            centers = next;
        }
        centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        Ok(Anchors(centers))
    }
}

pub struct DetectionHead {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub out: Linear,
    pub anchors: usize,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, anchors: usize) -> Result<Self> {
        Ok(DetectionHead {
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), channels + 1, channels)?,
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), channels, channels)?,
            // small output scale so initial boxes sit near the anchor priors
            out: Linear::with_gain(store, &format!("{name}.out"), channels, anchors * 5, 0.1)?,
            anchors,
        })
    }

    /// Concatenates `M_verbal` `(B, H, W, C)` with `A_gesture` `(B, H, W)`
    /// scaled by `H * W`, and returns raw predictions `(B, H, W, anchors, 5)` ordered
    /// `(tx, ty, tw, th, objectness)`.
    pub fn forward(&self, m_verbal: &Tensor, a_gesture: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = m_verbal.dims4()?;
        // rescaled to mean 1 so the map is not drowned out by the features
        let a = (a_gesture.unsqueeze(3)? * (h * w) as f64)?;
        let x = Tensor::cat(&[m_verbal, &a], 3)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        Ok(self.out.forward(&x)?.reshape((b, h, w, self.anchors, 5))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

fn squash(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes one sample's raw `(H, W, anchors, 5)` predictions, given as a
/// flat row-major slice, into boxes in pixel units. Box `x` runs along
/// columns.
pub fn decode(raw: &[f32], grid: usize, anchors: &Anchors, image_size: usize) -> Result<Vec<Detection>> {
    let a = anchors.len();
    if raw.len() != grid * grid * a * 5 {
        return Err(Error::shape("decode", grid * grid * a * 5, raw.len()));
    }
    let stride = image_size as f64 / grid as f64;
    let mut out = Vec::with_capacity(grid * grid * a);
    for row in 0..grid {
        for col in 0..grid {
            for (k, &(aw, ah)) in anchors.0.iter().enumerate() {
                let base = ((row * grid + col) * a + k) * 5;
                let v = |i: usize| f64::from(raw[base + i]);
                let cx = (col as f64 + squash(v(0))) * stride;
                let cy = (row as f64 + squash(v(1))) * stride;
                let bw = aw * v(2).clamp(-10.0, 10.0).exp();
                let bh = ah * v(3).clamp(-10.0, 10.0).exp();
                out.push(Detection {
                    row,
                    col,
                    anchor: k,
                    bbox: BBox::from_center(cx, cy, bw, bh),
                    confidence: squash(v(4)),
                });
            }
        }
    }
    Ok(out)
}

/// Highest-confidence detection; ties keep the first in raster order.
pub fn top1(detections: &[Detection]) -> Option<&Detection> {
    detections
        .iter()
        .reduce(|best, d| if d.confidence > best.confidence { d } else { best })
}

/// Anchor prior of `anchor` placed at the center of cell `(row, col)`.
pub fn anchor_box(anchors: &Anchors, anchor: usize, row: usize, col: usize, stride: f64) -> BBox {
    let (aw, ah) = anchors.0[anchor];
    BBox::from_center((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride, aw, ah)
}

/// Returns `sigmoid` of the confidence logits as a `(B, H, W, anchors)`
/// tensor.
pub fn confidences(raw: &Tensor) -> Result<Tensor> {
    sigmoid(&raw.narrow(4, 4, 1)?.squeeze(4)?)
}

/// IoU of each anchor prior at the given cell with `gt`.
pub fn cell_anchor_ious(anchors: &Anchors, row: usize, col: usize, stride: f64, gt: &BBox) -> Vec<f64> {
    (0..anchors.len())
        .map(|k| iou(&anchor_box(anchors, k, row, col, stride), gt))
        .collect()
}
