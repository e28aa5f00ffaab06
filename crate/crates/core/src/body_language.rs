//! Body-language vector: masked multimodal features are flattened into
//! tokens, a learned `[BODY]` token is prepended, and its transformer output
//! is projected to a unit 3-vector in embodied coordinates.

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoders::avg_pool2;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, l2_normalize, Linear, ParamStore, TransformerEncoder};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbed {
    #[default]
    Learned,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

/// Pools a full-resolution `{0,1}` mask to per-cell coverage fractions.
pub fn pool_mask(mask: ArrayView2<'_, u8>, grid: usize) -> Result<Array2<f64>> {
    avg_pool2(mask.mapv(f64::from).view(), grid, grid)
}

/// `M ⊙ AvgPool(A_sender)`; `pooled_mask` is `(B, H, W, 1)`.
pub fn mask_body_features(m: &Tensor, pooled_mask: &Tensor) -> Result<Tensor> {
    let (b, h, w, _) = m.dims4()?;
    if pooled_mask.dims() != [b, h, w, 1] {
        return Err(Error::shape(
            "mask_body_features",
            format!("[{b}, {h}, {w}, 1]"),
            format!("{:?}", pooled_mask.dims()),
        ));
    }
    Ok(m.broadcast_mul(pooled_mask)?)
}

pub struct BodyOutput {
    /// `(B, 3)` unit vectors.
    pub l: Tensor,
    /// `(B, heads, N + 1, N + 1)` attention of the last encoder layer.
    pub attention: Option<Tensor>,
}

pub struct BodyEncoder {
    pub body_token: Tensor,
    pub positions: Option<Tensor>,
    pub encoder: TransformerEncoder,
    pub head: Linear,
}

impl BodyEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: TransformerDims,
        cells: usize,
        pos_embed: PosEmbed,
    ) -> Result<Self> {
        let c = dims.channels;
        let positions = match pos_embed {
            PosEmbed::Learned => Some(store.normal(&format!("{name}.positions"), &[cells + 1, c], 0.02)?),
            PosEmbed::None => None,
        };
        Ok(BodyEncoder {
            body_token: store.normal(&format!("{name}.body_token"), &[c], 0.02)?,
            positions,
            encoder: TransformerEncoder::new(
                store,
                &format!("{name}.encoder"),
                c,
                dims.layers,
                dims.heads,
                dims.ff_dim,
            )?,
            head: Linear::new(store, &format!("{name}.head"), c, 3)?,
        })
    }

    /// Encodes `(B, H, W, C)` masked features into `l`.
    pub fn forward(&self, m_body: &Tensor) -> Result<BodyOutput> {
        let (b, h, w, c) = m_body.dims4()?;
        let tokens = m_body.reshape((b, h * w, c))?;
        let body = self.body_token.reshape((1, 1, c))?.broadcast_as((b, 1, c))?;
        let mut x = Tensor::cat(&[&body, &tokens], 1)?;
        if let Some(pos) = &self.positions {
            if pos.dims2()?.0 != h * w + 1 {
                return Err(Error::shape("encode_body_vector", pos.dims2()?.0, h * w + 1));
            }
            x = x.broadcast_add(pos)?;
        }
        // all-zero cells lie outside the sender and carry no content
        let occupied = tokens.abs()?.sum(2)?.gt(0.0)?.to_dtype(x.dtype())?;
        let keys = Tensor::cat(&[&Tensor::ones((b, 1), x.dtype(), x.device())?, &occupied], 1)?;
        let (encoded, attention) = self.encoder.forward_masked(&x, Some(&keys))?;
        let raw = self.head.forward(&encoded.narrow(1, 0, 1)?.squeeze(1)?)?;
        ensure_finite(&raw, "body-language head output")?;
        Ok(BodyOutput {
            l: l2_normalize(&raw)?,
            attention,
        })
    }
}
