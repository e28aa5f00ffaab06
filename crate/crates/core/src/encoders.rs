//! Perception providers and the fused multimodal map.
//!
//! Each provider declares the shape it produces for a given [`FeatureDims`];
//! the registry checks declarations at construction and every forward call
//! re-checks the actual output.

use candle_core::{Tensor, D};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, PatchConv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub image_size: usize,
    /// Feature grid side (H = W).
    pub grid: usize,
    pub channels: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
}

impl FeatureDims {
    pub fn pool_factor(&self) -> Result<usize> {
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of grid {}",
                self.image_size, self.grid
            )));
        }
        Ok(self.image_size / self.grid)
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderSlot {
    Visual,
    Gesture,
    Language,
    Depth,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRegistry {
    pub visual_provider: String,
    pub gesture_provider: String,
    pub language_provider: String,
    pub depth_provider: String,
    pub segmentation_provider: String,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        ProviderRegistry {
            visual_provider: "toy_conv".into(),
            gesture_provider: "avg_pool".into(),
            language_provider: "toy_embed".into(),
            depth_provider: "fixture_gt".into(),
            segmentation_provider: "fixture_gt".into(),
        }
    }
}

impl ProviderRegistry {
    /// Every provider with ground-truth or parameter-free stand-ins.
    pub fn passthrough() -> Self {
        ProviderRegistry {
            visual_provider: "pooled_rgb".into(),
            gesture_provider: "avg_pool".into(),
            language_provider: "one_hot".into(),
            depth_provider: "fixture_gt".into(),
            segmentation_provider: "fixture_gt".into(),
        }
    }

    pub fn name(&self, slot: ProviderSlot) -> &str {
        match slot {
            ProviderSlot::Visual => &self.visual_provider,
            ProviderSlot::Gesture => &self.gesture_provider,
            ProviderSlot::Language => &self.language_provider,
            ProviderSlot::Depth => &self.depth_provider,
            ProviderSlot::Segmentation => &self.segmentation_provider,
        }
    }

    /// Declared per-sample output shape of the provider in `slot`; `tokens`
    /// is the sequence length for the language slot.
    pub fn declared_shape(
        &self,
        slot: ProviderSlot,
        dims: &FeatureDims,
        tokens: usize,
    ) -> Result<Vec<usize>> {
        let name = self.name(slot);
        let known = match slot {
            ProviderSlot::Visual => ["toy_conv", "pooled_rgb"].contains(&name),
            ProviderSlot::Gesture => name == "avg_pool",
            ProviderSlot::Language => ["toy_embed", "one_hot"].contains(&name),
            ProviderSlot::Depth | ProviderSlot::Segmentation => name == "fixture_gt",
        };
        if !known {
            return Err(Error::Provider {
                name: name.to_string(),
                detail: format!("no provider registered for the {slot:?} slot"),
            });
        }
        let (g, c, s) = (dims.grid, dims.channels, dims.image_size);
        Ok(match slot {
            ProviderSlot::Visual => vec![g, g, c],
            ProviderSlot::Gesture => vec![g, g, 3],
            ProviderSlot::Language => vec![tokens, c],
            ProviderSlot::Depth | ProviderSlot::Segmentation => vec![s, s],
        })
    }

    pub fn validate(&self, dims: &FeatureDims) -> Result<()> {
        dims.pool_factor()?;
        for slot in [
            ProviderSlot::Visual,
            ProviderSlot::Gesture,
            ProviderSlot::Language,
            ProviderSlot::Depth,
            ProviderSlot::Segmentation,
        ] {
            self.declared_shape(slot, dims, 1)?;
        }
        if self.visual_provider == "pooled_rgb" && dims.channels < 3 {
            return Err(Error::Provider {
                name: self.visual_provider.clone(),
                detail: "needs at least 3 channels".into(),
            });
        }
        if self.language_provider == "one_hot" && dims.vocab_size > dims.channels {
            return Err(Error::Provider {
                name: self.language_provider.clone(),
                detail: format!(
                    "vocabulary of {} does not fit in {} channels",
                    dims.vocab_size, dims.channels
                ),
            });
        }
        Ok(())
    }
}

fn check_output(name: &str, t: &Tensor, batch: usize, declared: &[usize]) -> Result<()> {
    let mut want = vec![batch];
    want.extend_from_slice(declared);
    if t.dims() != want.as_slice() {
        return Err(Error::Provider {
            name: name.to_string(),
            detail: format!("produced {:?}, declared {:?}", t.dims(), want),
        });
    }
    Ok(())
}

/// Non-overlapping mean pooling of an `h x w x c` map down to `gh x gw`.
pub fn avg_pool(field: ArrayView3<'_, f64>, gh: usize, gw: usize) -> Result<Array3<f64>> {
    let (h, w, c) = field.dim();
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("a multiple of {gh}x{gw}"),
            format!("{h}x{w}"),
        ));
    }
    let (kh, kw) = (h / gh, w / gw);
    let mut out = Array3::zeros((gh, gw, c));
    for ((r, col, ch), v) in field.indexed_iter() {
        out[[r / kh, col / kw, ch]] += *v;
    }
    let n = (kh * kw) as f64;
    out.mapv_inplace(|v| v / n);
    Ok(out)
}

pub fn avg_pool2(map: ArrayView2<'_, f64>, gh: usize, gw: usize) -> Result<Array2<f64>> {
    let field = map.insert_axis(ndarray::Axis(2));
    Ok(avg_pool(field, gh, gw)?.index_axis_move(ndarray::Axis(2), 0))
}

/// Downsamples the gesture field to the feature grid.
pub fn encode_gesture(field: ArrayView3<'_, f32>, dims: &FeatureDims) -> Result<Array3<f32>> {
    let (h, w, c) = field.dim();
    if (h, w, c) != (dims.image_size, dims.image_size, 3) {
        return Err(Error::shape(
            "encode_gesture",
            format!("{0}x{0}x3", dims.image_size),
            format!("{h}x{w}x{c}"),
        ));
    }
    Ok(avg_pool(field.mapv(f64::from).view(), dims.grid, dims.grid)?.mapv(|v| v as f32))
}

pub enum VisualEncoder {
    ToyConv { blocks: Vec<PatchConv> },
    PooledRgb,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, name: &str, provider: &str, dims: &FeatureDims) -> Result<Self> {
        match provider {
            "toy_conv" => {
                let factor = dims.pool_factor()?;
                if !factor.is_power_of_two() || factor < 2 {
                    return Err(Error::Config(format!(
                        "toy_conv needs a power-of-two downsampling factor, got {factor}"
                    )));
                }
                let n = factor.trailing_zeros() as usize;
                let c = dims.channels;
                let mut blocks = Vec::with_capacity(n);
                let mut input = 3;
                for i in 0..n {
                    let output = if i + 2 >= n { c } else { (c >> (n - 2 - i)).max(8) };
                    blocks.push(PatchConv::new(store, &format!("{name}.block{i}"), input, output)?);
                    input = output;
                }
                Ok(VisualEncoder::ToyConv { blocks })
            }
            "pooled_rgb" => Ok(VisualEncoder::PooledRgb),
            other => Err(Error::Provider {
                name: other.into(),
                detail: "unknown visual provider".into(),
            }),
        }
    }

    /// `(B, S, S, 3)` image batch to `(B, H, W, C)` features.
    pub fn forward(&self, image: &Tensor, dims: &FeatureDims) -> Result<Tensor> {
        let (b, h, w, c) = image.dims4()?;
        if (h, w, c) != (dims.image_size, dims.image_size, 3) {
            return Err(Error::shape(
                "encode_visual",
                format!("{0}x{0}x3", dims.image_size),
                format!("{h}x{w}x{c}"),
            ));
        }
        let out = match self {
            VisualEncoder::ToyConv { blocks } => {
                let mut x = image.clone();
                for (i, block) in blocks.iter().enumerate() {
                    x = block.forward(&x)?;
                    if i + 1 < blocks.len() {
                        x = x.relu()?;
                    }
                }
                x
            }
            VisualEncoder::PooledRgb => {
                let k = dims.pool_factor()?;
                let g = dims.grid;
                let pooled = image
                    .reshape((b, g, k, g, k, 3))?
                    .mean(4)?
                    .mean(2)?;
                pooled.pad_with_zeros(3, 0, dims.channels - 3)?
            }
        };
        let name = match self {
            VisualEncoder::ToyConv { .. } => "toy_conv",
            VisualEncoder::PooledRgb => "pooled_rgb",
        };
        check_output(name, &out, b, &[dims.grid, dims.grid, dims.channels])?;
        Ok(out)
    }
}

pub enum LanguageEncoder {
    /// Token and position embeddings followed by two fully connected layers
    /// of width C with a rectifier in between.
    ToyEmbed {
        embedding: Tensor,
        positions: Tensor,
        fc1: Linear,
        fc2: Linear,
    },
    OneHot { dtype: candle_core::DType },
}

impl LanguageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, provider: &str, dims: &FeatureDims) -> Result<Self> {
        let c = dims.channels;
        match provider {
            "toy_embed" => Ok(LanguageEncoder::ToyEmbed {
                embedding: store.normal(&format!("{name}.embedding"), &[dims.vocab_size, c], 1.0)?,
                positions: store.normal(&format!("{name}.positions"), &[dims.max_tokens, c], 1.0)?,
                fc1: Linear::with_gain(store, &format!("{name}.fc1"), c, c, 2f64.sqrt())?,
                fc2: Linear::new(store, &format!("{name}.fc2"), c, c)?,
            }),
            "one_hot" => Ok(LanguageEncoder::OneHot {
                dtype: store.dtype(),
            }),
            other => Err(Error::Provider {
                name: other.into(),
                detail: "unknown language provider".into(),
            }),
        }
    }

    /// `(B, T)` u32 token ids to `(B, T, C)` features.
    pub fn forward(&self, tokens: &Tensor, dims: &FeatureDims) -> Result<Tensor> {
        let (b, t) = tokens.dims2()?;
        if t == 0 {
            return Err(Error::EmptyTokens);
        }
        if t > dims.max_tokens {
            return Err(Error::shape("encode_language", format!("at most {} tokens", dims.max_tokens), t));
        }
        let ids = tokens.flatten_all()?;
        if let Some(&bad) = ids
            .to_vec1::<u32>()?
            .iter()
            .find(|&&id| id as usize >= dims.vocab_size)
        {
            return Err(Error::UnknownToken {
                id: bad,
                vocab: dims.vocab_size,
            });
        }
        let c = dims.channels;
        let (out, name) = match self {
            LanguageEncoder::ToyEmbed {
                embedding,
                positions,
                fc1,
                fc2,
            } => {
                let words = embedding.index_select(&ids, 0)?.reshape((b, t, c))?;
                let x = words.broadcast_add(&positions.narrow(0, 0, t)?)?;
                (fc2.forward(&fc1.forward(&x)?.relu()?)?, "toy_embed")
            }
            LanguageEncoder::OneHot { dtype } => {
                let eye = Tensor::eye(c, *dtype, tokens.device())?;
                (eye.index_select(&ids, 0)?.reshape((b, t, c))?, "one_hot")
            }
        };
        check_output(name, &out, b, &[t, c])?;
        Ok(out)
    }
}

/// 1x1 convolution over `[S_v; S_gesture; AvgPool(P_r)]`.
pub struct Fusion {
    pub proj: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, dims: &FeatureDims) -> Result<Self> {
        Ok(Fusion {
            proj: Linear::new(store, name, dims.channels + 6, dims.channels)?,
        })
    }

    pub fn forward(&self, visual: &Tensor, gesture: &Tensor, coords: &Tensor) -> Result<Tensor> {
        let expected = self.proj.weight.dims2()?.0;
        let got = visual.dim(D::Minus1)? + gesture.dim(D::Minus1)? + coords.dim(D::Minus1)?;
        if got != expected {
            return Err(Error::shape("fuse_multimodal", expected, got));
        }
        let x = Tensor::cat(&[visual, gesture, coords], 3)?;
        self.proj.forward(&x)
    }
}
