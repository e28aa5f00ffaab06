//! End-to-end grounding network: encoders, body-language vector, relation
//! reasoning and the detection head, with switches for the ablation ladder.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::body_language::{mask_body_features, BodyEncoder, PosEmbed, TransformerDims};
use crate::encoders::{avg_pool, encode_gesture, FeatureDims, Fusion, LanguageEncoder, ProviderRegistry, VisualEncoder};
use crate::error::{Error, Result};
use crate::evalmetrics::BBox;
use crate::fixtures::SceneSample;
use crate::geometry::CoordinateMaps;
use crate::losses::{
    attention_loss, diverse_loss, regression_loss_batch, total_loss, yolo_loss, LossBundle, LossWeights,
    SupervisionTargets, YoloTargets,
};
use crate::nn::ParamStore;
use crate::relation::{
    decode, pooled_spatial_attention, top1, unit_directions, Anchors, Detection, DetectionHead, GestureAttention,
    VerbalFusion, VerbalOutput,
};

/// Component switches. Each enabled flag requires every earlier one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_depth: bool,
    pub use_embodied_coords: bool,
    pub use_body_vector: bool,
    pub use_verbal_attention: bool,
    pub use_gesture_attention: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation::level(5);
    pub const BASELINE: Ablation = Ablation::level(0);

    /// The first `n` components switched on.
    pub const fn level(n: usize) -> Ablation {
        Ablation {
            use_depth: n >= 1,
            use_embodied_coords: n >= 2,
            use_body_vector: n >= 3,
            use_verbal_attention: n >= 4,
            use_gesture_attention: n >= 5,
        }
    }

    pub fn flags(&self) -> [bool; 5] {
        [
            self.use_depth,
            self.use_embodied_coords,
            self.use_body_vector,
            self.use_verbal_attention,
            self.use_gesture_attention,
        ]
    }

    pub fn count(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.flags();
        if f.windows(2).any(|w| w[1] && !w[0]) {
            return Err(Error::Config(format!(
                "ablation flags must switch on in order (depth, embodied coords, body vector, verbal attention, gesture attention): {f:?}"
            )));
        }
        Ok(())
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub grid: usize,
    pub channels: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub anchors: Anchors,
    pub body_pos_embed: PosEmbed,
    /// Gate gesture attention by `A_sender + A_spatial` (true) or by
    /// `A_spatial` alone.
    pub gesture_gate_includes_sender: bool,
    pub providers: ProviderRegistry,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            image_size: self.image_size,
            grid: self.grid,
            channels: self.channels,
            max_tokens: self.max_tokens,
            vocab_size: self.vocab_size,
        }
    }

    pub fn transformer(&self) -> TransformerDims {
        TransformerDims {
            channels: self.channels,
            layers: self.transformer_layers,
            heads: self.heads,
            ff_dim: self.ff_mult * self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.providers.validate(&self.dims())?;
        if self.anchors.is_empty() {
            return Err(Error::Config("at least one anchor is required".into()));
        }
        if self.transformer_layers == 0 || self.ff_mult == 0 || self.max_tokens == 0 {
            return Err(Error::Config("transformer layers, ff_mult and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample network inputs and supervision, precomputed once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: String,
    pub image: Vec<f32>,
    pub gesture: Vec<f32>,
    /// Pooled coordinate channels fed to the fusion layer, chosen by the
    /// ablation: image coordinates with zero depth, `P`, or `P_r`.
    pub coords: Vec<f32>,
    /// Pooled unit directions of `P_r`.
    pub directions: Vec<f32>,
    /// Pooled sender mask.
    pub sender: Vec<f32>,
    pub tokens: Vec<u32>,
    pub gt_box: BBox,
    pub targets: SupervisionTargets,
}

fn flat32(a: &Array3<f64>) -> Vec<f32> {
    a.iter().map(|&v| v as f32).collect()
}

pub fn prepare_sample(sample: &SceneSample, cfg: &ModelConfig) -> Result<PreparedSample> {
    let dims = cfg.dims();
    let s = cfg.image_size;
    if sample.image.dim() != (s, s, 3) {
        return Err(Error::shape("prepare_sample", format!("{s}x{s}x3"), format!("{:?}", sample.image.dim())));
    }
    if sample.tokens.len() > cfg.max_tokens {
        return Err(Error::shape("prepare_sample", format!("at most {} tokens", cfg.max_tokens), sample.tokens.len()));
    }
    let maps = CoordinateMaps::build(sample.depth.view(), sample.sender_mask.view())?;
    let g = cfg.grid;
    let coords_full = if !cfg.ablation.use_depth {
        let mut p = maps.points.clone();
        p.index_axis_mut(ndarray::Axis(2), 2).fill(0.0);
        p
    } else if !cfg.ablation.use_embodied_coords {
        maps.points.clone()
    } else {
        maps.embodied.clone()
    };
    let coords = avg_pool(coords_full.view(), g, g)?;
    let directions = avg_pool(unit_directions(maps.embodied.view()).view(), g, g)?;
    let mask = sample.sender_mask.mapv(f64::from).insert_axis(ndarray::Axis(2));
    let sender = avg_pool(mask.view(), g, g)?;
    let gesture = encode_gesture(sample.gesture_field.view(), &dims)?;
    let targets = SupervisionTargets::build(maps.embodied.view(), &sample.gt_box, &cfg.anchors, g)?;
    Ok(PreparedSample {
        sample_id: sample.sample_id.clone(),
        image: sample.image.as_standard_layout().iter().copied().collect(),
        gesture: gesture.iter().copied().collect(),
        coords: flat32(&coords),
        directions: flat32(&directions),
        sender: flat32(&sender),
        tokens: sample.tokens.clone(),
        gt_box: sample.gt_box,
        targets,
    })
}

pub struct ModelInputs {
    pub image: Tensor,
    pub gesture: Tensor,
    pub coords: Tensor,
    pub directions: Tensor,
    pub sender: Tensor,
    pub tokens: Tensor,
}

pub struct BatchTargets {
    pub p_box: Tensor,
    pub p_box_valid: Tensor,
    pub box_mask: Tensor,
    pub yolo: YoloTargets,
}

fn stack(samples: &[&PreparedSample], field: impl Fn(&PreparedSample) -> &[f32], shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * shape.iter().product::<usize>());
    for s in samples {
        data.extend_from_slice(field(s));
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Ok(Tensor::from_vec(data, full, dev)?.to_dtype(dtype)?)
}

pub fn batch_inputs(samples: &[&PreparedSample], cfg: &ModelConfig, dtype: DType, dev: &Device) -> Result<ModelInputs> {
    let (s, g) = (cfg.image_size, cfg.grid);
    let t = samples.first().map(|p| p.tokens.len()).ok_or_else(|| Error::Config("empty batch".into()))?;
    if samples.iter().any(|p| p.tokens.len() != t) {
        return Err(Error::Config("samples in a batch must share the phrase length".into()));
    }
    let tokens: Vec<u32> = samples.iter().flat_map(|p| p.tokens.iter().copied()).collect();
    Ok(ModelInputs {
        image: stack(samples, |p| &p.image, &[s, s, 3], dtype, dev)?,
        gesture: stack(samples, |p| &p.gesture, &[g, g, 3], dtype, dev)?,
        coords: stack(samples, |p| &p.coords, &[g, g, 3], dtype, dev)?,
        directions: stack(samples, |p| &p.directions, &[g, g, 3], dtype, dev)?,
        sender: stack(samples, |p| &p.sender, &[g, g, 1], dtype, dev)?,
        tokens: Tensor::from_vec(tokens, (samples.len(), t), dev)?,
    })
}

pub fn batch_targets(samples: &[&PreparedSample], cfg: &ModelConfig, dtype: DType, dev: &Device) -> Result<BatchTargets> {
    let b = samples.len();
    let g = cfg.grid;
    let p_box: Vec<f64> = samples.iter().flat_map(|p| p.targets.p_box).collect();
    let valid: Vec<f64> = samples.iter().map(|p| f64::from(u8::from(p.targets.p_box_valid()))).collect();
    let mask: Vec<f64> = samples
        .iter()
        .flat_map(|p| p.targets.box_mask.iter().map(|&v| f64::from(v)))
        .collect();
    let targets: Vec<&SupervisionTargets> = samples.iter().map(|p| &p.targets).collect();
    Ok(BatchTargets {
        p_box: Tensor::from_vec(p_box, (b, 3), dev)?.to_dtype(dtype)?,
        p_box_valid: Tensor::from_vec(valid, b, dev)?.to_dtype(dtype)?,
        box_mask: Tensor::from_vec(mask, (b, g, g), dev)?.to_dtype(dtype)?,
        yolo: YoloTargets::new(&targets, g, cfg.anchors.len(), dtype, dev)?,
    })
}

pub struct ForwardOutput {
    pub m: Tensor,
    /// `(B, 3)` body-language vectors.
    pub l: Option<Tensor>,
    /// Pooled spatial attention `(B, H, W, 1)`.
    pub spatial: Option<Tensor>,
    pub a_gesture: Tensor,
    pub verbal: VerbalOutput,
    pub raw: Tensor,
    pub body_attention: Option<Tensor>,
}

pub struct GroundingModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub language: LanguageEncoder,
    pub fusion: Fusion,
    pub body: Option<BodyEncoder>,
    pub gesture: Option<GestureAttention>,
    pub verbal: VerbalFusion,
    pub head: DetectionHead,
}

impl GroundingModel {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let tdims = config.transformer();
        let mut store = ParamStore::new(dtype, seed);
        let visual = VisualEncoder::new(&mut store, "encoders.visual", &config.providers.visual_provider, &dims)?;
        let language = LanguageEncoder::new(&mut store, "encoders.language", &config.providers.language_provider, &dims)?;
        let fusion = Fusion::new(&mut store, "encoders.fusion", &dims)?;
        let body = if config.ablation.use_body_vector {
            Some(BodyEncoder::new(&mut store, "body_language", tdims, dims.cells(), config.body_pos_embed)?)
        } else {
            None
        };
        let gesture = if config.ablation.use_gesture_attention {
            Some(GestureAttention::new(&mut store, "relation.gesture", tdims, dims.cells(), config.body_pos_embed)?)
        } else {
            None
        };
        let verbal = VerbalFusion::new(&mut store, "relation.verbal", config.channels)?;
        let head = DetectionHead::new(&mut store, "relation.head", config.channels, config.anchors.len())?;
        Ok(GroundingModel {
            config,
            store,
            visual,
            language,
            fusion,
            body,
            gesture,
            verbal,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn forward(&self, x: &ModelInputs) -> Result<ForwardOutput> {
        let dims = self.config.dims();
        let (b, g) = (x.image.dim(0)?, self.config.grid);
        let s_v = self.visual.forward(&x.image, &dims)?;
        let words = self.language.forward(&x.tokens, &dims)?;
        let m = self.fusion.forward(&s_v, &x.gesture, &x.coords)?;

        let (l, spatial, body_attention) = match &self.body {
            Some(body) => {
                let out = body.forward(&mask_body_features(&m, &x.sender)?)?;
                let spatial = pooled_spatial_attention(&out.l, &x.directions)?;
                (Some(out.l), Some(spatial), out.attention)
            }
            None => (None, None, None),
        };

        let verbal_gate = if self.config.ablation.use_verbal_attention { spatial.as_ref() } else { None };
        let verbal = self.verbal.forward(&m, verbal_gate, &words)?;

        let a_gesture = match (&self.gesture, &spatial) {
            (Some(gesture), Some(sp)) => {
                let gate = if self.config.gesture_gate_includes_sender { (sp + &x.sender)? } else { sp.clone() };
                gesture.forward(&m, &gate)?.1
            }
            _ => Tensor::full(1.0 / (g * g) as f64, (b, g, g), m.device())?.to_dtype(m.dtype())?,
        };
        let raw = self.head.forward(&verbal.m_verbal, &a_gesture)?;
        Ok(ForwardOutput {
            m,
            l,
            spatial,
            a_gesture,
            verbal,
            raw,
            body_attention,
        })
    }

    pub fn losses(&self, out: &ForwardOutput, t: &BatchTargets, weights: &LossWeights) -> Result<LossBundle> {
        let zero = || Tensor::zeros((), out.raw.dtype(), out.raw.device());
        let reg = match &out.l {
            Some(l) => regression_loss_batch(l, &t.p_box, &t.p_box_valid)?,
            None => zero()?,
        };
        let attn = if self.gesture.is_some() { attention_loss(&out.a_gesture, &t.box_mask)? } else { zero()? };
        let div = diverse_loss(&out.verbal.sub_query.attention)?;
        let yolo = yolo_loss(&out.raw, &t.yolo)?;
        total_loss(yolo, div, reg, attn, weights)
    }

    /// Top-1 detection for every sample in the batch.
    pub fn predict(&self, x: &ModelInputs) -> Result<Vec<Detection>> {
        let out = self.forward(x)?;
        detections_from_raw(&out.raw, self.config.grid, &self.config.anchors, self.config.image_size)
    }
}

pub fn detections_from_raw(raw: &Tensor, grid: usize, anchors: &Anchors, image_size: usize) -> Result<Vec<Detection>> {
    let b = raw.dim(0)?;
    let flat = raw.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = flat.len() / b.max(1);
    (0..b)
        .map(|i| {
            let dets = decode(&flat[i * per..(i + 1) * per], grid, anchors, image_size)?;
            top1(&dets).cloned().ok_or_else(|| Error::Config("no detections".into()))
        })
        .collect()
}

/// `(B, H, W)` tensor as nested rows.
pub fn grid_values(t: &Tensor, index: usize) -> Result<Array2<f64>> {
    let (_, h, w) = t.dims3()?;
    let v = t.get(index)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("matching length"))
}
