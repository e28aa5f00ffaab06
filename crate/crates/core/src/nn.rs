//! Minimal trainable layers over `candle_core` tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are
//! initialized from a seeded ChaCha stream so a `(seed, config)` pair always
//! yields the same network. Feature maps use channels-last layout.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter's values in place; the shape must match.
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != values.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs stored {:?}",
                values.dims(),
                var.dims()
            )));
        }
        var.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `x / (||x|| + 1e-8)` along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + 1e-8)?;
    Ok(x.broadcast_div(&n)?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_gain(store, name, input, output, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
    ) -> Result<Self> {
        let std = gain / (input as f64).sqrt();
        Ok(Linear {
            weight: store.normal(&format!("{name}.weight"), &[input, output], std)?,
            bias: store.constant(&format!("{name}.bias"), &[output], 0.0)?,
        })
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (input, output) = self.weight.dims2()?;
        let last = *dims.last().unwrap_or(&0);
        if last != input {
            return Err(Error::shape("linear", input, last));
        }
        let rows = x.elem_count() / input;
        let y = x
            .reshape((rows, input))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty dims") = output;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{dim} channels cannot be split into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// Returns the attended sequence and the `(B, heads, N, N)` weights.
    /// `key_mask` is `(B, N)` with 1 for keys that may be attended to.
    pub fn forward(&self, x: &Tensor, key_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(mask) = key_mask {
            let bias = ((mask - 1.0)? * 1e4)?.reshape((b, 1, 1, n))?;
            scores = scores.broadcast_add(&bias)?;
        }
        let weights = softmax_last(&scores)?;
        let y = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        Ok((self.out.forward(&y)?, weights))
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ff1: Linear::with_gain(store, &format!("{name}.ff1"), dim, ff_dim, 2f64.sqrt())?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (a, w) = self.attn.forward(&self.norm1.forward(x)?, key_mask)?;
        let x = (x + a)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.norm2.forward(&x)?)?.relu()?)?;
        Ok(((x + f)?, w))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ff_dim))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    /// Returns the encoded tokens and the last layer's attention weights.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        self.forward_masked(x, None)
    }

    /// Like [`TransformerEncoder::forward`], but only keys where the `(B, N)`
    /// `key_mask` is 1 are attended to.
    pub fn forward_masked(&self, x: &Tensor, key_mask: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
        let mut h = x.clone();
        let mut last = None;
        for layer in &self.layers {
            let (y, w) = layer.forward(&h, key_mask)?;
            h = y;
            last = Some(w);
        }
        Ok((self.norm.forward(&h)?, last))
    }
}

/// Stride-2 convolution with a 2x2 kernel over a `(B, H, W, C)` map.
#[derive(Clone, Debug)]
pub struct PatchConv {
    proj: Linear,
}

impl PatchConv {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(PatchConv {
            proj: Linear::with_gain(store, name, 4 * input, output, 2f64.sqrt())?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("patch_conv", "even spatial size", format!("{h}x{w}")));
        }
        let patches = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.proj.forward(&patches)
    }
}

/// 3x3 convolution, stride 1, zero padding 1, over a `(B, H, W, C)` map.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    proj: Linear,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Conv3x3 {
            proj: Linear::with_gain(store, name, 9 * input, output, 2f64.sqrt())?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                taps.push(padded.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        self.proj.forward(&Tensor::cat(&taps, 3)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(DType::F32, 3);
        let mut b = ParamStore::new(DType::F32, 3);
        let ta = a.normal("w", &[4, 4], 1.0).unwrap();
        let tb = b.normal("w", &[4, 4], 1.0).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let mut store = ParamStore::new(DType::F64, 1);
        let conv = Conv3x3::new(&mut store, "c", 2, 3).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (1, 4, 5, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let xs = x.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let w = conv.proj.weight.to_vec2::<f64>().unwrap();
        for r in 0..4 {
            for c in 0..5 {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (rr, cc) = (r as isize + dy as isize - 1, c as isize + dx as isize - 1);
                            if rr < 0 || cc < 0 || rr >= 4 || cc >= 5 {
                                continue;
                            }
                            for i in 0..2 {
                                acc += xs[rr as usize][cc as usize][i] * w[(dy * 3 + dx) * 2 + i][o];
                            }
                        }
                    }
                    assert!((y[r][c][o] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_conv_sees_only_its_block() {
        let mut store = ParamStore::new(DType::F64, 2);
        let conv = PatchConv::new(&mut store, "p", 1, 1).unwrap();
        let mut data = vec![0.0f64; 16];
        data[0] = 1.0; // pixel (0, 0) only affects output (0, 0)
        let x = Tensor::from_vec(data, (1, 4, 4, 1), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y[0] != 0.0);
        assert!(y[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_keys_get_no_attention() {
        let mut store = ParamStore::new(DType::F64, 1);
        let enc = TransformerEncoder::new(&mut store, "t", 8, 1, 2, 16).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let (out, w) = enc.forward_masked(&x, Some(&mask)).unwrap();
        let w = w.unwrap();
        for (b, closed) in [(0usize, vec![2usize, 4]), (1, vec![1, 2, 3, 4])] {
            for k in closed {
                let col = w.get(b).unwrap().narrow(2, k, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                assert!(col.iter().all(|&v| v < 1e-12), "batch {b} key {k}: {col:?}");
            }
        }
        // content of a masked token does not reach the open ones
        let mut data = x.to_vec3::<f64>().unwrap();
        data[0][2] = vec![9.0; 8];
        let y = Tensor::new(data, &Device::Cpu).unwrap();
        let (out2, _) = enc.forward_masked(&y, Some(&mask)).unwrap();
        let a = out.get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        let b = out2.get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }
}
