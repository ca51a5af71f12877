//! Transformer block forward passes: a ViT encoder block, a LLaMA-style block
//! (RMSNorm + SwiGLU) and an OPT-style block (LayerNorm + MLP).
//!
//! Every variant uses the same pre-normalization residual layout
//!
//! ```text
//! h = x + Attn(norm1(x))
//! y = h + FFN(norm2(h))
//! ```
//!
//! Attention is always bidirectional. There is no causal mask and no
//! positional encoding of any kind inside a block; an optional padding mask
//! only hides padded keys. Projection matrices are stored `[in, out]` and
//! applied as `x · W`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;
/// Additive logit for padded keys; finite so gradients stay finite.
pub const PADDED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Vit,
    Llama,
    Opt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vit => "vit",
            Variant::Llama => "llama",
            Variant::Opt => "opt",
        }
    }

    /// Parameter names a block of this variant carries, in storage order.
    pub fn field_names(self) -> &'static [&'static str] {
        match self {
            Variant::Llama => &[
                "attn.wq",
                "attn.wk",
                "attn.wv",
                "attn.wo",
                "norm1.weight",
                "norm2.weight",
                "ffn.gate",
                "ffn.up",
                "ffn.down",
            ],
            Variant::Vit | Variant::Opt => &[
                "attn.wq",
                "attn.wk",
                "attn.wv",
                "attn.wo",
                "norm1.weight",
                "norm1.bias",
                "norm2.weight",
                "norm2.bias",
                "ffn.fc1.weight",
                "ffn.fc1.bias",
                "ffn.fc2.weight",
                "ffn.fc2.bias",
            ],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" => Ok(Variant::Vit),
            "llama" => Ok(Variant::Llama),
            "opt" => Ok(Variant::Opt),
            other => Err(Error::Config(format!("unknown block variant {other:?}"))),
        }
    }
}

/// Nonlinearity of the two-matrix feedforward (ViT and OPT variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        })
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights<T: Real = f32> {
    pub variant: Variant,
    pub dim: usize,
    pub n_heads: usize,
    pub hidden: usize,
    /// Only consulted by the ViT and OPT feedforward.
    pub activation: Activation,
    /// `(name, tensor)` in [`Variant::field_names`] order.
    params: Vec<(&'static str, Tensor<T>)>,
}

/// Expected `[in, out]` or `[d]` shape of a named block field.
fn field_shape(name: &str, dim: usize, hidden: usize) -> Vec<usize> {
    match name {
        "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![dim, dim],
        "ffn.gate" | "ffn.up" | "ffn.fc1.weight" => vec![dim, hidden],
        "ffn.down" | "ffn.fc2.weight" => vec![hidden, dim],
        "ffn.fc1.bias" => vec![hidden],
        _ => vec![dim],
    }
}

fn fan_in(name: &str, dim: usize, hidden: usize) -> usize {
    if name == "ffn.down" || name == "ffn.fc2.weight" {
        hidden
    } else {
        dim
    }
}

fn is_matrix(name: &str) -> bool {
    name.starts_with("attn.") || matches!(name, "ffn.gate" | "ffn.up" | "ffn.down" | "ffn.fc1.weight" | "ffn.fc2.weight")
}

/// How random block weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`, the usual trainable linear-layer init.
    Uniform,
    /// `N(0, 1)/√fan_in`, used for stand-in language-model blocks.
    ScaledNormal,
}

pub(crate) fn draw<T: Real, R: Rng + ?Sized>(rng: &mut R, init: Init, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let v = match init {
                Init::Uniform => rng.random_range(-bound..bound),
                Init::ScaledNormal => {
                    let z: f64 = StandardNormal.sample(rng);
                    z * bound
                }
            };
            T::of(v)
        })
        .collect()
}

impl<T: Real> BlockWeights<T> {
    fn check_dims(variant: Variant, dim: usize, n_heads: usize, hidden: usize) -> Result<()> {
        if dim == 0 || n_heads == 0 || hidden == 0 || dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "{variant} block needs dim divisible by heads and nonzero sizes \
                 (dim={dim}, heads={n_heads}, hidden={hidden})"
            )));
        }
        Ok(())
    }

    /// Assembles a block from named tensors, validating every shape.
    pub fn from_fields(
        variant: Variant,
        n_heads: usize,
        activation: Activation,
        mut field: impl FnMut(&'static str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let names = variant.field_names();
        let mut params = Vec::with_capacity(names.len());
        for &name in names {
            let t = field(name)
                .ok_or_else(|| Error::Manifest(format!("{variant} block is missing field {name:?}")))?;
            params.push((name, t));
        }
        let wq = &params[0].1;
        if wq.rank() != 2 {
            return Err(Error::Shape(format!("attn.wq must be a matrix, got {:?}", wq.shape())));
        }
        let dim = wq.shape()[0];
        let hidden_field = if variant == Variant::Llama { "ffn.gate" } else { "ffn.fc1.weight" };
        let hidden = params
            .iter()
            .find(|(n, _)| *n == hidden_field)
            .and_then(|(_, t)| t.shape().get(1).copied())
            .unwrap_or(0);
        Self::check_dims(variant, dim, n_heads, hidden)?;
        for (name, t) in &params {
            let want = field_shape(name, dim, hidden);
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "{variant} field {name:?} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(BlockWeights {
            variant,
            dim,
            n_heads,
            hidden,
            activation,
            params,
        })
    }

    /// All projections zero, norm weights one, biases zero. Both residual
    /// branches then contribute nothing, so the block is the identity map.
    pub fn identity(variant: Variant, dim: usize, n_heads: usize, hidden: usize) -> Result<Self> {
        Self::check_dims(variant, dim, n_heads, hidden)?;
        Self::from_fields(variant, n_heads, Activation::Gelu, |name| {
            let shape = field_shape(name, dim, hidden);
            Some(if name.ends_with("weight") && name.starts_with("norm") {
                Tensor::full(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            })
        })
    }

    /// Random projections with norm weights one and biases zero.
    pub fn random<R: Rng + ?Sized>(
        variant: Variant,
        dim: usize,
        n_heads: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(variant, dim, n_heads, hidden)?;
        Self::from_fields(variant, n_heads, Activation::Gelu, |name| {
            let shape = field_shape(name, dim, hidden);
            let n = shape.iter().product();
            let data = if is_matrix(name) {
                draw(rng, init, fan_in(name, dim, hidden), n)
            } else if name.starts_with("norm") && name.ends_with("weight") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            Tensor::new(&shape, data).ok()
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.get(name).expect("field validated at construction")
    }

    pub fn params(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (*n, t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (*n, t))
    }

    pub fn has_bias(&self) -> bool {
        self.params.iter().any(|(n, _)| n.ends_with("bias"))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Re-creates every parameter as a leaf with the given gradient flag.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in &mut self.params {
            *t = t.with_requires_grad(trainable);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|(_, t)| !t.requires_grad())
    }

    fn norm(&self, x: &Tensor<T>, which: &str) -> Result<Tensor<T>> {
        let w = self.p(&format!("{which}.weight"));
        match self.variant {
            Variant::Llama => x.rms_norm(w, RMS_NORM_EPS),
            Variant::Vit | Variant::Opt => x.layer_norm(w, self.p(&format!("{which}.bias")), LAYER_NORM_EPS),
        }
    }

    fn ffn(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.variant {
            Variant::Llama => {
                let gate = x.matmul(self.p("ffn.gate"))?.silu();
                let up = x.matmul(self.p("ffn.up"))?;
                gate.mul(&up)?.matmul(self.p("ffn.down"))
            }
            Variant::Vit | Variant::Opt => {
                let h = x
                    .matmul(self.p("ffn.fc1.weight"))?
                    .add_broadcast(self.p("ffn.fc1.bias"))?;
                let h = match self.activation {
                    Activation::Gelu => h.gelu(),
                    Activation::Relu => h.relu(),
                };
                h.matmul(self.p("ffn.fc2.weight"))?
                    .add_broadcast(self.p("ffn.fc2.bias"))
            }
        }
    }
}

/// Attention probabilities plus the residual stream after each sub-layer.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T: Real = f32> {
    /// `[heads, tokens, tokens]`, or `[batch, heads, tokens, tokens]` for batched input.
    pub scores: Tensor<T>,
    /// Output of the attention sub-layer including its residual.
    pub post_attention: Tensor<T>,
    /// Output of the feedforward sub-layer including its residual.
    pub post_ffn: Tensor<T>,
}

/// `[tokens, dim]` or `[batch, tokens, dim]` viewed as `(batch, tokens, dim)`.
fn token_dims<T: Real>(x: &Tensor<T>, dim: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    let (b, t, d) = match *s {
        [t, d] => (1, t, d),
        [b, t, d] => (b, t, d),
        _ => return Err(Error::Shape(format!("block input must be [tokens, dim] or [batch, tokens, dim], got {s:?}"))),
    };
    if d != dim {
        return Err(Error::Shape(format!("block input width {d} does not match block dim {dim}")));
    }
    Ok((b, t))
}

/// Scaled dot-product attention over all token pairs.
///
/// Returns the projected attention output (no residual) and the per-head
/// probabilities. `padding_mask[i] == false` marks token `i` as padding; it
/// is hidden as a key from every query.
pub fn multi_head_attention<T: Real>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    padding_mask: Option<&[bool]>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, t) = token_dims(x, w.dim)?;
    let (h, d) = (w.n_heads, w.dim);
    let dh = d / h;
    let heads = |proj: &str| -> Result<Tensor<T>> {
        x.matmul(w.p(proj))?
            .reshape(&[b, t, h, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * h, t, dh])
    };
    let (q, k, v) = (heads("attn.wq")?, heads("attn.wk")?, heads("attn.wv")?);
    let mut logits = q.matmul_bt(&k)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(mask) = padding_mask {
        if mask.len() != t {
            return Err(Error::Shape(format!("padding mask has {} entries for {t} tokens", mask.len())));
        }
        if mask.iter().any(|&keep| !keep) {
            let row: Vec<T> = mask
                .iter()
                .map(|&keep| if keep { T::zero() } else { T::of(PADDED_LOGIT) })
                .collect();
            let bias = Tensor::new(&[t], row)?;
            logits = logits.add_broadcast(&bias)?;
        }
    }
    let probs = logits.softmax(2)?;
    let out = probs
        .matmul(&v)?
        .reshape(&[b, h, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, d])?
        .matmul(w.p("attn.wo"))?;
    let (out, scores) = if x.rank() == 2 {
        (out.reshape(&[t, d])?, probs.reshape(&[h, t, t])?)
    } else {
        (out, probs.reshape(&[b, h, t, t])?)
    };
    Ok((out, scores))
}

/// One pre-norm residual block; see the module docs for the layout.
pub fn block_forward<T: Real>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    padding_mask: Option<&[bool]>,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    let (attn, scores) = multi_head_attention(&w.norm(x, "norm1")?, w, padding_mask)?;
    let h = x.add(&attn)?;
    let y = h.add(&w.ffn(&w.norm(&h, "norm2")?)?)?;
    Ok((
        y.clone(),
        AttentionTrace {
            scores,
            post_attention: h,
            post_ffn: y,
        },
    ))
}
