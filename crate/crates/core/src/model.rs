//! The composed classifier: a ViT encoder with an optional inserted stage
//! (adapter → frozen language-model block(s) → adapter), a final norm and a
//! linear head on the CLS token.
//!
//! ```text
//! image → patches → [CLS; tokens] + pos → encoder blocks ─┬→ norm → head(CLS)
//!                                     stage inserted here ┘ (tail, middle or head)
//! stage = adapter_out ∘ block_n ∘ … ∘ block_1 ∘ adapter_in
//! ```
//!
//! Each ablation arm chooses what sits in the stage and which of its
//! parameters are trainable; see [`Arm`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::{self, Activation, AttentionTrace, BlockWeights, Init, Variant, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::io::mock_llm;
use crate::tensor::{concat, no_grad, Real, Tensor};

/// One column of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Plain ViT, no stage.
    Baseline,
    /// Adapters around supplied language-model blocks, blocks frozen.
    PlusLlm,
    /// Adapters around GELU + LayerNorm instead of a block.
    PlusMlp,
    /// Adapters around freshly drawn random blocks, blocks frozen.
    PlusRandomLlm,
    /// Same as `PlusLlm` with the blocks trained too.
    PlusLlmFt,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::PlusLlm, Arm::PlusMlp, Arm::PlusRandomLlm, Arm::PlusLlmFt];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::PlusLlm => "plus_llm",
            Arm::PlusMlp => "plus_mlp",
            Arm::PlusRandomLlm => "plus_random_llm",
            Arm::PlusLlmFt => "plus_llm_ft",
        }
    }

    pub fn needs_llm_source(self) -> bool {
        matches!(self, Arm::PlusLlm | Arm::PlusLlmFt)
    }

    pub fn has_llm_blocks(self) -> bool {
        matches!(self, Arm::PlusLlm | Arm::PlusLlmFt | Arm::PlusRandomLlm)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

/// Where the stage sits relative to the encoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertPosition {
    /// After the last encoder block.
    Tail,
    /// After block `⌊depth/2⌋`.
    Middle,
    /// Before the first encoder block.
    Head,
}

impl InsertPosition {
    pub fn index(self, depth: usize) -> usize {
        match self {
            InsertPosition::Tail => depth,
            InsertPosition::Middle => depth / 2,
            InsertPosition::Head => 0,
        }
    }
}

impl fmt::Display for InsertPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InsertPosition::Tail => "tail",
            InsertPosition::Middle => "middle",
            InsertPosition::Head => "head",
        })
    }
}

impl FromStr for InsertPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tail" => Ok(InsertPosition::Tail),
            "middle" => Ok(InsertPosition::Middle),
            "head" => Ok(InsertPosition::Head),
            other => Err(Error::Config(format!("unknown insert position {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_hidden: usize,
    pub llm_dim: usize,
    pub llm_heads: usize,
    pub llm_ffn_hidden: usize,
    pub llm_variant: Variant,
    pub llm_activation: Activation,
    pub arm: Arm,
    pub n_llm_blocks: usize,
    pub insert_position: InsertPosition,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: 32×32 single-channel images, 64 patch tokens.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            encoder_dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            encoder_mlp_hidden: 256,
            llm_dim: 128,
            llm_heads: 4,
            llm_ffn_hidden: 256,
            llm_variant: Variant::Llama,
            llm_activation: Activation::Gelu,
            arm: Arm::Baseline,
            n_llm_blocks: 1,
            insert_position: InsertPosition::Tail,
            n_classes: 4,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for exhaustive gradient checks.
    pub fn micro(arm: Arm) -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            encoder_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            encoder_mlp_hidden: 16,
            llm_dim: 8,
            llm_heads: 2,
            llm_ffn_hidden: 16,
            llm_variant: Variant::Llama,
            llm_activation: Activation::Gelu,
            arm,
            n_llm_blocks: 1,
            insert_position: InsertPosition::Tail,
            n_classes: 3,
        }
    }

    pub fn with_arm(mut self, arm: Arm) -> Self {
        self.arm = arm;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return fail(format!(
                "encoder_dim {} must be divisible by encoder_heads {}",
                self.encoder_dim, self.encoder_heads
            ));
        }
        if self.llm_heads == 0 || self.llm_dim % self.llm_heads != 0 {
            return fail(format!("llm_dim {} must be divisible by llm_heads {}", self.llm_dim, self.llm_heads));
        }
        if self.channels == 0 || self.encoder_depth == 0 || self.encoder_mlp_hidden == 0 || self.llm_ffn_hidden == 0 {
            return fail("channels, encoder_depth and hidden sizes must be positive".into());
        }
        if self.n_llm_blocks == 0 {
            return fail("n_llm_blocks must be at least 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let fields: [(&str, String); 16] = [
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("encoder_dim", self.encoder_dim.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("encoder_mlp_hidden", self.encoder_mlp_hidden.to_string()),
            ("llm_dim", self.llm_dim.to_string()),
            ("llm_heads", self.llm_heads.to_string()),
            ("llm_ffn_hidden", self.llm_ffn_hidden.to_string()),
            ("llm_variant", self.llm_variant.to_string()),
            ("llm_activation", self.llm_activation.to_string()),
            ("arm", self.arm.to_string()),
            ("n_llm_blocks", self.n_llm_blocks.to_string()),
            ("insert_position", self.insert_position.to_string()),
            ("n_classes", self.n_classes.to_string()),
        ];
        fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` pairs over the defaults. Unknown keys are rejected.
    pub fn from_kv(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            let num = || v.parse::<usize>().map_err(|_| Error::Config(format!("{k}={v} is not an integer")));
            match k.as_str() {
                "image_size" => c.image_size = num()?,
                "patch_size" => c.patch_size = num()?,
                "channels" => c.channels = num()?,
                "encoder_dim" => c.encoder_dim = num()?,
                "encoder_depth" => c.encoder_depth = num()?,
                "encoder_heads" => c.encoder_heads = num()?,
                "encoder_mlp_hidden" => c.encoder_mlp_hidden = num()?,
                "llm_dim" => c.llm_dim = num()?,
                "llm_heads" => c.llm_heads = num()?,
                "llm_ffn_hidden" => c.llm_ffn_hidden = num()?,
                "llm_variant" => c.llm_variant = v.parse()?,
                "llm_activation" => c.llm_activation = v.parse()?,
                "arm" => c.arm = v.parse()?,
                "n_llm_blocks" => c.n_llm_blocks = num()?,
                "insert_position" => c.insert_position = v.parse()?,
                "n_classes" => c.n_classes = num()?,
                other => return Err(Error::Config(format!("unknown model config key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Points in the forward pass whose token features are captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TracePoint {
    /// Features entering the stage (last encoder block output for the baseline).
    Encoder,
    /// After the first adapter.
    L1,
    /// After the attention sub-layer of the last inserted block.
    LlmAttn,
    /// After the feedforward sub-layer of the last inserted block.
    LlmFfn,
    /// After the second adapter.
    L2,
}

impl TracePoint {
    pub const ALL: [TracePoint; 5] =
        [TracePoint::Encoder, TracePoint::L1, TracePoint::LlmAttn, TracePoint::LlmFfn, TracePoint::L2];

    pub fn name(self) -> &'static str {
        match self {
            TracePoint::Encoder => "encoder",
            TracePoint::L1 => "l1",
            TracePoint::LlmAttn => "llm_attn",
            TracePoint::LlmFfn => "llm_ffn",
            TracePoint::L2 => "l2",
        }
    }
}

impl fmt::Display for TracePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TracePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TracePoint::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected encoder, l1, llm_attn, llm_ffn or l2")))
    }
}

/// Token features and CLS attention captured during one forward pass.
///
/// Feature tensors are `[tokens, width]` with the CLS token in row 0; the
/// attention vectors cover visual tokens only.
#[derive(Debug, Clone)]
pub struct TraceBundle<T: Real = f32> {
    pub z_encoder: Tensor<T>,
    pub z_l1: Option<Tensor<T>>,
    pub z_attn: Option<Tensor<T>>,
    pub z_ffn: Option<Tensor<T>>,
    pub z_l2: Option<Tensor<T>>,
    /// CLS row leaving the stage (leaving the encoder when there is none).
    pub cls_final: Vec<T>,
    /// Head-summed CLS→visual attention of the last attention layer,
    /// renormalized over visual columns.
    pub w: Vec<T>,
    /// `[heads][visual]` raw CLS→visual attention; each row sums to at most 1.
    pub per_head_w: Vec<Vec<T>>,
    /// Patch grid side length.
    pub grid: usize,
}

impl<T: Real> TraceBundle<T> {
    pub fn features(&self, point: TracePoint) -> Option<&Tensor<T>> {
        match point {
            TracePoint::Encoder => Some(&self.z_encoder),
            TracePoint::L1 => self.z_l1.as_ref(),
            TracePoint::LlmAttn => self.z_attn.as_ref(),
            TracePoint::LlmFfn => self.z_ffn.as_ref(),
            TracePoint::L2 => self.z_l2.as_ref(),
        }
    }

    /// Trace points that carry features.
    pub fn available(&self) -> Vec<TracePoint> {
        TracePoint::ALL.into_iter().filter(|&p| self.features(p).is_some()).collect()
    }
}

/// Affine map `x · W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::new(&[fan_in, fan_out], blocks::draw(rng, Init::Uniform, fan_in, fan_in * fan_out))
                .expect("shape matches draw count")
                .with_requires_grad(true),
            bias: Tensor::new(&[fan_out], blocks::draw(rng, Init::Uniform, fan_in, fan_out))
                .expect("shape matches draw count")
                .with_requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_broadcast(&self.bias)
    }
}

/// What sits between the adapters.
#[derive(Debug, Clone)]
pub enum Stage<T: Real = f32> {
    None,
    Blocks {
        adapter_in: Linear<T>,
        blocks: Vec<BlockWeights<T>>,
        adapter_out: Linear<T>,
    },
    /// GELU then LayerNorm between the adapters.
    Bridge {
        adapter_in: Linear<T>,
        norm_weight: Tensor<T>,
        norm_bias: Tensor<T>,
        adapter_out: Linear<T>,
    },
    /// A single bias-free `[encoder_dim, encoder_dim]` map applied per token.
    Linearized { map: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub patch_embed: Linear<T>,
    pub pos_embed: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub encoder: Vec<BlockWeights<T>>,
    pub stage: Stage<T>,
    pub final_norm_weight: Tensor<T>,
    pub final_norm_bias: Tensor<T>,
    pub head: Linear<T>,
}

/// Everything captured while running the stage.
struct StageTrace<T: Real> {
    z_in: Tensor<T>,
    z_l1: Option<Tensor<T>>,
    last_block: Option<AttentionTrace<T>>,
    z_l2: Tensor<T>,
}

struct Capture<T: Real> {
    stage: Option<StageTrace<T>>,
    /// Encoder output when the model has no stage.
    encoder_out: Option<Tensor<T>>,
    last_encoder_scores: Option<Tensor<T>>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_init<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
        .expect("shape matches sample count")
        .with_requires_grad(true)
}

/// Seed for the random blocks of [`Arm::PlusRandomLlm`], derived from the build seed.
pub fn random_llm_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

impl<T: Real> Model<T> {
    /// Deterministically initializes a model for `config.arm`.
    ///
    /// Encoder, embedding and head weights depend only on `seed`, so every
    /// arm built from the same seed starts from the same encoder. For arms
    /// that wrap supplied blocks, the block width (and head count, hidden
    /// size, variant) is taken from `llm_source`, overriding the config.
    pub fn build(config: &ModelConfig, llm_source: Option<Vec<BlockWeights<T>>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        let c = &config;
        let (e, n) = (c.encoder_dim, c.n_patches());

        let mut rng = seeded(seed, 0);
        let patch_embed = Linear::uniform(&mut rng, c.patch_len(), e);
        let pos_embed = normal_init(&mut rng, &[n, e], 0.02);
        let cls_token = normal_init(&mut rng, &[1, e], 0.02);
        let mut encoder = Vec::with_capacity(c.encoder_depth);
        for _ in 0..c.encoder_depth {
            let mut b = BlockWeights::random(Variant::Vit, e, c.encoder_heads, c.encoder_mlp_hidden, Init::Uniform, &mut rng)?;
            b.set_trainable(true);
            encoder.push(b);
        }
        let head = Linear::uniform(&mut rng, e, c.n_classes);
        let final_norm_weight = Tensor::full(&[e], T::one()).with_requires_grad(true);
        let final_norm_bias = Tensor::<T>::zeros(&[e]).with_requires_grad(true);

        let blocks = match config.arm {
            Arm::Baseline | Arm::PlusMlp => None,
            Arm::PlusLlm | Arm::PlusLlmFt => {
                let source = llm_source.ok_or_else(|| {
                    Error::Config(format!("arm {} requires language-model block weights", config.arm))
                })?;
                if source.len() < config.n_llm_blocks {
                    return Err(Error::Config(format!(
                        "arm {} needs {} blocks, source provides {}",
                        config.arm,
                        config.n_llm_blocks,
                        source.len()
                    )));
                }
                let mut blocks: Vec<_> = source.into_iter().take(config.n_llm_blocks).collect();
                let first = &blocks[0];
                let (dim, heads, hidden, variant) = (first.dim, first.n_heads, first.hidden, first.variant);
                if blocks.iter().any(|b| b.dim != dim || b.variant != variant) {
                    return Err(Error::Config("all inserted blocks must share width and variant".into()));
                }
                config.llm_dim = dim;
                config.llm_heads = heads;
                config.llm_ffn_hidden = hidden;
                config.llm_variant = variant;
                config.llm_activation = first.activation;
                let trainable = config.arm == Arm::PlusLlmFt;
                blocks.iter_mut().for_each(|b| b.set_trainable(trainable));
                Some(blocks)
            }
            Arm::PlusRandomLlm => {
                let mut blocks = mock_llm::<T>(
                    random_llm_seed(seed),
                    config.llm_dim,
                    config.llm_heads,
                    config.llm_ffn_hidden,
                    config.llm_variant,
                    config.n_llm_blocks,
                )?;
                blocks.iter_mut().for_each(|b| {
                    b.activation = config.llm_activation;
                    b.set_trainable(false)
                });
                Some(blocks)
            }
        };

        let mut stage_rng = seeded(seed, 1);
        let l = config.llm_dim;
        let stage = match (config.arm, blocks) {
            (Arm::Baseline, _) => Stage::None,
            (Arm::PlusMlp, _) => Stage::Bridge {
                adapter_in: Linear::uniform(&mut stage_rng, e, l),
                norm_weight: Tensor::full(&[l], T::one()).with_requires_grad(true),
                norm_bias: Tensor::<T>::zeros(&[l]).with_requires_grad(true),
                adapter_out: Linear::uniform(&mut stage_rng, l, e),
            },
            (_, Some(blocks)) => Stage::Blocks {
                adapter_in: Linear::uniform(&mut stage_rng, e, l),
                blocks,
                adapter_out: Linear::uniform(&mut stage_rng, l, e),
            },
            (arm, None) => unreachable!("arm {arm} always yields blocks"),
        };

        Ok(Model {
            config,
            patch_embed,
            pos_embed,
            cls_token,
            encoder,
            stage,
            final_norm_weight,
            final_norm_bias,
            head,
        })
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("pos_embed".into(), &self.pos_embed),
            ("cls_token".into(), &self.cls_token),
        ];
        for (i, b) in self.encoder.iter().enumerate() {
            out.extend(b.params().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        match &self.stage {
            Stage::None => {}
            Stage::Blocks { adapter_in, blocks, adapter_out } => {
                out.push(("adapter_in.weight".into(), &adapter_in.weight));
                out.push(("adapter_in.bias".into(), &adapter_in.bias));
                for (i, b) in blocks.iter().enumerate() {
                    out.extend(b.params().map(|(n, t)| (format!("llm.{i}.{n}"), t)));
                }
                out.push(("adapter_out.weight".into(), &adapter_out.weight));
                out.push(("adapter_out.bias".into(), &adapter_out.bias));
            }
            Stage::Bridge { adapter_in, norm_weight, norm_bias, adapter_out } => {
                out.push(("adapter_in.weight".into(), &adapter_in.weight));
                out.push(("adapter_in.bias".into(), &adapter_in.bias));
                out.push(("bridge_norm.weight".into(), norm_weight));
                out.push(("bridge_norm.bias".into(), norm_bias));
                out.push(("adapter_out.weight".into(), &adapter_out.weight));
                out.push(("adapter_out.bias".into(), &adapter_out.bias));
            }
            Stage::Linearized { map } => out.push(("linear_stage.map".into(), map)),
        }
        out.push(("final_norm.weight".into(), &self.final_norm_weight));
        out.push(("final_norm.bias".into(), &self.final_norm_bias));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable counterpart of [`Model::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_embed.weight),
            ("patch_embed.bias".into(), &mut self.patch_embed.bias),
            ("pos_embed".into(), &mut self.pos_embed),
            ("cls_token".into(), &mut self.cls_token),
        ];
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.extend(b.params_mut().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        match &mut self.stage {
            Stage::None => {}
            Stage::Blocks { adapter_in, blocks, adapter_out } => {
                out.push(("adapter_in.weight".into(), &mut adapter_in.weight));
                out.push(("adapter_in.bias".into(), &mut adapter_in.bias));
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.extend(b.params_mut().map(|(n, t)| (format!("llm.{i}.{n}"), t)));
                }
                out.push(("adapter_out.weight".into(), &mut adapter_out.weight));
                out.push(("adapter_out.bias".into(), &mut adapter_out.bias));
            }
            Stage::Bridge { adapter_in, norm_weight, norm_bias, adapter_out } => {
                out.push(("adapter_in.weight".into(), &mut adapter_in.weight));
                out.push(("adapter_in.bias".into(), &mut adapter_in.bias));
                out.push(("bridge_norm.weight".into(), norm_weight));
                out.push(("bridge_norm.bias".into(), norm_bias));
                out.push(("adapter_out.weight".into(), &mut adapter_out.weight));
                out.push(("adapter_out.bias".into(), &mut adapter_out.bias));
            }
            Stage::Linearized { map } => out.push(("linear_stage.map".into(), map)),
        }
        out.push(("final_norm.weight".into(), &mut self.final_norm_weight));
        out.push(("final_norm.bias".into(), &mut self.final_norm_bias));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_params().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    pub fn frozen_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_params().into_iter().filter(|(_, t)| !t.requires_grad()).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        self.named_params().iter().for_each(|(_, t)| t.zero_grad());
    }

    /// Replaces every parameter by a tensor of the same name from `tensors`,
    /// keeping each parameter's gradient flag unless `frozen` lists it.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor<T>>, frozen: Option<&[String]>) -> Result<()> {
        for (name, slot) in self.named_params_mut() {
            let src = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name:?}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            let trainable = match frozen {
                Some(list) => !list.contains(&name),
                None => slot.requires_grad(),
            };
            *slot = src.with_requires_grad(trainable);
        }
        Ok(())
    }

    /// `[C, H, W]` (or `[B, C, H, W]`) pixels to `[.., patches, C·p·p]` constants.
    fn patchify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let (s, p, ch) = (c.image_size, c.patch_size, c.channels);
        let want = [ch, s, s];
        let batch = match images.shape() {
            sh if sh == want => None,
            [b, rest @ ..] if rest == want => Some(*b),
            sh => {
                return Err(Error::Shape(format!(
                    "image shape {sh:?} does not match configured [{ch}, {s}, {s}]"
                )))
            }
        };
        let (g, plen) = (c.grid(), c.patch_len());
        let src = images.data();
        let per_image = ch * s * s;
        let mut out = Vec::with_capacity(images.len());
        for img in src.chunks_exact(per_image) {
            for gy in 0..g {
                for gx in 0..g {
                    for cc in 0..ch {
                        for py in 0..p {
                            let row = cc * s * s + (gy * p + py) * s + gx * p;
                            out.extend_from_slice(&img[row..row + p]);
                        }
                    }
                }
            }
        }
        let shape = match batch {
            None => vec![g * g, plen],
            Some(b) => vec![b, g * g, plen],
        };
        Tensor::new(&shape, out)
    }

    fn run_stage(&self, x: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Option<StageTrace<T>>)> {
        let trace = |z_l1, last_block, z_l2: &Tensor<T>| {
            capture.then(|| StageTrace {
                z_in: x.clone(),
                z_l1,
                last_block,
                z_l2: z_l2.clone(),
            })
        };
        match &self.stage {
            Stage::None => Ok((x.clone(), None)),
            Stage::Blocks { adapter_in, blocks, adapter_out } => {
                let z1 = adapter_in.forward(x)?;
                let mut h = z1.clone();
                let mut last = None;
                for b in blocks {
                    let (y, t) = blocks::block_forward(&h, b, None)?;
                    h = y;
                    last = Some(t);
                }
                let z2 = adapter_out.forward(&h)?;
                let t = trace(Some(z1), last, &z2);
                Ok((z2, t))
            }
            Stage::Bridge { adapter_in, norm_weight, norm_bias, adapter_out } => {
                let z1 = adapter_in.forward(x)?;
                let h = z1.gelu().layer_norm(norm_weight, norm_bias, LAYER_NORM_EPS)?;
                let z2 = adapter_out.forward(&h)?;
                let t = trace(Some(z1), None, &z2);
                Ok((z2, t))
            }
            Stage::Linearized { map } => {
                let z2 = x.matmul(map)?;
                let t = trace(None, None, &z2);
                Ok((z2, t))
            }
        }
    }

    /// Applies only the inserted stage to arbitrary `[tokens, encoder_dim]` features.
    pub fn apply_stage(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run_stage(tokens, false)?.0)
    }

    /// Shared forward; handles `[C,H,W]` and `[B,C,H,W]` input.
    fn run(&self, images: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Option<Capture<T>>)> {
        let c = &self.config;
        let patches = self.patchify(images)?;
        let batched = patches.rank() == 3;
        let tok_axis = patches.rank() - 2;
        let tokens = self
            .patch_embed
            .forward(&patches)?
            .add_broadcast(&self.pos_embed)?;
        let cls = if batched {
            Tensor::zeros(&[patches.shape()[0], 1, c.encoder_dim]).add_broadcast(&self.cls_token)?
        } else {
            self.cls_token.clone()
        };
        let mut x = concat(&[&cls, &tokens], tok_axis)?;

        let insert_at = match self.stage {
            Stage::None => usize::MAX,
            _ => c.insert_position.index(c.encoder_depth),
        };
        let mut stage_trace = None;
        let mut last_scores = None;
        for i in 0..=self.encoder.len() {
            if i == insert_at {
                let (y, t) = self.run_stage(&x, capture)?;
                x = y;
                stage_trace = t;
            }
            if let Some(block) = self.encoder.get(i) {
                let (y, t) = blocks::block_forward(&x, block, None)?;
                x = y;
                last_scores = Some(t.scores);
            }
        }
        let capture = capture.then(|| Capture {
            encoder_out: stage_trace.is_none().then(|| x.clone()),
            stage: stage_trace,
            last_encoder_scores: last_scores,
        });
        let normed = x.layer_norm(&self.final_norm_weight, &self.final_norm_bias, LAYER_NORM_EPS)?;
        let cls_out = normed.slice(tok_axis, 0, 1)?;
        let logits = self.head.forward(&cls_out)?;
        let logits = if batched {
            logits.reshape(&[patches.shape()[0], c.n_classes])?
        } else {
            logits.reshape(&[c.n_classes])?
        };
        Ok((logits, capture))
    }

    /// Class logits `[n_classes]` for one `[C, H, W]` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!("forward expects [C, H, W], got {:?}", image.shape())));
        }
        Ok(self.run(image, false)?.0)
    }

    /// Logits `[batch, n_classes]` for `[batch, C, H, W]` images.
    pub fn forward_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("forward_batch expects [B, C, H, W], got {:?}", images.shape())));
        }
        Ok(self.run(images, false)?.0)
    }

    /// Forward pass that also returns every captured feature. Trace tensors
    /// are the live graph nodes, so gradients can be probed on them.
    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<(Tensor<T>, TraceBundle<T>)> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!("forward_traced expects [C, H, W], got {:?}", image.shape())));
        }
        let (logits, cap) = self.run(image, true)?;
        let bundle = self.bundle(cap.expect("capture requested"), None)?;
        Ok((logits, bundle))
    }

    /// Batched tracing without gradient recording. Returns logits
    /// `[batch, n_classes]` and one detached bundle per image.
    pub fn forward_traced_batch(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<TraceBundle<T>>)> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("expected [B, C, H, W], got {:?}", images.shape())));
        }
        no_grad(|| {
            let (logits, cap) = self.run(images, true)?;
            let cap = cap.expect("capture requested");
            let bundles = (0..images.shape()[0])
                .map(|i| self.bundle(select_capture(&cap, i)?, Some(i)))
                .collect::<Result<Vec<_>>>()?;
            Ok((logits, bundles))
        })
    }

    fn bundle(&self, cap: Capture<T>, _index: Option<usize>) -> Result<TraceBundle<T>> {
        let (z_encoder, z_l1, z_attn, z_ffn, z_l2, llm_scores) = match cap.stage {
            Some(s) => {
                let (attn, ffn, scores) = match s.last_block {
                    Some(b) => (Some(b.post_attention), Some(b.post_ffn), Some(b.scores)),
                    None => (None, None, None),
                };
                (s.z_in, s.z_l1, attn, ffn, Some(s.z_l2), scores)
            }
            None => (
                cap.encoder_out.expect("encoder output captured without stage"),
                None,
                None,
                None,
                None,
                None,
            ),
        };
        let scores = llm_scores
            .or(cap.last_encoder_scores)
            .ok_or_else(|| Error::Contract("model has no attention layer to trace".into()))?;
        let (heads, t) = (scores.shape()[0], scores.shape()[1]);
        let sd = scores.data();
        let per_head_w: Vec<Vec<T>> = (0..heads).map(|h| sd[h * t * t + 1..h * t * t + t].to_vec()).collect();
        let mut w: Vec<T> = (0..t - 1).map(|v| per_head_w.iter().map(|row| row[v]).sum()).collect();
        let total: T = w.iter().copied().sum();
        if total > T::zero() {
            w.iter_mut().for_each(|x| *x = *x / total);
        }
        let cls_final = match &z_l2 {
            Some(z) => z.data()[..z.shape()[1]].to_vec(),
            None => z_encoder.data()[..z_encoder.shape()[1]].to_vec(),
        };
        Ok(TraceBundle {
            z_encoder,
            z_l1,
            z_attn,
            z_ffn,
            z_l2,
            cls_final,
            w,
            per_head_w,
            grid: self.config.grid(),
        })
    }

    /// Collapses a block stage into one bias-free linear map.
    ///
    /// Each block is reduced by dropping its norms, biases and
    /// nonlinearities and letting every token attend only to itself:
    /// `M = (I + Wv·Wo)(I + Wup·Wdown)` (`fc1·fc2` for two-matrix
    /// feedforwards). The map is `Win · M₁ ⋯ Mₙ · Wout`.
    pub fn linearized_stage(&self) -> Result<Model<T>> {
        let Stage::Blocks { adapter_in, blocks, adapter_out } = &self.stage else {
            return Err(Error::Contract(format!(
                "linearized_stage needs a model with inserted blocks, arm is {}",
                self.config.arm
            )));
        };
        if self.config.arm != Arm::PlusLlm {
            return Err(Error::Contract(format!("linearized_stage needs arm plus_llm, got {}", self.config.arm)));
        }
        let mut acc = adapter_in.weight.detach();
        for b in blocks {
            let eye = Tensor::<T>::eye(b.dim);
            let p = |n: &str| b.get(n).expect("validated block").detach();
            let attn = eye.add(&p("attn.wv").matmul(&p("attn.wo"))?)?;
            let ffn = match b.variant {
                Variant::Llama => p("ffn.up").matmul(&p("ffn.down"))?,
                Variant::Vit | Variant::Opt => p("ffn.fc1.weight").matmul(&p("ffn.fc2.weight"))?,
            };
            acc = acc.matmul(&attn)?.matmul(&eye.add(&ffn)?)?;
        }
        let map = acc.matmul(&adapter_out.weight.detach())?;
        self.with_linear_stage(map)
    }

    /// Copy of this model whose stage is the given `[encoder_dim, encoder_dim]` map.
    pub fn with_linear_stage(&self, map: Tensor<T>) -> Result<Model<T>> {
        let e = self.config.encoder_dim;
        if map.shape() != [e, e] {
            return Err(Error::Shape(format!("linear stage must be [{e}, {e}], got {:?}", map.shape())));
        }
        let mut m = self.clone();
        m.stage = Stage::Linearized { map: map.detach() };
        Ok(m)
    }

    pub fn is_linearized(&self) -> bool {
        matches!(self.stage, Stage::Linearized { .. })
    }
}

/// Slices image `i` out of a batched capture as detached `[tokens, width]` tensors.
fn select_capture<T: Real>(cap: &Capture<T>, i: usize) -> Result<Capture<T>> {
    let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let s = t.shape();
        let per: usize = s[1..].iter().product();
        Tensor::new(&s[1..], t.data()[i * per..(i + 1) * per].to_vec())
    };
    let stage = match &cap.stage {
        None => None,
        Some(s) => Some(StageTrace {
            z_in: pick(&s.z_in)?,
            z_l1: s.z_l1.as_ref().map(pick).transpose()?,
            last_block: s
                .last_block
                .as_ref()
                .map(|b| -> Result<AttentionTrace<T>> {
                    Ok(AttentionTrace {
                        scores: pick(&b.scores)?,
                        post_attention: pick(&b.post_attention)?,
                        post_ffn: pick(&b.post_ffn)?,
                    })
                })
                .transpose()?,
            z_l2: pick(&s.z_l2)?,
        }),
    };
    Ok(Capture {
        stage,
        encoder_out: cap.encoder_out.as_ref().map(pick).transpose()?,
        last_encoder_scores: cap.last_encoder_scores.as_ref().map(pick).transpose()?,
    })
}
