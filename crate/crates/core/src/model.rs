//! Model configuration and parameter assembly.
//!
//! The backbone (text layers, vision layers, position tables, projections,
//! embedding table) is *frozen*: it is derived deterministically from
//! `backbone_seed` and never updated. The trainable state is exactly the
//! prompt block `P_t`, the fusion blocks, and the text-to-vision projection
//! `F` — nothing else — and its census is closed-form checkable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AffineParams, EncoderLayerParams, FusionBlockParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared embedding/feature width `d` of both encoders.
    pub embed_dim: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub ffn_multiplier: usize,
    /// Token budget per knowledge sequence (BOS + content + EOS + padding).
    pub context_len: usize,
    /// Number of learnable prompt tokens `M` (0 disables prompting).
    pub prompt_len: usize,
    /// Number of leading text layers that receive attribute fusion, `J`
    /// (0 disables fusion; `J = 1` is fusion at initialisation only).
    pub inject_depth: usize,
    /// Patch tokens per synthetic image.
    pub patches: usize,
    /// Whether prompt tokens are projected into the vision encoder.
    pub vision_prompts: bool,
    /// Softmax temperature for class probabilities (fixed, not trained).
    pub temperature: f64,
    /// Weight of the L1 feature-consistency term.
    pub lambda_text: f64,
    /// Length of every encoder output feature. Direction carries all the
    /// class information (similarities are cosine, so accuracy ignores this
    /// value); the length fixes the exchange rate between the consistency
    /// term and cross-entropy, and the default puts the two at comparable
    /// size at `lambda_text = 25` on the default task.
    pub feature_scale: f64,
    pub ln_eps: f64,
    /// Seed for every frozen parameter. Training seeds never touch these.
    pub backbone_seed: u64,
    /// Std of the prompt-token init.
    pub prompt_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            heads: 4,
            text_layers: 4,
            vision_layers: 4,
            ffn_multiplier: 4,
            context_len: 16,
            prompt_len: 6,
            inject_depth: 3, // ceil(0.75 · text_layers)
            patches: 16,
            vision_prompts: true,
            temperature: 0.01,
            lambda_text: 25.0,
            feature_scale: 0.08,
            ln_eps: 1e-5,
            backbone_seed: 7_310_000,
            prompt_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.inject_depth > self.text_layers {
            return Err(Error::Config(format!(
                "inject depth {} exceeds {} text layers",
                self.inject_depth, self.text_layers
            )));
        }
        if self.context_len < 3 {
            return Err(Error::Config(
                "context must fit at least BOS, one token and EOS".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.lambda_text < 0.0 {
            return Err(Error::Config(format!(
                "lambda {} must be non-negative",
                self.lambda_text
            )));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config(format!(
                "feature scale {} must be positive and finite",
                self.feature_scale
            )));
        }
        if self.patches == 0 {
            return Err(Error::Config("need at least one image patch".into()));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("ffn multiplier must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.embed_dim * self.ffn_multiplier
    }
}

/// Distinct deterministic RNG streams per parameter group.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}


/// Which parameter groups enter a graph as trainable leaves. The backbone is
/// *never* trainable; `train_embeddings` exists solely for gradient checks of
/// the embedding lookup and is off everywhere else.
#[derive(Debug, Clone, Copy)]
pub struct BindOptions {
    pub train_prompt: bool,
    pub train_blocks: bool,
    pub train_t2v: bool,
    pub train_embeddings: bool,
}

impl BindOptions {
    pub fn training() -> Self {
        BindOptions {
            train_prompt: true,
            train_blocks: true,
            train_t2v: true,
            train_embeddings: false,
        }
    }

    /// Everything frozen — forward evaluation only.
    pub fn frozen() -> Self {
        BindOptions {
            train_prompt: false,
            train_blocks: false,
            train_t2v: false,
            train_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBackbone {
    pub layers: Vec<EncoderLayerParams>,
    /// Position rows for token slots `0..context_len`; prompt tokens carry
    /// no position so knowledge tokens keep their frozen-path slots.
    pub pos: Tensor,
    /// Feature projection applied to the EOS-position state.
    pub proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionBackbone {
    pub cls_token: Tensor,
    pub layers: Vec<EncoderLayerParams>,
    /// Position rows for `[cls] + patches`; appended prompts carry none.
    pub pos: Tensor,
    pub proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    /// Learnable prompt tokens `P_t`, shared across all classes.
    pub prompt: Tensor,
    /// One fusion block per injected layer (`inject_depth` of them),
    /// parameters independent across depth.
    pub blocks: Vec<FusionBlockParams>,
    /// Text-to-vision prompt projection `F`.
    pub t2v: AffineParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub text: TextBackbone,
    pub vision: VisionBackbone,
    pub trainable: TrainableParams,
}

impl Model {
    /// Build a model: frozen pieces from `cfg.backbone_seed`, trainable
    /// pieces from `train_seed` (so different experiment seeds start from
    /// different prompts but identical backbones).
    pub fn new(cfg: &ModelConfig, train_seed: u64) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.ffn_hidden();
        let std = 1.0 / (d as f64).sqrt();

        let noise = 0.25 * std;
        let mut rng = stream(cfg.backbone_seed, 1);
        let mut text_layers = Vec::with_capacity(cfg.text_layers);
        for _ in 0..cfg.text_layers {
            text_layers.push(EncoderLayerParams::init_aligned(
                d, cfg.heads, hidden, cfg.ln_eps, std, noise, &mut rng,
            )?);
        }
        // Feature projections start near the identity for the same reason
        // the value paths do (see AttnParams::init_aligned): a pretrained
        // dual encoder is useful zero-shot because its two feature spaces
        // already align, and a fully random projection would destroy the
        // shared-anchor alignment the synthetic data provides. proj is drawn
        // before pos so that growing context_len only extends the position
        // table: the shorter table is a bit-exact prefix of the longer one
        // and every other frozen tensor is unchanged.
        let proj = Tensor::eye_plus_noise(d, noise, &mut rng);
        let text = TextBackbone {
            layers: text_layers,
            pos: Tensor::randn_using(&[cfg.context_len, d], std, &mut rng),
            proj,
        };

        let mut rng = stream(cfg.backbone_seed, 2);
        let mut vision_layers = Vec::with_capacity(cfg.vision_layers);
        for _ in 0..cfg.vision_layers {
            vision_layers.push(EncoderLayerParams::init_aligned(
                d, cfg.heads, hidden, cfg.ln_eps, std, noise, &mut rng,
            )?);
        }
        let cls_token = Tensor::randn_using(&[1, d], std, &mut rng);
        let proj = Tensor::eye_plus_noise(d, noise, &mut rng); // before pos, as above
        let vision = VisionBackbone {
            cls_token,
            layers: vision_layers,
            pos: Tensor::randn_using(&[1 + cfg.patches, d], std, &mut rng),
            proj,
        };

        let mut rng = stream(train_seed, 3);
        let prompt = Tensor::randn_using(&[cfg.prompt_len, d], cfg.prompt_init_std, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.inject_depth);
        for _ in 0..cfg.inject_depth {
            blocks.push(FusionBlockParams::init(
                d, cfg.heads, hidden, cfg.ln_eps, std, &mut rng,
            )?);
        }
        let trainable = TrainableParams {
            prompt,
            blocks,
            t2v: AffineParams::identity(d),
        };

        Ok(Model {
            cfg: cfg.clone(),
            text,
            vision,
            trainable,
        })
    }

    /// Exact count of trainable scalars:
    /// `|P_t| + Σ|blocks| + |F|` (F only while vision prompts are enabled).
    pub fn trainable_param_count(&self) -> usize {
        let f = if self.cfg.vision_prompts {
            self.trainable.t2v.num_params()
        } else {
            0
        };
        self.trainable.prompt.numel()
            + self
                .trainable
                .blocks
                .iter()
                .map(|b| b.num_params())
                .sum::<usize>()
            + f
    }

    /// Named views of every trainable tensor, in a fixed documented order:
    /// prompt, blocks (by depth, parameters within each block in declaration
    /// order), then the projection.
    pub fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("prompt".to_string(), &self.trainable.prompt));
        for (i, b) in self.trainable.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), &mut out);
        }
        if self.cfg.vision_prompts {
            self.trainable.t2v.collect("t2v", &mut out);
        }
        out
    }

    pub fn named_trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("prompt".to_string(), &mut self.trainable.prompt));
        for (i, b) in self.trainable.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("blocks.{i}"), &mut out);
        }
        if self.cfg.vision_prompts {
            self.trainable.t2v.collect_mut("t2v", &mut out);
        }
        out
    }

    /// Named views of every frozen tensor (for isolation checks).
    pub fn named_frozen(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.text.layers.iter().enumerate() {
            l.collect(&format!("text.layers.{i}"), &mut out);
        }
        out.push(("text.pos".into(), &self.text.pos));
        out.push(("text.proj".into(), &self.text.proj));
        out.push(("vision.cls".into(), &self.vision.cls_token));
        for (i, l) in self.vision.layers.iter().enumerate() {
            l.collect(&format!("vision.layers.{i}"), &mut out);
        }
        out.push(("vision.pos".into(), &self.vision.pos));
        out.push(("vision.proj".into(), &self.vision.proj));
        out
    }
}
