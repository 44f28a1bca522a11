//! Neural building blocks composed from tape primitives.
//!
//! Parameter structs own plain [`Tensor`] values; `bind` inserts them into a
//! [`Graph`] as leaves (trainable or frozen) and returns the node handles the
//! composition functions consume. Because every block is a composition of
//! primitive ops, gradients come entirely from the primitives' VJPs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Additive mask value for excluded key positions. Large enough that the
/// post-shift exponential underflows to exactly 0.0 in f64, so masked keys
/// carry *no* weight rather than merely little.
pub const MASK_VALUE: f64 = -1e30;

// ── layer norm ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LnParams {
    pub fn identity(d: usize, eps: f64) -> Self {
        LnParams {
            gain: Tensor::from_vec(&[d], vec![1.0; d]).expect("gain shape"),
            bias: Tensor::zeros(&[d]),
            eps,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLn {
        BoundLn {
            gain: g.leaf(self.gain.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            eps: self.eps,
        }
    }

    pub fn num_params(&self) -> usize {
        self.gain.numel() + self.bias.numel()
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLn {
    pub gain: NodeId,
    pub bias: NodeId,
    pub eps: f64,
}

impl BoundLn {
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        out.push((format!("{prefix}.gain"), self.gain));
        out.push((format!("{prefix}.bias"), self.bias));
    }
}

pub fn layer_norm(g: &mut Graph, x: NodeId, p: &BoundLn) -> Result<NodeId> {
    g.layer_norm(x, p.gain, p.bias, p.eps)
}

// ── multi-head attention ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub heads: usize,
}

impl AttnParams {
    /// Gaussian init with the given weight std; biases zero. Errors unless
    /// `d` divides evenly into `heads`.
    pub fn init(d: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {d} not divisible into {heads} heads"
            )));
        }
        Ok(AttnParams {
            wq: Tensor::randn_using(&[d, d], std, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn_using(&[d, d], std, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn_using(&[d, d], std, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn_using(&[d, d], std, rng),
            bo: Tensor::zeros(&[d]),
            heads,
        })
    }

    /// Init for a backbone that is supposed to behave like a *pretrained*
    /// encoder: queries and keys are random (arbitrary attention patterns)
    /// but the value and output projections sit near the identity, so
    /// attention mixes token rows without rotating their coordinates. Two
    /// such towers then stay aligned through shared input anchors, which is
    /// the property a pretrained dual encoder has and a random one lacks.
    pub fn init_aligned(
        d: usize,
        heads: usize,
        std: f64,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {d} not divisible into {heads} heads"
            )));
        }
        Ok(AttnParams {
            wq: Tensor::randn_using(&[d, d], std, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn_using(&[d, d], std, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::eye_plus_noise(d, noise, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::eye_plus_noise(d, noise, rng),
            bo: Tensor::zeros(&[d]),
            heads,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAttn {
        BoundAttn {
            wq: g.leaf(self.wq.clone(), trainable),
            bq: g.leaf(self.bq.clone(), trainable),
            wk: g.leaf(self.wk.clone(), trainable),
            bk: g.leaf(self.bk.clone(), trainable),
            wv: g.leaf(self.wv.clone(), trainable),
            bv: g.leaf(self.bv.clone(), trainable),
            wo: g.leaf(self.wo.clone(), trainable),
            bo: g.leaf(self.bo.clone(), trainable),
            heads: self.heads,
        }
    }

    pub fn num_params(&self) -> usize {
        self.wq.numel()
            + self.bq.numel()
            + self.wk.numel()
            + self.bk.numel()
            + self.wv.numel()
            + self.bv.numel()
            + self.wo.numel()
            + self.bo.numel()
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.bq"), &self.bq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.bk"), &self.bk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.bv"), &self.bv));
        out.push((format!("{prefix}.wo"), &self.wo));
        out.push((format!("{prefix}.bo"), &self.bo));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.bq"), &mut self.bq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.bk"), &mut self.bk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        out.push((format!("{prefix}.bv"), &mut self.bv));
        out.push((format!("{prefix}.wo"), &mut self.wo));
        out.push((format!("{prefix}.bo"), &mut self.bo));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttn {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub heads: usize,
}

impl BoundAttn {
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        out.push((format!("{prefix}.wq"), self.wq));
        out.push((format!("{prefix}.bq"), self.bq));
        out.push((format!("{prefix}.wk"), self.wk));
        out.push((format!("{prefix}.bk"), self.bk));
        out.push((format!("{prefix}.wv"), self.wv));
        out.push((format!("{prefix}.bv"), self.bv));
        out.push((format!("{prefix}.wo"), self.wo));
        out.push((format!("{prefix}.bo"), self.bo));
    }
}

/// Scaled dot-product attention over `heads` column blocks, then an output
/// projection. `key_mask[j] = true` excludes key/value position `j` for every
/// query. Errors if every key is masked (attention would be undefined).
///
/// Returns the `[Lq × d]` output and one `[Lq × Lk]` attention-weight node
/// per head (useful to tests; weights rows always sum to 1).
pub fn multi_head_attention_traced(
    g: &mut Graph,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    p: &BoundAttn,
    key_mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = g.value(q_in).cols();
    if d % p.heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {d} not divisible into {} heads",
            p.heads
        )));
    }
    let lq = g.value(q_in).rows();
    let lk = g.value(k_in).rows();
    if let Some(mask) = key_mask {
        if mask.len() != lk {
            return Err(Error::Usage(format!(
                "key mask of {} entries for {lk} key positions",
                mask.len()
            )));
        }
        if lk == 0 || mask.iter().all(|&m| m) {
            return Err(Error::DegenerateAttention(lk));
        }
    } else if lk == 0 {
        return Err(Error::DegenerateAttention(0));
    }

    let q = g.matmul(q_in, p.wq)?;
    let q = g.add_row(q, p.bq)?;
    let k = g.matmul(k_in, p.wk)?;
    let k = g.add_row(k, p.bk)?;
    let v = g.matmul(v_in, p.wv)?;
    let v = g.add_row(v, p.bv)?;

    let mask_node = key_mask.map(|mask| {
        let mut m = vec![0.0; lq * lk];
        for i in 0..lq {
            for (j, &masked) in mask.iter().enumerate() {
                if masked {
                    m[i * lk + j] = MASK_VALUE;
                }
            }
        }
        g.constant(Tensor::from_vec(&[lq, lk], m).expect("mask shape"))
    });

    let dh = d / p.heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
    let mut ctx_parts = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, inv_sqrt_dh)?;
        if let Some(m) = mask_node {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax_rows(scores)?;
        weights.push(attn);
        ctx_parts.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat_cols(&ctx_parts)?;
    let out = g.matmul(ctx, p.wo)?;
    let out = g.add_row(out, p.bo)?;
    Ok((out, weights))
}

pub fn multi_head_attention(
    g: &mut Graph,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    p: &BoundAttn,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    multi_head_attention_traced(g, q_in, k_in, v_in, p, key_mask).map(|(out, _)| out)
}

// ── feed-forward ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn init(d: usize, hidden: usize, std1: f64, std2: f64, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: Tensor::randn_using(&[d, hidden], std1, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn_using(&[hidden, d], std2, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFfn {
        BoundFfn {
            w1: g.leaf(self.w1.clone(), trainable),
            b1: g.leaf(self.b1.clone(), trainable),
            w2: g.leaf(self.w2.clone(), trainable),
            b2: g.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFfn {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl BoundFfn {
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        out.push((format!("{prefix}.w1"), self.w1));
        out.push((format!("{prefix}.b1"), self.b1));
        out.push((format!("{prefix}.w2"), self.w2));
        out.push((format!("{prefix}.b2"), self.b2));
    }
}

/// Two affine maps around the crate-wide GELU (see [`crate::graph::gelu`]).
pub fn ffn(g: &mut Graph, x: NodeId, p: &BoundFfn) -> Result<NodeId> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, p.w2)?;
    g.add_row(out, p.b2)
}

// ── pre-norm transformer layer ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LnParams,
    pub attn: AttnParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
}

impl EncoderLayerParams {
    pub fn init(
        d: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderLayerParams {
            ln1: LnParams::identity(d, eps),
            attn: AttnParams::init(d, heads, std, rng)?,
            ln2: LnParams::identity(d, eps),
            ffn: FfnParams::init(d, hidden, std, std, rng),
        })
    }

    /// Alignment-preserving variant for frozen backbone layers: see
    /// [`AttnParams::init_aligned`]. The FFN output map is damped to a
    /// quarter of the usual scale so its (rotating) contribution perturbs
    /// rather than swamps the residual stream.
    pub fn init_aligned(
        d: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
        std: f64,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderLayerParams {
            ln1: LnParams::identity(d, eps),
            attn: AttnParams::init_aligned(d, heads, std, noise, rng)?,
            ln2: LnParams::identity(d, eps),
            ffn: FfnParams::init(d, hidden, std, 0.25 * std, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoderLayer {
        BoundEncoderLayer {
            ln1: self.ln1.bind(g, trainable),
            attn: self.attn.bind(g, trainable),
            ln2: self.ln2.bind(g, trainable),
            ffn: self.ffn.bind(g, trainable),
        }
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params() + self.attn.num_params() + self.ln2.num_params() + self.ffn.num_params()
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ln1.collect_mut(&format!("{prefix}.ln1"), out);
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
        self.ln2.collect_mut(&format!("{prefix}.ln2"), out);
        self.ffn.collect_mut(&format!("{prefix}.ffn"), out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoderLayer {
    pub ln1: BoundLn,
    pub attn: BoundAttn,
    pub ln2: BoundLn,
    pub ffn: BoundFfn,
}

impl BoundEncoderLayer {
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

// ── fusion block (cross-attention adapter) ───────────────────────────────

/// Parameters of one attribute-fusion block: cross-attention from prompt
/// queries into knowledge keys/values, then an FFN, each behind a residual.
/// Exactly two layer-norm parameter sets: `ln_in` normalises *both* the
/// query and key/value inputs of the attention, `ln_mid` feeds the FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlockParams {
    pub ln_in: LnParams,
    pub attn: AttnParams,
    pub ln_mid: LnParams,
    pub ffn: FfnParams,
}

impl FusionBlockParams {
    /// Query/key/value maps are random but both *output* maps start at zero,
    /// so a freshly initialised block is an exact no-op on the prompt (pure
    /// residual) and training decides how much fused content to admit. A
    /// randomly initialised output map would instead inject tower-specific
    /// rotations of the knowledge rows, which training would first have to
    /// undo.
    pub fn init(
        d: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {d} not divisible into {heads} heads"
            )));
        }
        Ok(FusionBlockParams {
            ln_in: LnParams::identity(d, eps),
            attn: AttnParams {
                wq: Tensor::randn_using(&[d, d], std, rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn_using(&[d, d], std, rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn_using(&[d, d], std, rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::zeros(&[d, d]),
                bo: Tensor::zeros(&[d]),
                heads,
            },
            ln_mid: LnParams::identity(d, eps),
            ffn: FfnParams {
                w1: Tensor::randn_using(&[d, hidden], std, rng),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::zeros(&[hidden, d]),
                b2: Tensor::zeros(&[d]),
            },
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFusionBlock {
        BoundFusionBlock {
            ln_in: self.ln_in.bind(g, trainable),
            attn: self.attn.bind(g, trainable),
            ln_mid: self.ln_mid.bind(g, trainable),
            ffn: self.ffn.bind(g, trainable),
        }
    }

    pub fn num_params(&self) -> usize {
        self.ln_in.num_params()
            + self.attn.num_params()
            + self.ln_mid.num_params()
            + self.ffn.num_params()
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln_in.collect(&format!("{prefix}.ln_in"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln_mid.collect(&format!("{prefix}.ln_mid"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ln_in.collect_mut(&format!("{prefix}.ln_in"), out);
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
        self.ln_mid.collect_mut(&format!("{prefix}.ln_mid"), out);
        self.ffn.collect_mut(&format!("{prefix}.ffn"), out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFusionBlock {
    pub ln_in: BoundLn,
    pub attn: BoundAttn,
    pub ln_mid: BoundLn,
    pub ffn: BoundFfn,
}

impl BoundFusionBlock {
    /// Same order as [`FusionBlockParams::collect`] so gradient reads zip
    /// with parameter updates by name.
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        self.ln_in.collect(&format!("{prefix}.ln_in"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln_mid.collect(&format!("{prefix}.ln_mid"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

// ── affine map ───────────────────────────────────────────────────────────

/// A learnable affine map `x·W + b`, used to project text prompt tokens into
/// the vision token space.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    /// Identity map: `W = I`, `b = 0`.
    pub fn identity(d: usize) -> Self {
        AffineParams {
            w: Tensor::eye(d),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAffine {
        BoundAffine {
            w: g.leaf(self.w.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub w: NodeId,
    pub b: NodeId,
}

impl BoundAffine {
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NodeId)>) {
        out.push((format!("{prefix}.w"), self.w));
        out.push((format!("{prefix}.b"), self.b));
    }
}

/// `x·W + b` applied row-wise.
pub fn affine(g: &mut Graph, x: NodeId, p: &BoundAffine) -> Result<NodeId> {
    let y = g.matmul(x, p.w)?;
    g.add_row(y, p.b)
}

/// Pre-norm residual block: `x + MHA(LN(x))` then `· + FFN(LN(·))`.
/// Self-attention; `key_mask` excludes padded positions as keys.
pub fn encoder_layer(
    g: &mut Graph,
    x: NodeId,
    p: &BoundEncoderLayer,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let h = layer_norm(g, x, &p.ln1)?;
    let a = multi_head_attention(g, h, h, h, &p.attn, key_mask)?;
    let x1 = g.add(x, a)?;
    let h2 = layer_norm(g, x1, &p.ln2)?;
    let f = ffn(g, h2, &p.ffn)?;
    g.add(x1, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn bind_attn(g: &mut Graph, p: &AttnParams) -> BoundAttn {
        p.bind(g, false)
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        assert!(matches!(
            AttnParams::init(6, 4, 0.1, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_output_projection_gives_zero_attention_output() {
        let mut p = AttnParams::init(8, 2, 0.2, &mut rng(1)).unwrap();
        p.wo = Tensor::zeros(&[8, 8]);
        p.bo = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[3, 8], 1.0, 2), false);
        let b = bind_attn(&mut g, &p);
        let out = multi_head_attention(&mut g, x, x, x, &b, None).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_single_key_passes_value_through_output_projection() {
        // One key ⇒ softmax weight is exactly 1, so the output is the
        // projected value row through Wo; with Wo = I, bo = 0 it is v itself.
        let mut p = AttnParams::init(4, 1, 0.3, &mut rng(3)).unwrap();
        p.wo = Tensor::eye(4);
        p.bo = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let q = g.leaf(Tensor::randn(&[2, 4], 1.0, 4), false);
        let kv = g.leaf(Tensor::randn(&[1, 4], 1.0, 5), false);
        let b = bind_attn(&mut g, &p);
        let out = multi_head_attention(&mut g, q, kv, kv, &b, None).unwrap();
        // expected v = kv · wv + bv
        let kv_val = g.value(kv).clone();
        let kvn = g.leaf(kv_val, false);
        let wv = g.leaf(p.wv.clone(), false);
        let bv = g.leaf(p.bv.clone(), false);
        let v = g.matmul(kvn, wv).unwrap();
        let v = g.add_row(v, bv).unwrap();
        for row in 0..2 {
            for c in 0..4 {
                assert!((g.value(out).at(row, c) - g.value(v).at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let p = AttnParams::init(8, 4, 0.5, &mut rng(6)).unwrap();
        let mut g = Graph::new();
        let q = g.leaf(Tensor::randn(&[5, 8], 1.0, 7), false);
        let kv = g.leaf(Tensor::randn(&[7, 8], 1.0, 8), false);
        let b = bind_attn(&mut g, &p);
        let (_, weights) =
            multi_head_attention_traced(&mut g, q, kv, kv, &b, None).unwrap();
        assert_eq!(weights.len(), 4);
        for w in weights {
            for r in 0..5 {
                let s: f64 = g.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let p = AttnParams::init(4, 2, 0.5, &mut rng(9)).unwrap();
        let mut g = Graph::new();
        let q = g.leaf(Tensor::randn(&[2, 4], 1.0, 10), false);
        let kv = g.leaf(Tensor::randn(&[3, 4], 1.0, 11), false);
        let b = bind_attn(&mut g, &p);
        let (_, weights) =
            multi_head_attention_traced(&mut g, q, kv, kv, &b, Some(&[false, true, false]))
                .unwrap();
        for w in weights {
            for r in 0..2 {
                assert_eq!(g.value(w).at(r, 1), 0.0);
                let s: f64 = g.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fully_masked_keys_are_degenerate() {
        let p = AttnParams::init(4, 2, 0.5, &mut rng(12)).unwrap();
        let mut g = Graph::new();
        let q = g.leaf(Tensor::randn(&[2, 4], 1.0, 13), false);
        let kv = g.leaf(Tensor::randn(&[2, 4], 1.0, 14), false);
        let b = bind_attn(&mut g, &p);
        assert!(matches!(
            multi_head_attention(&mut g, q, kv, kv, &b, Some(&[true, true])),
            Err(Error::DegenerateAttention(2))
        ));
    }

    #[test]
    fn ffn_zero_second_layer_gives_zero_output() {
        let mut p = FfnParams::init(4, 16, 0.3, 0.3, &mut rng(15));
        p.w2 = Tensor::zeros(&[16, 4]);
        p.b2 = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[3, 4], 1.0, 16), false);
        let b = p.bind(&mut g, false);
        let out = ffn(&mut g, x, &b).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_identity_weights_pass_large_positive_inputs_through() {
        // GELU is the identity on the positive side only asymptotically;
        // at x ≥ 8 the deviation is < 1e-9, which is what "pass-through"
        // means for a smooth ReLU-family activation.
        let p = FfnParams {
            w1: Tensor::eye(4),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::eye(4),
            b2: Tensor::zeros(&[4]),
        };
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 4], vec![8.0, 9.5, 11.0, 20.0]).unwrap(),
            false,
        );
        let b = p.bind(&mut g, false);
        let out = ffn(&mut g, x, &b).unwrap();
        for c in 0..4 {
            assert!((g.value(out).at(0, c) - g.value(x).at(0, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_layer_with_zeroed_out_projections_is_exact_identity() {
        let mut layer = EncoderLayerParams::init(8, 2, 32, 1e-5, 0.2, &mut rng(17)).unwrap();
        layer.attn.wo = Tensor::zeros(&[8, 8]);
        layer.attn.bo = Tensor::zeros(&[8]);
        layer.ffn.w2 = Tensor::zeros(&[32, 8]);
        layer.ffn.b2 = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[5, 8], 1.0, 18), false);
        let b = layer.bind(&mut g, false);
        let out = encoder_layer(&mut g, x, &b, None).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
    }
}
