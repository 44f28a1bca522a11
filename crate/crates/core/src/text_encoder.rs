//! The text tower: a frozen transformer over token sequences, optionally
//! carrying learnable prompt tokens with attribute knowledge fused into them.
//!
//! Layout of the prompted sequence is `[P | E]`: `M` prompt rows followed by
//! the `context_len` token rows. Knowledge tokens keep the position rows they
//! would have in the frozen path; prompt rows carry no position embedding.
//! Before each of the first `inject_depth` layers, the prompt rows are
//! replaced by the output of a fusion block — cross-attention from the
//! prompts into the knowledge rows (PAD keys masked), then an FFN, each
//! behind a residual. The class feature is the EOS-position state after the
//! last layer, through the frozen feature projection, rescaled to the fixed
//! length both towers share. Fixed-length output follows the dual-encoder
//! convention: cosine similarity ignores magnitude anyway, and the
//! feature-consistency loss then measures drift on the feature sphere
//! rather than in raw projection units.

use std::collections::BTreeMap;

use crate::corpus::{tokenize_knowledge, KnowledgeEntry, PromptTemplate, TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{BindOptions, Model};
use crate::nn::{
    encoder_layer, ffn, layer_norm, multi_head_attention, BoundEncoderLayer, BoundFusionBlock,
};
use crate::tensor::Tensor;

/// Node handles for one text-tower instantiation inside a graph. Bind once,
/// encode many sequences (all classes of a batch share the same leaves).
#[derive(Debug, Clone)]
pub struct TextBind {
    pub table: NodeId,
    pub pos: NodeId,
    pub layers: Vec<BoundEncoderLayer>,
    pub proj: NodeId,
    /// `[M × d]` prompt block (possibly zero rows).
    pub prompt: NodeId,
    pub blocks: Vec<BoundFusionBlock>,
    pad_id: usize,
    feature_scale: f64,
}

impl TextBind {
    pub fn new(g: &mut Graph, model: &Model, vocab: &Vocabulary, opts: &BindOptions) -> TextBind {
        TextBind {
            table: vocab.bind_table(g, opts.train_embeddings),
            pos: g.leaf(model.text.pos.clone(), false),
            layers: model
                .text
                .layers
                .iter()
                .map(|l| l.bind(g, false))
                .collect(),
            proj: g.leaf(model.text.proj.clone(), false),
            prompt: g.leaf(model.trainable.prompt.clone(), opts.train_prompt),
            blocks: model
                .trainable
                .blocks
                .iter()
                .map(|b| b.bind(g, opts.train_blocks))
                .collect(),
            pad_id: vocab.pad_id(),
            feature_scale: model.cfg.feature_scale,
        }
    }

    /// Text-side trainable handles, named identically to
    /// [`Model::named_trainable`] (prompt first, then blocks by depth).
    pub fn trainable_nodes(&self) -> Vec<(String, NodeId)> {
        let mut out = vec![("prompt".to_string(), self.prompt)];
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), &mut out);
        }
        out
    }
}

/// Per-layer record of a prompted encode.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Whether a fusion block ran before this layer.
    pub fused: bool,
    /// Prompt rows after the layer (`[M × d]`).
    pub prompt_state: Tensor,
    /// Token rows after the layer (`[context_len × d]`).
    pub knowledge_state: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct EncodeTrace {
    pub layers: Vec<LayerTrace>,
}

impl EncodeTrace {
    pub fn fusion_count(&self) -> usize {
        self.layers.iter().filter(|l| l.fused).count()
    }
}

/// One fusion application: `A = MHA(LN(P), LN(E), LN(E)) + P` followed by
/// `FFN(LN(A)) + A`. The same `ln_in` parameters normalise both attention
/// inputs. With the attention and FFN output projections zeroed this is an
/// exact identity on `P` (pure residual).
pub fn attr_aware_attention(
    g: &mut Graph,
    prompt: NodeId,
    knowledge: NodeId,
    block: &BoundFusionBlock,
    key_mask: &[bool],
) -> Result<NodeId> {
    let pn = layer_norm(g, prompt, &block.ln_in)?;
    let en = layer_norm(g, knowledge, &block.ln_in)?;
    let a = multi_head_attention(g, pn, en, en, &block.attn, Some(key_mask))?;
    let a = g.add(a, prompt)?;
    let h = layer_norm(g, a, &block.ln_mid)?;
    let f = ffn(g, h, &block.ffn)?;
    g.add(f, a)
}

/// Shared encode core. `with_prompt` selects the prompted layout; fusion
/// runs before layers `0..inject_depth` and requires prompt rows to exist.
fn encode_sequence(
    g: &mut Graph,
    bind: &TextBind,
    seq: &TokenSeq,
    with_prompt: bool,
    inject_depth: usize,
    mut trace: Option<&mut EncodeTrace>,
) -> Result<NodeId> {
    let ctx = seq.ids.len();
    let e = g.embed(bind.table, &seq.ids)?;
    let pos = g.slice_rows(bind.pos, 0, ctx)?;
    let e = g.add(e, pos)?;

    let m = if with_prompt {
        g.value(bind.prompt).rows()
    } else {
        0
    };
    if m > 0 && inject_depth > bind.blocks.len() {
        return Err(Error::Usage(format!(
            "fusion depth {inject_depth} exceeds the {} bound fusion blocks",
            bind.blocks.len()
        )));
    }
    let mut x = if m > 0 {
        g.concat_rows(&[bind.prompt, e])?
    } else {
        e
    };

    let pads: Vec<bool> = seq.ids.iter().map(|&id| id == bind.pad_id).collect();
    let mut key_mask = vec![false; m];
    key_mask.extend_from_slice(&pads);

    for (i, layer) in bind.layers.iter().enumerate() {
        let mut fused = false;
        if i < inject_depth && m > 0 {
            let p_prev = g.slice_rows(x, 0, m)?;
            let e_prev = g.slice_rows(x, m, ctx)?;
            let p_hat = attr_aware_attention(g, p_prev, e_prev, &bind.blocks[i], &pads)?;
            x = g.concat_rows(&[p_hat, e_prev])?;
            fused = true;
        }
        x = encoder_layer(g, x, layer, Some(&key_mask))?;
        if let Some(tr) = trace.as_deref_mut() {
            let v = g.value(x);
            let d = v.cols();
            tr.layers.push(LayerTrace {
                fused,
                prompt_state: Tensor::from_vec(&[m, d], v.data()[..m * d].to_vec())?,
                knowledge_state: Tensor::from_vec(&[ctx, d], v.data()[m * d..].to_vec())?,
            });
        }
    }

    let feat_tok = g.slice_rows(x, m + seq.eos_pos, 1)?;
    let feat = g.matmul(feat_tok, bind.proj)?;
    let unit = g.normalize_rows(feat)?;
    g.scale(unit, bind.feature_scale)
}

/// Frozen path: plain tokens, no prompts, no fusion. `[1 × d]` feature.
pub fn encode_frozen(g: &mut Graph, bind: &TextBind, seq: &TokenSeq) -> Result<NodeId> {
    encode_sequence(g, bind, seq, false, 0, None)
}

/// Prompted path: `[P | E]` layout with fusion in the first `inject_depth`
/// layers. With `M = 0` and `inject_depth = 0` this follows exactly the
/// frozen op sequence.
pub fn encode_prompted(
    g: &mut Graph,
    bind: &TextBind,
    seq: &TokenSeq,
    inject_depth: usize,
    trace: Option<&mut EncodeTrace>,
) -> Result<NodeId> {
    encode_sequence(g, bind, seq, true, inject_depth, trace)
}

/// Frozen template-path class features, computed once per class name.
#[derive(Debug, Default)]
pub struct FrozenFeatureCache {
    map: BTreeMap<String, Tensor>,
    hits: usize,
    misses: usize,
}

impl FrozenFeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// `[1 × d]` frozen feature of `class_name` through the template
    /// sentence. Cached: the frozen path never changes within a run.
    pub fn feature(
        &mut self,
        model: &Model,
        vocab: &Vocabulary,
        template: &PromptTemplate,
        class_name: &str,
    ) -> Result<Tensor> {
        if let Some(t) = self.map.get(class_name) {
            self.hits += 1;
            return Ok(t.clone());
        }
        self.misses += 1;
        let mut g = Graph::new();
        let bind = TextBind::new(&mut g, model, vocab, &BindOptions::frozen());
        let seq = tokenize_knowledge(
            &KnowledgeEntry::bare(class_name),
            vocab,
            template,
            model.cfg.context_len,
        )?;
        let f = encode_frozen(&mut g, &bind, &seq)?;
        let t = g.value(f).clone();
        self.map.insert(class_name.to_string(), t.clone());
        Ok(t)
    }

    pub fn stats(&self) -> (usize, usize) {
        (self.hits, self.misses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, Corpus};
    use crate::error::Error;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn setup(cfg: &ModelConfig) -> (Model, Corpus, Vocabulary, PromptTemplate) {
        let corpus = synthesize_corpus(5, 4, 3, 10, 0.5).unwrap();
        let template = PromptTemplate::default();
        let vocab = Vocabulary::build(&corpus, &template, cfg.embed_dim);
        let model = Model::new(cfg, 1).unwrap();
        (model, corpus, vocab, template)
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            heads: 2,
            text_layers: 3,
            vision_layers: 2,
            context_len: 12,
            prompt_len: 4,
            inject_depth: 2,
            patches: 4,
            ..ModelConfig::default()
        }
    }

    fn encode_entry(
        model: &Model,
        vocab: &Vocabulary,
        template: &PromptTemplate,
        entry: &KnowledgeEntry,
        inject_depth: usize,
        with_prompt: bool,
    ) -> (Tensor, EncodeTrace) {
        let mut g = Graph::new();
        let bind = TextBind::new(&mut g, model, vocab, &BindOptions::frozen());
        let seq = tokenize_knowledge(entry, vocab, template, model.cfg.context_len).unwrap();
        let mut trace = EncodeTrace::default();
        let f = if with_prompt {
            encode_prompted(&mut g, &bind, &seq, inject_depth, Some(&mut trace)).unwrap()
        } else {
            encode_frozen(&mut g, &bind, &seq).unwrap()
        };
        (g.value(f).clone(), trace)
    }

    #[test]
    fn fusion_residual_identity_with_zeroed_output_maps() {
        let cfg = small_cfg();
        let (mut model, corpus, vocab, template) = setup(&cfg);
        for b in &mut model.trainable.blocks {
            b.attn.wo = Tensor::zeros(&[cfg.embed_dim, cfg.embed_dim]);
            b.attn.bo = Tensor::zeros(&[cfg.embed_dim]);
            b.ffn.w2 = Tensor::zeros(&[cfg.ffn_hidden(), cfg.embed_dim]);
            b.ffn.b2 = Tensor::zeros(&[cfg.embed_dim]);
        }
        let mut g = Graph::new();
        let bind = TextBind::new(&mut g, &model, &vocab, &BindOptions::frozen());
        let seq =
            tokenize_knowledge(&corpus.entries[0], &vocab, &template, cfg.context_len).unwrap();
        let e = g.embed(bind.table, &seq.ids).unwrap();
        let mask = seq.pad_mask(&vocab);
        let p_hat = attr_aware_attention(&mut g, bind.prompt, e, &bind.blocks[0], &mask).unwrap();
        assert_eq!(
            g.value(p_hat).data(),
            g.value(bind.prompt).data(),
            "zeroed output projections must make fusion a bit-exact identity"
        );
    }

    #[test]
    fn freshly_initialised_fusion_is_a_no_op() {
        // Zero output maps at init: the prompted encode with fusion enabled
        // must equal the one with fusion skipped, bit for bit, before any
        // training has happened.
        let cfg = small_cfg();
        let (model, corpus, vocab, template) = setup(&cfg);
        let entry = &corpus.entries[0];
        let (with, trace) = encode_entry(&model, &vocab, &template, entry, cfg.inject_depth, true);
        let (without, _) = encode_entry(&model, &vocab, &template, entry, 0, true);
        assert_eq!(trace.fusion_count(), cfg.inject_depth);
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn fusion_with_all_keys_masked_is_degenerate() {
        let cfg = small_cfg();
        let (model, _, vocab, _) = setup(&cfg);
        let mut g = Graph::new();
        let bind = TextBind::new(&mut g, &model, &vocab, &BindOptions::frozen());
        let e = g.leaf(Tensor::randn(&[5, cfg.embed_dim], 1.0, 3), false);
        let mask = vec![true; 5];
        assert!(matches!(
            attr_aware_attention(&mut g, bind.prompt, e, &bind.blocks[0], &mask),
            Err(Error::DegenerateAttention(5))
        ));
    }

    #[test]
    fn trace_counts_fusion_applications_exactly() {
        for depth in [0, 1, 2, small_cfg().text_layers] {
            let cfg = ModelConfig {
                inject_depth: depth,
                ..small_cfg()
            };
            let (model, corpus, vocab, template) = setup(&cfg);
            let (_, trace) =
                encode_entry(&model, &vocab, &template, &corpus.entries[0], depth, true);
            assert_eq!(trace.fusion_count(), depth, "inject depth {depth}");
            assert_eq!(trace.layers.len(), cfg.text_layers);
            // fusion always occupies the leading layers
            for (i, l) in trace.layers.iter().enumerate() {
                assert_eq!(l.fused, i < depth);
            }
        }
    }

    #[test]
    fn depth_beyond_bound_blocks_is_a_usage_error() {
        let cfg = small_cfg();
        let (model, corpus, vocab, template) = setup(&cfg);
        let mut g = Graph::new();
        let bind = TextBind::new(&mut g, &model, &vocab, &BindOptions::frozen());
        let seq =
            tokenize_knowledge(&corpus.entries[0], &vocab, &template, cfg.context_len).unwrap();
        let err = encode_prompted(&mut g, &bind, &seq, cfg.inject_depth + 1, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn no_prompt_no_fusion_reduces_to_frozen_path_bit_exactly() {
        let mut cfg = small_cfg();
        cfg.prompt_len = 0;
        cfg.inject_depth = 0;
        let (model, corpus, vocab, template) = setup(&cfg);
        for entry in &corpus.entries {
            let (prompted, _) = encode_entry(&model, &vocab, &template, entry, 0, true);
            let (frozen, _) = encode_entry(&model, &vocab, &template, entry, 0, false);
            assert_eq!(prompted.data(), frozen.data());
        }
    }

    #[test]
    fn zeroed_fusion_blocks_reduce_prompted_path_to_no_fusion_bit_exactly() {
        let cfg = small_cfg();
        let (mut model, corpus, vocab, template) = setup(&cfg);
        for b in &mut model.trainable.blocks {
            b.attn.wo = Tensor::zeros(&[cfg.embed_dim, cfg.embed_dim]);
            b.attn.bo = Tensor::zeros(&[cfg.embed_dim]);
            b.ffn.w2 = Tensor::zeros(&[cfg.ffn_hidden(), cfg.embed_dim]);
            b.ffn.b2 = Tensor::zeros(&[cfg.embed_dim]);
        }
        let entry = &corpus.entries[1];
        let (with_fusion, tr) = encode_entry(&model, &vocab, &template, entry, 2, true);
        let (without, _) = encode_entry(&model, &vocab, &template, entry, 0, true);
        assert_eq!(tr.fusion_count(), 2);
        assert_eq!(with_fusion.data(), without.data());
    }

    #[test]
    fn swapping_attributes_of_one_class_touches_only_that_class() {
        let cfg = small_cfg();
        let (model, corpus, vocab, template) = setup(&cfg);
        let mut swapped = corpus.clone();
        swapped.entries[2].attributes.swap(0, 2);

        for (i, (orig, new)) in corpus.entries.iter().zip(&swapped.entries).enumerate() {
            let (f_orig, _) =
                encode_entry(&model, &vocab, &template, orig, cfg.inject_depth, true);
            let (f_new, _) = encode_entry(&model, &vocab, &template, new, cfg.inject_depth, true);
            if i == 2 {
                assert_ne!(f_orig.data(), f_new.data(), "swapped class must move");
            } else {
                assert_eq!(f_orig.data(), f_new.data(), "class {i} must not move");
            }
        }
    }

    #[test]
    fn padding_length_does_not_leak_into_features() {
        // Same entry, two context lengths; the longer one only adds masked
        // PAD keys, so the feature must be bit-identical.
        let cfg_short = ModelConfig {
            context_len: 12,
            ..small_cfg()
        };
        let cfg_long = ModelConfig {
            context_len: 16,
            ..small_cfg()
        };
        // Position tables come from the same stream, so the short table is a
        // prefix of the long one and the comparison is meaningful.
        let (model_s, corpus, vocab, template) = setup(&cfg_short);
        let (model_l, _, _, _) = setup(&cfg_long);
        let entry = &corpus.entries[0];
        let (fs, _) = encode_entry(&model_s, &vocab, &template, entry, 2, true);
        let (fl, _) = encode_entry(&model_l, &vocab, &template, entry, 2, true);
        assert_eq!(fs.data(), fl.data());
    }

    #[test]
    fn different_prompts_move_the_features() {
        let cfg = small_cfg();
        let (model, corpus, vocab, template) = setup(&cfg);
        let model2 = Model::new(&cfg, 2).unwrap(); // different train seed
        let entry = &corpus.entries[0];
        let (f1, _) = encode_entry(&model, &vocab, &template, entry, cfg.inject_depth, true);
        let (f2, _) = encode_entry(&model2, &vocab, &template, entry, cfg.inject_depth, true);
        assert_ne!(f1.data(), f2.data());
    }

    #[test]
    fn frozen_cache_hits_and_stays_identical() {
        let cfg = small_cfg();
        let (model, corpus, vocab, template) = setup(&cfg);
        let mut cache = FrozenFeatureCache::new();
        let a = cache
            .feature(&model, &vocab, &template, &corpus.entries[0].class_name)
            .unwrap();
        let b = cache
            .feature(&model, &vocab, &template, &corpus.entries[0].class_name)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.stats(), (1, 1), "one miss then one hit");
        // and the cached value matches a fresh computation
        let (direct, _) = encode_entry(
            &model,
            &vocab,
            &template,
            &KnowledgeEntry::bare(corpus.entries[0].class_name.clone()),
            0,
            false,
        );
        assert_eq!(a.data(), direct.data());
    }
}
