//! The vision tower and the synthetic image generator.
//!
//! Images are `[patches × d]` matrices. Each patch is the anchor vector of
//! one of the class's attributes plus Gaussian noise, where the anchor is
//! [`word_vector`] — the *same* vector that serves as the attribute's text
//! embedding. That shared dictionary is what stands in for a pretrained
//! joint embedding space: text that mentions an attribute and images that
//! show it agree with each other before any training happens.
//!
//! The encoder mirrors the text side: `[cls | patches]` rows plus position
//! embeddings, then frozen pre-norm layers; prompt tokens arriving from the
//! text side through the trainable projection are appended after the
//! positioned rows and carry no position embedding. The image feature is the
//! cls-position state after the last layer, through the frozen projection,
//! rescaled to the same fixed length as the text feature.

use rand_chacha::ChaCha8Rng;

use crate::corpus::word_vector;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{BindOptions, Model};
use crate::nn::{affine, encoder_layer, BoundAffine, BoundEncoderLayer};
use crate::tensor::Tensor;

/// Synthesize one image for a class described by `attrs`.
///
/// Attributes are sorted first so the image depends on the attribute *set*,
/// not on listing order; patch `i` takes the anchor of attribute `i mod n`.
/// The rng stream advances by exactly `patches * dim` draws regardless of
/// `noise_std`, so sweeps over noise keep everything else aligned.
pub fn synth_image(
    attrs: &[String],
    patches: usize,
    dim: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if attrs.is_empty() {
        return Err(Error::Validation(
            "cannot synthesize an image for a class with no attributes".into(),
        ));
    }
    let mut sorted: Vec<&String> = attrs.iter().collect();
    sorted.sort();
    let mut data = Vec::with_capacity(patches * dim);
    for i in 0..patches {
        let anchor = word_vector(sorted[i % sorted.len()], dim);
        let noise = Tensor::randn_using(&[dim], noise_std, rng);
        data.extend(anchor.data().iter().zip(noise.data()).map(|(a, n)| a + n));
    }
    Tensor::from_vec(&[patches, dim], data)
}

/// Node handles for one vision-tower instantiation inside a graph.
#[derive(Debug, Clone)]
pub struct VisionBind {
    pub cls: NodeId,
    pub pos: NodeId,
    pub layers: Vec<BoundEncoderLayer>,
    pub proj: NodeId,
    /// Text-to-vision prompt projection.
    pub t2v: BoundAffine,
    feature_scale: f64,
}

impl VisionBind {
    pub fn new(g: &mut Graph, model: &Model, opts: &BindOptions) -> VisionBind {
        VisionBind {
            cls: g.leaf(model.vision.cls_token.clone(), false),
            pos: g.leaf(model.vision.pos.clone(), false),
            layers: model
                .vision
                .layers
                .iter()
                .map(|l| l.bind(g, false))
                .collect(),
            proj: g.leaf(model.vision.proj.clone(), false),
            t2v: model.trainable.t2v.bind(g, opts.train_t2v),
            feature_scale: model.cfg.feature_scale,
        }
    }

    /// Vision-side trainable handles, named identically to
    /// [`Model::named_trainable`].
    pub fn trainable_nodes(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        self.t2v.collect("t2v", &mut out);
        out
    }
}

/// Encode one image. `text_prompt` is the `[M × d]` prompt block from the
/// text side; when present it is pushed through the trainable projection and
/// appended after the positioned rows. `M = 0` (or `None`) leaves the frozen
/// op sequence untouched.
pub fn encode_image(
    g: &mut Graph,
    bind: &VisionBind,
    image: NodeId,
    text_prompt: Option<NodeId>,
) -> Result<NodeId> {
    let expect = g.value(bind.pos).rows() - 1;
    let got = g.value(image).rows();
    if got != expect {
        return Err(Error::Usage(format!(
            "image has {got} patch rows, the model expects {expect}"
        )));
    }
    let x = g.concat_rows(&[bind.cls, image])?;
    let mut x = g.add(x, bind.pos)?;
    if let Some(p) = text_prompt {
        if g.value(p).rows() > 0 {
            let pv = affine(g, p, &bind.t2v)?;
            x = g.concat_rows(&[x, pv])?;
        }
    }
    for layer in &bind.layers {
        x = encoder_layer(g, x, layer, None)?;
    }
    let cls_state = g.slice_rows(x, 0, 1)?;
    let feat = g.matmul(cls_state, bind.proj)?;
    let unit = g.normalize_rows(feat)?;
    g.scale(unit, bind.feature_scale)
}
