//! Few-shot prompt training and the evaluation protocols built on it.
//!
//! One experiment = one attribute corpus, one frozen backbone, one set of
//! trainable prompt parameters, SGD with cosine-decayed learning rate. All
//! randomness flows through tagged ChaCha streams: corpus-derived streams
//! (splits, shot images, eval images) so every ablation variant of a seed
//! sees identical data, and run-seed streams (prompt init, batch order) so
//! repeated seeds give genuinely different runs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    synthesize_corpus, tokenize_knowledge, Corpus, KnowledgeEntry, PromptTemplate, Vocabulary,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{stream, BindOptions, Model, ModelConfig};
use crate::objective::{class_probs, loss_ce, loss_text, loss_total};
use crate::tensor::Tensor;
use crate::text_encoder::{encode_prompted, FrozenFeatureCache, TextBind};
use crate::vision::{encode_image, synth_image, VisionBind};

const SHOT_STREAM_TAG: u64 = 10;
const EVAL_STREAM_TAG: u64 = 11;
const BATCH_STREAM_TAG: u64 = 12;
const SPLIT_STREAM_TAG: u64 = 13;

// ── configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub classes: usize,
    pub attrs_per_class: usize,
    pub pool: usize,
    pub sharing: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 2,
            classes: 20,
            attrs_per_class: 8,
            pool: 40,
            sharing: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Fraction of classes in the base (training) split.
    pub base_fraction: f64,
    /// Training images per class.
    pub shots: usize,
    /// Fresh evaluation images per class.
    pub eval_per_class: usize,
    /// Gaussian noise added to each patch on top of its attribute anchor.
    pub image_noise: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            base_fraction: 0.5,
            shots: 16,
            eval_per_class: 20,
            image_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine decay floor, as a fraction of `lr`.
    pub min_lr_fraction: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            steps: 200,
            batch: 16,
            lr: 0.02,
            min_lr_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed: prompt initialisation and batch order.
    pub seed: u64,
    /// When false the text encoder sees only the bare template sentence per
    /// class; images keep their full attribute structure either way.
    pub use_knowledge: bool,
    pub template: String,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub data: DataSpec,
    pub optim: OptimSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            use_knowledge: true,
            template: "a photo of a {}".into(),
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            data: DataSpec::default(),
            optim: OptimSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.corpus.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.corpus.attrs_per_class == 0 {
            return Err(Error::Config("need at least one attribute per class".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.sharing) {
            return Err(Error::Config(format!(
                "sharing rate {} outside [0, 1]",
                self.corpus.sharing
            )));
        }
        if !(0.0 < self.data.base_fraction && self.data.base_fraction < 1.0) {
            return Err(Error::Config(format!(
                "base fraction {} must lie strictly between 0 and 1",
                self.data.base_fraction
            )));
        }
        if self.data.shots == 0 || self.data.eval_per_class == 0 {
            return Err(Error::Config("shots and eval images must be positive".into()));
        }
        if self.data.image_noise < 0.0 {
            return Err(Error::Config("image noise must be non-negative".into()));
        }
        if self.optim.steps == 0 || self.optim.batch == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if self.optim.lr <= 0.0 || !(0.0..=1.0).contains(&self.optim.min_lr_fraction) {
            return Err(Error::Config(format!(
                "lr {} must be positive with floor fraction in [0, 1]",
                self.optim.lr
            )));
        }
        // class name + attributes + BOS + EOS must fit the context
        let required = 1 + self.corpus.attrs_per_class + 2;
        if required > self.model.context_len {
            return Err(Error::Config(format!(
                "{} attributes per class need {required} context tokens, have {}",
                self.corpus.attrs_per_class, self.model.context_len
            )));
        }
        Ok(())
    }
}

// ── data preparation ─────────────────────────────────────────────────────

/// Everything derived from the corpus before training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Full corpus: always drives image synthesis and frozen class features.
    pub corpus: Corpus,
    /// Text-side entries: clones of the corpus entries, or bare class names
    /// when knowledge is switched off.
    pub text_entries: Vec<KnowledgeEntry>,
    pub vocab: Vocabulary,
    pub template: PromptTemplate,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

/// Deterministic base/novel class split. Membership is a property of the
/// data, so the seed here should be the corpus seed: every run over that
/// corpus agrees on the split.
pub fn split_classes(
    n_classes: usize,
    base_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_base = (base_fraction * n_classes as f64).round() as usize;
    if n_base == 0 || n_base >= n_classes {
        return Err(Error::Config(format!(
            "base fraction {base_fraction} leaves an empty split for {n_classes} classes"
        )));
    }
    let mut idx: Vec<usize> = (0..n_classes).collect();
    idx.shuffle(&mut stream(seed, SPLIT_STREAM_TAG));
    let mut base = idx[..n_base].to_vec();
    let mut novel = idx[n_base..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    Ok((base, novel))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = synthesize_corpus(
        cfg.corpus.seed,
        cfg.corpus.classes,
        cfg.corpus.attrs_per_class,
        cfg.corpus.pool,
        cfg.corpus.sharing,
    )?;
    prepare_with_corpus(cfg, corpus)
}

/// Preparation over an externally supplied corpus (a saved file, or the
/// target side of a transfer evaluation). The split still keys off
/// `cfg.corpus.seed`.
pub fn prepare_with_corpus(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Prepared> {
    cfg.validate()?;
    corpus.validate()?;
    let template = PromptTemplate::new(&cfg.template)?;
    let vocab = Vocabulary::build(&corpus, &template, cfg.model.embed_dim);
    let (base, novel) =
        split_classes(corpus.entries.len(), cfg.data.base_fraction, cfg.corpus.seed)?;
    let text_entries: Vec<KnowledgeEntry> = if cfg.use_knowledge {
        corpus.entries.clone()
    } else {
        corpus
            .entries
            .iter()
            .map(|e| KnowledgeEntry::bare(e.class_name.clone()))
            .collect()
    };
    // surface overflowing sequences now, with the offending class named
    for e in &text_entries {
        tokenize_knowledge(e, &vocab, &template, cfg.model.context_len).map_err(|err| {
            Error::Config(format!("class {:?}: {err}", e.class_name))
        })?;
    }
    Ok(Prepared {
        corpus,
        text_entries,
        vocab,
        template,
        base,
        novel,
    })
}

// ── training ─────────────────────────────────────────────────────────────

/// One logged optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_text: f64,
    pub loss_total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    /// Batch-stream position after the last step, for exact resumption.
    pub rng_word_pos: u128,
}

/// Mid-run state thawed from a checkpoint.
#[derive(Debug)]
pub struct ResumeState {
    pub model: Model,
    pub start_step: usize,
    pub rng_word_pos: u128,
}

/// Cosine decay from `lr` to `lr · min_fraction` across `steps`.
pub fn lr_at(step: usize, o: &OptimSpec) -> f64 {
    let floor = o.lr * o.min_lr_fraction;
    let t = step as f64 / o.steps as f64;
    floor + 0.5 * (o.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Train prompt parameters on `class_indices` (labels are positions in that
/// slice). `resume` continues a previous run bit-exactly.
pub fn train_classes(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    class_indices: &[usize],
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    train_until(cfg, prep, class_indices, resume, cfg.optim.steps)
}

/// Like [`train_classes`] but stopping before `stop_step` (capped at the
/// schedule length). The learning-rate schedule always spans the configured
/// step count, so pausing at a checkpoint and resuming later reproduces an
/// uninterrupted run exactly.
pub fn train_until(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    class_indices: &[usize],
    resume: Option<ResumeState>,
    stop_step: usize,
) -> Result<TrainOutcome> {
    if class_indices.is_empty() {
        return Err(Error::Usage("no classes to train on".into()));
    }
    let (mut model, start_step, mut batch_rng) = match resume {
        Some(r) => {
            let mut rng = stream(cfg.seed, BATCH_STREAM_TAG);
            rng.set_word_pos(r.rng_word_pos);
            (r.model, r.start_step, rng)
        }
        None => (
            Model::new(&cfg.model, cfg.seed)?,
            0,
            stream(cfg.seed, BATCH_STREAM_TAG),
        ),
    };

    // Shot images come from a corpus-keyed stream: ablation variants of the
    // same corpus train on identical pixels.
    let mut shot_rng = stream(cfg.corpus.seed, SHOT_STREAM_TAG);
    let mut shots: Vec<(usize, Tensor)> = Vec::with_capacity(class_indices.len() * cfg.data.shots);
    for (label, &ci) in class_indices.iter().enumerate() {
        for _ in 0..cfg.data.shots {
            let img = synth_image(
                &prep.corpus.entries[ci].attributes,
                cfg.model.patches,
                cfg.model.embed_dim,
                cfg.data.image_noise,
                &mut shot_rng,
            )?;
            shots.push((label, img));
        }
    }

    // Frozen anchors for the text-consistency loss, one row per class.
    let mut cache = FrozenFeatureCache::new();
    let d = cfg.model.embed_dim;
    let mut frozen_rows = Vec::with_capacity(class_indices.len() * d);
    for &ci in class_indices {
        let f = cache.feature(
            &model,
            &prep.vocab,
            &prep.template,
            &prep.corpus.entries[ci].class_name,
        )?;
        frozen_rows.extend_from_slice(f.data());
    }
    let frozen = Tensor::from_vec(&[class_indices.len(), d], frozen_rows)?;

    let entries: Vec<&KnowledgeEntry> =
        class_indices.iter().map(|&ci| &prep.text_entries[ci]).collect();

    let stop = stop_step.min(cfg.optim.steps);
    let mut log = Vec::with_capacity(stop.saturating_sub(start_step));
    for step in start_step..stop {
        let batch: Vec<(usize, &Tensor)> = (0..cfg.optim.batch)
            .map(|_| {
                let k = batch_rng.gen_range(0..shots.len());
                (shots[k].0, &shots[k].1)
            })
            .collect();

        let (grads, ce_v, text_v, total_v) =
            match training_step(&model, prep, &entries, &frozen, &batch, cfg) {
                // numbers leaving an op's domain mid-run is divergence, not misuse
                Err(Error::Domain(msg)) => {
                    return Err(Error::Divergence(format!("step {step}: {msg}")))
                }
                other => other?,
            };
        if !total_v.is_finite() {
            return Err(Error::Divergence(format!(
                "step {step}: loss became {total_v}"
            )));
        }

        let lr = lr_at(step, &cfg.optim);
        for (name, slot) in model.named_trainable_mut() {
            if let Some(grad) = grads.get(&name) {
                for (w, g) in slot.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * g;
                }
            }
        }
        log.push(StepRecord {
            step,
            lr,
            loss_ce: ce_v,
            loss_text: text_v,
            loss_total: total_v,
        });
    }

    Ok(TrainOutcome {
        model,
        log,
        rng_word_pos: batch_rng.get_word_pos(),
    })
}

/// Build one step's graph, run backward, return named gradients and the
/// loss components.
fn training_step(
    model: &Model,
    prep: &Prepared,
    entries: &[&KnowledgeEntry],
    frozen: &Tensor,
    batch: &[(usize, &Tensor)],
    cfg: &ExperimentConfig,
) -> Result<(BTreeMap<String, Tensor>, f64, f64, f64)> {
    let mut g = Graph::new();
    let tb = TextBind::new(&mut g, model, &prep.vocab, &BindOptions::training());
    let vb = VisionBind::new(&mut g, model, &BindOptions::training());

    let mut class_rows = Vec::with_capacity(entries.len());
    for e in entries {
        let seq = tokenize_knowledge(e, &prep.vocab, &prep.template, cfg.model.context_len)?;
        class_rows.push(encode_prompted(
            &mut g,
            &tb,
            &seq,
            cfg.model.inject_depth,
            None,
        )?);
    }
    let class_feats = g.concat_rows(&class_rows)?;
    let frozen_node = g.leaf(frozen.clone(), false);

    let vision_prompt = cfg.model.vision_prompts.then_some(tb.prompt);
    let mut img_rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (label, img) in batch {
        let leaf = g.leaf((*img).clone(), false);
        img_rows.push(encode_image(&mut g, &vb, leaf, vision_prompt)?);
        labels.push(*label);
    }
    let img_feats = g.concat_rows(&img_rows)?;

    let probs = class_probs(&mut g, img_feats, class_feats, cfg.model.temperature)?;
    let ce = loss_ce(&mut g, probs, &labels)?;
    let lt = loss_text(&mut g, class_feats, frozen_node)?;
    let total = loss_total(&mut g, ce, lt, cfg.model.lambda_text)?;
    g.backward(total)?;

    let mut handles = tb.trainable_nodes();
    if cfg.model.vision_prompts {
        handles.extend(vb.trainable_nodes());
    }
    let mut grads = BTreeMap::new();
    for (name, node) in handles {
        if let Some(grad) = g.grad(node) {
            grads.insert(name, grad.clone());
        }
    }
    Ok((
        grads,
        g.value(ce).data()[0],
        g.value(lt).data()[0],
        g.value(total).data()[0],
    ))
}

// ── evaluation ───────────────────────────────────────────────────────────

/// Prompted features of the given classes, `[C × d]`, computed with the
/// model's current parameters.
pub fn class_features(
    model: &Model,
    prep: &Prepared,
    class_indices: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let tb = TextBind::new(&mut g, model, &prep.vocab, &BindOptions::frozen());
    let mut rows = Vec::with_capacity(class_indices.len());
    for &ci in class_indices {
        let seq = tokenize_knowledge(
            &prep.text_entries[ci],
            &prep.vocab,
            &prep.template,
            model.cfg.context_len,
        )?;
        rows.push(encode_prompted(
            &mut g,
            &tb,
            &seq,
            model.cfg.inject_depth,
            None,
        )?);
    }
    let all = g.concat_rows(&rows)?;
    Ok(g.value(all).clone())
}

/// Feature of a single image under the current parameters.
pub fn image_feature(model: &Model, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vb = VisionBind::new(&mut g, model, &BindOptions::frozen());
    let leaf = g.leaf(image.clone(), false);
    let prompt = if model.cfg.vision_prompts {
        Some(g.leaf(model.trainable.prompt.clone(), false))
    } else {
        None
    };
    let f = encode_image(&mut g, &vb, leaf, prompt)?;
    Ok(g.value(f).clone())
}

/// The evaluation-image stream keyed by `seed`. The protocol runners pass
/// the corpus seed so every model variant faces the same evaluation set;
/// callers evaluating a fixed checkpoint under resampled evaluation draws
/// pass their own seeds instead.
pub fn eval_image_stream(seed: u64) -> ChaCha8Rng {
    stream(seed, EVAL_STREAM_TAG)
}

/// Accuracy over freshly synthesized images of `class_indices`, classified
/// among exactly those classes by cosine similarity of features. `rng`
/// should be a corpus-keyed stream so all model variants face the same
/// evaluation set.
pub fn evaluate(
    model: &Model,
    prep: &Prepared,
    class_indices: &[usize],
    images_per_class: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let feats = class_features(model, prep, class_indices)?;
    let d = model.cfg.embed_dim;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (truth, &ci) in class_indices.iter().enumerate() {
        for _ in 0..images_per_class {
            let img = synth_image(
                &prep.corpus.entries[ci].attributes,
                model.cfg.patches,
                d,
                noise,
                rng,
            )?;
            let f = image_feature(model, &img)?;
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..class_indices.len() {
                let row = Tensor::from_vec(&[d], feats.row(c).to_vec())?;
                let s = Tensor::cosine_sim(&f, &row)?;
                if s > best.1 {
                    best = (c, s);
                }
            }
            if best.0 == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// `2ab / (a + b)`, zero when both inputs are zero. Scale-invariant, so it
/// gives the same answer for fractions and percentages.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

// ── protocols ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub seed: u64,
    /// Ordered (metric, value) pairs; order is part of the report format.
    pub metrics: Vec<(String, f64)>,
}

impl ProtocolReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Train on the base split, then measure accuracy separately on base and
/// novel classes plus their harmonic mean.
pub fn run_base_to_novel(cfg: &ExperimentConfig) -> Result<(ProtocolReport, TrainOutcome)> {
    let prep = prepare(cfg)?;
    let out = train_classes(cfg, &prep, &prep.base, None)?;
    let mut eval_rng = stream(cfg.corpus.seed, EVAL_STREAM_TAG);
    let base_acc = evaluate(
        &out.model,
        &prep,
        &prep.base,
        cfg.data.eval_per_class,
        cfg.data.image_noise,
        &mut eval_rng,
    )?;
    let novel_acc = evaluate(
        &out.model,
        &prep,
        &prep.novel,
        cfg.data.eval_per_class,
        cfg.data.image_noise,
        &mut eval_rng,
    )?;
    let report = ProtocolReport {
        protocol: "base_to_novel".into(),
        seed: cfg.seed,
        metrics: vec![
            ("base_acc".into(), base_acc),
            ("novel_acc".into(), novel_acc),
            ("harmonic_mean".into(), harmonic_mean(base_acc, novel_acc)),
        ],
    };
    Ok((report, out))
}

/// Train on every class with `shots` images each, then measure accuracy on
/// fresh images of every class.
pub fn run_few_shot(cfg: &ExperimentConfig) -> Result<(ProtocolReport, TrainOutcome)> {
    let prep = prepare(cfg)?;
    let all: Vec<usize> = (0..prep.corpus.entries.len()).collect();
    let out = train_classes(cfg, &prep, &all, None)?;
    let mut eval_rng = stream(cfg.corpus.seed, EVAL_STREAM_TAG);
    let acc = evaluate(
        &out.model,
        &prep,
        &all,
        cfg.data.eval_per_class,
        cfg.data.image_noise,
        &mut eval_rng,
    )?;
    let report = ProtocolReport {
        protocol: "few_shot".into(),
        seed: cfg.seed,
        metrics: vec![("accuracy".into(), acc)],
    };
    Ok((report, out))
}

/// Train on every class of the source corpus, then evaluate both there and
/// on a freshly synthesized target corpus. Transfer works because word
/// embeddings and image anchors are functions of the words themselves, not
/// of any particular vocabulary.
pub fn run_cross_dataset(
    cfg: &ExperimentConfig,
    target: &CorpusSpec,
) -> Result<(ProtocolReport, TrainOutcome)> {
    let prep = prepare(cfg)?;
    let all: Vec<usize> = (0..prep.corpus.entries.len()).collect();
    let out = train_classes(cfg, &prep, &all, None)?;
    let mut eval_rng = stream(cfg.corpus.seed, EVAL_STREAM_TAG);
    let source_acc = evaluate(
        &out.model,
        &prep,
        &all,
        cfg.data.eval_per_class,
        cfg.data.image_noise,
        &mut eval_rng,
    )?;

    let target_cfg = ExperimentConfig {
        corpus: target.clone(),
        ..cfg.clone()
    };
    let tprep = prepare(&target_cfg)?;
    let tall: Vec<usize> = (0..tprep.corpus.entries.len()).collect();
    let mut target_rng = stream(target.seed, EVAL_STREAM_TAG);
    let target_acc = evaluate(
        &out.model,
        &tprep,
        &tall,
        cfg.data.eval_per_class,
        cfg.data.image_noise,
        &mut target_rng,
    )?;
    let report = ProtocolReport {
        protocol: "cross_dataset".into(),
        seed: cfg.seed,
        metrics: vec![
            ("source_acc".into(), source_acc),
            ("target_acc".into(), target_acc),
        ],
    };
    Ok((report, out))
}

/// Small configuration shared by the fast training tests in this crate.
#[cfg(test)]
pub(crate) fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            embed_dim: 16,
            heads: 2,
            text_layers: 2,
            vision_layers: 2,
            context_len: 10,
            prompt_len: 3,
            inject_depth: 1,
            patches: 4,
            ..ModelConfig::default()
        },
        corpus: CorpusSpec {
            seed: 3,
            classes: 6,
            attrs_per_class: 4,
            pool: 12,
            sharing: 0.5,
        },
        data: DataSpec {
            shots: 4,
            eval_per_class: 4,
            ..DataSpec::default()
        },
        optim: OptimSpec {
            steps: 3,
            batch: 4,
            lr: 0.01,
            min_lr_fraction: 0.1,
        },
        ..ExperimentConfig::default()
    }
}
