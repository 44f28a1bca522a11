//! Class/attribute knowledge: file format, synthetic generation, vocabulary
//! and tokenization.
//!
//! A knowledge file is UTF-8, one record per line:
//!
//! ```text
//! #!generator=synthetic
//! # anything after a plain # is a comment and is dropped on load
//! class_name<TAB>attr_1<TAB>...<TAB>attr_N
//! ```
//!
//! `#!key=value` headers are provenance metadata and survive a load/save
//! round-trip byte-for-byte, in order. Plain `#` comments are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Instruction template a knowledge generator is given to produce the
/// discriminative attributes for one class. Stored as provenance so a corpus
/// records how it was (or would be) generated.
pub const INSTRUCTION_TEMPLATE: &str = "please provide the discriminative features about the \
                                        [fine class] for recognition among all [coarse class]";

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

// ── knowledge entries and files ──────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeEntry {
    pub class_name: String,
    pub attributes: Vec<String>,
}

impl KnowledgeEntry {
    /// An entry with no attributes: the knowledge-off baseline, tokenized as
    /// the plain template sentence instead of a knowledge sequence.
    pub fn bare(class_name: impl Into<String>) -> Self {
        KnowledgeEntry {
            class_name: class_name.into(),
            attributes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub entries: Vec<KnowledgeEntry>,
    /// `#!key=value` headers in file order.
    pub provenance: Vec<(String, String)>,
}

impl Corpus {
    pub fn parse(text: &str) -> Result<Corpus> {
        let mut corpus = Corpus::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix("#!") {
                let (key, value) = header.split_once('=').ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("provenance header without '=': {header:?}"),
                })?;
                corpus
                    .provenance
                    .push((key.to_string(), value.to_string()));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let class_name = fields.next().unwrap_or("").trim();
            if class_name.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "record with empty class name".into(),
                });
            }
            let mut attributes = Vec::new();
            for f in fields {
                let f = f.trim();
                if f.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("empty attribute field for class {class_name:?}"),
                    });
                }
                attributes.push(f.to_string());
            }
            if attributes.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("class {class_name:?} lists no attributes"),
                });
            }
            corpus.entries.push(KnowledgeEntry {
                class_name: class_name.to_string(),
                attributes,
            });
        }
        corpus.validate()?;
        Ok(corpus)
    }

    /// Serialise: provenance headers first (original order), then one record
    /// per entry. `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.provenance {
            writeln!(out, "#!{k}={v}").unwrap();
        }
        for e in &self.entries {
            write!(out, "{}", e.class_name).unwrap();
            for a in &e.attributes {
                write!(out, "\t{a}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    /// Structural invariants: unique class names, unique non-empty attributes
    /// within each entry. (File parsing additionally rejects entries with no
    /// attributes; in-memory baseline entries may be bare.)
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.class_name.is_empty() {
                return Err(Error::Validation("empty class name".into()));
            }
            if !seen.insert(e.class_name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate class name {:?}",
                    e.class_name
                )));
            }
            let mut attrs = BTreeSet::new();
            for a in &e.attributes {
                if !attrs.insert(a.as_str()) {
                    return Err(Error::Validation(format!(
                        "class {:?} repeats attribute {:?}",
                        e.class_name, a
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.class_name.as_str()).collect()
    }

    /// Copy with every attribute list emptied — the knowledge-off ablation.
    pub fn stripped(&self) -> Corpus {
        Corpus {
            entries: self
                .entries
                .iter()
                .map(|e| KnowledgeEntry::bare(e.class_name.clone()))
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

// ── synthetic corpus generation ──────────────────────────────────────────

/// Deterministically generate a corpus of `num_classes` classes with
/// `attrs_per_class` attributes each. `round(sharing_rate · attrs_per_class)`
/// of each class's attributes are drawn (without replacement) from a common
/// pool of `pool_size` terms; the rest are minted class-unique. Sharing 0
/// therefore gives disjoint attribute sets, and sharing 1 with
/// `pool_size < num_classes · attrs_per_class` forces overlap by pigeonhole.
pub fn synthesize_corpus(
    seed: u64,
    num_classes: usize,
    attrs_per_class: usize,
    pool_size: usize,
    sharing_rate: f64,
) -> Result<Corpus> {
    if num_classes == 0 {
        return Err(Error::Config("corpus needs at least one class".into()));
    }
    if attrs_per_class == 0 {
        return Err(Error::Config("corpus needs at least one attribute per class".into()));
    }
    if !(0.0..=1.0).contains(&sharing_rate) {
        return Err(Error::Config(format!(
            "sharing rate {sharing_rate} outside [0, 1]"
        )));
    }
    let shared_per_class = (sharing_rate * attrs_per_class as f64).round() as usize;
    if shared_per_class > pool_size {
        return Err(Error::Config(format!(
            "{shared_per_class} shared attributes per class cannot be drawn from a pool of {pool_size}"
        )));
    }

    let pool: Vec<String> = (0..pool_size).map(|i| format!("attr{i:03}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut attributes: Vec<String> = pool
            .choose_multiple(&mut rng, shared_per_class)
            .cloned()
            .collect();
        for j in 0..attrs_per_class - shared_per_class {
            attributes.push(format!("uniq{k:03}x{j}"));
        }
        entries.push(KnowledgeEntry {
            class_name: format!("class{k:03}"),
            attributes,
        });
    }
    let corpus = Corpus {
        entries,
        provenance: vec![
            ("generator".into(), "synthetic".into()),
            ("instruction".into(), INSTRUCTION_TEMPLATE.into()),
            ("seed".into(), seed.to_string()),
            ("classes".into(), num_classes.to_string()),
            ("attrs_per_class".into(), attrs_per_class.to_string()),
            ("pool_size".into(), pool_size.to_string()),
            ("sharing_rate".into(), sharing_rate.to_string()),
        ],
    };
    corpus.validate()?;
    Ok(corpus)
}

// ── deterministic word embeddings ────────────────────────────────────────

/// FNV-1a over the word's bytes — stable across runs and builds, unlike the
/// stdlib hasher.
fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Salt separating the word-embedding streams from every other RNG use.
const WORD_STREAM_SALT: u64 = 0x7f4a7c15a02bd9e3;

/// The embedding (and vision anchor) vector a word owns, as a pure function
/// of its text: the same word gets the same vector in every vocabulary, which
/// is what lets a model transfer to a corpus it was not trained on. Scaled so
/// rows have roughly unit norm.
pub fn word_vector(word: &str, dim: usize) -> Tensor {
    if word == PAD_TOKEN {
        return Tensor::zeros(&[dim]);
    }
    let std = 1.0 / (dim as f64).sqrt();
    Tensor::randn(&[dim], std, fnv1a64(word) ^ WORD_STREAM_SALT)
}

// ── vocabulary and tokenizer ─────────────────────────────────────────────

/// Closed word-level vocabulary over lowercased whitespace-separated tokens,
/// with `<pad>`/`<bos>`/`<eos>` specials at ids 0/1/2 and the remaining words
/// in sorted order. The embedding table row for each word is
/// [`word_vector`]; the PAD row is pinned to zeros.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    words: Vec<String>,
    table: Tensor,
    dim: usize,
}

impl Vocabulary {
    pub fn build(corpus: &Corpus, template: &PromptTemplate, dim: usize) -> Vocabulary {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for w in template.text.split_whitespace() {
            if w != "{}" {
                words.insert(w.to_lowercase());
            }
        }
        for e in &corpus.entries {
            for w in e.class_name.split_whitespace() {
                words.insert(w.to_lowercase());
            }
            for a in &e.attributes {
                for w in a.split_whitespace() {
                    words.insert(w.to_lowercase());
                }
            }
        }

        let mut all: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
        ];
        all.extend(words);

        let mut table = Tensor::zeros(&[all.len(), dim]);
        let mut ids = BTreeMap::new();
        for (i, w) in all.iter().enumerate() {
            let v = word_vector(w, dim);
            table.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(v.data());
            ids.insert(w.clone(), i);
        }
        Vocabulary {
            ids,
            words: all,
            table,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Insert the embedding table into a graph. Trainable only in gradient
    /// checks; the training loop always binds it frozen.
    pub fn bind_table(&self, g: &mut Graph, trainable: bool) -> NodeId {
        g.leaf(self.table.clone(), trainable)
    }

    /// Lowercase, split on whitespace, map through the closed vocabulary.
    pub fn tokenize_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                let lw = w.to_lowercase();
                self.ids.get(&lw).copied().ok_or_else(|| {
                    Error::Validation(format!("word {lw:?} is not in the vocabulary"))
                })
            })
            .collect()
    }
}

// ── prompt template ──────────────────────────────────────────────────────

/// A natural-language template with exactly one `{}` slot for the class name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches("{}").count() != 1 {
            return Err(Error::Config(format!(
                "template must contain exactly one {{}} slot: {text:?}"
            )));
        }
        Ok(PromptTemplate { text })
    }

    pub fn instantiate(&self, class_name: &str) -> String {
        self.text.replace("{}", class_name)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: "a photo of a {}".into(),
        }
    }
}

// ── knowledge tokenization ───────────────────────────────────────────────

/// A fixed-length token sequence: `[BOS, content..., EOS, PAD...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub eos_pos: usize,
}

impl TokenSeq {
    /// Key-mask over positions: `true` where the token is PAD.
    pub fn pad_mask(&self, vocab: &Vocabulary) -> Vec<bool> {
        self.ids.iter().map(|&id| id == vocab.pad_id()).collect()
    }
}

/// Tokenize one knowledge entry to exactly `context_len` ids.
///
/// With attributes present the content is the class name followed by each
/// attribute in order; a bare entry (baseline mode) falls back to the plain
/// template sentence. Errors with the required/available sizes when the
/// sequence cannot fit.
pub fn tokenize_knowledge(
    entry: &KnowledgeEntry,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    context_len: usize,
) -> Result<TokenSeq> {
    let mut content = Vec::new();
    if entry.attributes.is_empty() {
        content.extend(vocab.tokenize_words(&template.instantiate(&entry.class_name))?);
    } else {
        content.extend(vocab.tokenize_words(&entry.class_name)?);
        for a in &entry.attributes {
            content.extend(vocab.tokenize_words(a)?);
        }
    }
    let required = content.len() + 2; // BOS + EOS
    if required > context_len {
        return Err(Error::ContextOverflow {
            required,
            available: context_len,
        });
    }
    let mut ids = Vec::with_capacity(context_len);
    ids.push(vocab.bos_id());
    ids.extend(content);
    let eos_pos = ids.len();
    ids.push(vocab.eos_id());
    ids.resize(context_len, vocab.pad_id());
    Ok(TokenSeq { ids, eos_pos })
}
