//! Word vectors, vocabularies, prompt rendering and sentence masking.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};

pub const START: &str = "[START]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const END: &str = "[END]";
pub const CLS_SLOT: &str = "[CLS]";
pub const SPECIALS: [&str; 4] = [START, MASK, PAD, END];

pub const DEFAULT_TEMPLATE: &str = "a video of the [CLS]";

/// Word → vector lookup with a deterministic hashed fallback for unknown words.
#[derive(Clone, Debug)]
pub struct WordVecTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVecTable {
    /// Table with no stored entries; every lookup uses the hashed fallback.
    pub fn hashed(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Vec<f64> {
        match self.vectors.get(word) {
            Some(v) => v.clone(),
            None => hashed_vector(word, self.dim),
        }
    }
}

/// Unit-norm Gaussian vector seeded by the SHA-256 of `word`.
pub fn hashed_vector(word: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(word.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Loads a whitespace-separated `word v1 … vD` file, or `hash:D` for the
/// offline fallback table.
pub fn load_word_vectors(source: &str) -> Result<WordVecTable> {
    if let Some(dim) = source.strip_prefix("hash:") {
        let dim: usize = dim
            .parse()
            .map_err(|_| Error::parse("word vectors", format!("bad dimension in {source:?}")))?;
        if dim == 0 {
            return Err(invalid!("word vector dimension must be positive"));
        }
        return Ok(WordVecTable::hashed(dim));
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text, source)
}

pub fn parse_word_vectors(text: &str, context: &str) -> Result<WordVecTable> {
    let mut dim = None;
    let mut vectors = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(context, format!("line {}: {e}", i + 1)))?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(Error::parse(
                context,
                format!(
                    "line {}: expected {d} values, found {}",
                    i + 1,
                    values.len()
                ),
            ));
        }
        vectors.insert(word.to_string(), values);
    }
    let dim = dim.ok_or_else(|| Error::parse(context, "no vectors"))?;
    Ok(WordVecTable { dim, vectors })
}

/// Lowercase words of a class name, splitting on whitespace, `_`, `-` and
/// camel-case boundaries ("CleanAndJerk" → clean, and, jerk).
pub fn tokenize_class_name(name: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in name.split(|c: char| c.is_whitespace() || c == '_' || c == '-') {
        let chars: Vec<char> = chunk.chars().collect();
        let mut current = String::new();
        for (i, &ch) in chars.iter().enumerate() {
            let boundary = i > 0
                && ch.is_uppercase()
                && (chars[i - 1].is_lowercase()
                    || chars[i - 1].is_ascii_digit()
                    || (chars[i - 1].is_uppercase()
                        && chars.get(i + 1).is_some_and(|n| n.is_lowercase())));
            if boundary && !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            current.extend(ch.to_lowercase());
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Mean of the word vectors of a class name.
pub fn embed_label(class_name: &str, table: &WordVecTable) -> Result<Vec<f64>> {
    let words = tokenize_class_name(class_name);
    if words.is_empty() {
        return Err(invalid!("class name {class_name:?} has no words"));
    }
    let mut acc = vec![0.0; table.dim()];
    for w in &words {
        for (a, x) in acc.iter_mut().zip(table.get(w)) {
            *a += x;
        }
    }
    let n = words.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `C×D` matrix of label embeddings, one row per class.
pub fn label_embedding_matrix(class_names: &[String], table: &WordVecTable) -> Result<Mat> {
    let mut m = Array2::zeros((class_names.len(), table.dim()));
    for (c, name) in class_names.iter().enumerate() {
        for (j, x) in embed_label(name, table)?.into_iter().enumerate() {
            m[[c, j]] = x;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub prompt_len: usize,
    pub vlc_template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prompt_len: 10,
            vlc_template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(invalid!("prompt length must be positive"));
        }
        validate_template(&self.vlc_template)
    }
}

pub fn validate_template(template: &str) -> Result<()> {
    let slots = template
        .split_whitespace()
        .filter(|w| *w == CLS_SLOT)
        .count();
    if slots != 1 {
        return Err(invalid!(
            "template {template:?} must contain exactly one {CLS_SLOT} slot (found {slots})"
        ));
    }
    Ok(())
}

/// A rendered description and where the class words sit inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSentence {
    pub words: Vec<String>,
    pub label_span: Range<usize>,
}

/// `[START] template-with-class-words [END]`, lowercase.
pub fn render_sentence(class_name: &str, template: &str) -> Result<RenderedSentence> {
    validate_template(template)?;
    let class_words = tokenize_class_name(class_name);
    if class_words.is_empty() {
        return Err(invalid!("class name {class_name:?} has no words"));
    }
    let mut words = vec![START.to_string()];
    let mut label_span = 0..0;
    for w in template.split_whitespace() {
        if w == CLS_SLOT {
            let start = words.len();
            words.extend(class_words.iter().cloned());
            label_span = start..words.len();
        } else {
            words.push(w.to_lowercase());
        }
    }
    words.push(END.to_string());
    Ok(RenderedSentence { words, label_span })
}

/// Dense token ↔ index map; the four specials occupy indices 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn mask_index(&self) -> usize {
        1
    }

    pub fn is_special(&self, i: usize) -> bool {
        i < SPECIALS.len()
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.index_of(w)
                    .ok_or_else(|| invalid!("word {w:?} is not in the vocabulary"))
            })
            .collect()
    }

    /// `N_v×D` word-vector rows in vocabulary order.
    pub fn embedding_matrix(&self, table: &WordVecTable) -> Mat {
        let mut m = Array2::zeros((self.len(), table.dim()));
        for (i, t) in self.tokens.iter().enumerate() {
            for (j, x) in table.get(t).into_iter().enumerate() {
                m[[i, j]] = x;
            }
        }
        m
    }
}

/// Specials followed by the sorted union of template and class words.
pub fn build_vocabulary(class_names: &[String], templates: &[&str]) -> Result<Vocabulary> {
    if class_names.is_empty() {
        return Err(invalid!("cannot build a vocabulary without classes"));
    }
    let mut words = BTreeSet::new();
    for t in templates {
        validate_template(t)?;
        for w in t.split_whitespace().filter(|w| *w != CLS_SLOT) {
            words.insert(w.to_lowercase());
        }
    }
    for name in class_names {
        let tokens = tokenize_class_name(name);
        if tokens.is_empty() {
            return Err(invalid!("class name {name:?} has no words"));
        }
        words.extend(tokens);
    }
    let tokens: Vec<String> = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(
            words
                .into_iter()
                .filter(|w| !SPECIALS.contains(&w.as_str())),
        )
        .collect();
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary { tokens, index })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSentence {
    pub tokens: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub original_tokens: Vec<usize>,
    pub class_id: usize,
}

impl MaskedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unmask(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        for &p in &self.mask_positions {
            t[p] = self.original_tokens[p];
        }
        t
    }
}

/// Number of content words masked: `max(1, round(n/3))`.
pub fn mask_count(content: usize) -> usize {
    ((content as f64 / 3.0).round() as usize)
        .max(1)
        .min(content)
}

/// Masks a third of the non-special positions, chosen without replacement.
/// `label_bias` multiplies the selection weight of positions inside
/// `label_span`; 1.0 is uniform.
pub fn mask_sentence<R: Rng>(
    tokens: &[usize],
    vocab: &Vocabulary,
    class_id: usize,
    label_span: Range<usize>,
    label_bias: f64,
    rng: &mut R,
) -> MaskedSentence {
    let content: Vec<usize> = (0..tokens.len())
        .filter(|&i| !vocab.is_special(tokens[i]))
        .collect();
    let count = mask_count(content.len());
    let mut chosen: Vec<usize> = if content.is_empty() {
        Vec::new()
    } else if label_bias == 1.0 {
        index::sample(rng, content.len(), count)
            .into_iter()
            .map(|k| content[k])
            .collect()
    } else {
        let mut pool: Vec<(usize, f64)> = content
            .iter()
            .map(|&p| {
                (
                    p,
                    if label_span.contains(&p) {
                        label_bias
                    } else {
                        1.0
                    },
                )
            })
            .collect();
        let mut picked = Vec::with_capacity(count);
        for _ in 0..count {
            let total: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut r = rng.gen::<f64>() * total;
            let mut k = pool.len() - 1;
            for (i, (_, w)) in pool.iter().enumerate() {
                if r < *w {
                    k = i;
                    break;
                }
                r -= w;
            }
            picked.push(pool.remove(k).0);
        }
        picked
    };
    chosen.sort_unstable();
    let mut masked = tokens.to_vec();
    for &p in &chosen {
        masked[p] = vocab.mask_index();
    }
    MaskedSentence {
        tokens: masked,
        mask_positions: chosen,
        original_tokens: tokens.to_vec(),
        class_id,
    }
}

/// Learnable pieces of the class text queries: a shared `[START]` vector, a
/// shared context of `N_p` vectors, a projection from word-vector space and a
/// learnable background label embedding.
#[derive(Clone, Debug)]
pub struct PromptParams {
    pub start: ParamId,
    pub context: ParamId,
    pub label_proj: Linear,
    pub background: ParamId,
    pub prompt_len: usize,
}

impl PromptParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        prompt_len: usize,
        word_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            start: store.normal(format!("{name}.start"), (1, width), 0.02, rng),
            context: store.normal(format!("{name}.context"), (prompt_len, width), 0.02, rng),
            label_proj: Linear::new(
                store,
                &format!("{name}.label_proj"),
                word_dim,
                width,
                true,
                rng,
            ),
            background: store.zeros(format!("{name}.background"), (1, width)),
            prompt_len,
        }
    }

    /// `[L_s; L_p; L_e]` for class `class_id`, where `class_id == C` is background.
    /// `labels` holds the `C×D` label word embeddings.
    pub fn build_query_tokens(&self, g: &mut Graph, class_id: usize, labels: &Mat) -> Result<Var> {
        let c = labels.nrows();
        if class_id > c {
            return Err(invalid!("class id {class_id} outside 0..={c}"));
        }
        let start = g.param(self.start);
        let context = g.param(self.context);
        let label = if class_id == c {
            g.param(self.background)
        } else {
            let row = labels
                .row(class_id)
                .to_owned()
                .insert_axis(ndarray::Axis(0));
            let row = g.constant(row);
            self.label_proj.forward(g, row)
        };
        Ok(g.concat_rows(&[start, context, label]))
    }
}
