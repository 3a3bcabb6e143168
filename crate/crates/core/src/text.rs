//! Word-level text codec: vocabulary, skip-gram base embeddings, the
//! base↔model-width projection pair and nearest-neighbour decoding.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Splits a caption into words: drops URLs, strips every non-alphanumeric
/// character, keeps case.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .filter(|w| {
            let lw = w.to_ascii_lowercase();
            !(lw.starts_with("http://") || lw.starts_with("https://") || lw.starts_with("www."))
        })
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sorted corpus words followed by EOS and PAD.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let words: BTreeSet<String> = corpus.iter().flat_map(|c| tokenize(c.as_ref())).collect();
        let mut tokens: Vec<String> = words.into_iter().collect();
        tokens.push(EOS.to_string());
        tokens.push(PAD.to_string());
        Self::from_tokens(tokens)
    }

    /// Restores a vocabulary from its serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        if !index.contains_key(EOS) || !index.contains_key(PAD) {
            return Err(Error::Vocab("vocabulary lacks EOS or PAD".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    /// Token ids of a caption: words, one EOS, then PAD up to `text_len`.
    pub fn encode_ids(&self, caption: &str, text_len: usize) -> Result<Vec<usize>> {
        let words = tokenize(caption);
        if words.len() + 1 > text_len {
            return Err(Error::Vocab(format!(
                "caption has {} words, at most {} fit",
                words.len(),
                text_len.saturating_sub(1)
            )));
        }
        let mut ids = Vec::with_capacity(text_len);
        for w in &words {
            ids.push(
                self.id(w)
                    .ok_or_else(|| Error::Vocab(format!("out-of-vocabulary word {w:?}")))?,
            );
        }
        ids.push(self.eos());
        ids.resize(text_len, self.pad());
        Ok(ids)
    }

    /// Words before the first EOS/PAD, at most `ids.len() - 1` of them.
    pub fn ids_to_caption(&self, ids: &[usize]) -> String {
        let limit = ids.len().saturating_sub(1);
        ids.iter()
            .take(limit)
            .take_while(|&&i| i != self.eos() && i != self.pad())
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Base word embeddings plus the projection pair to the model width.
///
/// The base table is frozen after skip-gram training. `up` maps base vectors
/// to the diffusion space, `down` maps back for decoding; they are stored
/// independently.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub base: Array2<f64>,
    pub up: Array2<f64>,
    pub down: Array2<f64>,
    /// Set when the corpus had no context pair and the table is random.
    pub fallback: bool,
}

/// Skip-gram hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct SkipGram {
    pub window: usize,
    pub negatives: usize,
    pub lr: f64,
}

impl Default for SkipGram {
    fn default() -> Self {
        Self {
            window: 2,
            negatives: 5,
            lr: 0.025,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gaussian matrix with orthonormal rows (requires `rows <= cols`).
fn orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    assert!(rows <= cols);
    let mut m = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        loop {
            let mut v: Array1<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
            for j in 0..i {
                let prev = m.row(j);
                let proj = v.dot(&prev);
                v.scaled_add(-proj, &prev);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                m.row_mut(i).assign(&(v / norm));
                break;
            }
        }
    }
    m
}

impl EmbeddingTable {
    /// Trains base embeddings with skip-gram negative sampling over the
    /// corpus (each caption followed by EOS), then builds the projection pair.
    pub fn train<S: AsRef<str>>(
        vocab: &Vocabulary,
        corpus: &[S],
        word_dim: usize,
        embed_dim: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::train_with(vocab, corpus, word_dim, embed_dim, epochs, seed, SkipGram::default())
    }

    pub fn train_with<S: AsRef<str>>(
        vocab: &Vocabulary,
        corpus: &[S],
        word_dim: usize,
        embed_dim: usize,
        epochs: usize,
        seed: u64,
        sg: SkipGram,
    ) -> Result<Self> {
        if word_dim == 0 || word_dim > embed_dim {
            return Err(Error::Config(format!(
                "word_dim {word_dim} must be in 1..={embed_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(corpus.len());
        for c in corpus {
            let mut ids = Vec::new();
            for w in tokenize(c.as_ref()) {
                ids.push(
                    vocab
                        .id(&w)
                        .ok_or_else(|| Error::Vocab(format!("out-of-vocabulary word {w:?}")))?,
                );
            }
            ids.push(vocab.eos());
            sentences.push(ids);
        }
        let has_pairs = sentences.iter().any(|s| s.len() >= 2) && sg.window > 0;

        let scale = 0.5 / word_dim as f64;
        let mut w_in =
            Array2::<f64>::from_shape_simple_fn((v, word_dim), || rng.random_range(-scale..scale));
        let mut w_out = Array2::<f64>::zeros((v, word_dim));

        if has_pairs && epochs > 0 {
            let mut counts = vec![0.0f64; v];
            for s in &sentences {
                for &i in s {
                    counts[i] += 1.0;
                }
            }
            let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
            let noise = WeightedIndex::new(&weights).map_err(|e| Error::Vocab(e.to_string()))?;
            let total = (epochs * sentences.len()) as f64;
            let mut order: Vec<usize> = (0..sentences.len()).collect();
            let mut done = 0.0;
            let mut grad_in = Array1::<f64>::zeros(word_dim);
            for _ in 0..epochs {
                order.shuffle(&mut rng);
                for &si in &order {
                    let lr = sg.lr * (1.0 - done / total).max(1e-4);
                    done += 1.0;
                    let s = &sentences[si];
                    for (i, &center) in s.iter().enumerate() {
                        let lo = i.saturating_sub(sg.window);
                        let hi = (i + sg.window).min(s.len() - 1);
                        for (j, &ctx) in s.iter().enumerate().take(hi + 1).skip(lo) {
                            if j == i {
                                continue;
                            }
                            grad_in.fill(0.0);
                            for k in 0..=sg.negatives {
                                let (target, label) = if k == 0 {
                                    (ctx, 1.0)
                                } else {
                                    let n = noise.sample(&mut rng);
                                    if n == ctx {
                                        continue;
                                    }
                                    (n, 0.0)
                                };
                                let score = w_in.row(center).dot(&w_out.row(target));
                                let g = lr * (label - sigmoid(score));
                                grad_in.scaled_add(g, &w_out.row(target));
                                let wc = w_in.row(center).to_owned();
                                w_out.row_mut(target).scaled_add(g, &wc);
                            }
                            w_in.row_mut(center).scaled_add(1.0, &grad_in);
                        }
                    }
                }
            }
        }

        let mut base = if has_pairs && epochs > 0 {
            &w_in + &w_out
        } else {
            log::warn!("no context pairs in corpus; using random base embeddings");
            let mut g = Array2::zeros((v, word_dim));
            if v <= word_dim {
                g.assign(&orthonormal_rows(v, word_dim, &mut rng));
            } else {
                g.mapv_inplace(|_: f64| rng.sample(StandardNormal));
            }
            g
        };
        // Unit RMS per element.
        let target = (word_dim as f64).sqrt();
        for mut row in base.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x * target / n);
            }
        }
        let mut table = Self::with_projections(base, embed_dim, &mut rng);
        table.fallback = !(has_pairs && epochs > 0);
        Ok(table)
    }

    /// Wraps a base table with a fresh projection pair: `up` has orthogonal
    /// rows scaled by `sqrt(embed_dim / word_dim)` and `down` is its
    /// pseudo-inverse.
    pub fn with_projections<R: Rng + ?Sized>(base: Array2<f64>, embed_dim: usize, rng: &mut R) -> Self {
        let word_dim = base.ncols();
        let q = orthonormal_rows(word_dim, embed_dim, rng);
        let s = (embed_dim as f64 / word_dim as f64).sqrt();
        let up = &q * s;
        let down = q.t().to_owned() / s;
        Self {
            base,
            up,
            down,
            fallback: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.base.nrows()
    }

    pub fn word_dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.up.ncols()
    }

    /// Smallest Euclidean distance between two base embeddings.
    pub fn decode_margin(&self) -> f64 {
        let v = self.vocab_size();
        let mut best = f64::INFINITY;
        for i in 0..v {
            for j in i + 1..v {
                let d = &self.base.row(i) - &self.base.row(j);
                best = best.min(d.dot(&d).sqrt());
            }
        }
        best
    }

    fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.vocab_size() {
            return Err(Error::Shape(format!(
                "vocabulary has {} tokens, embedding table {}",
                vocab.len(),
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Model-width embeddings for token ids, `(ids.len(), embed_dim)`.
    pub fn embed_ids<F: Real>(&self, ids: &[usize]) -> Array2<F> {
        let mut base = Array2::<f64>::zeros((ids.len(), self.word_dim()));
        for (r, &i) in ids.iter().enumerate() {
            base.row_mut(r).assign(&self.base.row(i));
        }
        base.dot(&self.up).mapv(F::of)
    }

    /// Caption → `(text_len, embed_dim)` diffusion-space tensor.
    pub fn encode<F: Real>(&self, vocab: &Vocabulary, caption: &str, text_len: usize) -> Result<Array2<F>> {
        self.check_vocab(vocab)?;
        let ids = vocab.encode_ids(caption, text_len)?;
        Ok(self.embed_ids(&ids))
    }

    /// Maps model-width rows back to base space.
    pub fn project_down<F: Real>(&self, emb: ArrayView2<F>) -> Array2<f64> {
        emb.mapv(|x| x.to_f64_lossy()).dot(&self.down)
    }

    /// Nearest base embedding per row.
    pub fn nearest_ids<F: Real>(&self, emb: ArrayView2<F>) -> Vec<usize> {
        let z = self.project_down(emb);
        z.rows()
            .into_iter()
            .map(|row| {
                let mut best = (f64::INFINITY, 0);
                for (i, b) in self.base.rows().into_iter().enumerate() {
                    let d = &row - &b;
                    let dist = d.dot(&d);
                    if dist < best.0 {
                        best = (dist, i);
                    }
                }
                best.1
            })
            .collect()
    }

    /// Nearest-neighbour decoding, truncated at the first EOS.
    pub fn decode<F: Real>(&self, vocab: &Vocabulary, emb: ArrayView2<F>) -> String {
        vocab.ids_to_caption(&self.nearest_ids(emb))
    }

    /// Cosine similarity between two base embeddings.
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.base.row(a), self.base.row(b));
        x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
    }
}
