//! Skip-gram word2vec with negative sampling, and the averaging that turns
//! token vectors into basic-block and snapshot embeddings.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{node_value_tokens, CctNode};
use crate::isa::{token_texts, BasicBlock, Dialect};

pub const UNK: &str = "<unk>";
const MAGIC: &[u8; 5] = b"GSEMB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("corpus has no tokens")]
    EmptyCorpus,
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocab {
    pub(crate) fn from_tokens(tokens: Vec<String>, min_count: usize) -> Vocab {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids, min_count }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or 0 (UNK) when it was not kept.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps tokens seen at least `min_count` times, in first-occurrence order
/// after the reserved UNK at id 0.
pub fn build_vocab<S: AsRef<[String]>>(corpus: &[S], min_count: usize) -> Result<Vocab, EmbeddingError> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order = Vec::new();
    for sentence in corpus {
        for t in sentence.as_ref() {
            let c = counts.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.as_str());
            }
            *c += 1;
        }
    }
    if order.is_empty() {
        return Err(EmbeddingError::EmptyCorpus);
    }
    let mut tokens = vec![UNK.to_string()];
    tokens.extend(order.into_iter().filter(|t| counts[t] >= min_count && *t != UNK).map(str::to_string));
    Ok(Vocab::from_tokens(tokens, min_count))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2vParams {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl W2vParams {
    pub fn with_dim(dim: usize, seed: u64) -> W2vParams {
        W2vParams { dim, window: 2, negatives: 5, epochs: 5, lr: 0.025, min_count: 2, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub dim: usize,
    /// Row-major `|V| x dim`.
    pub vectors: Vec<f32>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trains skip-gram vectors with negative sampling from the unigram^0.75
/// distribution. Single-threaded and deterministic for a given seed.
pub fn train_word2vec<S: AsRef<[String]>>(corpus: &[S], params: &W2vParams) -> Result<EmbeddingTable, EmbeddingError> {
    assert!(params.dim >= 1 && params.window >= 1 && params.negatives >= 1);
    let vocab = build_vocab(corpus, params.min_count)?;
    let (v, d) = (vocab.len(), params.dim);
    let sentences: Vec<Vec<usize>> =
        corpus.iter().map(|s| s.as_ref().iter().map(|t| vocab.id(t)).collect()).collect();

    let mut freq = vec![0usize; v];
    sentences.iter().flatten().for_each(|&i| freq[i] += 1);
    let mut cdf = Vec::with_capacity(v);
    let mut acc = 0.0;
    for &f in &freq {
        acc += (f as f64).powf(0.75);
        cdf.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut w_in: Vec<f64> = (0..v * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect();
    let mut w_out = vec![0.0f64; v * d];

    let pairs_per_epoch: usize = sentences
        .iter()
        .map(|s| (0..s.len()).map(|i| i.min(params.window) + (s.len() - 1 - i).min(params.window)).sum::<usize>())
        .sum();
    let total = (pairs_per_epoch * params.epochs).max(1) as f64;
    let mut done = 0usize;
    let mut grad = vec![0.0f64; d];

    for _ in 0..params.epochs {
        for s in &sentences {
            for (i, &center) in s.iter().enumerate() {
                let lo = i.saturating_sub(params.window);
                let hi = (i + params.window).min(s.len() - 1);
                for (j, &ctx) in s.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = params.lr * (1.0 - done as f64 / total).max(1e-4);
                    done += 1;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let input = center * d;
                    for k in 0..=params.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let r = rng.gen::<f64>() * acc;
                            let t = cdf.partition_point(|&c| c <= r).min(v - 1);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = target * d;
                        let dot: f64 = (0..d).map(|q| w_in[input + q] * w_out[out + q]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for q in 0..d {
                            grad[q] += g * w_out[out + q];
                            w_out[out + q] += g * w_in[input + q];
                        }
                    }
                    for q in 0..d {
                        w_in[input + q] += grad[q];
                    }
                }
            }
        }
    }
    Ok(EmbeddingTable { vocab, dim: d, vectors: w_in.into_iter().map(|x| x as f32).collect() })
}

impl EmbeddingTable {
    pub fn row(&self, id: usize) -> &[f32] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vector(&self, token: &str) -> &[f32] {
        self.row(self.vocab.id(token))
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        cosine(self.vector(a), self.vector(b))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for t in self.vocab.tokens() {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<EmbeddingTable, EmbeddingError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EmbeddingError::Format("bad magic".into()));
        }
        let mut u32_buf = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> io::Result<u32> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = next_u32(&mut r)?;
        if version != VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let v = next_u32(&mut r)? as usize;
        let dim = next_u32(&mut r)? as usize;
        let mut tokens = Vec::with_capacity(v);
        for _ in 0..v {
            let len = next_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            tokens.push(String::from_utf8(buf).map_err(|_| EmbeddingError::Format("token is not UTF-8".into()))?);
        }
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(EmbeddingError::Format("first token must be the UNK marker".into()));
        }
        let mut raw = vec![0u8; v * dim * 4];
        r.read_exact(&mut raw)?;
        let vectors: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::Format("non-finite vector entry".into()));
        }
        Ok(EmbeddingTable { vocab: Vocab::from_tokens(tokens, 0), dim, vectors })
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `(token id, weight)` pairs whose weighted sum is the two-level mean:
/// tokens averaged within each instruction, instructions averaged.
pub fn block_weights(instructions: &[Vec<String>], vocab: &Vocab) -> Vec<(usize, f64)> {
    let non_empty = instructions.iter().filter(|i| !i.is_empty()).count();
    let mut out = Vec::new();
    for ins in instructions.iter().filter(|i| !i.is_empty()) {
        let w = 1.0 / (non_empty * ins.len()) as f64;
        out.extend(ins.iter().map(|t| (vocab.id(t), w)));
    }
    out
}

/// Flat mean over tokens; empty for no tokens.
pub fn flat_weights(tokens: &[String], vocab: &Vocab) -> Vec<(usize, f64)> {
    let w = 1.0 / tokens.len().max(1) as f64;
    tokens.iter().map(|t| (vocab.id(t), w)).collect()
}

fn weighted_sum(table: &EmbeddingTable, weights: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; table.dim];
    for &(id, w) in weights {
        for (o, &v) in out.iter_mut().zip(table.row(id)) {
            *o += w * v as f64;
        }
    }
    out
}

pub fn embed_token_lists(instructions: &[Vec<String>], table: &EmbeddingTable) -> Vec<f64> {
    weighted_sum(table, &block_weights(instructions, &table.vocab))
}

pub fn embed_block(block: &BasicBlock, table: &EmbeddingTable, dialect: Dialect) -> Vec<f64> {
    let toks: Vec<Vec<String>> = block.instructions.iter().map(|i| token_texts(i, dialect)).collect();
    embed_token_lists(&toks, table)
}

/// Mean over all value tokens of all snapshots; zero without snapshots.
pub fn embed_snapshots(node: &CctNode, table: &EmbeddingTable) -> Vec<f64> {
    weighted_sum(table, &flat_weights(&node_value_tokens(node), &table.vocab))
}
