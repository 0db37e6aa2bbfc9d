//! Text embedder: word, character and optional precomputed contextual
//! embeddings, concatenated and projected to the initial sequence
//! representation.
//!
//! Word lookups are case-folded; the character encoder sees the original
//! case. Word embeddings are frozen after initialization (optionally from a
//! GloVe text file), the character side is trained.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{ParamBinding, ParamId, ParamStore};
use crate::table::GruCell;
use crate::tensor::{Tape, Tensor, TensorId};

/// Token-to-index map with fixed UNK/PAD slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub fold_case: bool,
}

pub const UNK: usize = 0;
pub const PAD: usize = 1;

impl Vocabulary {
    /// Build from an iterator of tokens. `fold_case` lowercases both the
    /// entries and later lookups.
    pub fn build<'a>(tokens: impl Iterator<Item = &'a str>, fold_case: bool) -> Self {
        let mut v = Vocabulary {
            tokens: vec!["<unk>".into(), "<pad>".into()],
            index: HashMap::new(),
            fold_case,
        };
        v.index.insert("<unk>".into(), UNK);
        v.index.insert("<pad>".into(), PAD);
        for t in tokens {
            let key = if fold_case { t.to_lowercase() } else { t.to_string() };
            if !v.index.contains_key(&key) {
                v.index.insert(key.clone(), v.tokens.len());
                v.tokens.push(key);
            }
        }
        v
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn lookup(&self, token: &str) -> usize {
        let key = if self.fold_case { token.to_lowercase() } else { token.to_string() };
        self.index.get(&key).copied().unwrap_or(UNK)
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
}

/// Parse a GloVe text file (`token v1 .. vD` per line) into an embedding
/// matrix over `vocab`. Rows for out-of-file tokens are sampled
/// uniform(-0.1, 0.1); the matrix is meant to stay frozen.
pub fn load_glove(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let mut data: Vec<f64> =
        (0..vocab.len() * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let reader = BufReader::new(File::open(path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::Format(format!("line {}: empty line", lineno + 1)))?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: bad float '{}'", lineno + 1, p))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {} values, got {}",
                lineno + 1,
                dim,
                values.len()
            )));
        }
        let idx = vocab.lookup(token);
        if idx != UNK || token == "<unk>" {
            data[idx * dim..(idx + 1) * dim].copy_from_slice(&values);
        }
    }
    Tensor::new(vec![vocab.len(), dim], data)
}

/// Builds S₀ from `[x^c; x^w(; x^ℓ)]` through a linear projection.
pub struct Embedder {
    pub word_emb: ParamId,
    pub char_emb: ParamId,
    char_fwd: GruCell,
    char_bwd: GruCell,
    char_proj_w: ParamId,
    char_proj_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    pub word_dim: usize,
    pub char_dim: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
}

impl Embedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        word_vocab: &Vocabulary,
        char_vocab: &Vocabulary,
        word_dim: usize,
        char_dim: usize,
        ctx_dim: usize,
        hidden: usize,
        word_init: Option<Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let word_emb = match word_init {
            Some(t) => {
                if t.shape() != [word_vocab.len(), word_dim] {
                    return Err(Error::Shape(format!(
                        "word embedding init must be [{},{}], got {:?}",
                        word_vocab.len(),
                        word_dim,
                        t.shape()
                    )));
                }
                store.add("embed.word", t, false)
            }
            None => store.add_embedding("embed.word", word_vocab.len(), word_dim, false, rng),
        };
        let char_emb = store.add_embedding("embed.char", char_vocab.len(), char_dim, true, rng);
        let char_fwd = GruCell::new(store, "embed.char_fwd", char_dim, char_dim, rng);
        let char_bwd = GruCell::new(store, "embed.char_bwd", char_dim, char_dim, rng);
        let char_proj_w = store.add_xavier("embed.char_proj_w", 2 * char_dim, char_dim, rng);
        let char_proj_b = store.add_zeros("embed.char_proj_b", &[char_dim]);
        let in_width = word_dim + char_dim + ctx_dim;
        let proj_w = store.add_xavier("embed.proj_w", in_width, hidden, rng);
        let proj_b = store.add_zeros("embed.proj_b", &[hidden]);
        Ok(Embedder {
            word_emb,
            char_emb,
            char_fwd,
            char_bwd,
            char_proj_w,
            char_proj_b,
            proj_w,
            proj_b,
            word_dim,
            char_dim,
            ctx_dim,
            hidden,
        })
    }

    /// Character encoding of one word: a bidirectional pass of the gated
    /// recurrent cell over its characters, final states concatenated and
    /// projected back to `char_dim`. Output is `[1, char_dim]`.
    pub fn char_encode(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        char_vocab: &Vocabulary,
        word: &str,
    ) -> Result<TensorId> {
        let ids: Vec<usize> = word
            .chars()
            .map(|c| char_vocab.lookup(&c.to_string()))
            .collect();
        if ids.is_empty() {
            return Err(Error::Input("char_encode on empty word".into()));
        }
        let embs = tape.gather(bind[self.char_emb], &ids)?; // [len, char_dim]
        let zero = tape.zeros(&[1, self.char_dim]);

        let mut run = |cell: &GruCell, order: Vec<usize>| -> Result<TensorId> {
            let mut state = zero;
            for t in order {
                let x = tape.row(embs, t)?;
                // 1-D recurrence: the previous state enters through the row
                // slot, layer and column predecessors stay zero
                state = cell.step(tape, bind, x, zero, state, zero)?;
            }
            Ok(state)
        };
        let fwd = run(&self.char_fwd, (0..ids.len()).collect())?;
        let bwd = run(&self.char_bwd, (0..ids.len()).rev().collect())?;
        let cat = tape.concat(1, &[fwd, bwd])?;
        let lin = tape.matmul(cat, bind[self.char_proj_w])?;
        tape.add(lin, bind[self.char_proj_b])
    }

    /// S₀ for a token sequence: `[N, hidden]`. `ctx` must have one row per
    /// token when given. Dropout applies only when `training`.
    #[allow(clippy::too_many_arguments)]
    pub fn embed_sentence(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        word_vocab: &Vocabulary,
        char_vocab: &Vocabulary,
        tokens: &[String],
        ctx: Option<&Tensor>,
        dropout_keep: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Input("cannot embed an empty sentence".into()));
        }
        if let Some(c) = ctx {
            if c.shape()[0] != n {
                return Err(Error::Alignment(format!(
                    "sentence has {} tokens but contextual embeddings cover {}",
                    n,
                    c.shape()[0]
                )));
            }
            if c.shape()[1] != self.ctx_dim {
                return Err(Error::Config(format!(
                    "contextual width {} does not match configured d3 {}",
                    c.shape()[1],
                    self.ctx_dim
                )));
            }
        } else if self.ctx_dim != 0 {
            return Err(Error::Alignment(
                "model expects contextual embeddings but none were given".into(),
            ));
        }

        let word_ids: Vec<usize> = tokens.iter().map(|t| word_vocab.lookup(t)).collect();
        let words = tape.gather(bind[self.word_emb], &word_ids)?; // [N, d1]

        // char encodings, cached per surface form within this pass
        let mut cache: HashMap<&str, TensorId> = HashMap::new();
        let mut char_rows = Vec::with_capacity(n);
        for t in tokens {
            let id = match cache.get(t.as_str()) {
                Some(&id) => id,
                None => {
                    let id = self.char_encode(tape, bind, char_vocab, t)?;
                    cache.insert(t.as_str(), id);
                    id
                }
            };
            char_rows.push(id);
        }
        let chars = tape.concat(0, &char_rows)?; // [N, d2]

        let cat = match ctx {
            Some(c) => {
                let cid = tape.constant(c.clone());
                tape.concat(1, &[chars, words, cid])?
            }
            None => tape.concat(1, &[chars, words])?,
        };
        let lin = tape.matmul(cat, bind[self.proj_w])?;
        let s0 = tape.add(lin, bind[self.proj_b])?;
        if training && dropout_keep < 1.0 {
            Ok(tape.dropout(s0, dropout_keep, rng))
        } else {
            Ok(s0)
        }
    }
}
