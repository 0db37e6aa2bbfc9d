//! Dataset ingestion, split management, and precomputed-feature files.
//!
//! Corpus format: JSONL, one sentence per line:
//! `{"tokens":[...], "entities":[{"start":s,"end":e,"type":"PER"},...],
//!   "relations":[{"head":hi,"tail":ti,"type":"r"},...]}`
//! with `end` exclusive and `head`/`tail` indexing into `entities`. An
//! optional `"id"` overrides the default line index.
//!
//! Feature format: 8-byte magic `TSQFEAT1`, little-endian u64 header
//! length, a JSON header `{"kind":..,"width":..,"sentences":[{"id":..,
//! "len":..},..]}`, then the body as little-endian f32, sentence-major,
//! row-major within a sentence: `len*width` floats per sentence for
//! embeddings, `len*len*width` for attention stacks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{EntitySpan, RelationRef, Sentence, TagVocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"TSQFEAT1";

/// A loaded dataset split: validated sentences plus label inventories.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub vocab: TagVocab,
    /// Sentences dropped at load time because their entities overlap.
    pub dropped_overlapping: usize,
}

#[derive(Serialize, Deserialize)]
struct RawEntity {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    etype: String,
}

#[derive(Serialize, Deserialize)]
struct RawRelation {
    head: usize,
    tail: usize,
    #[serde(rename = "type")]
    rtype: String,
}

#[derive(Serialize, Deserialize)]
struct RawSentence {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<RawEntity>,
    #[serde(default)]
    relations: Vec<RawRelation>,
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path)?;
    load_corpus_reader(BufReader::new(file))
}

pub fn load_corpus_str(text: &str) -> Result<Corpus> {
    load_corpus_reader(BufReader::new(text.as_bytes()))
}

fn load_corpus_reader(reader: impl BufRead) -> Result<Corpus> {
    let mut raws = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSentence = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("line {}: {}", lineno + 1, e))
        })?;
        if raw.tokens.is_empty() {
            return Err(Error::Format(format!("line {}: empty token list", lineno + 1)));
        }
        let n = raw.tokens.len();
        for ent in &raw.entities {
            if ent.start >= ent.end || ent.end > n {
                return Err(Error::Format(format!(
                    "line {}: entity span {}..{} invalid for {} tokens",
                    lineno + 1,
                    ent.start,
                    ent.end,
                    n
                )));
            }
        }
        for rel in &raw.relations {
            if rel.head >= raw.entities.len() || rel.tail >= raw.entities.len() {
                return Err(Error::Reference(format!(
                    "line {}: relation references entity {} but sentence has {}",
                    lineno + 1,
                    rel.head.max(rel.tail),
                    raw.entities.len()
                )));
            }
        }
        raws.push((lineno, raw));
    }

    // drop sentences with overlapping entities, count them
    let mut dropped = 0usize;
    raws.retain(|(_, raw)| {
        for (a, ea) in raw.entities.iter().enumerate() {
            for eb in raw.entities.iter().skip(a + 1) {
                if ea.start < eb.end && eb.start < ea.end {
                    dropped += 1;
                    return false;
                }
            }
        }
        true
    });

    // label inventories from retained sentences, sorted for determinism
    let mut etypes: Vec<String> = Vec::new();
    let mut rtypes: Vec<String> = Vec::new();
    for (_, raw) in &raws {
        for e in &raw.entities {
            etypes.push(e.etype.clone());
        }
        for r in &raw.relations {
            rtypes.push(r.rtype.clone());
        }
    }
    let vocab = TagVocab::new(etypes, rtypes);
    let e_index: HashMap<&str, usize> =
        vocab.entity_types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let r_index: HashMap<&str, usize> =
        vocab.relation_types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let mut seen_ids = HashMap::new();
    let mut sentences = Vec::with_capacity(raws.len());
    for (lineno, raw) in raws {
        let id = raw.id.unwrap_or(lineno);
        if let Some(prev) = seen_ids.insert(id, lineno) {
            return Err(Error::Format(format!(
                "line {}: duplicate sentence id {} (first on line {})",
                lineno + 1,
                id,
                prev + 1
            )));
        }
        sentences.push(Sentence {
            id,
            tokens: raw.tokens,
            entities: raw
                .entities
                .iter()
                .map(|e| EntitySpan::new(e.start, e.end, e_index[e.etype.as_str()]))
                .collect(),
            relations: raw
                .relations
                .iter()
                .map(|r| RelationRef {
                    head: r.head,
                    tail: r.tail,
                    rtype: r_index[r.rtype.as_str()],
                })
                .collect(),
        });
    }

    Ok(Corpus { sentences, vocab, dropped_overlapping: dropped })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &corpus.sentences {
        let raw = RawSentence {
            id: Some(s.id),
            tokens: s.tokens.clone(),
            entities: s
                .entities
                .iter()
                .map(|e| RawEntity {
                    start: e.start,
                    end: e.end,
                    etype: corpus.vocab.entity_types[e.etype].clone(),
                })
                .collect(),
            relations: s
                .relations
                .iter()
                .map(|r| RawRelation {
                    head: r.head,
                    tail: r.tail,
                    rtype: corpus.vocab.relation_types[r.rtype].clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Sentence, entity and relation counts with per-type breakdowns.
#[derive(Clone, Debug, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub entities: usize,
    pub entity_types: Vec<(String, usize)>,
    pub relations: usize,
    pub relation_types: Vec<(String, usize)>,
    pub dropped_overlapping: usize,
}

pub fn stats(corpus: &Corpus) -> CorpusStats {
    let mut e_counts = vec![0usize; corpus.vocab.entity_types.len()];
    let mut r_counts = vec![0usize; corpus.vocab.relation_types.len()];
    for s in &corpus.sentences {
        for e in &s.entities {
            e_counts[e.etype] += 1;
        }
        for r in &s.relations {
            r_counts[r.rtype] += 1;
        }
    }
    CorpusStats {
        sentences: corpus.sentences.len(),
        entities: e_counts.iter().sum(),
        entity_types: corpus
            .vocab
            .entity_types
            .iter()
            .cloned()
            .zip(e_counts)
            .collect(),
        relations: r_counts.iter().sum(),
        relation_types: corpus
            .vocab
            .relation_types
            .iter()
            .cloned()
            .zip(r_counts)
            .collect(),
        dropped_overlapping: corpus.dropped_overlapping,
    }
}

// ── feature files ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Embedding,
    Attention,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    kind: FeatureKind,
    width: usize,
    sentences: Vec<FeatureSentence>,
}

#[derive(Serialize, Deserialize)]
struct FeatureSentence {
    id: usize,
    len: usize,
}

/// Per-sentence feature tensors, keyed by sentence id. Embedding files
/// yield `[N, width]`, attention files `[N, N, width]`.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    pub width: usize,
    pub by_id: HashMap<usize, Tensor>,
}

impl FeatureSet {
    /// Verify that every corpus sentence is covered with a matching length.
    pub fn check_coverage(&self, corpus: &Corpus) -> Result<()> {
        for s in &corpus.sentences {
            match self.by_id.get(&s.id) {
                None => {
                    return Err(Error::Coverage(format!(
                        "feature file has no entry for sentence id {}",
                        s.id
                    )))
                }
                Some(t) => {
                    if t.shape()[0] != s.len() {
                        return Err(Error::Alignment(format!(
                            "sentence {} has {} tokens but feature rows cover {}",
                            s.id,
                            s.len(),
                            t.shape()[0]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn save_features(
    path: &Path,
    kind: FeatureKind,
    width: usize,
    items: &[(usize, usize, Vec<f32>)], // (id, len, values)
) -> Result<()> {
    for (id, len, values) in items {
        let expect = match kind {
            FeatureKind::Embedding => len * width,
            FeatureKind::Attention => len * len * width,
        };
        if values.len() != expect {
            return Err(Error::Contract(format!(
                "sentence {}: expected {} floats, got {}",
                id,
                expect,
                values.len()
            )));
        }
    }
    let header = FeatureHeader {
        kind,
        width,
        sentences: items.iter().map(|(id, len, _)| FeatureSentence { id: *id, len: *len }).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, values) in items {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("feature file too short for magic".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad feature magic {:?}, expected {:?}",
            magic, FEATURE_MAGIC
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("feature file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Corruption("header shorter than its declared length".into()))?;
    let header: FeatureHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("feature header: {}", e)))?;

    let mut body = Vec::new();
    f.read_to_end(&mut body)?;
    let expected_floats: usize = header
        .sentences
        .iter()
        .map(|s| match header.kind {
            FeatureKind::Embedding => s.len * header.width,
            FeatureKind::Attention => s.len * s.len * header.width,
        })
        .sum();
    if body.len() != expected_floats * 4 {
        return Err(Error::Corruption(format!(
            "body is {} bytes but header implies {}",
            body.len(),
            expected_floats * 4
        )));
    }

    let mut by_id = HashMap::new();
    let mut offset = 0usize;
    for s in &header.sentences {
        let (count, shape) = match header.kind {
            FeatureKind::Embedding => (s.len * header.width, vec![s.len, header.width]),
            FeatureKind::Attention => {
                (s.len * s.len * header.width, vec![s.len, s.len, header.width])
            }
        };
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 4;
            let v = f32::from_le_bytes([body[at], body[at + 1], body[at + 2], body[at + 3]]);
            data.push(v as f64);
        }
        offset += count * 4;
        if by_id.insert(s.id, Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate sentence id {} in header", s.id)));
        }
    }

    Ok(FeatureSet { kind: header.kind, width: header.width, by_id })
}

// ── splits ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub enum SplitScheme {
    /// Hold out this fraction of sentences as the development set.
    DevFrac(f64),
    KFold(usize),
}

/// Deterministic under a fixed seed; k-fold parts partition the corpus
/// exactly.
pub fn make_splits(corpus: &Corpus, scheme: SplitScheme, seed: u64) -> Vec<(Corpus, Corpus)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    order.shuffle(&mut rng);

    let subset = |ids: &[usize]| Corpus {
        sentences: ids.iter().map(|&i| corpus.sentences[i].clone()).collect(),
        vocab: corpus.vocab.clone(),
        dropped_overlapping: 0,
    };

    match scheme {
        SplitScheme::DevFrac(frac) => {
            let n_dev = ((corpus.sentences.len() as f64) * frac).round() as usize;
            let n_dev = n_dev.clamp(1, corpus.sentences.len().saturating_sub(1).max(1));
            let (dev_ids, train_ids) = order.split_at(n_dev);
            vec![(subset(train_ids), subset(dev_ids))]
        }
        SplitScheme::KFold(k) => {
            let k = k.max(2).min(corpus.sentences.len().max(2));
            let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, id) in order.iter().enumerate() {
                folds[i % k].push(*id);
            }
            (0..k)
                .map(|f| {
                    let test = subset(&folds[f]);
                    let train_ids: Vec<usize> = (0..k)
                        .filter(|&g| g != f)
                        .flat_map(|g| folds[g].iter().cloned())
                        .collect();
                    (subset(&train_ids), test)
                })
                .collect()
        }
    }
}
