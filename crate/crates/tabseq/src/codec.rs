//! Conversion between annotated sentences and the supervision pair
//! (BIO tag sequence, N×N relation tag table), plus decoding of model
//! probabilities back to entity spans and directed relations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token span, begin inclusive and end exclusive, with an entity type index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: usize,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: usize) -> Self {
        EntitySpan { start, end, etype }
    }

    pub fn last_token(&self) -> usize {
        self.end - 1
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Directed relation between two decoded spans. Head and tail are ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub head: EntitySpan,
    pub tail: EntitySpan,
    pub rtype: usize,
}

/// Relation stored on a sentence, referring to entities by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRef {
    pub head: usize,
    pub tail: usize,
    pub rtype: usize,
}

/// One annotated sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationRef>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Relations with entity indices resolved to spans.
    pub fn resolved_relations(&self) -> Vec<Relation> {
        self.relations
            .iter()
            .map(|r| Relation {
                head: self.entities[r.head],
                tail: self.entities[r.tail],
                rtype: r.rtype,
            })
            .collect()
    }
}

/// Entity and relation type inventories; tag index layout lives here.
///
/// NER tags: `O` = 0, then `B-X` = 1+2k and `I-X` = 2+2k for type k.
/// Relation tags: `⊥` = 0, then (directed) `→r` = 1+2k and `←r` = 2+2k,
/// or (undirected) `r` = 1+k.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocab {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
}

impl TagVocab {
    pub fn new(mut entity_types: Vec<String>, mut relation_types: Vec<String>) -> Self {
        entity_types.sort();
        entity_types.dedup();
        relation_types.sort();
        relation_types.dedup();
        TagVocab { entity_types, relation_types }
    }

    pub fn ner_tag_count(&self) -> usize {
        1 + 2 * self.entity_types.len()
    }

    pub fn re_tag_count(&self, directed: bool) -> usize {
        if directed {
            1 + 2 * self.relation_types.len()
        } else {
            1 + self.relation_types.len()
        }
    }

    pub fn begin_tag(&self, etype: usize) -> usize {
        1 + 2 * etype
    }

    pub fn inside_tag(&self, etype: usize) -> usize {
        2 + 2 * etype
    }

    pub fn fwd_tag(&self, rtype: usize, directed: bool) -> usize {
        if directed {
            1 + 2 * rtype
        } else {
            1 + rtype
        }
    }

    pub fn bwd_tag(&self, rtype: usize, directed: bool) -> usize {
        if directed {
            2 + 2 * rtype
        } else {
            1 + rtype
        }
    }

    pub fn ner_tag_name(&self, tag: usize) -> String {
        if tag == 0 {
            "O".into()
        } else {
            let etype = (tag - 1) / 2;
            let prefix = if tag % 2 == 1 { "B" } else { "I" };
            format!("{}-{}", prefix, self.entity_types[etype])
        }
    }
}

/// Which table cells carry relation supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillRegion {
    Entire,
    Lower,
    Upper,
}

impl FillRegion {
    fn contains(&self, i: usize, j: usize) -> bool {
        match self {
            FillRegion::Entire => i != j,
            FillRegion::Lower => i > j,
            FillRegion::Upper => i < j,
        }
    }
}

/// Whether a relation marks every cell of the span pair or only the cell of
/// the two last words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellScope {
    EntireEntity,
    LastWord,
}

/// Table-filling formulation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub fill_region: FillRegion,
    pub cell_scope: CellScope,
    pub directed: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            fill_region: FillRegion::Entire,
            cell_scope: CellScope::EntireEntity,
            directed: true,
        }
    }
}

/// The supervision pair: a BIO tag per token and a relation tag per cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagTable {
    pub ner: Vec<usize>,
    pub re: Vec<Vec<usize>>,
}

impl TagTable {
    pub fn len(&self) -> usize {
        self.ner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ner.is_empty()
    }
}

/// Build the gold tag table for a sentence.
pub fn encode(sentence: &Sentence, vocab: &TagVocab, config: &CodecConfig) -> Result<TagTable> {
    let n = sentence.len();
    for span in &sentence.entities {
        if span.start >= span.end || span.end > n {
            return Err(Error::Encode(format!(
                "span {}..{} out of range for {} tokens",
                span.start, span.end, n
            )));
        }
    }
    for (a, sa) in sentence.entities.iter().enumerate() {
        for sb in sentence.entities.iter().skip(a + 1) {
            if sa.overlaps(sb) {
                return Err(Error::Encode(format!(
                    "overlapping spans {}..{} and {}..{}",
                    sa.start, sa.end, sb.start, sb.end
                )));
            }
        }
    }
    for r in &sentence.relations {
        if r.head >= sentence.entities.len() || r.tail >= sentence.entities.len() {
            return Err(Error::Reference(format!(
                "relation references entity {} but sentence has {}",
                r.head.max(r.tail),
                sentence.entities.len()
            )));
        }
    }

    let mut ner = vec![0usize; n];
    for span in &sentence.entities {
        ner[span.start] = vocab.begin_tag(span.etype);
        for t in span.start + 1..span.end {
            ner[t] = vocab.inside_tag(span.etype);
        }
    }

    let mut re = vec![vec![0usize; n]; n];
    for r in &sentence.relations {
        let head = sentence.entities[r.head];
        let tail = sentence.entities[r.tail];
        let fwd = vocab.fwd_tag(r.rtype, config.directed);
        let bwd = vocab.bwd_tag(r.rtype, config.directed);
        let cells = relation_cells(&head, &tail, config.cell_scope);
        for (i, j) in cells {
            if config.fill_region.contains(i, j) {
                re[i][j] = fwd;
            }
            // the reverse tag is written only under directed encoding; the
            // asymmetric fill itself carries direction otherwise
            if config.directed && config.fill_region.contains(j, i) {
                re[j][i] = bwd;
            }
        }
    }

    Ok(TagTable { ner, re })
}

fn relation_cells(head: &EntitySpan, tail: &EntitySpan, scope: CellScope) -> Vec<(usize, usize)> {
    match scope {
        CellScope::EntireEntity => {
            let mut cells = Vec::new();
            for i in head.start..head.end {
                for j in tail.start..tail.end {
                    cells.push((i, j));
                }
            }
            cells
        }
        CellScope::LastWord => vec![(head.last_token(), tail.last_token())],
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-token argmax followed by BIO segmentation. Malformed sequences are
/// repaired: an `I-X` after `O` or after a different type starts a new
/// entity of type `X`.
pub fn decode_entities(p_ner: &Tensor, vocab: &TagVocab) -> Vec<EntitySpan> {
    let n = p_ner.shape()[0];
    let classes = p_ner.shape()[1];
    let tags: Vec<usize> =
        (0..n).map(|i| argmax_lowest(&p_ner.data()[i * classes..(i + 1) * classes])).collect();
    decode_bio(&tags, vocab)
}

/// BIO segmentation of an already-chosen tag sequence.
pub fn decode_bio(tags: &[usize], vocab: &TagVocab) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (start, etype)
    for (t, &tag) in tags.iter().enumerate() {
        if tag == 0 {
            if let Some((s, e)) = open.take() {
                spans.push(EntitySpan::new(s, t, e));
            }
        } else {
            let etype = (tag - 1) / 2;
            let is_begin = tag == vocab.begin_tag(etype);
            match open {
                Some((_, cur)) if !is_begin && cur == etype => {} // continue
                _ => {
                    if let Some((s, e)) = open.take() {
                        spans.push(EntitySpan::new(s, t, e));
                    }
                    open = Some((t, etype));
                }
            }
        }
    }
    if let Some((s, e)) = open {
        spans.push(EntitySpan::new(s, tags.len(), e));
    }
    spans
}

/// Decode relations by scoring, for every unordered entity pair, each
/// directed hypothesis (both directions of every relation type, plus
/// no-relation) by the total probability mass of the cells that hypothesis
/// would fill. The argmax decides; ties resolve to the lowest tag index
/// with no-relation first, and no-relation emits nothing.
pub fn decode_relations(
    p_re: &Tensor,
    entities: &[EntitySpan],
    vocab: &TagVocab,
    config: &CodecConfig,
) -> Vec<Relation> {
    let n = p_re.shape()[0];
    let classes = p_re.shape()[2];
    let cell = |i: usize, j: usize, c: usize| p_re.data()[(i * n + j) * classes + c];

    let mut out = Vec::new();
    for (a, first) in entities.iter().enumerate() {
        for second in entities.iter().skip(a + 1) {
            let cells = relation_cells(first, second, config.cell_scope);
            // candidates: 0 = no relation, then (forward, backward) per type
            let candidates = 1 + 2 * vocab.relation_types.len();
            let mut best_cand = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for cand in 0..candidates {
                // the tags this hypothesis writes at (i,j) and (j,i)
                let (tag_ij, tag_ji) = if cand == 0 {
                    (0, 0)
                } else {
                    let rtype = (cand - 1) / 2;
                    let forward = cand % 2 == 1;
                    if forward {
                        (vocab.fwd_tag(rtype, config.directed), bwd_or_bottom(vocab, rtype, config))
                    } else {
                        (bwd_or_bottom(vocab, rtype, config), vocab.fwd_tag(rtype, config.directed))
                    }
                };
                let mut score = 0.0;
                for &(i, j) in &cells {
                    if config.fill_region.contains(i, j) {
                        score += cell(i, j, tag_ij);
                    }
                    if config.fill_region.contains(j, i) {
                        score += cell(j, i, tag_ji);
                    }
                }
                if score > best_score {
                    best_score = score;
                    best_cand = cand;
                }
            }
            if best_cand != 0 {
                let rtype = (best_cand - 1) / 2;
                let (head, tail) =
                    if best_cand % 2 == 1 { (*first, *second) } else { (*second, *first) };
                out.push(Relation { head, tail, rtype });
            }
        }
    }
    out
}

/// Under directed encoding the reverse cell carries the backward tag; under
/// undirected encoding it stays empty, so the hypothesis scores it as ⊥.
fn bwd_or_bottom(vocab: &TagVocab, rtype: usize, config: &CodecConfig) -> usize {
    if config.directed {
        vocab.bwd_tag(rtype, config.directed)
    } else {
        0
    }
}

/// One-hot probability tensors for a gold tag table.
pub fn one_hot_probs(table: &TagTable, vocab: &TagVocab, config: &CodecConfig) -> (Tensor, Tensor) {
    let n = table.len();
    let nc = vocab.ner_tag_count();
    let rc = vocab.re_tag_count(config.directed);
    let mut ner = vec![0.0; n * nc];
    for (i, &t) in table.ner.iter().enumerate() {
        ner[i * nc + t] = 1.0;
    }
    let mut re = vec![0.0; n * n * rc];
    for i in 0..n {
        for j in 0..n {
            re[(i * n + j) * rc + table.re[i][j]] = 1.0;
        }
    }
    (
        Tensor::new(vec![n, nc], ner).unwrap(),
        Tensor::new(vec![n, n, rc], re).unwrap(),
    )
}

/// Encode then decode on gold one-hot probabilities and compare with the
/// original annotation.
pub fn roundtrip_check(sentence: &Sentence, vocab: &TagVocab, config: &CodecConfig) -> Result<bool> {
    let table = encode(sentence, vocab, config)?;
    let (p_ner, p_re) = one_hot_probs(&table, vocab, config);
    let entities = decode_entities(&p_ner, vocab);
    if entities.len() != sentence.entities.len() {
        return Ok(false);
    }
    let mut want_e = sentence.entities.clone();
    want_e.sort();
    let mut got_e = entities.clone();
    got_e.sort();
    if want_e != got_e {
        return Ok(false);
    }
    let relations = decode_relations(&p_re, &entities, vocab, config);
    let mut want_r = sentence.resolved_relations();
    want_r.sort();
    let mut got_r = relations;
    got_r.sort();
    Ok(want_r == got_r)
}

/// Check the structural invariants of an encoded table under the directed,
/// entire-table formulation.
pub fn table_is_symmetric(table: &TagTable, vocab: &TagVocab) -> bool {
    let n = table.len();
    for i in 0..n {
        if table.re[i][i] != 0 {
            return false;
        }
        for j in 0..n {
            let a = table.re[i][j];
            let b = table.re[j][i];
            if a == 0 {
                if b != 0 {
                    return false;
                }
                continue;
            }
            let rtype = (a - 1) / 2;
            let expected = if a == vocab.fwd_tag(rtype, true) {
                vocab.bwd_tag(rtype, true)
            } else {
                vocab.fwd_tag(rtype, true)
            };
            if b != expected {
                return false;
            }
        }
    }
    true
}

/// Every `I-X` must follow `B-X` or `I-X`.
pub fn bio_is_valid(tags: &[usize], vocab: &TagVocab) -> bool {
    let mut prev = 0usize;
    for &tag in tags {
        if tag != 0 {
            let etype = (tag - 1) / 2;
            if tag == vocab.inside_tag(etype) {
                let ok = prev == vocab.begin_tag(etype) || prev == vocab.inside_tag(etype);
                if !ok {
                    return false;
                }
            }
        }
        prev = tag;
    }
    true
}
