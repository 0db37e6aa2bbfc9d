//! Model assembly: configuration, parameter registry, the stacked
//! table/sequence encoder forward pass, prediction heads, the joint loss,
//! and decoding entry points.

pub mod params;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::{
    self, CodecConfig, EntitySpan, Relation, TagTable, TagVocab,
};
use crate::embed::{Embedder, Vocabulary};
use crate::error::{Error, Result};
use crate::seq::{AttnKind, SeqEncoderLayer};
use crate::table::{DimUse, Direction, Schedule, TableEncoderLayer, DIR_A, DIR_B, DIR_C, DIR_D};
use crate::tensor::{Tape, Tensor, TensorId};
use params::{ParamBinding, ParamId, ParamStore};

/// Which multidirectional RNNs make up the table encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSet {
    /// row⁺col⁺ only.
    Uni,
    /// row⁺col⁺ and row⁻col⁻ (the default).
    BiAc,
    /// row⁺col⁻ and row⁻col⁺.
    BiBd,
    /// All four.
    Quad,
}

impl DirectionSet {
    pub fn directions(&self) -> Vec<Direction> {
        match self {
            DirectionSet::Uni => vec![DIR_A],
            DirectionSet::BiAc => vec![DIR_A, DIR_C],
            DirectionSet::BiBd => vec![DIR_B, DIR_D],
            DirectionSet::Quad => vec![DIR_A, DIR_B, DIR_C, DIR_D],
        }
    }
}

impl std::str::FromStr for DirectionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(DirectionSet::Uni),
            "bi-ac" => Ok(DirectionSet::BiAc),
            "bi-bd" => Ok(DirectionSet::BiBd),
            "quad" => Ok(DirectionSet::Quad),
            other => Err(Error::Config(format!("unknown direction set '{}'", other))),
        }
    }
}

/// Where NER logits come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NerHeadSource {
    /// The final sequence representation (default).
    Sequence,
    /// The main diagonal of the final table representation.
    Diagonal,
}

impl std::str::FromStr for NerHeadSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(NerHeadSource::Sequence),
            "diagonal" => Ok(NerHeadSource::Diagonal),
            other => Err(Error::Config(format!("unknown ner head '{}'", other))),
        }
    }
}

/// All architecture hyperparameters. The defaults reproduce the reference
/// setting: L=3 layers, hidden 200, 8 heads, dropout 0.5, 100-dim token
/// embeddings, 30-dim character embeddings, bidirectional (a, c) table
/// encoder, non-shared layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub word_dim: usize,
    pub char_dim: usize,
    pub ctx_dim: usize,
    pub use_ctx_embeddings: bool,
    pub use_attn_features: bool,
    pub attn_feat_width: usize,
    pub direction_set: DirectionSet,
    pub shared_layers: bool,
    pub ner_head: NerHeadSource,
    pub codec: CodecConfig,
    /// When false, attention falls back to scaled dot-product and the table
    /// encoder reads S₀ at every layer (severs both interaction directions).
    pub bi_interaction: bool,
    pub entity_loss: bool,
    pub relation_loss: bool,
    pub use_layer_dim: bool,
    pub use_row_dim: bool,
    pub use_col_dim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            hidden: 200,
            heads: 8,
            dropout: 0.5,
            word_dim: 100,
            char_dim: 30,
            ctx_dim: 0,
            use_ctx_embeddings: false,
            use_attn_features: false,
            attn_feat_width: 0,
            direction_set: DirectionSet::BiAc,
            shared_layers: false,
            ner_head: NerHeadSource::Sequence,
            codec: CodecConfig::default(),
            bi_interaction: true,
            entity_loss: true,
            relation_loss: true,
            use_layer_dim: true,
            use_row_dim: true,
            use_col_dim: true,
        }
    }
}

impl ModelConfig {
    pub fn dropout_keep(&self) -> f64 {
        1.0 - self.dropout
    }

    pub fn dim_use(&self) -> DimUse {
        DimUse { layer: self.use_layer_dim, row: self.use_row_dim, col: self.use_col_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide hidden size {}",
                self.heads, self.hidden
            )));
        }
        let dirs = self.direction_set.directions().len();
        if self.hidden % dirs != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by direction count {}",
                self.hidden, dirs
            )));
        }
        if self.use_ctx_embeddings && self.ctx_dim == 0 {
            return Err(Error::Config(
                "use_ctx_embeddings requires a nonzero ctx_dim".into(),
            ));
        }
        if self.use_attn_features && self.attn_feat_width == 0 {
            return Err(Error::Config(
                "use_attn_features requires a nonzero attn_feat_width".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-sentence features handed to the forward pass.
#[derive(Clone, Copy, Default)]
pub struct SentenceFeatures<'a> {
    pub ctx: Option<&'a Tensor>,
    pub attn: Option<&'a Tensor>,
}

/// How the table encoder executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Everything on the tape, naive traversal; gradients available.
    Train,
    /// Table encoder runs tape-free under the given schedule; its output
    /// enters the tape as a constant.
    Infer(Schedule),
}

/// Tape handles produced by one sentence forward pass.
#[derive(Debug)]
pub struct SentenceForward {
    pub n: usize,
    /// S₀ .. S_L, each `[N, H]`.
    pub s_layers: Vec<TensorId>,
    /// T₁ .. T_L, each flattened `[N*N, H]`.
    pub t_layers: Vec<TensorId>,
    /// Per layer, per head attention weights `[N, N]`.
    pub attn_weights: Vec<Vec<TensorId>>,
    pub ner_logits: TensorId,
    pub re_logits: TensorId,
    pub p_ner: TensorId,
    pub p_re: TensorId,
}

/// The assembled table-sequence encoder model.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub word_vocab: Vocabulary,
    pub char_vocab: Vocabulary,
    pub tag_vocab: TagVocab,
    pub embedder: Embedder,
    pub table_layers: Vec<TableEncoderLayer>,
    pub seq_layers: Vec<SeqEncoderLayer>,
    pub w_ner: ParamId,
    pub b_ner: ParamId,
    pub w_re: ParamId,
    pub b_re: ParamId,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        word_vocab: Vocabulary,
        char_vocab: Vocabulary,
        tag_vocab: TagVocab,
        word_init: Option<Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ctx_dim = if config.use_ctx_embeddings { config.ctx_dim } else { 0 };
        let embedder = Embedder::new(
            &mut store,
            &word_vocab,
            &char_vocab,
            config.word_dim,
            config.char_dim,
            ctx_dim,
            config.hidden,
            word_init,
            rng,
        )?;

        let feat_width = if config.use_attn_features { config.attn_feat_width } else { 0 };
        let directions = config.direction_set.directions();
        let attn_kind =
            if config.bi_interaction { AttnKind::TableGuided } else { AttnKind::DotProduct };
        let block_count = if config.shared_layers { 1 } else { config.layers };
        let mut table_layers = Vec::with_capacity(block_count);
        let mut seq_layers = Vec::with_capacity(block_count);
        for l in 0..block_count {
            table_layers.push(TableEncoderLayer::new(
                &mut store,
                &format!("table{}", l),
                config.hidden,
                &directions,
                feat_width,
                rng,
            )?);
            seq_layers.push(SeqEncoderLayer::new(
                &mut store,
                &format!("seq{}", l),
                config.hidden,
                config.heads,
                attn_kind,
                rng,
            )?);
        }

        let ner_tags = tag_vocab.ner_tag_count();
        let re_tags = tag_vocab.re_tag_count(config.codec.directed);
        let w_ner = store.add_xavier("head.w_ner", config.hidden, ner_tags, rng);
        let b_ner = store.add_zeros("head.b_ner", &[ner_tags]);
        let w_re = store.add_xavier("head.w_re", config.hidden, re_tags, rng);
        let b_re = store.add_zeros("head.b_re", &[re_tags]);

        Ok(Model {
            config,
            store,
            word_vocab,
            char_vocab,
            tag_vocab,
            embedder,
            table_layers,
            seq_layers,
            w_ner,
            b_ner,
            w_re,
            b_re,
        })
    }

    fn block(&self, l: usize) -> (&TableEncoderLayer, &SeqEncoderLayer) {
        let idx = if self.config.shared_layers { 0 } else { l };
        (&self.table_layers[idx], &self.seq_layers[idx])
    }

    /// Run one sentence through embedder, L encoder layers and both heads.
    /// Tokens beyond `real_len` (padding) are ignored entirely, which is
    /// why masked positions contribute exactly zero to any loss.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_sentence(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        tokens: &[String],
        real_len: usize,
        features: SentenceFeatures,
        mode: ForwardMode,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<SentenceForward> {
        if real_len == 0 || tokens.is_empty() {
            return Err(Error::Input("empty sentence".into()));
        }
        let n = real_len.min(tokens.len());
        let tokens = &tokens[..n];
        let keep = self.config.dropout_keep();
        let dims = self.config.dim_use();

        let s0 = self.embedder.embed_sentence(
            tape,
            bind,
            &self.word_vocab,
            &self.char_vocab,
            tokens,
            features.ctx,
            keep,
            training,
            rng,
        )?;

        let feat = if self.config.use_attn_features {
            match features.attn {
                Some(f) => Some(f),
                None => {
                    return Err(Error::Alignment(
                        "model expects attention-weight features but none were given".into(),
                    ))
                }
            }
        } else {
            None
        };

        let mut s_layers = vec![s0];
        let mut t_layers: Vec<TensorId> = Vec::with_capacity(self.config.layers);
        let mut attn_weights = Vec::with_capacity(self.config.layers);
        // per-direction previous-layer states, tape and raw variants
        let mut prev_tape: Option<Vec<TensorId>> = None;
        let mut prev_raw: Option<Vec<Tensor>> = None;

        for l in 0..self.config.layers {
            let (table, seq) = self.block(l);
            // severed interaction feeds the initial representation to the
            // table encoder at every layer
            let s_table_in =
                if self.config.bi_interaction { *s_layers.last().unwrap() } else { s_layers[0] };
            let t_flat = match mode {
                ForwardMode::Train => {
                    let (t_flat, per_dir) = table.encode_on_tape(
                        tape,
                        bind,
                        s_table_in,
                        prev_tape.as_deref(),
                        feat,
                        n,
                        dims,
                    )?;
                    prev_tape = Some(per_dir);
                    t_flat
                }
                ForwardMode::Infer(schedule) => {
                    let s_val = tape.value(s_table_in).clone();
                    let (t, per_dir) = table.encode_raw(
                        &self.store,
                        &s_val,
                        prev_raw.as_deref(),
                        feat,
                        schedule,
                        dims,
                    )?;
                    prev_raw = Some(per_dir);
                    let flat = Tensor::new(vec![n * n, self.config.hidden], t.data().to_vec())?;
                    tape.constant(flat)
                }
            };
            t_layers.push(t_flat);

            let s_prev = *s_layers.last().unwrap();
            let t_for_attn =
                if self.config.bi_interaction { Some(t_flat) } else { None };
            let (s_next, weights) =
                seq.forward(tape, bind, s_prev, t_for_attn, n, keep, training, rng)?;
            s_layers.push(s_next);
            attn_weights.push(weights);
        }

        let (ner_logits, re_logits, p_ner, p_re) =
            self.heads(tape, bind, *s_layers.last().unwrap(), *t_layers.last().unwrap(), n)?;

        Ok(SentenceForward {
            n,
            s_layers,
            t_layers,
            attn_weights,
            ner_logits,
            re_logits,
            p_ner,
            p_re,
        })
    }

    /// Apply the prediction heads to a sequence/table representation pair.
    pub fn heads(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        s_l: TensorId,
        t_flat: TensorId,
        n: usize,
    ) -> Result<(TensorId, TensorId, TensorId, TensorId)> {
        let ner_in = match self.config.ner_head {
            NerHeadSource::Sequence => s_l,
            NerHeadSource::Diagonal => {
                let diag_ix: Vec<usize> = (0..n).map(|i| i * n + i).collect();
                tape.gather(t_flat, &diag_ix)?
            }
        };
        let ner_lin = tape.matmul(ner_in, bind[self.w_ner])?;
        let ner_logits = tape.add(ner_lin, bind[self.b_ner])?;
        let p_ner = tape.softmax(ner_logits, 1)?;

        let re_lin = tape.matmul(t_flat, bind[self.w_re])?;
        let re_logits = tape.add(re_lin, bind[self.b_re])?;
        let p_re_flat = tape.softmax(re_logits, 1)?;
        let rc = self.tag_vocab.re_tag_count(self.config.codec.directed);
        let p_re = tape.reshape(p_re_flat, &[n, n, rc])?;
        Ok((ner_logits, re_logits, p_ner, p_re))
    }

    /// Joint loss over a batch: cross-entropy summed over real tokens for
    /// NER and over off-diagonal cells for RE; either term can be switched
    /// off. Gold tables must match the forward sentence lengths.
    pub fn loss(
        &self,
        tape: &mut Tape,
        outputs: &[SentenceForward],
        gold: &[&TagTable],
    ) -> Result<TensorId> {
        if outputs.len() != gold.len() {
            return Err(Error::Contract(format!(
                "{} outputs but {} gold tables",
                outputs.len(),
                gold.len()
            )));
        }
        let mut total: Option<TensorId> = None;
        for (out, g) in outputs.iter().zip(gold) {
            if g.len() != out.n {
                return Err(Error::Contract(format!(
                    "gold table covers {} tokens, forward covered {}",
                    g.len(),
                    out.n
                )));
            }
            let mut terms = Vec::new();
            if self.config.entity_loss {
                let targets: Vec<Option<usize>> = g.ner.iter().map(|&t| Some(t)).collect();
                terms.push(tape.cross_entropy_rows(out.ner_logits, &targets)?);
            }
            if self.config.relation_loss {
                let mut targets = Vec::with_capacity(out.n * out.n);
                for i in 0..out.n {
                    for j in 0..out.n {
                        targets.push(if i == j { None } else { Some(g.re[i][j]) });
                    }
                }
                terms.push(tape.cross_entropy_rows(out.re_logits, &targets)?);
            }
            for term in terms {
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
        }
        Ok(match total {
            Some(t) => t,
            None => tape.zeros(&[1]),
        })
    }

    /// Decode entities and relations for one sentence (inference path).
    pub fn predict(
        &self,
        tokens: &[String],
        features: SentenceFeatures,
        schedule: Schedule,
    ) -> Result<(Vec<EntitySpan>, Vec<Relation>)> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_sentence(
            &mut tape,
            &bind,
            tokens,
            tokens.len(),
            features,
            ForwardMode::Infer(schedule),
            false,
            &mut rng,
        )?;
        self.decode_output(&tape, &fwd)
    }

    fn decode_output(
        &self,
        tape: &Tape,
        fwd: &SentenceForward,
    ) -> Result<(Vec<EntitySpan>, Vec<Relation>)> {
        let p_ner = tape.value(fwd.p_ner).clone();
        let p_re = tape.value(fwd.p_re).clone();
        let entities = codec::decode_entities(&p_ner, &self.tag_vocab);
        let relations =
            codec::decode_relations(&p_re, &entities, &self.tag_vocab, &self.config.codec);
        Ok((entities, relations))
    }

    /// Apply the trained prediction heads to every intermediate layer's
    /// representations and decode each one.
    pub fn probe(
        &self,
        tokens: &[String],
        features: SentenceFeatures,
        schedule: Schedule,
    ) -> Result<Vec<(Vec<EntitySpan>, Vec<Relation>)>> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_sentence(
            &mut tape,
            &bind,
            tokens,
            tokens.len(),
            features,
            ForwardMode::Infer(schedule),
            false,
            &mut rng,
        )?;
        let mut out = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let s_l = fwd.s_layers[l + 1];
            let t_l = fwd.t_layers[l];
            let (_, _, p_ner, p_re) = self.heads(&mut tape, &bind, s_l, t_l, fwd.n)?;
            let p_ner = tape.value(p_ner).clone();
            let p_re = tape.value(p_re).clone();
            let entities = codec::decode_entities(&p_ner, &self.tag_vocab);
            let relations =
                codec::decode_relations(&p_re, &entities, &self.tag_vocab, &self.config.codec);
            out.push((entities, relations));
        }
        Ok(out)
    }

    /// Per-layer, per-head attention weight matrices for one sentence.
    pub fn export_attention(
        &self,
        tokens: &[String],
        features: SentenceFeatures,
        schedule: Schedule,
    ) -> Result<crate::seq::AttentionExport> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_sentence(
            &mut tape,
            &bind,
            tokens,
            tokens.len(),
            features,
            ForwardMode::Infer(schedule),
            false,
            &mut rng,
        )?;
        let layers = fwd
            .attn_weights
            .iter()
            .map(|heads| crate::seq::AttentionLayerExport {
                heads: heads
                    .iter()
                    .map(|&w| {
                        tape.data(w)
                            .chunks(fwd.n)
                            .map(|row| row.to_vec())
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            })
            .collect();
        Ok(crate::seq::AttentionExport { layers })
    }

    /// Trainable scalar parameter count (frozen embeddings excluded).
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }
}
