//! Sequence encoder: multi-head attention whose scores come straight from
//! the table representation (or standard scaled dot-product under the
//! no-interaction ablation), followed by a position-wise FFNN, both wrapped
//! in residual connections and layer normalization.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::params::{ParamBinding, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention scoring variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    /// Scores are a learned linear functional of the table cell:
    /// `f(i,j) = U · T[i,j]`.
    TableGuided,
    /// Conventional `softmax(QKᵀ/√d)` self-attention; severs the
    /// table-to-sequence interaction.
    DotProduct,
}

struct Head {
    /// Table-guided score vector `[H, 1]`.
    u: Option<ParamId>,
    /// Dot-product projections `[H, H/A]`.
    wq: Option<ParamId>,
    wk: Option<ParamId>,
    /// Value projection `[H, H/A]`.
    wv: ParamId,
}

/// One encoder layer: attention + FFNN with residuals and layer norms.
pub struct SeqEncoderLayer {
    heads: Vec<Head>,
    w_o: ParamId,
    b_o: ParamId,
    ffnn_w1: ParamId,
    ffnn_b1: ParamId,
    ffnn_w2: ParamId,
    ffnn_b2: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    pub kind: AttnKind,
    pub hidden: usize,
    pub head_count: usize,
}

impl SeqEncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        kind: AttnKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden % heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide hidden size {}",
                heads, hidden
            )));
        }
        let dk = hidden / heads;
        let head_params = (0..heads)
            .map(|a| {
                let name = |p: &str| format!("{}.head{}.{}", prefix, a, p);
                match kind {
                    AttnKind::TableGuided => Head {
                        u: Some(store.add_xavier(name("u"), hidden, 1, rng)),
                        wq: None,
                        wk: None,
                        wv: store.add_xavier(name("wv"), hidden, dk, rng),
                    },
                    AttnKind::DotProduct => Head {
                        u: None,
                        wq: Some(store.add_xavier(name("wq"), hidden, dk, rng)),
                        wk: Some(store.add_xavier(name("wk"), hidden, dk, rng)),
                        wv: store.add_xavier(name("wv"), hidden, dk, rng),
                    },
                }
            })
            .collect();
        let ffnn_inner = 2 * hidden;
        Ok(SeqEncoderLayer {
            heads: head_params,
            w_o: store.add_xavier(format!("{}.w_o", prefix), hidden, hidden, rng),
            b_o: store.add_zeros(format!("{}.b_o", prefix), &[hidden]),
            ffnn_w1: store.add_xavier(format!("{}.ffnn_w1", prefix), hidden, ffnn_inner, rng),
            ffnn_b1: store.add_zeros(format!("{}.ffnn_b1", prefix), &[ffnn_inner]),
            ffnn_w2: store.add_xavier(format!("{}.ffnn_w2", prefix), ffnn_inner, hidden, rng),
            ffnn_b2: store.add_zeros(format!("{}.ffnn_b2", prefix), &[hidden]),
            ln1_gain: store.add_ones(format!("{}.ln1_gain", prefix), hidden),
            ln1_bias: store.add_zeros(format!("{}.ln1_bias", prefix), &[hidden]),
            ln2_gain: store.add_ones(format!("{}.ln2_gain", prefix), hidden),
            ln2_bias: store.add_zeros(format!("{}.ln2_bias", prefix), &[hidden]),
            kind,
            hidden,
            head_count: heads,
        })
    }

    /// Multi-head attention over `s_prev` `[N, H]` guided by `t_flat`
    /// `[N*N, H]`. Returns the mixed output `[N, H]` and each head's
    /// row-stochastic weight matrix `[N, N]`.
    pub fn attention(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        s_prev: TensorId,
        t_flat: Option<TensorId>,
        n: usize,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = match self.kind {
                AttnKind::TableGuided => {
                    let t_flat = t_flat.ok_or_else(|| {
                        Error::Contract("table-guided attention needs the table".into())
                    })?;
                    let scores_flat = tape.matmul(t_flat, bind[head.u.unwrap()])?; // [N*N, 1]
                    let scores = tape.reshape(scores_flat, &[n, n])?;
                    tape.softmax(scores, 1)?
                }
                AttnKind::DotProduct => {
                    let q = tape.matmul(s_prev, bind[head.wq.unwrap()])?; // [N, dk]
                    let k = tape.matmul(s_prev, bind[head.wk.unwrap()])?;
                    let kt = tape.transpose2d(k)?;
                    let qk = tape.matmul(q, kt)?; // [N, N]
                    let dk = (self.hidden / self.head_count) as f64;
                    let scaled = tape.scale(qk, 1.0 / dk.sqrt());
                    tape.softmax(scaled, 1)?
                }
            };
            let v = tape.matmul(s_prev, bind[head.wv])?; // [N, dk]
            outputs.push(tape.matmul(w, v)?); // [N, dk]
            weights.push(w);
        }
        let cat = tape.concat(1, &outputs)?; // [N, H]
        let mixed = tape.matmul(cat, bind[self.w_o])?;
        let out = tape.add(mixed, bind[self.b_o])?;
        Ok((out, weights))
    }

    /// Full layer: `S̃ = LN(S + Attn(S))`, `S_l = LN(S̃ + FFNN(S̃))`, with
    /// dropout on each sublayer output before the residual add while
    /// training.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        s_prev: TensorId,
        t_flat: Option<TensorId>,
        n: usize,
        dropout_keep: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let (attn, weights) = self.attention(tape, bind, s_prev, t_flat, n)?;
        let attn = if training && dropout_keep < 1.0 {
            tape.dropout(attn, dropout_keep, rng)
        } else {
            attn
        };
        let res1 = tape.add(s_prev, attn)?;
        let s_mid = tape.layer_norm(res1, bind[self.ln1_gain], bind[self.ln1_bias], LAYER_NORM_EPS)?;

        let f1 = tape.matmul(s_mid, bind[self.ffnn_w1])?;
        let f1 = tape.add(f1, bind[self.ffnn_b1])?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, bind[self.ffnn_w2])?;
        let ffnn = tape.add(f2, bind[self.ffnn_b2])?;
        let ffnn = if training && dropout_keep < 1.0 {
            tape.dropout(ffnn, dropout_keep, rng)
        } else {
            ffnn
        };
        let res2 = tape.add(s_mid, ffnn)?;
        let s_out =
            tape.layer_norm(res2, bind[self.ln2_gain], bind[self.ln2_bias], LAYER_NORM_EPS)?;
        Ok((s_out, weights))
    }
}

/// Attention export document: per layer, per head, row-major N×N weights.
#[derive(Serialize)]
pub struct AttentionExport {
    pub layers: Vec<AttentionLayerExport>,
}

#[derive(Serialize)]
pub struct AttentionLayerExport {
    pub heads: Vec<Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn layer(kind: AttnKind, h: usize, a: usize, seed: u64) -> (ParamStore, SeqEncoderLayer) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let l = SeqEncoderLayer::new(&mut store, "s", h, a, kind, &mut r).unwrap();
        (store, l)
    }

    #[test]
    fn zero_score_vector_gives_uniform_weights() {
        let (mut store, l) = layer(AttnKind::TableGuided, 8, 2, 1);
        for head in &l.heads {
            store.set_value(head.u.unwrap(), Tensor::zeros(&[8, 1]));
        }
        let mut r = rng(2);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let s = tape.constant(random_tensor(&mut r, &[4, 8]));
        let t = tape.constant(random_tensor(&mut r, &[16, 8]));
        let (_, weights) = l.attention(&mut tape, &bind, s, Some(t), 4).unwrap();
        for &w in &weights {
            for &v in tape.data(w) {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_both_kinds() {
        for kind in [AttnKind::TableGuided, AttnKind::DotProduct] {
            let (store, l) = layer(kind, 8, 4, 3);
            let mut r = rng(4);
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let s = tape.constant(random_tensor(&mut r, &[5, 8]));
            let t = tape.constant(random_tensor(&mut r, &[25, 8]));
            let t_opt = match kind {
                AttnKind::TableGuided => Some(t),
                AttnKind::DotProduct => None,
            };
            let (_, weights) = l.attention(&mut tape, &bind, s, t_opt, 5).unwrap();
            assert_eq!(weights.len(), 4);
            for &w in &weights {
                for row in tape.data(w).chunks(5) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, l) = layer(AttnKind::TableGuided, 6, 2, 5);
        let mut r = rng(6);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let s = tape.constant(random_tensor(&mut r, &[1, 6]));
        let t = tape.constant(random_tensor(&mut r, &[1, 6]));
        let (out, weights) = l.attention(&mut tape, &bind, s, Some(t), 1).unwrap();
        assert_eq!(tape.data(weights[0]), &[1.0]);
        assert_eq!(tape.shape(out), &[1, 6]);
    }

    #[test]
    fn zero_sublayers_reduce_to_double_layer_norm() {
        let (mut store, l) = layer(AttnKind::TableGuided, 6, 2, 7);
        // zero attention output mixing and FFNN second projection
        store.set_value(l.w_o, Tensor::zeros(&[6, 6]));
        store.set_value(l.ffnn_w2, Tensor::zeros(&[12, 6]));
        let mut r = rng(8);
        let s_val = random_tensor(&mut r, &[3, 6]);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let s = tape.constant(s_val.clone());
        let t = tape.constant(random_tensor(&mut r, &[9, 6]));
        let (out, _) = l
            .forward(&mut tape, &bind, s, Some(t), 3, 1.0, false, &mut rng(9))
            .unwrap();

        // reference: LayerNorm(LayerNorm(s)) with unit gain, zero bias
        let mut ref_tape = Tape::new();
        let sid = ref_tape.constant(s_val);
        let gain = ref_tape.constant(Tensor::new(vec![6], vec![1.0; 6]).unwrap());
        let bias = ref_tape.constant(Tensor::new(vec![6], vec![0.0; 6]).unwrap());
        let ln1 = ref_tape.layer_norm(sid, gain, bias, LAYER_NORM_EPS).unwrap();
        let ln2 = ref_tape.layer_norm(ln1, gain, bias, LAYER_NORM_EPS).unwrap();

        for (a, b) in tape.data(out).iter().zip(ref_tape.data(ln2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        // no positional encoding exists: permuting S rows and T rows/cols
        // permutes the output rows identically
        let (store, l) = layer(AttnKind::TableGuided, 6, 2, 10);
        let mut r = rng(11);
        let n = 4;
        let s_val = random_tensor(&mut r, &[n, 6]);
        let t_val = random_tensor(&mut r, &[n, n, 6]);
        let perm = [2usize, 0, 3, 1];

        let run = |s_in: &Tensor, t_in: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let s = tape.constant(s_in.clone());
            let t_flat =
                tape.constant(Tensor::new(vec![n * n, 6], t_in.data().to_vec()).unwrap());
            let (out, _) = l
                .forward(&mut tape, &bind, s, Some(t_flat), n, 1.0, false, &mut rng(0))
                .unwrap();
            tape.data(out).to_vec()
        };

        let base = run(&s_val, &t_val);

        // permuted inputs
        let mut s_perm = vec![0.0; n * 6];
        for (new, &old) in perm.iter().enumerate() {
            s_perm[new * 6..(new + 1) * 6].copy_from_slice(s_val.row(old));
        }
        let mut t_perm = vec![0.0; n * n * 6];
        for (ni, &oi) in perm.iter().enumerate() {
            for (nj, &oj) in perm.iter().enumerate() {
                let src = &t_val.data()[(oi * n + oj) * 6..(oi * n + oj + 1) * 6];
                t_perm[(ni * n + nj) * 6..(ni * n + nj + 1) * 6].copy_from_slice(src);
            }
        }
        let permuted = run(
            &Tensor::new(vec![n, 6], s_perm).unwrap(),
            &Tensor::new(vec![n, n, 6], t_perm).unwrap(),
        );

        for (new, &old) in perm.iter().enumerate() {
            for k in 0..6 {
                let a = permuted[new * 6 + k];
                let b = base[old * 6 + k];
                assert!((a - b).abs() < 1e-9, "row {} vs {}: {} vs {}", new, old, a, b);
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        // gradient of sum(S_l) through the full layer w.r.t. selected params
        let h = 8;
        let build = |store: &ParamStore, l: &SeqEncoderLayer, s_val: &Tensor, t_val: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let s = tape.constant(s_val.clone());
            let t = tape.constant(t_val.clone());
            let (out, _) = l
                .forward(&mut tape, &bind, s, Some(t), 3, 1.0, false, &mut rng(0))
                .unwrap();
            let sum = tape.sum(out);
            tape.data(sum)[0]
        };

        let (mut store, l) = layer(AttnKind::TableGuided, h, 2, 12);
        let mut r = rng(13);
        let s_val = random_tensor(&mut r, &[3, h]);
        let t_val = random_tensor(&mut r, &[9, h]);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let s = tape.constant(s_val.clone());
        let t = tape.constant(t_val.clone());
        let (out, _) = l
            .forward(&mut tape, &bind, s, Some(t), 3, 1.0, false, &mut rng(0))
            .unwrap();
        let total = tape.sum(out);
        tape.backward(total).unwrap();

        let checked = [l.heads[0].u.unwrap(), l.heads[1].wv, l.w_o, l.ffnn_w1, l.ln1_gain];
        let eps = 1e-6;
        for id in checked {
            let analytic = tape.grad(bind[id]).unwrap().to_vec();
            let base = store.value(id).clone();
            for k in 0..base.numel().min(6) {
                let mut plus = base.data().to_vec();
                plus[k] += eps;
                store.set_value(id, Tensor::new(base.shape().to_vec(), plus).unwrap());
                let fp = build(&store, &l, &s_val, &t_val);
                let mut minus = base.data().to_vec();
                minus[k] -= eps;
                store.set_value(id, Tensor::new(base.shape().to_vec(), minus).unwrap());
                let fm = build(&store, &l, &s_val, &t_val);
                store.set_value(id, base.clone());
                let num = (fp - fm) / (2.0 * eps);
                let a = analytic[k];
                assert!(
                    (a - num).abs() <= 1e-6 * a.abs().max(num.abs()) + 1e-8,
                    "{}[{}]: {} vs {}",
                    store.name(id),
                    k,
                    a,
                    num
                );
            }
        }
    }
}
