//! Entity and relation scoring: exact-match precision/recall/F1 with micro
//! and macro averaging, strict relation scoring, and k-fold aggregation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::codec::{EntitySpan, Relation};

/// Precision/recall/F1 with the raw counts they came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1, tp, fp, fn_ }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    Micro,
    Macro,
}

/// Count multiset matches between predictions and gold, keyed by `key`,
/// grouped per type by `type_of`.
fn match_counts<T: Clone, K: Eq + std::hash::Hash>(
    pred: &[Vec<T>],
    gold: &[Vec<T>],
    key: impl Fn(&T) -> K,
    type_of: impl Fn(&T) -> usize,
) -> HashMap<usize, (usize, usize, usize)> {
    let mut per_type: HashMap<usize, (usize, usize, usize)> = HashMap::new();
    for (p_sent, g_sent) in pred.iter().zip(gold) {
        let mut gold_pool: HashMap<K, usize> = HashMap::new();
        for g in g_sent {
            *gold_pool.entry(key(g)).or_insert(0) += 1;
        }
        for p in p_sent {
            let e = per_type.entry(type_of(p)).or_insert((0, 0, 0));
            let k = key(p);
            match gold_pool.get_mut(&k) {
                Some(c) if *c > 0 => {
                    *c -= 1;
                    e.0 += 1; // tp
                }
                _ => e.1 += 1, // fp
            }
        }
        for g in g_sent {
            let e = per_type.entry(type_of(g)).or_insert((0, 0, 0));
            e.2 += 1; // gold count; fn = gold - tp per type below
        }
    }
    // third slot currently holds gold totals; convert to fn
    for (_, v) in per_type.iter_mut() {
        v.2 -= v.0;
    }
    per_type
}

fn aggregate(per_type: HashMap<usize, (usize, usize, usize)>, average: Average) -> Prf {
    match average {
        Average::Micro => {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (_, (t, f, n)) in per_type {
                tp += t;
                fp += f;
                fn_ += n;
            }
            Prf::from_counts(tp, fp, fn_)
        }
        Average::Macro => {
            // types absent from both pred and gold never enter the map, so
            // they are ignored; every observed type contributes one F1
            if per_type.is_empty() {
                return Prf::default();
            }
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            let mut p_sum = 0.0;
            let mut r_sum = 0.0;
            let mut f_sum = 0.0;
            let k = per_type.len() as f64;
            for (_, (t, f, n)) in per_type {
                let prf = Prf::from_counts(t, f, n);
                p_sum += prf.precision;
                r_sum += prf.recall;
                f_sum += prf.f1;
                tp += t;
                fp += f;
                fn_ += n;
            }
            Prf { precision: p_sum / k, recall: r_sum / k, f1: f_sum / k, tp, fp, fn_ }
        }
    }
}

/// Entity scoring: a prediction is correct iff type and boundaries both
/// match a gold entity.
pub fn score_ner(pred: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>], average: Average) -> Prf {
    let per_type = match_counts(
        pred,
        gold,
        |e| (e.start, e.end, e.etype),
        |e| e.etype,
    );
    aggregate(per_type, average)
}

/// Relation scoring: correct iff relation type and both entity boundaries
/// match, with head/tail order preserved. `strict` additionally requires
/// both entity types to match (the RE+ measure).
pub fn score_re(
    pred: &[Vec<Relation>],
    gold: &[Vec<Relation>],
    strict: bool,
    average: Average,
) -> Prf {
    let per_type = if strict {
        match_counts(
            pred,
            gold,
            |r| {
                (
                    r.head.start, r.head.end, r.head.etype,
                    r.tail.start, r.tail.end, r.tail.etype,
                    r.rtype,
                )
            },
            |r| r.rtype,
        )
    } else {
        match_counts(
            pred,
            gold,
            |r| (r.head.start, r.head.end, 0, r.tail.start, r.tail.end, 0, r.rtype),
            |r| r.rtype,
        )
    };
    aggregate(per_type, average)
}

/// Arithmetic mean over folds (or repeated runs) of each component.
pub fn kfold_mean(folds: &[Prf]) -> Prf {
    if folds.is_empty() {
        return Prf::default();
    }
    let k = folds.len() as f64;
    Prf {
        precision: folds.iter().map(|p| p.precision).sum::<f64>() / k,
        recall: folds.iter().map(|p| p.recall).sum::<f64>() / k,
        f1: folds.iter().map(|p| p.f1).sum::<f64>() / k,
        tp: folds.iter().map(|p| p.tp).sum(),
        fp: folds.iter().map(|p| p.fp).sum(),
        fn_: folds.iter().map(|p| p.fn_).sum(),
    }
}

/// Full score report, both averaging modes always included.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreReport {
    pub micro: ScoreTriple,
    pub macro_: ScoreTriple,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub ner: Prf,
    pub re: Prf,
    pub re_plus: Prf,
}

pub fn score_all(
    pred_entities: &[Vec<EntitySpan>],
    gold_entities: &[Vec<EntitySpan>],
    pred_relations: &[Vec<Relation>],
    gold_relations: &[Vec<Relation>],
) -> ScoreReport {
    ScoreReport {
        micro: ScoreTriple {
            ner: score_ner(pred_entities, gold_entities, Average::Micro),
            re: score_re(pred_relations, gold_relations, false, Average::Micro),
            re_plus: score_re(pred_relations, gold_relations, true, Average::Micro),
        },
        macro_: ScoreTriple {
            ner: score_ner(pred_entities, gold_entities, Average::Macro),
            re: score_re(pred_relations, gold_relations, false, Average::Macro),
            re_plus: score_re(pred_relations, gold_relations, true, Average::Macro),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn span(s: usize, e: usize, t: usize) -> EntitySpan {
        EntitySpan::new(s, e, t)
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gold = vec![vec![span(0, 2, 0), span(3, 4, 1)]];
        let prf = score_ner(&gold, &gold, Average::Micro);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_predicted_one_correct() {
        let gold = vec![vec![span(0, 2, 0)]];
        let pred = vec![vec![span(0, 2, 0), span(3, 4, 0)]];
        let prf = score_ner(&pred, &gold, Average::Micro);
        assert_eq!(prf.precision, 0.5);
        assert_eq!(prf.recall, 1.0);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_is_zero_not_nan() {
        let gold = vec![vec![span(0, 2, 0)]];
        let pred = vec![vec![]];
        let prf = score_ner(&pred, &gold, Average::Micro);
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
    }

    fn rel(hs: usize, he: usize, ht: usize, ts: usize, te: usize, tt: usize, r: usize) -> Relation {
        Relation { head: span(hs, he, ht), tail: span(ts, te, tt), rtype: r }
    }

    #[test]
    fn strict_requires_entity_types() {
        let gold = vec![vec![rel(0, 1, 0, 2, 3, 1, 0)]];
        // boundaries and relation type right, head entity type wrong
        let pred = vec![vec![rel(0, 1, 1, 2, 3, 1, 0)]];
        let loose = score_re(&pred, &gold, false, Average::Micro);
        let strict = score_re(&pred, &gold, true, Average::Micro);
        assert_eq!(loose.tp, 1);
        assert_eq!(strict.tp, 0);
    }

    #[test]
    fn reversed_direction_is_wrong() {
        let gold = vec![vec![rel(0, 1, 0, 2, 3, 1, 0)]];
        let pred = vec![vec![rel(2, 3, 1, 0, 1, 0, 0)]];
        assert_eq!(score_re(&pred, &gold, false, Average::Micro).tp, 0);
        assert_eq!(score_re(&pred, &gold, true, Average::Micro).tp, 0);
    }

    #[test]
    fn strict_tp_never_exceeds_loose() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let gen = |r: &mut ChaCha8Rng| -> Vec<Relation> {
                (0..r.gen_range(0..4))
                    .map(|_| {
                        let hs = r.gen_range(0..4);
                        let ts = r.gen_range(0..4);
                        rel(
                            hs,
                            hs + r.gen_range(1..3),
                            r.gen_range(0..2),
                            ts,
                            ts + r.gen_range(1..3),
                            r.gen_range(0..2),
                            r.gen_range(0..2),
                        )
                    })
                    .collect()
            };
            let gold = vec![gen(&mut rng)];
            let pred = vec![gen(&mut rng)];
            let loose = score_re(&pred, &gold, false, Average::Micro);
            let strict = score_re(&pred, &gold, true, Average::Micro);
            assert!(strict.tp <= loose.tp);
        }
    }

    /// Independent oracle: set-intersection on match tuples.
    #[test]
    fn matches_set_intersection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let gen = |r: &mut ChaCha8Rng| -> Vec<Relation> {
                let n = r.gen_range(0..4);
                let mut seen = BTreeSet::new();
                let mut out = Vec::new();
                for _ in 0..n {
                    let hs = r.gen_range(0..5);
                    let ts = r.gen_range(0..5);
                    let cand = rel(
                        hs,
                        hs + 1,
                        r.gen_range(0..2),
                        ts,
                        ts + 1,
                        r.gen_range(0..2),
                        r.gen_range(0..3),
                    );
                    if seen.insert(cand) {
                        out.push(cand);
                    }
                }
                out
            };
            let gold_s = gen(&mut rng);
            let pred_s = gen(&mut rng);

            let to_set = |v: &[Relation]| -> BTreeSet<Relation> { v.iter().cloned().collect() };
            let inter = to_set(&pred_s).intersection(&to_set(&gold_s)).count();
            let got = score_re(&[pred_s.clone()], &[gold_s.clone()], true, Average::Micro);
            assert_eq!(got.tp, inter);
            assert_eq!(got.fp, pred_s.len() - inter);
            assert_eq!(got.fn_, gold_s.len() - inter);
        }
    }

    #[test]
    fn micro_is_sentence_permutation_invariant() {
        let g1 = vec![span(0, 1, 0)];
        let g2 = vec![span(1, 2, 1), span(3, 4, 0)];
        let p1 = vec![span(0, 1, 0), span(2, 3, 1)];
        let p2 = vec![span(1, 2, 1)];
        let a = score_ner(&[p1.clone(), p2.clone()], &[g1.clone(), g2.clone()], Average::Micro);
        let b = score_ner(&[p2, p1], &[g2, g1], Average::Micro);
        assert_eq!(a, b);
    }

    #[test]
    fn macro_is_type_relabel_invariant() {
        let gold = vec![vec![span(0, 1, 0), span(2, 3, 1)]];
        let pred = vec![vec![span(0, 1, 0), span(4, 5, 1)]];
        let a = score_ner(&pred, &gold, Average::Macro);
        // swap type labels 0 <-> 1 everywhere
        let swap = |v: &[Vec<EntitySpan>]| -> Vec<Vec<EntitySpan>> {
            v.iter()
                .map(|s| s.iter().map(|e| span(e.start, e.end, 1 - e.etype)).collect())
                .collect()
        };
        let b = score_ner(&swap(&pred), &swap(&gold), Average::Macro);
        assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn kfold_averages_f1() {
        let folds = vec![Prf::from_counts(1, 0, 0), Prf::from_counts(1, 1, 1)];
        let mean = kfold_mean(&folds);
        assert!((mean.f1 - (1.0 + 0.5) / 2.0).abs() < 1e-12);
    }
}
