//! Filtered ranking evaluation: MRR and Hits@{1,3,10} over both prediction
//! directions, with per-direction and per-relation breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{FilterIndex, Split, Triple, TripleStore, Vocab};
use crate::error::{MeimError, Result};
use crate::model::{score_queries, Direction, ModelParams, Query};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// How candidates scoring exactly as high as the true entity are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Ties rank below the true entity.
    Optimistic,
    /// Half of the ties rank above the true entity.
    #[default]
    Average,
    /// Ties rank above the true entity.
    Pessimistic,
}

impl std::str::FromStr for TiePolicy {
    type Err = MeimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimistic" => Ok(TiePolicy::Optimistic),
            "average" => Ok(TiePolicy::Average),
            "pessimistic" => Ok(TiePolicy::Pessimistic),
            _ => Err(MeimError::Config(format!(
                "unknown tie policy `{s}` (expected optimistic, average or pessimistic)"
            ))),
        }
    }
}

fn sorted_unique(filter: &[usize]) -> std::borrow::Cow<'_, [usize]> {
    if filter.windows(2).all(|w| w[0] < w[1]) {
        filter.into()
    } else {
        let mut v = filter.to_vec();
        v.sort_unstable();
        v.dedup();
        v.into()
    }
}

/// Unrounded filtered rank of `true_id`.
///
/// Entities in `filter` other than `true_id` are skipped. Under
/// [`TiePolicy::Average`] the rank is `1 + better + equal / 2`.
pub fn filtered_rank_value(
    scores: &[f64],
    true_id: usize,
    filter: &[usize],
    policy: TiePolicy,
) -> Result<f64> {
    let target = *scores.get(true_id).ok_or(MeimError::Lookup {
        kind: "entity",
        id: true_id,
        size: scores.len(),
    })?;
    let mut better = 0usize;
    let mut equal = 0usize;
    for (e, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(MeimError::Evaluation(format!("score of entity {e} is NaN")));
        }
        if e != true_id {
            if s > target {
                better += 1;
            } else if s == target {
                equal += 1;
            }
        }
    }
    for &e in sorted_unique(filter).iter() {
        if e == true_id || e >= scores.len() {
            continue;
        }
        if scores[e] > target {
            better -= 1;
        } else if scores[e] == target {
            equal -= 1;
        }
    }
    let ties = match policy {
        TiePolicy::Optimistic => 0.0,
        TiePolicy::Average => equal as f64 / 2.0,
        TiePolicy::Pessimistic => equal as f64,
    };
    Ok(1.0 + better as f64 + ties)
}

/// Filtered rank rounded half up to an integer.
pub fn filtered_rank(
    scores: &Tensor,
    true_id: usize,
    filter: &[usize],
    policy: TiePolicy,
) -> Result<usize> {
    let r = filtered_rank_value(scores.data(), true_id, filter, policy)?;
    Ok((r + 0.5).floor() as usize)
}

/// Rank of one side of one evaluated triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub triple: Triple,
    pub direction: Direction,
    /// Unrounded rank.
    pub rank: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl DirectionMetrics {
    fn from_ranks<'a>(ranks: impl IntoIterator<Item = &'a f64>) -> Self {
        let mut m = DirectionMetrics::default();
        for &r in ranks {
            m.count += 1;
            m.mrr += 1.0 / r;
            m.hits1 += (r <= 1.0) as u8 as f64;
            m.hits3 += (r <= 3.0) as u8 as f64;
            m.hits10 += (r <= 10.0) as u8 as f64;
        }
        if m.count > 0 {
            let n = m.count as f64;
            m.mrr /= n;
            m.hits1 /= n;
            m.hits3 /= n;
            m.hits10 /= n;
        }
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    /// Relation id to MRR over both directions.
    pub per_relation: BTreeMap<usize, f64>,
    /// `"head"` and `"tail"` breakdowns.
    pub per_direction: BTreeMap<String, DirectionMetrics>,
    pub triple_count: usize,
}

fn direction_key(d: Direction) -> &'static str {
    match d {
        Direction::Head => "head",
        Direction::Tail => "tail",
    }
}

impl MetricsReport {
    pub fn from_records(records: &[RankRecord]) -> Self {
        let all = DirectionMetrics::from_ranks(records.iter().map(|r| &r.rank));
        let per_direction = [Direction::Head, Direction::Tail]
            .into_iter()
            .map(|d| {
                let m = DirectionMetrics::from_ranks(
                    records.iter().filter(|r| r.direction == d).map(|r| &r.rank),
                );
                (direction_key(d).to_string(), m)
            })
            .collect();
        let triple_count = records
            .iter()
            .filter(|r| r.direction == Direction::Tail)
            .count();
        MetricsReport {
            mrr: all.mrr,
            hits1: all.hits1,
            hits3: all.hits3,
            hits10: all.hits10,
            per_relation: per_relation_report(records),
            per_direction,
            triple_count,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Plain-text summary; relation ids are replaced by names when given.
    pub fn table(&self, relations: Option<&Vocab>) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "", "MRR", "H@1", "H@3", "H@10"
        );
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            "overall", self.mrr, self.hits1, self.hits3, self.hits10
        );
        for (name, m) in &self.per_direction {
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, m.mrr, m.hits1, m.hits3, m.hits10
            );
        }
        let _ = writeln!(out, "triples: {}", self.triple_count);
        if !self.per_relation.is_empty() {
            let _ = writeln!(out, "\n{:<40} {:>8}", "relation", "MRR");
            for (&r, mrr) in &self.per_relation {
                let name = relations
                    .and_then(|v| v.name(r))
                    .map_or_else(|| r.to_string(), str::to_string);
                let _ = writeln!(out, "{name:<40} {mrr:>8.4}");
            }
        }
        out
    }
}

/// MRR per relation with both directions pooled.
pub fn per_relation_report(records: &[RankRecord]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.triple.relation).or_default();
        e.0 += 1.0 / r.rank;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub tie_policy: TiePolicy,
    pub exec: Exec,
    /// Triples scored per forward pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tie_policy: TiePolicy::Average,
            exec: Exec::default(),
            chunk: 128,
        }
    }
}

/// Filtered ranks of both sides of every triple, tail records first within
/// each triple.
pub fn rank_triples(
    params: &ModelParams,
    triples: &[Triple],
    filter: &FilterIndex,
    opts: &EvalOptions,
) -> Result<Vec<RankRecord>> {
    let chunk = opts.chunk.max(1);
    let n_chunks = triples.len().div_ceil(chunk);
    let parts = par::map_range(opts.exec, n_chunks, |c| -> Result<Vec<RankRecord>> {
        let part = &triples[c * chunk..((c + 1) * chunk).min(triples.len())];
        let queries: Vec<Query> = part
            .iter()
            .flat_map(|t| {
                [
                    Query {
                        anchor: t.head,
                        relation: t.relation,
                        direction: Direction::Tail,
                    },
                    Query {
                        anchor: t.tail,
                        relation: t.relation,
                        direction: Direction::Head,
                    },
                ]
            })
            .collect();
        let scores = score_queries(params, &queries, opts.exec)?;
        let mut out = Vec::with_capacity(queries.len());
        for (i, t) in part.iter().enumerate() {
            let tail_rank = filtered_rank_value(
                scores.row(2 * i),
                t.tail,
                filter.true_tails(t.head, t.relation),
                opts.tie_policy,
            )?;
            let head_rank = filtered_rank_value(
                scores.row(2 * i + 1),
                t.head,
                filter.true_heads(t.tail, t.relation),
                opts.tie_policy,
            )?;
            out.push(RankRecord {
                triple: *t,
                direction: Direction::Tail,
                rank: tail_rank,
            });
            out.push(RankRecord {
                triple: *t,
                direction: Direction::Head,
                rank: head_rank,
            });
        }
        Ok(out)
    });
    let mut records = Vec::with_capacity(2 * triples.len());
    for p in parts {
        records.extend(p?);
    }
    Ok(records)
}

/// Filtered metrics of `split` in evaluation mode.
pub fn evaluate(
    params: &ModelParams,
    store: &TripleStore,
    split: Split,
    filter: &FilterIndex,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let triples = store.split(split);
    if triples.is_empty() {
        return Err(MeimError::Evaluation(format!(
            "the {split:?} split is empty"
        )));
    }
    let records = rank_triples(params, triples, filter, opts)?;
    Ok(MetricsReport::from_records(&records))
}
