//! Exhaustive nearest-neighbor search and Recall@N evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NS: [usize; 3] = [1, 5, 20];

/// Immutable database of descriptors, queried by exact L2 scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<u64>,
    rows: Vec<f32>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

impl DescriptorIndex {
    pub fn build<R: AsRef<[f32]>>(descriptors: &[R], ids: &[u64]) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Contract("cannot build an empty index".into()));
        }
        if descriptors.len() != ids.len() {
            return Err(Error::Contract(format!(
                "{} descriptors for {} ids",
                descriptors.len(),
                ids.len()
            )));
        }
        let dim = descriptors[0].as_ref().len();
        let mut seen = HashSet::with_capacity(ids.len());
        let mut rows = Vec::with_capacity(dim * descriptors.len());
        for (i, (d, &id)) in descriptors.iter().zip(ids).enumerate() {
            let d = d.as_ref();
            if d.len() != dim {
                return Err(Error::Contract(format!(
                    "row {i} (id {id}) has dimension {}, expected {dim}",
                    d.len()
                )));
            }
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
            rows.extend_from_slice(d);
        }
        Ok(Self {
            dim,
            ids: ids.to_vec(),
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Top-`n` rows by Euclidean distance, ties broken by ascending id.
    /// Asking for more rows than the index holds returns the full ranking
    /// with `truncated` set.
    pub fn query_top_n(&self, q: &[f32], n: usize) -> Result<Ranking> {
        if q.len() != self.dim {
            return Err(Error::Contract(format!(
                "query has dimension {}, index has {}",
                q.len(),
                self.dim
            )));
        }
        if n == 0 {
            return Err(Error::Contract("N must be at least 1".into()));
        }
        let mut scored: Vec<(f64, u64, usize)> = self
            .rows
            .chunks_exact(self.dim)
            .zip(&self.ids)
            .enumerate()
            .map(|(i, (r, &id))| (sq_dist(q, r), id, i))
            .collect();
        let cmp =
            |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let truncated = n > scored.len();
        let keep = n.min(scored.len());
        if keep < scored.len() {
            scored.select_nth_unstable_by(keep - 1, cmp);
            scored.truncate(keep);
        }
        scored.sort_by(cmp);
        Ok(Ranking {
            ids: scored.iter().map(|s| s.1).collect(),
            rows: scored.iter().map(|s| s.2).collect(),
            distances: scored.iter().map(|s| s.0.sqrt()).collect(),
            truncated,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub ids: Vec<u64>,
    /// Index rows of the ranked ids.
    pub rows: Vec<usize>,
    pub distances: Vec<f64>,
    /// Set when fewer than the requested `N` rows exist.
    pub truncated: bool,
}

/// A query for evaluation: its descriptor and true planar position.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: u64,
    pub descriptor: &'a [f32],
    pub position: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: u64,
    pub top: Vec<u64>,
    /// 1-based rank of the first retrieved id within the radius.
    pub first_correct_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ns: Vec<usize>,
    pub recall: Vec<f64>,
    pub radius_m: f64,
    /// Queries that had at least one database record within the radius.
    pub evaluated: usize,
    /// Queries with no ground truth within the radius (not in the denominator).
    pub excluded: Vec<u64>,
    pub per_query: Vec<QueryOutcome>,
}

impl RecallReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&m| m == n).map(|i| self.recall[i])
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "radius {:.1} m, {} queries evaluated, {} excluded",
            self.radius_m,
            self.evaluated,
            self.excluded.len()
        );
        for (n, r) in self.ns.iter().zip(&self.recall) {
            let _ = writeln!(s, "  Recall@{n:<4} {:>6.2}%", 100.0 * r);
        }
        s
    }

    /// One line per evaluated query: id, first correct rank (empty if none
    /// within the largest N), then the retrieved ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,first_correct_rank,top_ids\n");
        for q in &self.per_query {
            let rank = q
                .first_correct_rank
                .map(|r| r.to_string())
                .unwrap_or_default();
            let top: Vec<String> = q.top.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{},{},{}", q.id, rank, top.join(" "));
        }
        s
    }
}

fn planar_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Recall@N: a query is correct at `N` when any of its top-`N` retrieved
/// database records lies within `radius_m` of the query position.
/// `db_positions` is aligned with the index rows.
pub fn evaluate_recall(
    index: &DescriptorIndex,
    db_positions: &[(f64, f64)],
    queries: &[Query<'_>],
    radius_m: f64,
    ns: &[usize],
) -> Result<RecallReport> {
    if db_positions.len() != index.len() {
        return Err(Error::Contract(format!(
            "{} database positions for {} index rows",
            db_positions.len(),
            index.len()
        )));
    }
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let max_n = *ns
        .last()
        .ok_or_else(|| Error::Contract("no N values".into()))?;
    let outcomes: Vec<Option<QueryOutcome>> = queries
        .par_iter()
        .map(|q| -> Result<Option<QueryOutcome>> {
            let has_truth = db_positions
                .iter()
                .any(|&p| planar_dist(p, q.position) <= radius_m);
            if !has_truth {
                return Ok(None);
            }
            let ranking = index.query_top_n(q.descriptor, max_n)?;
            let first = ranking
                .rows
                .iter()
                .position(|&r| planar_dist(db_positions[r], q.position) <= radius_m)
                .map(|i| i + 1);
            Ok(Some(QueryOutcome {
                id: q.id,
                top: ranking.ids,
                first_correct_rank: first,
            }))
        })
        .collect::<Result<_>>()?;
    let excluded: Vec<u64> = queries
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| o.is_none())
        .map(|(q, _)| q.id)
        .collect();
    let per_query: Vec<QueryOutcome> = outcomes.into_iter().flatten().collect();
    if per_query.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let evaluated = per_query.len();
    let recall = ns
        .iter()
        .map(|&n| {
            per_query
                .iter()
                .filter(|q| q.first_correct_rank.is_some_and(|r| r <= n))
                .count() as f64
                / evaluated as f64
        })
        .collect();
    Ok(RecallReport {
        ns,
        recall,
        radius_m,
        evaluated,
        excluded,
        per_query,
    })
}
