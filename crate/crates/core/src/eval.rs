//! Recall@K in both directions and Mean Recall.
//!
//! A query counts as a hit at K when its gold partner appears at rank ≤ K.
//! Mean Recall is the plain mean of the six recalls (R@1/5/10 for
//! text-to-image and image-to-text).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::retrieval::{Direction, RetrievalError, RetrievalIndex, ScoredPair};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {0:?} has no gold partner")]
    MissingGold(String),
    #[error("gold mapping is not one-to-one: {0:?} appears twice")]
    NotBijective(String),
    #[error("gold id {0:?} is not in the index")]
    UnknownGoldId(String),
    #[error("{path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{0}")]
    Io(String),
    #[error("ks must be non-empty and ascending")]
    BadKs,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One-to-one text ↔ image pairing over the evaluation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldMapping {
    pairs: Vec<(String, String)>,
    t2i: HashMap<String, String>,
    i2t: HashMap<String, String>,
}

impl GoldMapping {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut t2i = HashMap::with_capacity(pairs.len());
        let mut i2t = HashMap::with_capacity(pairs.len());
        for (t, i) in &pairs {
            if t2i.insert(t.clone(), i.clone()).is_some() {
                return Err(EvalError::NotBijective(t.clone()));
            }
            if i2t.insert(i.clone(), t.clone()).is_some() {
                return Err(EvalError::NotBijective(i.clone()));
            }
        }
        Ok(Self { pairs, t2i, i2t })
    }

    /// Pair every id with itself.
    pub fn identity<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::new(ids.into_iter().map(|id| (id.to_owned(), id.to_owned())).collect())
    }

    /// Tab-separated `text_id image_id` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(t), Some(i), None) if !t.is_empty() && !i.is_empty() => pairs.push((t.to_owned(), i.to_owned())),
                _ => {
                    return Err(EvalError::Malformed {
                        path: origin.to_owned(),
                        line: n + 1,
                        reason: "expected `text_id<TAB>image_id`".into(),
                    })
                }
            }
        }
        Self::new(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Query id → gold candidate id for the given direction.
    pub fn lookup(&self, direction: Direction) -> &HashMap<String, String> {
        match direction {
            Direction::T2i => &self.t2i,
            Direction::I2t => &self.i2t,
        }
    }
}

/// Ranked candidates for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<ScoredPair>,
}

/// Percentage of queries whose gold candidate is ranked within the top `k`.
pub fn recall_at_k(results: &[RankedList], gold: &HashMap<String, String>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in results {
        let want = gold
            .get(&r.query_id)
            .ok_or_else(|| EvalError::MissingGold(r.query_id.clone()))?;
        if r.hits.iter().any(|p| p.rank <= k && &p.candidate_id == want) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}

pub fn mean_recall(recalls: &[f64; 6]) -> f64 {
    recalls.iter().sum::<f64>() / 6.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallReport {
    /// R@1, R@5, R@10 for text-to-image.
    pub t2i: [f64; 3],
    /// R@1, R@5, R@10 for image-to-text.
    pub i2t: [f64; 3],
    pub mr: f64,
}

impl RecallReport {
    pub fn from_recalls(t2i: [f64; 3], i2t: [f64; 3]) -> Self {
        let mr = mean_recall(&[t2i[0], t2i[1], t2i[2], i2t[0], i2t[1], i2t[2]]);
        Self { t2i, i2t, mr }
    }

    pub fn recalls(&self) -> [f64; 6] {
        [self.t2i[0], self.t2i[1], self.t2i[2], self.i2t[0], self.i2t[1], self.i2t[2]]
    }

    /// Table in the layout of the published results, one decimal place.
    pub fn render_table(&self, model: &str) -> String {
        let width = model.len().max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:^20}  {:^20}  {:>5}", "", "Text-to-Image", "Image-to-Text", "");
        let _ = writeln!(
            out,
            "{:<width$}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>5}",
            "Model", "R1", "R5", "R10", "R1", "R5", "R10", "MR"
        );
        let r = self.recalls();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.1} {:>6.1} {:>6.1}  {:>6.1} {:>6.1} {:>6.1}  {:>5.1}",
            model, r[0], r[1], r[2], r[3], r[4], r[5], self.mr
        );
        out
    }

    /// Flat `key=value` lines in a fixed key order, full precision.
    pub fn to_machine(&self) -> String {
        let keys = ["t2i_r1", "t2i_r5", "t2i_r10", "i2t_r1", "i2t_r5", "i2t_r10"];
        let mut out = String::new();
        for (k, v) in keys.iter().zip(self.recalls()) {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "mr={}", self.mr);
        out
    }
}

fn ranked_lists(
    index: &RetrievalIndex,
    gold: &GoldMapping,
    direction: Direction,
    k: usize,
    pool_of: Option<&HashMap<String, String>>,
) -> Result<Vec<RankedList>> {
    let (queries, candidates) = match direction {
        Direction::T2i => (index.texts(), index.images()),
        Direction::I2t => (index.images(), index.texts()),
    };
    let mut out = Vec::with_capacity(gold.len());
    for (t, i) in gold.pairs() {
        let (qid, cid) = match direction {
            Direction::T2i => (t, i),
            Direction::I2t => (i, t),
        };
        let q = queries.index_of(qid).ok_or_else(|| EvalError::UnknownGoldId(qid.clone()))?;
        if candidates.index_of(cid).is_none() {
            return Err(EvalError::UnknownGoldId(cid.clone()));
        }
        let hits = match pool_of {
            None => index.query_filtered(direction, q, k, &|_| true)?,
            Some(pools) => {
                let own = pools.get(qid);
                let recs = candidates.records();
                index.query_filtered(direction, q, k, &|c| pools.get(&recs[c].id) == own)?
            }
        };
        out.push(RankedList {
            query_id: qid.clone(),
            hits,
        });
    }
    Ok(out)
}

fn evaluate(
    index: &RetrievalIndex,
    gold: &GoldMapping,
    ks: [usize; 3],
    pool_of: Option<&HashMap<String, String>>,
) -> Result<RecallReport> {
    if ks[0] == 0 || ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::BadKs);
    }
    let mut out = [[0.0; 3]; 2];
    for (slot, direction) in [Direction::T2i, Direction::I2t].into_iter().enumerate() {
        let corpus = match direction {
            Direction::T2i => index.images().len(),
            Direction::I2t => index.texts().len(),
        };
        let depth = ks[2].min(corpus).max(1);
        let lists = ranked_lists(index, gold, direction, depth, pool_of)?;
        for (j, &k) in ks.iter().enumerate() {
            out[slot][j] = recall_at_k(&lists, gold.lookup(direction), k)?;
        }
    }
    Ok(RecallReport::from_recalls(out[0], out[1]))
}

/// Run both directions over every gold pair, retrieving over the whole corpus.
pub fn evaluate_split(index: &RetrievalIndex, gold: &GoldMapping, ks: [usize; 3]) -> Result<RecallReport> {
    evaluate(index, gold, ks, None)
}

/// As [`evaluate_split`], but each query only competes against candidates in
/// its own pool (e.g. the same manifest category).
pub fn evaluate_split_pooled(
    index: &RetrievalIndex,
    gold: &GoldMapping,
    ks: [usize; 3],
    pool_of: &HashMap<String, String>,
) -> Result<RecallReport> {
    evaluate(index, gold, ks, Some(pool_of))
}

/// One row of a published results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub table: String,
    pub model: String,
    pub recalls: [f64; 6],
    pub mr: f64,
}

/// Rounding slack allowed between a published MR and the mean of its recalls.
pub const MR_TOLERANCE: f64 = 0.05;

impl TableRow {
    pub fn computed_mr(&self) -> f64 {
        mean_recall(&self.recalls)
    }

    /// Published values carry one decimal, so a mean ending in exactly 5 at the
    /// second decimal sits at the tolerance boundary; 1e-9 absorbs the binary
    /// representation error of such values.
    pub fn is_consistent(&self) -> bool {
        (self.computed_mr() - self.mr).abs() <= MR_TOLERANCE + 1e-9
    }
}

/// Parse a fixtures file: tab-separated `table model t2i_r1 t2i_r5 t2i_r10
/// i2t_r1 i2t_r5 i2t_r10 mr`; a header line starting with `table` and `#`
/// comments are skipped.
pub fn parse_table_fixtures(text: &str) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with("table\t") {
            continue;
        }
        let bad = |reason: String| EvalError::Malformed {
            path: "fixtures".into(),
            line: n + 1,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(bad(format!("expected 9 columns, got {}", cols.len())));
        }
        let nums = cols[2..]
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("{c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(TableRow {
            table: cols[0].to_owned(),
            model: cols[1].to_owned(),
            recalls: nums[..6].try_into().unwrap(),
            mr: nums[6],
        });
    }
    Ok(rows)
}
