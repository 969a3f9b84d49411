//! Link-prediction metrics and latency benchmarking.

mod bench;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use bench::{attention_flops, bench_latency, BenchConfig, LatencyReport, TimingStats};

use crate::data::{Direction, KnownAnswers, LatentTruth, MkgDataset, Query, Split};
use crate::error::{invalid, ElmmError, Result};
use crate::kgc::score_query;
use crate::model::{ModelConfig, Model};
use crate::numerics::SeededRng;

/// Rank of `target` among all candidates not in `filtered`.
///
/// `1 + #{e : s_e > s_t} + #{e : s_e == s_t, e < target}`, so ties are broken
/// pessimistically by entity id and ranks are always integers.
pub fn rank_query(scores: &[f64], target: usize, filtered: &[usize]) -> Result<usize> {
    if target >= scores.len() {
        return Err(invalid(format!("target {target} outside {} scores", scores.len())));
    }
    if filtered.contains(&target) {
        return Err(ElmmError::Internal(format!("target {target} was filtered out of its own ranking")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(ElmmError::NonFinite(format!("score of entity {i} is NaN")));
    }
    let st = scores[target];
    let mut rank = 1;
    for (e, &s) in scores.iter().enumerate() {
        if e == target || filtered.contains(&e) {
            continue;
        }
        if s > st || (s == st && e < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Anything that assigns a score to every entity for a query.
pub trait Scorer {
    fn name(&self) -> &str;
    fn scores(&mut self, dataset: &MkgDataset, query: &Query) -> Result<Vec<f64>>;
}

pub struct ModelScorer<'a> {
    model: &'a Model,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model }
    }
}

impl Scorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn scores(&mut self, dataset: &MkgDataset, query: &Query) -> Result<Vec<f64>> {
        Ok(score_query(self.model, &dataset.batch(query))?.logits)
    }
}

/// Puts the target strictly on top.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn scores(&mut self, dataset: &MkgDataset, query: &Query) -> Result<Vec<f64>> {
        let mut s = vec![0.0; dataset.num_entities()];
        s[query.target] = 1.0;
        Ok(s)
    }
}

/// Independent uniform scores per query.
pub struct RandomScorer {
    rng: SeededRng,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SeededRng::new(seed),
        }
    }
}

impl Scorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn scores(&mut self, dataset: &MkgDataset, _query: &Query) -> Result<Vec<f64>> {
        Ok((0..dataset.num_entities()).map(|_| self.rng.uniform()).collect())
    }
}

/// Nearest neighbour in the generator's latent space.
pub struct LatentScorer<'a> {
    truth: &'a LatentTruth,
}

impl<'a> LatentScorer<'a> {
    pub fn new(truth: &'a LatentTruth) -> Self {
        Self { truth }
    }
}

impl Scorer for LatentScorer<'_> {
    fn name(&self) -> &str {
        "latent_oracle"
    }

    fn scores(&mut self, _dataset: &MkgDataset, query: &Query) -> Result<Vec<f64>> {
        Ok(self.truth.scores(query.known, query.relation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    /// Index of the triple within its split.
    pub query_id: usize,
    pub direction: Direction,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub split: Split,
    pub filtered: bool,
    pub num_queries: usize,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    pub ranks: Vec<RankRecord>,
}

impl EvalReport {
    pub fn from_ranks(scorer: &str, split: Split, filtered: bool, ranks: Vec<RankRecord>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(invalid("no queries to evaluate"));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|r| r.rank <= k).count() as f64 / n;
        Ok(Self {
            scorer: scorer.to_string(),
            split,
            filtered,
            num_queries: ranks.len(),
            mr: ranks.iter().map(|r| r.rank as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            config_hash: None,
            model_config: None,
            ranks,
        })
    }

    pub fn ranks_csv(&self) -> String {
        let mut s = String::from("query_id,direction,rank\n");
        for r in &self.ranks {
            let dir = match r.direction {
                Direction::Tail => "tail",
                Direction::Head => "head",
            };
            let _ = writeln!(s, "{},{dir},{}", r.query_id, r.rank);
        }
        s
    }
}

/// Ranks both directions of every triple in `split`.
pub fn evaluate(scorer: &mut dyn Scorer, dataset: &MkgDataset, split: Split, filtered: bool) -> Result<EvalReport> {
    let triples = dataset.split(split);
    if triples.is_empty() {
        return Err(invalid(format!("{} split is empty", split.name())));
    }
    let known = if filtered {
        dataset.known_answers()
    } else {
        KnownAnswers::default()
    };
    let mut ranks = Vec::with_capacity(2 * triples.len());
    for (i, t) in triples.iter().enumerate() {
        for direction in [Direction::Tail, Direction::Head] {
            let q = dataset.query(t, direction);
            let scores = scorer.scores(dataset, &q)?;
            if scores.len() != dataset.num_entities() {
                return Err(invalid(format!(
                    "scorer returned {} scores for {} entities",
                    scores.len(),
                    dataset.num_entities()
                )));
            }
            let rank = rank_query(&scores, q.target, &known.others(&q))?;
            ranks.push(RankRecord {
                query_id: i,
                direction,
                rank,
            });
        }
    }
    EvalReport::from_ranks(scorer.name(), split, filtered, ranks)
}
