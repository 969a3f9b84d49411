//! Multimodal knowledge graph datasets: in-memory representation, the
//! seeded synthetic generator, and the on-disk format.

mod generate;
mod io;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use generate::{generate_synthetic_mkg, GenConfig, GeneratedMkg, LatentTruth};
pub use io::{load_dataset, save_dataset, Manifest};

use crate::error::{invalid, Result};
use crate::mvtc::MultimodalBatch;
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: usize,
    pub name: String,
    pub text_tokens: Vec<usize>,
    /// `[start, end)` into `text_tokens`.
    pub entity_span: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub id: usize,
    pub name: String,
    pub text_tokens: Vec<usize>,
    /// `[start, end)` into `text_tokens`.
    pub relation_span: [usize; 2],
    /// For reciprocal relations, the base relation they invert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse_of: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`, asked as `(t, r⁻¹, ?)`.
    Head,
}

/// A single completion question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub direction: Direction,
    pub known: usize,
    /// Relation id as presented to the model; reciprocal ids for head queries.
    pub relation: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MkgDataset {
    pub entities: Vec<EntityRecord>,
    /// Base relations `0..R` followed by their reciprocals `R..2R`.
    pub relations: Vec<RelationRecord>,
    pub num_base_relations: usize,
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
    /// Per entity, `N(M+1) x E_i` region features.
    pub visual: Vec<Matrix>,
    pub n_images: usize,
    /// Regions per image, CLS excluded.
    pub n_regions: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
}

impl MkgDataset {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn inverse_relation(&self, relation: usize) -> usize {
        relation + self.num_base_relations
    }

    pub fn query(&self, triple: &Triple, direction: Direction) -> Query {
        match direction {
            Direction::Tail => Query {
                direction,
                known: triple.head,
                relation: triple.relation,
                target: triple.tail,
            },
            Direction::Head => Query {
                direction,
                known: triple.tail,
                relation: self.inverse_relation(triple.relation),
                target: triple.head,
            },
        }
    }

    /// Both directions of every triple in `split`, tail query first.
    pub fn queries(&self, split: Split) -> Vec<Query> {
        self.split(split)
            .iter()
            .flat_map(|t| [self.query(t, Direction::Tail), self.query(t, Direction::Head)])
            .collect()
    }

    /// Longest text (entity + relation tokens) any query can produce.
    pub fn max_text_len(&self) -> usize {
        let e = self.entities.iter().map(|e| e.text_tokens.len()).max().unwrap_or(0);
        let r = self.relations.iter().map(|r| r.text_tokens.len()).max().unwrap_or(0);
        e + r
    }

    pub fn batch(&self, q: &Query) -> MultimodalBatch<'_> {
        let ent = &self.entities[q.known];
        let rel = &self.relations[q.relation];
        let mut text_ids = ent.text_tokens.clone();
        text_ids.extend_from_slice(&rel.text_tokens);
        let off = ent.text_tokens.len();
        MultimodalBatch {
            visual: &self.visual[q.known],
            text_ids,
            entity_span: ent.entity_span[0]..ent.entity_span[1],
            relation_span: off + rel.relation_span[0]..off + rel.relation_span[1],
        }
    }

    /// Every `(known, relation) -> target` fact across all splits, keyed in
    /// both directions, for filtered ranking.
    pub fn known_answers(&self) -> KnownAnswers {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in self.train.iter().chain(&self.dev).chain(&self.test) {
            map.entry((t.head, t.relation)).or_default().push(t.tail);
            map.entry((t.tail, self.inverse_relation(t.relation)))
                .or_default()
                .push(t.head);
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        KnownAnswers { map }
    }

    /// Checks every structural invariant; the error names the offending record.
    pub fn validate(&self) -> Result<()> {
        let ne = self.entities.len();
        let nr = self.num_base_relations;
        if ne == 0 || nr == 0 {
            return Err(invalid("dataset has no entities or relations"));
        }
        if self.relations.len() != 2 * nr {
            return Err(invalid(format!(
                "expected {} relation records (base + reciprocal), found {}",
                2 * nr,
                self.relations.len()
            )));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.id != i {
                return Err(invalid(format!("entity record {i} carries id {}", e.id)));
            }
            check_span("entity", i, e.entity_span, e.text_tokens.len())?;
            check_tokens("entity", i, &e.text_tokens, self.vocab_size)?;
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.id != i {
                return Err(invalid(format!("relation record {i} carries id {}", r.id)));
            }
            let want = (i >= nr).then(|| i - nr);
            if r.inverse_of != want {
                return Err(invalid(format!(
                    "relation {i}: inverse_of {:?}, expected {want:?}",
                    r.inverse_of
                )));
            }
            check_span("relation", i, r.relation_span, r.text_tokens.len())?;
            check_tokens("relation", i, &r.text_tokens, self.vocab_size)?;
        }
        let shape = (self.n_images * (self.n_regions + 1), self.visual_dim);
        if self.visual.len() != ne {
            return Err(invalid(format!(
                "{} visual tensors for {ne} entities",
                self.visual.len()
            )));
        }
        for (i, v) in self.visual.iter().enumerate() {
            if v.shape() != shape {
                return Err(invalid(format!(
                    "entity {i}: visual tensor {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
            if !v.is_finite() {
                return Err(invalid(format!("entity {i}: non-finite visual feature")));
            }
        }
        let mut seen: Vec<HashSet<Triple>> = Vec::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let mut set = HashSet::new();
            for t in self.split(split) {
                if t.head >= ne || t.tail >= ne || t.relation >= nr {
                    return Err(invalid(format!(
                        "{} triple {}\t{}\t{} references an unknown id",
                        split.name(),
                        t.head,
                        t.relation,
                        t.tail
                    )));
                }
                if !set.insert(*t) {
                    return Err(invalid(format!(
                        "duplicate {} triple {}\t{}\t{}",
                        split.name(),
                        t.head,
                        t.relation,
                        t.tail
                    )));
                }
                if let Some(prev) = seen.iter().position(|s| s.contains(t)) {
                    let other = [Split::Train, Split::Dev][prev];
                    return Err(invalid(format!(
                        "{} triple {}\t{}\t{} also appears in {}",
                        split.name(),
                        t.head,
                        t.relation,
                        t.tail,
                        other.name()
                    )));
                }
            }
            seen.push(set);
        }
        Ok(())
    }
}

fn check_span(kind: &str, id: usize, span: [usize; 2], len: usize) -> Result<()> {
    if span[0] >= span[1] || span[1] > len {
        return Err(invalid(format!(
            "{kind} {id}: span {span:?} invalid for {len} tokens"
        )));
    }
    Ok(())
}

fn check_tokens(kind: &str, id: usize, tokens: &[usize], vocab: usize) -> Result<()> {
    if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(invalid(format!(
            "{kind} {id}: token {t} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// True answers per `(known, relation)` pair.
#[derive(Clone, Debug, Default)]
pub struct KnownAnswers {
    map: HashMap<(usize, usize), Vec<usize>>,
}

impl KnownAnswers {
    pub fn contains(&self, known: usize, relation: usize, answer: usize) -> bool {
        self.map
            .get(&(known, relation))
            .is_some_and(|v| v.binary_search(&answer).is_ok())
    }

    /// Entities other than the query's target that are also true answers.
    pub fn others(&self, q: &Query) -> Vec<usize> {
        self.map
            .get(&(q.known, q.relation))
            .map(|v| v.iter().copied().filter(|&e| e != q.target).collect())
            .unwrap_or_default()
    }
}
