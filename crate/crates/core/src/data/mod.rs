//! Knowledge graphs, grounded-query datasets and their on-disk formats.
//!
//! A dataset directory holds one graph file per split
//! (`graph-train.tsv`, `graph-valid.tsv`, `graph-test.tsv`) and one query file
//! per split (`queries-train.tsv`, ...). Missing valid/test files are read as
//! empty.
//!
//! Graph file:
//!
//! ```text
//! #version 1
//! {"entities":5,"relations":2,"split":"train"}
//! 0	1	3
//! ```
//!
//! Query file, `-` for an empty set:
//!
//! ```text
//! #version 1
//! 2i	0,4	1,1	2	3,7
//! ```

// the examples above use real tabs, as the files do
#![allow(clippy::tabs_in_doc_comments)]

mod format;
mod grounding;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

pub use format::{
    load_graph, load_queries, read_graph, read_queries, save_dataset, write_graph, write_queries, FORMAT_VERSION,
};
pub use grounding::{ground_queries, held_out_queries, GroundingMode, GroundingReport};
pub use synthetic::{generate_synthetic, Pattern, PatternSpec, SyntheticData};

use crate::error::{Error, Result};
use crate::query::{GroundedQuery, Neighbors, QueryType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self { head, relation, tail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    /// This split and every split before it.
    pub fn up_to(self) -> &'static [Split] {
        match self {
            Split::Train => &Split::ALL[..1],
            Split::Valid => &Split::ALL[..2],
            Split::Test => &Split::ALL[..],
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

/// Id-only knowledge graph with train/valid/test edge sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: usize,
    relations: usize,
    splits: [Vec<Triple>; 3],
}

impl KnowledgeGraph {
    pub fn new(entities: usize, relations: usize) -> Self {
        Self { entities, relations, splits: Default::default() }
    }

    /// Replaces one split after checking ids and duplicates. Triples are kept
    /// sorted so iteration order does not depend on input order.
    pub fn set_split(&mut self, split: Split, mut triples: Vec<Triple>) -> Result<()> {
        for t in &triples {
            self.check(t)?;
        }
        triples.sort_unstable();
        if let Some(w) = triples.windows(2).find(|w| w[0] == w[1]) {
            let t = w[0];
            return Err(Error::Data(format!(
                "duplicate triple ({}, {}, {}) in {split} split",
                t.head, t.relation, t.tail
            )));
        }
        self.splits[split as usize] = triples;
        Ok(())
    }

    fn check(&self, t: &Triple) -> Result<()> {
        if t.head >= self.entities || t.tail >= self.entities {
            return Err(Error::Data(format!(
                "entity id in ({}, {}, {}) exceeds {} entities",
                t.head, t.relation, t.tail, self.entities
            )));
        }
        if t.relation >= self.relations {
            return Err(Error::Data(format!(
                "relation id in ({}, {}, {}) exceeds {} relations",
                t.head, t.relation, t.tail, self.relations
            )));
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities
    }

    pub fn num_relations(&self) -> usize {
        self.relations
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        &self.splits[split as usize]
    }

    /// Adjacency over the union of the given splits.
    pub fn adjacency(&self, splits: &[Split]) -> Adjacency {
        let mut adj = Adjacency::new(self.entities);
        for &s in splits {
            for t in self.split(s) {
                adj.insert(*t);
            }
        }
        adj
    }
}

/// Forward and reverse edge index.
#[derive(Debug, Clone, Default)]
pub struct Adjacency {
    entities: usize,
    forward: BTreeMap<(usize, usize), BTreeSet<usize>>,
    incoming: BTreeMap<usize, Vec<(usize, usize)>>,
    empty: BTreeSet<usize>,
}

impl Adjacency {
    pub fn new(entities: usize) -> Self {
        Self { entities, ..Default::default() }
    }

    pub fn insert(&mut self, t: Triple) {
        if self.forward.entry((t.head, t.relation)).or_default().insert(t.tail) {
            self.incoming.entry(t.tail).or_default().push((t.head, t.relation));
        }
    }

    /// `(head, relation)` pairs of the edges ending at `tail`.
    pub fn incoming(&self, tail: usize) -> &[(usize, usize)] {
        self.incoming.get(&tail).map_or(&[], |v| v.as_slice())
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.forward.get(&(t.head, t.relation)).is_some_and(|s| s.contains(&t.tail))
    }

    /// `(head, relation)` keys with at least one tail.
    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.forward.keys().copied()
    }
}

impl Neighbors for Adjacency {
    fn num_entities(&self) -> usize {
        self.entities
    }

    fn tails(&self, head: usize, relation: usize) -> &BTreeSet<usize> {
        self.forward.get(&(head, relation)).unwrap_or(&self.empty)
    }
}

/// Grounded queries of one split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryDataset {
    pub queries: Vec<GroundedQuery>,
}

impl QueryDataset {
    pub fn new(queries: Vec<GroundedQuery>) -> Self {
        Self { queries }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn by_type(&self) -> BTreeMap<QueryType, Vec<&GroundedQuery>> {
        let mut out: BTreeMap<QueryType, Vec<&GroundedQuery>> = BTreeMap::new();
        for q in &self.queries {
            out.entry(q.structure).or_default().push(q);
        }
        out
    }

    /// Keeps only the given structures.
    pub fn filter_types(&self, types: &[QueryType]) -> QueryDataset {
        QueryDataset::new(self.queries.iter().filter(|q| types.contains(&q.structure)).cloned().collect())
    }

    /// Fails unless every query has at least one hard answer.
    pub fn check_evaluable(&self) -> Result<()> {
        match self.queries.iter().position(|q| q.hard.is_empty()) {
            Some(i) => Err(Error::Data(format!("evaluation query {i} has no hard answers"))),
            None => Ok(()),
        }
    }

    /// Fails if any id is out of range for the graph.
    pub fn check_ids(&self, graph: &KnowledgeGraph) -> Result<()> {
        for (i, q) in self.queries.iter().enumerate() {
            let bad_e = q.anchors.iter().chain(&q.easy).chain(&q.hard).any(|&e| e >= graph.num_entities());
            let bad_r = q.relations.iter().any(|&r| r >= graph.num_relations());
            if bad_e || bad_r {
                return Err(Error::Data(format!("query {i} ({}) has an id out of range", q.structure)));
            }
        }
        Ok(())
    }
}
