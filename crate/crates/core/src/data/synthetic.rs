//! Small graphs exhibiting one relation pattern, with part of the pattern's
//! edges held out as the test split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{held_out_queries, KnowledgeGraph, QueryDataset, Split, Triple};
use crate::error::{Error, Result};
use crate::query::{GroundedQuery, Neighbors, QueryType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// `(a,r,b)` with `(b,r,a)`; some reverse edges held out.
    Symmetric,
    /// `(a,r,b)` without `(b,r,a)`; some edges held out.
    AntiSymmetric,
    /// `(a,r,b)` with `(b,r',a)` for a paired relation; some `r'` edges held out.
    InversePair,
    /// `(a,r1,b)`, `(b,r2,c)` and `(a,r3,c)`; some `r3` edges held out.
    Composition,
    /// Uniform random edges; some held out.
    Random,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Symmetric => "symmetric",
            Pattern::AntiSymmetric => "anti-symmetric",
            Pattern::InversePair => "inverse-pair",
            Pattern::Composition => "composition",
            Pattern::Random => "random",
        }
    }

    /// Relations used by one group of the pattern.
    pub fn relations_per_group(self) -> usize {
        match self {
            Pattern::InversePair => 2,
            Pattern::Composition => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Pattern::Symmetric, Pattern::AntiSymmetric, Pattern::InversePair, Pattern::Composition, Pattern::Random]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pattern '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub pattern: Pattern,
    pub entities: usize,
    /// Pairs (or chains for composition) per relation group.
    pub count: usize,
    pub relation_groups: usize,
    /// Fraction of the pattern's dependent edges moved to the test split.
    pub holdout: f64,
}

impl PatternSpec {
    pub fn num_relations(&self) -> usize {
        self.relation_groups * self.pattern.relations_per_group()
    }

    fn validate(&self) -> Result<()> {
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!("holdout fraction {} not in (0, 1)", self.holdout)));
        }
        if self.count == 0 || self.relation_groups == 0 {
            return Err(Error::Config("pattern needs at least one pair and one relation group".into()));
        }
        let e = self.entities;
        let min_entities = if self.pattern == Pattern::Composition { 3 } else { 2 };
        if e < min_entities {
            return Err(Error::Config(format!("{} pattern needs at least {min_entities} entities", self.pattern)));
        }
        let capacity = match self.pattern {
            Pattern::Symmetric | Pattern::AntiSymmetric => e * (e - 1) / 2,
            _ => e * (e - 1),
        };
        if self.count > capacity {
            return Err(Error::Config(format!(
                "{} pairs requested but only {capacity} fit among {e} entities",
                self.count
            )));
        }
        Ok(())
    }

    pub fn held_out_per_group(&self) -> usize {
        (self.count as f64 * self.holdout).round() as usize
    }
}

/// A generated graph with training `1p` queries over the train split and
/// held-out `1p` queries over the test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    pub graph: KnowledgeGraph,
    pub train: QueryDataset,
    pub test: QueryDataset,
}

fn distinct_pairs(rng: &mut impl Rng, e: usize, count: usize, unordered: bool) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..e)
        .flat_map(|a| (0..e).map(move |b| (a, b)))
        .filter(|&(a, b)| if unordered { a < b } else { a != b })
        .collect();
    all.shuffle(rng);
    all.truncate(count);
    if unordered {
        // random orientation so heads are not biased to low ids
        for p in &mut all {
            if rng.gen_bool(0.5) {
                *p = (p.1, p.0);
            }
        }
    }
    all
}

pub fn generate_synthetic(spec: &PatternSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = spec.entities;
    let held = spec.held_out_per_group();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let k = spec.pattern.relations_per_group();
    for group in 0..spec.relation_groups {
        let r = group * k;
        match spec.pattern {
            Pattern::Symmetric => {
                for (i, (a, b)) in distinct_pairs(&mut rng, e, spec.count, true).into_iter().enumerate() {
                    train.push(Triple::new(a, r, b));
                    let reverse = Triple::new(b, r, a);
                    if i < held {
                        test.push(reverse)
                    } else {
                        train.push(reverse)
                    }
                }
            }
            Pattern::AntiSymmetric | Pattern::Random => {
                let unordered = spec.pattern == Pattern::AntiSymmetric;
                for (i, (a, b)) in distinct_pairs(&mut rng, e, spec.count, unordered).into_iter().enumerate() {
                    let t = Triple::new(a, r, b);
                    if i < held {
                        test.push(t)
                    } else {
                        train.push(t)
                    }
                }
            }
            Pattern::InversePair => {
                for (i, (a, b)) in distinct_pairs(&mut rng, e, spec.count, false).into_iter().enumerate() {
                    train.push(Triple::new(a, r, b));
                    let inverse = Triple::new(b, r + 1, a);
                    if i < held {
                        test.push(inverse)
                    } else {
                        train.push(inverse)
                    }
                }
            }
            Pattern::Composition => {
                let mut used = BTreeSet::new();
                let mut chains = Vec::new();
                let budget = spec.count * 200;
                for _ in 0..budget {
                    if chains.len() == spec.count {
                        break;
                    }
                    let (a, b, c) = (rng.gen_range(0..e), rng.gen_range(0..e), rng.gen_range(0..e));
                    if a == b || b == c || a == c {
                        continue;
                    }
                    let edges = [Triple::new(a, r, b), Triple::new(b, r + 1, c), Triple::new(a, r + 2, c)];
                    if edges.iter().any(|t| used.contains(t)) {
                        continue;
                    }
                    used.extend(edges);
                    chains.push(edges);
                }
                if chains.len() < spec.count {
                    return Err(Error::Config(format!(
                        "could only place {} of {} disjoint composition chains",
                        chains.len(),
                        spec.count
                    )));
                }
                for (i, [ab, bc, ac]) in chains.into_iter().enumerate() {
                    train.push(ab);
                    train.push(bc);
                    if i < held {
                        test.push(ac)
                    } else {
                        train.push(ac)
                    }
                }
            }
        }
    }
    let mut graph = KnowledgeGraph::new(e, spec.num_relations());
    graph.set_split(Split::Train, train)?;
    graph.set_split(Split::Test, test)?;
    let test = held_out_queries(&graph, Split::Test)?;
    let train = one_hop_training_queries(&graph)?;
    Ok(SyntheticData { graph, train, test })
}

/// Every `(head, relation)` of the train split as a `1p` query.
fn one_hop_training_queries(graph: &KnowledgeGraph) -> Result<QueryDataset> {
    let adj = graph.adjacency(&[Split::Train]);
    let keys: BTreeMap<(usize, usize), ()> = adj.keys().map(|k| (k, ())).collect();
    keys.into_keys()
        .map(|(h, r)| GroundedQuery::new(QueryType::P1, vec![h], vec![r], adj.tails(h, r).clone(), BTreeSet::new()))
        .collect::<Result<Vec<_>>>()
        .map(QueryDataset::new)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern) -> PatternSpec {
        PatternSpec { pattern, entities: 20, count: 10, relation_groups: 1, holdout: 0.2 }
    }

    #[test]
    fn symmetric_split_counts() {
        let d = generate_synthetic(&spec(Pattern::Symmetric), 1).unwrap();
        assert_eq!(d.graph.split(Split::Train).len(), 18);
        assert_eq!(d.graph.split(Split::Test).len(), 2);
        let train = d.graph.adjacency(&[Split::Train]);
        for t in d.graph.split(Split::Test) {
            assert!(train.contains(Triple::new(t.tail, t.relation, t.head)));
        }
        assert_eq!(d.test.len(), 2);
        d.test.check_evaluable().unwrap();
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        for p in [Pattern::Symmetric, Pattern::InversePair, Pattern::Composition, Pattern::Random] {
            assert_eq!(generate_synthetic(&spec(p), 5).unwrap(), generate_synthetic(&spec(p), 5).unwrap());
        }
        assert_ne!(
            generate_synthetic(&spec(Pattern::Random), 5).unwrap(),
            generate_synthetic(&spec(Pattern::Random), 6).unwrap()
        );
    }

    #[test]
    fn composition_has_two_hop_support() {
        let s = PatternSpec { count: 30, relation_groups: 2, ..spec(Pattern::Composition) };
        let d = generate_synthetic(&s, 2).unwrap();
        let train = d.graph.adjacency(&[Split::Train]);
        assert_eq!(d.graph.split(Split::Test).len(), 12);
        for t in d.graph.split(Split::Test) {
            let r1 = t.relation - 2;
            let mids = train.tails(t.head, r1);
            assert!(mids.iter().any(|&m| train.tails(m, r1 + 1).contains(&t.tail)));
        }
    }

    #[test]
    fn inverse_pairs_and_anti_symmetry() {
        let d = generate_synthetic(&spec(Pattern::InversePair), 3).unwrap();
        assert_eq!(d.graph.num_relations(), 2);
        let full = d.graph.adjacency(&[Split::Train, Split::Test]);
        for t in d.graph.split(Split::Train).iter().filter(|t| t.relation == 0) {
            assert!(full.contains(Triple::new(t.tail, 1, t.head)));
        }
        let d = generate_synthetic(&spec(Pattern::AntiSymmetric), 3).unwrap();
        let full = d.graph.adjacency(&[Split::Train, Split::Test]);
        for t in d.graph.split(Split::Train) {
            assert!(!full.contains(Triple::new(t.tail, t.relation, t.head)));
        }
    }

    #[test]
    fn infeasible_specs() {
        assert!(generate_synthetic(&PatternSpec { holdout: 1.0, ..spec(Pattern::Symmetric) }, 0).is_err());
        assert!(generate_synthetic(&PatternSpec { holdout: 0.0, ..spec(Pattern::Symmetric) }, 0).is_err());
        assert!(generate_synthetic(&PatternSpec { entities: 4, count: 7, ..spec(Pattern::Symmetric) }, 0).is_err());
        assert!(generate_synthetic(&PatternSpec { entities: 4, count: 12, ..spec(Pattern::InversePair) }, 0).is_ok());
        assert!(matches!(
            generate_synthetic(&PatternSpec { entities: 4, count: 13, ..spec(Pattern::Random) }, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_queries_cover_train_split() {
        let d = generate_synthetic(&spec(Pattern::Random), 4).unwrap();
        let total: usize = d.train.queries.iter().map(|q| q.easy.len()).sum();
        assert_eq!(total, d.graph.split(Split::Train).len());
    }
}
