use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Adjacency, KnowledgeGraph, QueryDataset, Split};
use crate::error::{Error, Result};
use crate::query::{answer_set, build_template, GroundedQuery, Neighbors, QueryNode, QueryType};

/// Sampling attempts allowed per requested query before a type gives up.
const ATTEMPTS_PER_QUERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundingMode {
    /// Answers on the training graph, all of them easy.
    Train,
    /// Answers that need the edges of the given split are hard; those already
    /// reachable through earlier splits are easy. Hard sets are non-empty.
    Eval(Split),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundingReport {
    pub produced: BTreeMap<QueryType, usize>,
    pub skipped: BTreeMap<QueryType, usize>,
}

/// Walks the template from the root back to its anchors, choosing a random
/// incoming edge for every projection.
fn fill(
    node: &QueryNode,
    target: usize,
    adj: &Adjacency,
    entities: usize,
    rng: &mut impl Rng,
    anchors: &mut [usize],
    relations: &mut [usize],
) -> bool {
    match node {
        QueryNode::Anchor(slot) => {
            anchors[*slot] = target;
            true
        }
        QueryNode::Projection(child, slot) => match adj.incoming(target).choose(rng) {
            Some(&(head, r)) => {
                relations[*slot] = r;
                fill(child, head, adj, entities, rng, anchors, relations)
            }
            None => false,
        },
        QueryNode::Intersection(cs) | QueryNode::Union(cs) => {
            cs.iter().all(|c| fill(c, target, adj, entities, rng, anchors, relations))
        }
        QueryNode::Negation(c) => {
            // the excluded set is grown from an unrelated entity
            let other = rng.gen_range(0..entities);
            fill(c, other, adj, entities, rng, anchors, relations)
        }
    }
}

/// Random template instantiations with non-empty answers.
///
/// Each type gets up to `per_type` distinct queries; types that cannot be
/// satisfied within the attempt budget are skipped with a warning and counted
/// in the report.
pub fn ground_queries(
    graph: &KnowledgeGraph,
    types: &[QueryType],
    per_type: usize,
    mode: GroundingMode,
    seed: u64,
) -> Result<(QueryDataset, GroundingReport)> {
    let (sample_splits, easy_splits): (&[Split], &[Split]) = match mode {
        GroundingMode::Train => (Split::Train.up_to(), Split::Train.up_to()),
        GroundingMode::Eval(Split::Train) => {
            return Err(Error::Config("evaluation queries need a valid or test split".into()))
        }
        GroundingMode::Eval(s) => (s.up_to(), &s.up_to()[..s.up_to().len() - 1]),
    };
    let full = graph.adjacency(sample_splits);
    let easy_adj = graph.adjacency(easy_splits);
    let targets: Vec<usize> = (0..graph.num_entities()).filter(|&e| !full.incoming(e).is_empty()).collect();
    if targets.is_empty() {
        return Err(Error::Data("graph has no edges to ground queries on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GroundingReport::default();
    let mut queries = Vec::new();
    for &t in types {
        let template = build_template(t);
        let mut seen = BTreeSet::new();
        let mut made = 0;
        let mut attempts = 0;
        while made < per_type && attempts < per_type * ATTEMPTS_PER_QUERY {
            attempts += 1;
            let mut anchors = vec![0; t.num_anchors()];
            let mut relations = vec![0; t.num_relations()];
            let target = *targets.choose(&mut rng).expect("non-empty");
            if !fill(&template, target, &full, graph.num_entities(), &mut rng, &mut anchors, &mut relations) {
                continue;
            }
            if seen.contains(&(anchors.clone(), relations.clone())) {
                continue;
            }
            let node = template.ground(&anchors, &relations)?;
            let answers = answer_set(&node, &full);
            let (easy, hard) = match mode {
                GroundingMode::Train => (answers, BTreeSet::new()),
                GroundingMode::Eval(_) => {
                    let easy = answer_set(&node, &easy_adj);
                    let hard: BTreeSet<usize> = answers.difference(&easy).copied().collect();
                    (easy, hard)
                }
            };
            if easy.is_empty() && hard.is_empty() || matches!(mode, GroundingMode::Eval(_)) && hard.is_empty() {
                continue;
            }
            seen.insert((anchors.clone(), relations.clone()));
            queries.push(GroundedQuery::new(t, anchors, relations, easy, hard)?);
            made += 1;
        }
        report.produced.insert(t, made);
        if made < per_type {
            warn!("{t}: grounded {made} of {per_type} queries, skipped {}", per_type - made);
            report.skipped.insert(t, per_type - made);
        }
    }
    Ok((QueryDataset::new(queries), report))
}

/// One `1p` query per `(head, relation)` with a tail among the edges of
/// `split`; tails reachable through earlier splits are easy.
pub fn held_out_queries(graph: &KnowledgeGraph, split: Split) -> Result<QueryDataset> {
    if split == Split::Train {
        return Err(Error::Config("held-out queries need a valid or test split".into()));
    }
    let full = graph.adjacency(split.up_to());
    let known = graph.adjacency(&split.up_to()[..split.up_to().len() - 1]);
    let keys: BTreeSet<(usize, usize)> = graph.split(split).iter().map(|t| (t.head, t.relation)).collect();
    let mut queries = Vec::new();
    for (h, r) in keys {
        let easy = known.tails(h, r).clone();
        let hard: BTreeSet<usize> = full.tails(h, r).difference(&easy).copied().collect();
        if !hard.is_empty() {
            queries.push(GroundedQuery::new(QueryType::P1, vec![h], vec![r], easy, hard)?);
        }
    }
    Ok(QueryDataset::new(queries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Triple;

    fn toy() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new(8, 2);
        let train = vec![
            Triple::new(0, 0, 1),
            Triple::new(0, 0, 2),
            Triple::new(1, 1, 3),
            Triple::new(2, 1, 4),
            Triple::new(5, 0, 2),
            Triple::new(5, 0, 6),
            Triple::new(6, 1, 7),
            Triple::new(3, 0, 5),
        ];
        g.set_split(Split::Train, train).unwrap();
        g.set_split(Split::Test, vec![Triple::new(0, 0, 6), Triple::new(4, 1, 0)]).unwrap();
        g
    }

    #[test]
    fn one_hop_answers_are_tail_sets() {
        let g = toy();
        let (data, report) = ground_queries(&g, &[QueryType::P1, QueryType::I2], 5, GroundingMode::Train, 3).unwrap();
        let adj = g.adjacency(&[Split::Train]);
        assert_eq!(report.produced[&QueryType::P1], 5);
        for q in &data.queries {
            match q.structure {
                QueryType::P1 => assert_eq!(&q.easy, adj.tails(q.anchors[0], q.relations[0])),
                _ => {
                    let a: BTreeSet<_> = adj.tails(q.anchors[0], q.relations[0]).clone();
                    let b = adj.tails(q.anchors[1], q.relations[1]);
                    assert_eq!(q.easy, a.intersection(b).copied().collect());
                }
            }
            assert!(q.hard.is_empty() && !q.easy.is_empty());
        }
    }

    #[test]
    fn eval_queries_have_hard_answers() {
        let g = toy();
        let (data, _) = ground_queries(&g, &QueryType::ALL, 4, GroundingMode::Eval(Split::Test), 1).unwrap();
        data.check_evaluable().unwrap();
        assert!(data.queries.iter().any(|q| q.structure == QueryType::P1));
    }

    #[test]
    fn unsatisfiable_types_are_skipped() {
        let mut g = KnowledgeGraph::new(3, 1);
        g.set_split(Split::Train, vec![Triple::new(0, 0, 1)]).unwrap();
        let (data, report) = ground_queries(&g, &[QueryType::P1, QueryType::P2], 3, GroundingMode::Train, 0).unwrap();
        assert_eq!(report.produced[&QueryType::P1], 1);
        assert_eq!(report.skipped[&QueryType::P2], 3);
        assert_eq!(data.len(), 1);
    }

    #[test]
    fn grounding_is_deterministic() {
        let g = toy();
        let a = ground_queries(&g, &QueryType::ALL, 3, GroundingMode::Train, 9).unwrap();
        let b = ground_queries(&g, &QueryType::ALL, 3, GroundingMode::Train, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn held_out_one_hop() {
        let g = toy();
        let data = held_out_queries(&g, Split::Test).unwrap();
        assert_eq!(data.len(), 2);
        let q = &data.queries[0];
        assert_eq!((q.anchors[0], q.relations[0]), (0, 0));
        assert_eq!(q.easy, BTreeSet::from([1, 2]));
        assert_eq!(q.hard, BTreeSet::from([6]));
        assert!(held_out_queries(&g, Split::Train).is_err());
    }
}
