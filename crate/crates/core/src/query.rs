//! Query structures, DNF rewriting and execution.
//!
//! Templates number their anchor and relation slots in post-order: inner
//! projections before outer ones, left branches before right ones. So for
//! `pi` the two-hop branch owns relations 0 and 1 and the one-hop branch
//! relation 2.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::diff::{Graph, ParamStore, Real};
use crate::error::{Error, Result};
use crate::geometry::ConeBatch;
use crate::model::ModelParams;
use crate::operators::tape::{self, ConeVar, ExecMode};
use crate::operators::{self, ConeSet, Variant};

/// The fourteen benchmark query structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryType {
    P1,
    P2,
    P3,
    I2,
    I3,
    Pi,
    Ip,
    U2,
    Up,
    In2,
    In3,
    Inp,
    Pin,
    Pni,
}

impl QueryType {
    pub const ALL: [QueryType; 14] = [
        QueryType::P1,
        QueryType::P2,
        QueryType::P3,
        QueryType::I2,
        QueryType::I3,
        QueryType::Pi,
        QueryType::Ip,
        QueryType::U2,
        QueryType::Up,
        QueryType::In2,
        QueryType::In3,
        QueryType::Inp,
        QueryType::Pin,
        QueryType::Pni,
    ];

    /// Types seen during training; the rest are answered zero-shot.
    pub const TRAINING: [QueryType; 10] = [
        QueryType::P1,
        QueryType::P2,
        QueryType::P3,
        QueryType::I2,
        QueryType::I3,
        QueryType::In2,
        QueryType::In3,
        QueryType::Inp,
        QueryType::Pin,
        QueryType::Pni,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            QueryType::P1 => "1p",
            QueryType::P2 => "2p",
            QueryType::P3 => "3p",
            QueryType::I2 => "2i",
            QueryType::I3 => "3i",
            QueryType::Pi => "pi",
            QueryType::Ip => "ip",
            QueryType::U2 => "2u",
            QueryType::Up => "up",
            QueryType::In2 => "2in",
            QueryType::In3 => "3in",
            QueryType::Inp => "inp",
            QueryType::Pin => "pin",
            QueryType::Pni => "pni",
        }
    }

    pub fn has_negation(self) -> bool {
        matches!(self, QueryType::In2 | QueryType::In3 | QueryType::Inp | QueryType::Pin | QueryType::Pni)
    }

    pub fn num_anchors(self) -> usize {
        match self {
            QueryType::P1 | QueryType::P2 | QueryType::P3 => 1,
            QueryType::I3 | QueryType::In3 => 3,
            _ => 2,
        }
    }

    pub fn num_relations(self) -> usize {
        match self {
            QueryType::P1 => 1,
            QueryType::P2 | QueryType::I2 | QueryType::U2 | QueryType::In2 => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryType::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown query type '{s}'")))
    }
}

/// Query DAG node. In a template the numbers are slot indices; in a grounded
/// query they are entity and relation ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryNode {
    Anchor(usize),
    Projection(Box<QueryNode>, usize),
    Intersection(Vec<QueryNode>),
    Union(Vec<QueryNode>),
    Negation(Box<QueryNode>),
}

use QueryNode::{Anchor, Intersection, Negation, Projection, Union};

fn p(child: QueryNode, r: usize) -> QueryNode {
    Projection(Box::new(child), r)
}

fn n(child: QueryNode) -> QueryNode {
    Negation(Box::new(child))
}

/// Canonical AST of a query type.
pub fn build_template(t: QueryType) -> QueryNode {
    let a = Anchor;
    match t {
        QueryType::P1 => p(a(0), 0),
        QueryType::P2 => p(p(a(0), 0), 1),
        QueryType::P3 => p(p(p(a(0), 0), 1), 2),
        QueryType::I2 => Intersection(vec![p(a(0), 0), p(a(1), 1)]),
        QueryType::I3 => Intersection(vec![p(a(0), 0), p(a(1), 1), p(a(2), 2)]),
        QueryType::Pi => Intersection(vec![p(p(a(0), 0), 1), p(a(1), 2)]),
        QueryType::Ip => p(Intersection(vec![p(a(0), 0), p(a(1), 1)]), 2),
        QueryType::U2 => Union(vec![p(a(0), 0), p(a(1), 1)]),
        QueryType::Up => p(Union(vec![p(a(0), 0), p(a(1), 1)]), 2),
        QueryType::In2 => Intersection(vec![p(a(0), 0), n(p(a(1), 1))]),
        QueryType::In3 => Intersection(vec![p(a(0), 0), p(a(1), 1), n(p(a(2), 2))]),
        QueryType::Inp => p(Intersection(vec![p(a(0), 0), n(p(a(1), 1))]), 2),
        QueryType::Pin => Intersection(vec![p(p(a(0), 0), 1), n(p(a(1), 2))]),
        QueryType::Pni => Intersection(vec![n(p(p(a(0), 0), 1)), p(a(1), 2)]),
    }
}

impl QueryNode {
    /// Checks arities and that negation only appears directly under an
    /// intersection.
    pub fn validate(&self) -> Result<()> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, under_intersection: bool) -> Result<()> {
        match self {
            Anchor(_) => Ok(()),
            Projection(c, _) => c.validate_inner(false),
            Negation(c) => {
                if !under_intersection {
                    return Err(Error::Unsupported("negation outside an intersection".into()));
                }
                c.validate_inner(false)
            }
            Intersection(cs) | Union(cs) => {
                if cs.len() < 2 {
                    return Err(Error::Contract("intersection and union need at least two children".into()));
                }
                let is_i = matches!(self, Intersection(_));
                cs.iter().try_for_each(|c| c.validate_inner(is_i))
            }
        }
    }

    /// Replaces anchor and relation slots by ids.
    pub fn ground(&self, anchors: &[usize], relations: &[usize]) -> Result<QueryNode> {
        let slot = |v: &[usize], i: usize, what: &str| {
            v.get(i).copied().ok_or_else(|| Error::Contract(format!("template needs {what} slot {i}")))
        };
        Ok(match self {
            Anchor(i) => Anchor(slot(anchors, *i, "anchor")?),
            Projection(c, r) => p(c.ground(anchors, relations)?, slot(relations, *r, "relation")?),
            Intersection(cs) => Intersection(cs.iter().map(|c| c.ground(anchors, relations)).collect::<Result<_>>()?),
            Union(cs) => Union(cs.iter().map(|c| c.ground(anchors, relations)).collect::<Result<_>>()?),
            Negation(c) => n(c.ground(anchors, relations)?),
        })
    }

    /// Union-free branches whose disjunction is equivalent to `self`.
    pub fn branches(&self) -> Result<Vec<QueryNode>> {
        Ok(match self {
            Anchor(a) => vec![Anchor(*a)],
            Projection(c, r) => c.branches()?.into_iter().map(|b| p(b, *r)).collect(),
            Union(cs) => {
                let mut out = Vec::new();
                for c in cs {
                    out.extend(c.branches()?);
                }
                out
            }
            Negation(c) => {
                let mut bs = c.branches()?;
                if bs.len() != 1 {
                    return Err(Error::Unsupported("negation of a union".into()));
                }
                vec![n(bs.remove(0))]
            }
            Intersection(cs) => {
                // distribute the conjunction over every choice of child branch
                let mut acc: Vec<Vec<QueryNode>> = vec![Vec::new()];
                for c in cs {
                    let bs = c.branches()?;
                    acc = acc
                        .into_iter()
                        .flat_map(|prefix| {
                            bs.iter().map(move |b| {
                                let mut v = prefix.clone();
                                v.push(b.clone());
                                v
                            })
                        })
                        .collect();
                }
                acc.into_iter().map(Intersection).collect()
            }
        })
    }
}

/// Lifts every union to the root.
pub fn to_dnf(q: &QueryNode) -> Result<QueryNode> {
    let mut bs = q.branches()?;
    Ok(if bs.len() == 1 { bs.remove(0) } else { Union(bs) })
}

/// Tail lookup used by symbolic evaluation.
pub trait Neighbors {
    fn num_entities(&self) -> usize;
    fn tails(&self, head: usize, relation: usize) -> &BTreeSet<usize>;
}

/// Exact answer set of a grounded query by set traversal.
pub fn answer_set<G: Neighbors + ?Sized>(q: &QueryNode, g: &G) -> BTreeSet<usize> {
    match q {
        Anchor(e) => BTreeSet::from([*e]),
        Projection(c, r) => {
            let mut out = BTreeSet::new();
            for h in answer_set(c, g) {
                out.extend(g.tails(h, *r).iter().copied());
            }
            out
        }
        Intersection(cs) => {
            let mut sets = cs.iter().map(|c| answer_set(c, g));
            let first = sets.next().unwrap_or_default();
            sets.fold(first, |acc, s| acc.intersection(&s).copied().collect())
        }
        Union(cs) => cs.iter().flat_map(|c| answer_set(c, g)).collect(),
        Negation(c) => {
            let inner = answer_set(c, g);
            (0..g.num_entities()).filter(|e| !inner.contains(e)).collect()
        }
    }
}

/// A template instantiated with ids, plus its answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedQuery {
    pub structure: QueryType,
    pub anchors: Vec<usize>,
    pub relations: Vec<usize>,
    /// Answers reachable in the training graph.
    pub easy: BTreeSet<usize>,
    /// Answers that need the held-out edges.
    pub hard: BTreeSet<usize>,
}

impl GroundedQuery {
    pub fn new(
        structure: QueryType,
        anchors: Vec<usize>,
        relations: Vec<usize>,
        easy: BTreeSet<usize>,
        hard: BTreeSet<usize>,
    ) -> Result<Self> {
        if anchors.len() != structure.num_anchors() || relations.len() != structure.num_relations() {
            return Err(Error::Data(format!(
                "{structure} query needs {} anchors and {} relations, got {} and {}",
                structure.num_anchors(),
                structure.num_relations(),
                anchors.len(),
                relations.len()
            )));
        }
        if let Some(e) = easy.intersection(&hard).next() {
            return Err(Error::Data(format!("entity {e} is both an easy and a hard answer")));
        }
        Ok(Self { structure, anchors, relations, easy, hard })
    }

    pub fn node(&self) -> QueryNode {
        build_template(self.structure).ground(&self.anchors, &self.relations).expect("arity checked on construction")
    }

    /// Every known answer, easy and hard.
    pub fn answers(&self) -> BTreeSet<usize> {
        self.easy.union(&self.hard).copied().collect()
    }

    fn describe(&self) -> String {
        format!("{} anchors={:?} relations={:?}", self.structure, self.anchors, self.relations)
    }

    fn check_ids(&self, model: &ModelParams) -> Result<()> {
        let bad_e = self.anchors.iter().chain(&self.easy).chain(&self.hard).find(|&&e| e >= model.shape.entities);
        let bad_r = self.relations.iter().find(|&&r| r >= model.shape.relations);
        if bad_e.is_some() || bad_r.is_some() {
            return Err(Error::Data(format!("id out of range in query {}", self.describe())));
        }
        Ok(())
    }
}

/// Embeds one grounded query with the plain operators.
pub fn execute(q: &GroundedQuery, store: &ParamStore, model: &ModelParams) -> Result<ConeSet> {
    q.check_ids(model)?;
    let dnf = to_dnf(&q.node())?;
    let branches = match &dnf {
        Union(bs) => bs.clone(),
        other => vec![other.clone()],
    };
    let net = model.intersection_net(store);
    let projection = model.projection_net(store);
    let members = branches
        .iter()
        .map(|b| execute_node(b, store, model, &net, projection.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    ConeSet::new(members)
}

fn execute_node(
    node: &QueryNode,
    store: &ParamStore,
    model: &ModelParams,
    net: &operators::IntersectionNet,
    projection: Option<&operators::Mlp>,
) -> Result<ConeBatch> {
    let rec = |c: &QueryNode| execute_node(c, store, model, net, projection);
    match node {
        Anchor(e) => model.entity_cone(store, *e),
        Projection(c, r) => {
            let q = rec(c)?;
            let rot = model.relation(store, *r)?;
            match (model.variant(), projection) {
                (Variant::Base, Some(mlp)) => operators::project_neural(&q, &rot, mlp),
                (v, _) => operators::project(&q, &rot, v),
            }
        }
        Intersection(cs) => {
            let cones = cs.iter().map(rec).collect::<Result<Vec<_>>>()?;
            operators::intersect(&cones, net)
        }
        Negation(c) => Ok(operators::negate(&rec(c)?)),
        Union(_) => Err(Error::Contract("union below the root after DNF rewriting".into())),
    }
}

/// Embeds a batch of same-structure queries on the tape, one row per query.
/// Returns one cone batch per DNF branch.
pub fn embed_batch<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    model: &ModelParams,
    structure: QueryType,
    queries: &[&GroundedQuery],
    mode: ExecMode,
) -> Result<Vec<ConeVar>> {
    if queries.is_empty() {
        return Err(Error::Contract("empty query batch".into()));
    }
    for q in queries {
        if q.structure != structure {
            return Err(Error::Contract(format!("{} query in a {structure} batch", q.structure)));
        }
        q.check_ids(model)?;
    }
    let dnf = to_dnf(&build_template(structure))?;
    let branches = match dnf {
        Union(bs) => bs,
        other => vec![other],
    };
    branches.iter().map(|b| embed_node(g, store, model, b, queries, mode)).collect()
}

fn embed_node<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    model: &ModelParams,
    node: &QueryNode,
    queries: &[&GroundedQuery],
    mode: ExecMode,
) -> Result<ConeVar> {
    match node {
        Anchor(slot) => {
            let ids: Vec<usize> = queries.iter().map(|q| q.anchors[*slot]).collect();
            tape::anchors(g, store, model, &ids)
        }
        Projection(c, slot) => {
            let inner = embed_node(g, store, model, c, queries, mode)?;
            let ids: Vec<usize> = queries.iter().map(|q| q.relations[*slot]).collect();
            tape::project(g, store, model, inner, &ids)
        }
        Intersection(cs) => {
            let cones = cs.iter().map(|c| embed_node(g, store, model, c, queries, mode)).collect::<Result<Vec<_>>>()?;
            tape::intersect(g, store, model, &cones, mode)
        }
        Negation(c) => {
            let inner = embed_node(g, store, model, c, queries, mode)?;
            Ok(tape::negate(g, inner))
        }
        Union(_) => Err(Error::Contract("union below the root after DNF rewriting".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_store, ModelShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    struct Toy {
        n: usize,
        edges: BTreeMap<(usize, usize), BTreeSet<usize>>,
        empty: BTreeSet<usize>,
    }

    impl Toy {
        fn new(n: usize, triples: &[(usize, usize, usize)]) -> Self {
            let mut edges: BTreeMap<_, BTreeSet<_>> = BTreeMap::new();
            for &(h, r, t) in triples {
                edges.entry((h, r)).or_default().insert(t);
            }
            Self { n, edges, empty: BTreeSet::new() }
        }
    }

    impl Neighbors for Toy {
        fn num_entities(&self) -> usize {
            self.n
        }
        fn tails(&self, h: usize, r: usize) -> &BTreeSet<usize> {
            self.edges.get(&(h, r)).unwrap_or(&self.empty)
        }
    }

    #[test]
    fn tags_round_trip() {
        for t in QueryType::ALL {
            assert_eq!(t.tag().parse::<QueryType>().unwrap(), t);
        }
        assert!("4p".parse::<QueryType>().is_err());
    }

    #[test]
    fn templates() {
        assert_eq!(build_template(QueryType::P1), p(Anchor(0), 0));
        assert_eq!(build_template(QueryType::P3), p(p(p(Anchor(0), 0), 1), 2));
        assert_eq!(build_template(QueryType::U2), Union(vec![p(Anchor(0), 0), p(Anchor(1), 1)]));
        for t in QueryType::ALL {
            let tpl = build_template(t);
            tpl.validate().unwrap();
            let g = tpl.ground(&vec![7; t.num_anchors()], &vec![3; t.num_relations()]).unwrap();
            assert!(tpl.ground(&vec![7; t.num_anchors() - 1], &vec![3; t.num_relations()]).is_err());
            g.validate().unwrap();
        }
    }

    #[test]
    fn negation_placement_is_validated() {
        assert!(n(p(Anchor(0), 0)).validate().is_err());
        assert!(p(n(Anchor(0)), 0).validate().is_err());
        assert!(Intersection(vec![p(Anchor(0), 0)]).validate().is_err());
    }

    #[test]
    fn dnf_rewriting() {
        let one = build_template(QueryType::Pi);
        assert_eq!(to_dnf(&one).unwrap(), one);
        let up = build_template(QueryType::Up);
        assert_eq!(to_dnf(&up).unwrap(), Union(vec![p(p(Anchor(0), 0), 2), p(p(Anchor(1), 1), 2)]));
        let u2 = build_template(QueryType::U2);
        assert_eq!(to_dnf(&u2).unwrap(), u2);
        for t in QueryType::ALL {
            let count = build_template(t).branches().unwrap().len();
            assert_eq!(count, if matches!(t, QueryType::U2 | QueryType::Up) { 2 } else { 1 });
        }
        let bad = Intersection(vec![p(Anchor(0), 0), n(Union(vec![p(Anchor(1), 0), p(Anchor(2), 0)]))]);
        assert!(matches!(to_dnf(&bad), Err(Error::Unsupported(_))));
    }

    #[test]
    fn symbolic_answers() {
        let g = Toy::new(6, &[(0, 0, 1), (0, 0, 2), (1, 1, 3), (2, 1, 4), (5, 0, 2), (5, 0, 3)]);
        assert_eq!(answer_set(&p(Anchor(0), 0), &g), BTreeSet::from([1, 2]));
        assert_eq!(answer_set(&p(p(Anchor(0), 0), 1), &g), BTreeSet::from([3, 4]));
        let i2 = build_template(QueryType::I2).ground(&[0, 5], &[0, 0]).unwrap();
        assert_eq!(answer_set(&i2, &g), BTreeSet::from([2]));
        let in2 = build_template(QueryType::In2).ground(&[0, 5], &[0, 0]).unwrap();
        assert_eq!(answer_set(&in2, &g), BTreeSet::from([1]));
        let up = build_template(QueryType::Up).ground(&[0, 5], &[0, 0, 1]).unwrap();
        assert_eq!(answer_set(&up, &g), answer_set(&to_dnf(&up).unwrap(), &g));
    }

    fn shape(variant: Variant) -> ModelShape {
        ModelShape { entities: 5, relations: 3, dim: 4, variant }
    }

    fn q(t: QueryType, anchors: Vec<usize>, relations: Vec<usize>) -> GroundedQuery {
        GroundedQuery::new(t, anchors, relations, BTreeSet::new(), BTreeSet::from([0])).unwrap()
    }

    #[test]
    fn identity_projection_returns_anchor() {
        let (mut store, model) = init_store(shape(Variant::Rotate), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        store.value_mut(model.rel_axis).data_mut().fill(0.0);
        store.value_mut(model.rel_aperture).data_mut().fill(f64::NEG_INFINITY);
        let set = execute(&q(QueryType::P1, vec![3], vec![1]), &store, &model).unwrap();
        assert_eq!(set.members(), &[model.entity_cone(&store, 3).unwrap()]);
    }

    #[test]
    fn two_hops_compose() {
        let (mut store, model) = init_store(shape(Variant::Rotate), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        store.value_mut(model.rel_aperture).data_mut().fill(-6.0);
        let set = execute(&q(QueryType::P2, vec![2], vec![0, 1]), &store, &model).unwrap();
        let composed = model.relation(&store, 0).unwrap().compose(&model.relation(&store, 1).unwrap()).unwrap();
        let direct = operators::project(&model.entity_cone(&store, 2).unwrap(), &composed, Variant::Rotate).unwrap();
        for i in 0..4 {
            let gap = crate::geometry::wrap_unchecked(set.members()[0].axis()[i] - direct.axis()[i]);
            assert!(gap.abs() < 1e-9);
            assert!((set.members()[0].aperture()[i] - direct.aperture()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn unions_give_two_members_and_ids_are_checked() {
        let (store, model) = init_store(shape(Variant::Trunc), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let set = execute(&q(QueryType::U2, vec![0, 1], vec![0, 2]), &store, &model).unwrap();
        assert_eq!(set.len(), 2);
        let err = execute(&q(QueryType::P1, vec![9], vec![0]), &store, &model).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("1p")));
    }

    #[test]
    fn tape_batch_matches_plain_execution() {
        for (variant, unwrapped) in Variant::ALL.into_iter().flat_map(|v| [(v, false), (v, true)]) {
            let (mut store, model) = init_store(shape(variant), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            if unwrapped {
                // training leaves entity angles outside [-π, π); the tape must
                // see them as the plain executor does
                for (i, x) in store.value_mut(model.entity).data_mut().iter_mut().enumerate() {
                    *x += [2.0, -4.0, 6.0][i % 3] * std::f64::consts::PI;
                }
            }
            for t in QueryType::ALL {
                let qs: Vec<GroundedQuery> = (0..3)
                    .map(|i| {
                        q(
                            t,
                            (0..t.num_anchors()).map(|a| (a + i) % 5).collect(),
                            (0..t.num_relations()).map(|r| (r * 2 + i) % 3).collect(),
                        )
                    })
                    .collect();
                let refs: Vec<&GroundedQuery> = qs.iter().collect();
                let mut g = Graph::new();
                let members = embed_batch(&mut g, &store, &model, t, &refs, ExecMode::Infer).unwrap();
                for (row, query) in qs.iter().enumerate() {
                    let set = execute(query, &store, &model).unwrap();
                    assert_eq!(set.len(), members.len());
                    for (m, c) in members.iter().zip(set.members()) {
                        for k in 0..4 {
                            let gap = crate::geometry::wrap_unchecked(g.value(m.axis).get(row, k) - c.axis()[k]);
                            assert!(gap.abs() < 1e-9, "{t} {variant}");
                            assert!((g.value(m.aperture).get(row, k) - c.aperture()[k]).abs() < 1e-9);
                            assert!((0.0..=std::f64::consts::TAU).contains(&c.aperture()[k]));
                        }
                    }
                }
            }
        }
    }
}
