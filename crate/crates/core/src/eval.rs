//! Filtered ranking, MRR and report tables.
//!
//! Each hard answer of a query is ranked against every entity that is not
//! itself an answer of that query. Reciprocal ranks are averaged per query
//! first and then per query type.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::QueryDataset;
use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::UnitComplexVec;
use crate::model::ModelParams;
use crate::operators::{distance, ConeSet, InsideDistance};
use crate::query::{execute, GroundedQuery, QueryType};

/// Written at the top of every table so readers know how numbers were pooled.
pub const AVERAGING_NOTE: &str = "MRR in percent; reciprocal ranks averaged over the hard answers of each query, \
then over the queries of each type; ties rank pessimistically";

/// Rank of `target` among `distances`, skipping filtered entities. Ties count
/// against the target.
pub fn rank_from_distances(distances: &[f64], target: usize, filter_out: &BTreeSet<usize>) -> Result<usize> {
    if target >= distances.len() {
        return Err(Error::Contract(format!("target {target} out of range ({} entities)", distances.len())));
    }
    if filter_out.contains(&target) {
        return Err(Error::Contract(format!("target {target} is in its own filter set")));
    }
    let dt = distances[target];
    let better =
        distances.iter().enumerate().filter(|&(e, &d)| e != target && !filter_out.contains(&e) && d <= dt).count();
    Ok(1 + better)
}

/// Unit complex points of every entity, computed once per evaluation.
pub struct EntityTargets {
    points: Vec<UnitComplexVec>,
}

impl EntityTargets {
    pub fn new(store: &ParamStore, model: &ModelParams) -> Result<Self> {
        let points = (0..model.shape.entities)
            .map(|e| Ok(UnitComplexVec::from_angles(model.entity_axis(store, e)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from every entity to the query, indexed by entity id.
    pub fn distances(&self, q: &ConeSet, lambda: f64, inside: InsideDistance) -> Result<Vec<f64>> {
        self.points.iter().map(|p| distance(p, q, lambda, inside)).collect()
    }
}

pub fn rank_entity(
    q: &ConeSet,
    target: usize,
    filter_out: &BTreeSet<usize>,
    entities: &EntityTargets,
    lambda: f64,
    inside: InsideDistance,
) -> Result<usize> {
    rank_from_distances(&entities.distances(q, lambda, inside)?, target, filter_out)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("MRR of an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks start at 1".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub mrr: f64,
    /// Spread over seeds; present only in aggregated reports.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by query type tag, e.g. `"2in"`.
    pub per_type: BTreeMap<String, TypeScore>,
    /// Mean MRR over the positive-first-order types present.
    pub epfo_average: Option<f64>,
    pub negation_average: Option<f64>,
    pub averaging: String,
}

impl EvalReport {
    fn from_scores(per_type: BTreeMap<QueryType, TypeScore>) -> Self {
        let avg = |neg: bool| {
            let v: Vec<f64> = per_type.iter().filter(|(t, _)| t.has_negation() == neg).map(|(_, s)| s.mrr).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        EvalReport {
            epfo_average: avg(false),
            negation_average: avg(true),
            per_type: per_type.into_iter().map(|(t, s)| (t.tag().to_string(), s)).collect(),
            averaging: AVERAGING_NOTE.to_string(),
        }
    }

    pub fn score(&self, t: QueryType) -> Option<&TypeScore> {
        self.per_type.get(t.tag())
    }

    /// Mean and sample standard deviation over reports, type by type. Only
    /// types present in every report are kept.
    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::Contract("aggregating zero reports".into()))?;
        let mut per_type = BTreeMap::new();
        for t in QueryType::ALL {
            let scores: Option<Vec<&TypeScore>> = reports.iter().map(|r| r.score(t)).collect();
            let Some(scores) = scores else { continue };
            let values: Vec<f64> = scores.iter().map(|s| s.mrr).collect();
            let (mean, std) = mean_std(&values);
            per_type
                .insert(t, TypeScore { mrr: mean, std: Some(std), queries: first.score(t).map_or(0, |s| s.queries) });
        }
        Ok(EvalReport::from_scores(per_type))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Ranks every hard answer of every query.
pub fn evaluate(
    store: &ParamStore,
    model: &ModelParams,
    data: &QueryDataset,
    lambda: f64,
    inside: InsideDistance,
) -> Result<EvalReport> {
    data.check_evaluable()?;
    let entities = EntityTargets::new(store, model)?;
    let mut per_type: BTreeMap<QueryType, Vec<f64>> = BTreeMap::new();
    for q in &data.queries {
        let cones = execute(q, store, model)?;
        let d = entities.distances(&cones, lambda, inside)?;
        let answers = q.answers();
        let mut ranks = Vec::with_capacity(q.hard.len());
        for &a in &q.hard {
            let mut filter = answers.clone();
            filter.remove(&a);
            ranks.push(rank_from_distances(&d, a, &filter)?);
        }
        per_type.entry(q.structure).or_default().push(mrr(&ranks)?);
    }
    let scores = per_type
        .into_iter()
        .map(|(t, v)| {
            let score = TypeScore { mrr: v.iter().sum::<f64>() / v.len() as f64, std: None, queries: v.len() };
            (t, score)
        })
        .collect();
    Ok(EvalReport::from_scores(scores))
}

/// Training queries recast for evaluation: every known answer becomes a
/// target to rank.
pub fn as_targets(data: &QueryDataset) -> Result<QueryDataset> {
    data.queries
        .iter()
        .map(|q| {
            let hard = q.answers();
            GroundedQuery::new(q.structure, q.anchors.clone(), q.relations.clone(), BTreeSet::new(), hard)
        })
        .collect::<Result<Vec<_>>>()
        .map(QueryDataset::new)
}

fn cell(score: Option<&TypeScore>) -> String {
    match score {
        None => "-".to_string(),
        Some(s) => match s.std {
            Some(std) => format!("{:.1}±{:.1}", 100.0 * s.mrr, 100.0 * std),
            None => format!("{:.1}", 100.0 * s.mrr),
        },
    }
}

fn avg_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Tab-separated table with one row per labelled report: the positive types
/// and their average, then the negation types and theirs.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let positive: Vec<QueryType> = QueryType::ALL.into_iter().filter(|t| !t.has_negation()).collect();
    let negative: Vec<QueryType> = QueryType::ALL.into_iter().filter(|t| t.has_negation()).collect();
    let mut out = format!("# {AVERAGING_NOTE}\nmodel");
    for t in &positive {
        let _ = write!(out, "\t{t}");
    }
    out.push_str("\tavg");
    for t in &negative {
        let _ = write!(out, "\t{t}");
    }
    out.push_str("\tavg_neg\n");
    for (label, r) in rows {
        out.push_str(label);
        for t in &positive {
            let _ = write!(out, "\t{}", cell(r.score(*t)));
        }
        let _ = write!(out, "\t{}", avg_cell(r.epfo_average));
        for t in &negative {
            let _ = write!(out, "\t{}", cell(r.score(*t)));
        }
        let _ = writeln!(out, "\t{}", avg_cell(r.negation_average));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{KnowledgeGraph, Split, Triple};
    use crate::model::{init_store, ModelShape};
    use crate::operators::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counting_examples() {
        let none = BTreeSet::new();
        assert_eq!(rank_from_distances(&[0.5, 0.1, 0.9], 1, &none).unwrap(), 1);
        let all_but_target = BTreeSet::from([0, 2]);
        assert_eq!(rank_from_distances(&[0.0, 0.1, 0.0], 1, &all_but_target).unwrap(), 1);
        // target 0.25 against {0.1, 0.2, 0.3, 0.4}
        assert_eq!(rank_from_distances(&[0.1, 0.25, 0.2, 0.3, 0.4], 1, &none).unwrap(), 3);
    }

    #[test]
    fn ties_rank_against_the_target() {
        assert_eq!(rank_from_distances(&[0.2, 0.2, 0.2], 0, &BTreeSet::new()).unwrap(), 3);
        assert!(rank_from_distances(&[0.2, 0.2], 0, &BTreeSet::from([0])).is_err());
        assert!(rank_from_distances(&[0.2, 0.2], 2, &BTreeSet::new()).is_err());
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[1]).unwrap(), 1.0);
        approx::assert_abs_diff_eq!(mrr(&[1, 2, 4]).unwrap(), 7.0 / 12.0, epsilon = 1e-15);
        assert_eq!(mrr(&[50, 50]).unwrap(), 1.0 / 50.0);
        assert!(matches!(mrr(&[]), Err(Error::Contract(_))));
        assert!(mrr(&[0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ranking_survives_monotone_transform(
            d in proptest::collection::vec(0.0f64..10.0, 2..40),
            target in 0usize..40,
            mask in proptest::collection::vec(proptest::bool::ANY, 40),
        ) {
            let target = target % d.len();
            let filter: BTreeSet<usize> = (0..d.len()).filter(|&e| e != target && mask[e]).collect();
            let moved: Vec<f64> = d.iter().map(|x| 3.0 * x + 1.0).collect();
            proptest::prop_assert_eq!(
                rank_from_distances(&d, target, &filter).unwrap(),
                rank_from_distances(&moved, target, &filter).unwrap()
            );
        }
    }

    fn tiny_model() -> (ParamStore, ModelParams) {
        let shape = ModelShape { entities: 6, relations: 2, dim: 4, variant: Variant::Rotate };
        init_store(shape, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn single_query_at_rank_one() {
        let (store, model) = tiny_model();
        // find the entity closest to a 1p query and make it the only answer
        let probe = GroundedQuery::new(QueryType::P1, vec![0], vec![1], BTreeSet::new(), BTreeSet::from([0])).unwrap();
        let cones = execute(&probe, &store, &model).unwrap();
        let d = EntityTargets::new(&store, &model).unwrap().distances(&cones, 0.02, InsideDistance::AsPrinted).unwrap();
        let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        let q = GroundedQuery::new(QueryType::P1, vec![0], vec![1], BTreeSet::new(), BTreeSet::from([best])).unwrap();
        let report = evaluate(&store, &model, &QueryDataset::new(vec![q]), 0.02, InsideDistance::AsPrinted).unwrap();
        let s = report.score(QueryType::P1).unwrap();
        assert_eq!((s.mrr, s.queries), (1.0, 1));
        assert_eq!(report.epfo_average, Some(1.0));
        assert_eq!(report.negation_average, None);
    }

    #[test]
    fn per_query_averaging_and_filtering() {
        let (store, model) = tiny_model();
        let cones = execute(
            &GroundedQuery::new(QueryType::P1, vec![2], vec![0], BTreeSet::new(), BTreeSet::from([0])).unwrap(),
            &store,
            &model,
        )
        .unwrap();
        let d = EntityTargets::new(&store, &model).unwrap().distances(&cones, 0.1, InsideDistance::AsPrinted).unwrap();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        // the 2nd and 4th closest as hard answers, the closest as easy: both
        // move up once the other answers are filtered
        let easy = BTreeSet::from([order[0]]);
        let hard = BTreeSet::from([order[1], order[3]]);
        let q = GroundedQuery::new(QueryType::P1, vec![2], vec![0], easy, hard).unwrap();
        let report =
            evaluate(&store, &model, &QueryDataset::new(vec![q.clone()]), 0.1, InsideDistance::AsPrinted).unwrap();
        let expected = (1.0 + 1.0 / 2.0) / 2.0;
        approx::assert_abs_diff_eq!(report.score(QueryType::P1).unwrap().mrr, expected, epsilon = 1e-12);

        let no_hard = QueryDataset::new(vec![GroundedQuery::new(
            QueryType::P1,
            vec![2],
            vec![0],
            BTreeSet::from([1]),
            BTreeSet::new(),
        )
        .unwrap()]);
        assert!(evaluate(&store, &model, &no_hard, 0.1, InsideDistance::AsPrinted).is_err());
        let targets = as_targets(&no_hard).unwrap();
        assert_eq!(targets.queries[0].hard, BTreeSet::from([1]));
        assert!(evaluate(&store, &model, &targets, 0.1, InsideDistance::AsPrinted).is_ok());
    }

    #[test]
    fn evaluation_is_deterministic_and_in_range() {
        let (store, model) = tiny_model();
        let mut g = KnowledgeGraph::new(6, 2);
        g.set_split(Split::Train, vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(3, 0, 4)]).unwrap();
        g.set_split(Split::Test, vec![Triple::new(0, 0, 5), Triple::new(5, 1, 2), Triple::new(3, 0, 2)]).unwrap();
        let (data, _) =
            crate::data::ground_queries(&g, &QueryType::ALL, 3, crate::data::GroundingMode::Eval(Split::Test), 0)
                .unwrap();
        let a = evaluate(&store, &model, &data, 0.02, InsideDistance::AsPrinted).unwrap();
        let b = evaluate(&store, &model, &data, 0.02, InsideDistance::AsPrinted).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let total: usize = a.per_type.values().map(|s| s.queries).sum();
        assert_eq!(total, data.len());
        assert!(a.per_type.values().all(|s| (0.0..=1.0).contains(&s.mrr)));
    }

    fn report(values: &[(QueryType, f64)]) -> EvalReport {
        EvalReport::from_scores(
            values.iter().map(|&(t, m)| (t, TypeScore { mrr: m, std: None, queries: 10 })).collect(),
        )
    }

    #[test]
    fn averages_and_aggregation() {
        let a = report(&[(QueryType::P1, 0.5), (QueryType::I2, 0.3), (QueryType::In2, 0.1)]);
        approx::assert_abs_diff_eq!(a.epfo_average.unwrap(), 0.4, epsilon = 1e-15);
        assert_eq!(a.negation_average, Some(0.1));
        let b = report(&[(QueryType::P1, 0.7), (QueryType::I2, 0.3)]);
        let agg = EvalReport::aggregate(&[a.clone(), b]).unwrap();
        let p1 = agg.score(QueryType::P1).unwrap();
        approx::assert_abs_diff_eq!(p1.mrr, 0.6, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(p1.std.unwrap(), 0.02f64.sqrt(), epsilon = 1e-15);
        assert!(agg.score(QueryType::In2).is_none());
        assert!(EvalReport::aggregate(&[]).is_err());
        let back: EvalReport = serde_json::from_str(&agg.to_json()).unwrap();
        assert_eq!(back, agg);

        let table = format_table(&[("rocone", &a), ("mean", &agg)]);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("# "));
        assert_eq!(lines[1], "model\t1p\t2p\t3p\t2i\t3i\tpi\tip\t2u\tup\tavg\t2in\t3in\tinp\tpin\tpni\tavg_neg");
        assert_eq!(lines[2], "rocone\t50.0\t-\t-\t30.0\t-\t-\t-\t-\t-\t40.0\t10.0\t-\t-\t-\t-\t10.0");
        assert!(lines[3].starts_with("mean\t60.0±14.1\t"));
    }
}
