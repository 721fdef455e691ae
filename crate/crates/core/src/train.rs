//! Negative sampling, the margin loss and the training loop.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::QueryDataset;
use crate::diff::{adam_step, Graph, Objective, OptimizerState, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::sigmoid;
use crate::model::ModelParams;
use crate::operators::tape::{self, ExecMode};
use crate::operators::InsideDistance;
use crate::query::{embed_batch, GroundedQuery, QueryType};

/// `k` entities drawn uniformly, with replacement, from those that are not
/// known answers of `q`.
pub fn negative_sample(q: &GroundedQuery, entities: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let answers = q.answers();
    let eligible = entities.saturating_sub(answers.iter().filter(|&&a| a < entities).count());
    if eligible == 0 {
        return Err(Error::Data(format!("{} query has no eligible negative entities", q.structure)));
    }
    if answers.len() * 2 < entities {
        Ok((0..k)
            .map(|_| loop {
                let e = rng.gen_range(0..entities);
                if !answers.contains(&e) {
                    break e;
                }
            })
            .collect())
    } else {
        let pool: Vec<usize> = (0..entities).filter(|e| !answers.contains(e)).collect();
        Ok((0..k).map(|_| *pool.choose(rng).expect("non-empty pool")).collect())
    }
}

/// Margin loss of one query given its distances:
/// `−log σ(γ − d⁺) − (1/k) Σ log σ(d⁻ − γ)`.
pub fn loss_from_distances(positive: f64, negatives: &[f64], gamma: f64) -> f64 {
    let neg: f64 = negatives.iter().map(|d| sigmoid(d - gamma).ln()).sum::<f64>() / negatives.len() as f64;
    -sigmoid(gamma - positive).ln() - neg
}

/// Distance settings shared by training and ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub gamma: f64,
    pub lambda: f64,
    pub inside: InsideDistance,
}

impl From<&TrainConfig> for LossSettings {
    fn from(c: &TrainConfig) -> Self {
        Self { gamma: c.gamma, lambda: c.lambda, inside: c.inside }
    }
}

/// Mean loss over a batch of same-structure queries, on the tape.
///
/// Each query gets one positive and the same number of negatives. Negatives
/// are sorted first, so the value does not depend on their order.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    model: &ModelParams,
    queries: &[&GroundedQuery],
    positives: &[usize],
    negatives: &[Vec<usize>],
    settings: LossSettings,
    mode: ExecMode,
) -> Result<Var> {
    let structure = queries.first().map(|q| q.structure).ok_or_else(|| Error::Contract("empty batch".into()))?;
    let k = negatives.first().map_or(0, Vec::len);
    if positives.len() != queries.len() || negatives.len() != queries.len() || k == 0 {
        return Err(Error::Contract("one positive and a non-empty negative list per query".into()));
    }
    if negatives.iter().any(|n| n.len() != k) {
        return Err(Error::Contract("every query needs the same number of negatives".into()));
    }
    let members = embed_batch(g, store, model, structure, queries, mode)?;

    let pos_axis = g.gather_param(store, model.entity, positives)?;
    let pos_target = tape::target(g, pos_axis);
    let own: Vec<usize> = (0..queries.len()).collect();
    let d_pos = tape::set_distance(g, &members, &own, pos_target, settings.lambda, settings.inside)?;

    let rows: Vec<usize> = (0..queries.len()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let ids: Vec<usize> = negatives
        .iter()
        .flat_map(|n| {
            let mut n = n.clone();
            n.sort_unstable();
            n
        })
        .collect();
    let neg_axis = g.gather_param(store, model.entity, &ids)?;
    let neg_target = tape::target(g, neg_axis);
    let d_neg = tape::set_distance(g, &members, &rows, neg_target, settings.lambda, settings.inside)?;

    for (v, what) in [(d_pos, "positive distance"), (d_neg, "negative distance")] {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite(format!("{what} in a {structure} batch")));
        }
    }
    let margin = g.neg(d_pos);
    let margin = g.offset(margin, settings.gamma);
    let pos_term = g.log_sigmoid(margin);
    let pos_term = g.mean(pos_term);
    let shifted = g.offset(d_neg, -settings.gamma);
    let neg_term = g.log_sigmoid(shifted);
    let neg_term = g.mean(neg_term);
    let total = g.add(pos_term, neg_term)?;
    Ok(g.neg(total))
}

/// A fixed batch with fixed samples, as a function of the parameters only.
#[derive(Debug, Clone)]
pub struct LossObjective<'a> {
    pub model: &'a ModelParams,
    pub queries: &'a [&'a GroundedQuery],
    pub positives: &'a [usize],
    pub negatives: &'a [Vec<usize>],
    pub settings: LossSettings,
}

impl Objective for LossObjective<'_> {
    fn eval<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<Var> {
        batch_loss(g, store, self.model, self.queries, self.positives, self.negatives, self.settings, ExecMode::Train)
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: Option<u128>,
}

impl EpochRecord {
    /// `epoch<TAB>mean_loss<TAB>wall_ms`, with `-` when time is not recorded.
    pub fn log_line(&self) -> String {
        let ms = self.wall_ms.map_or_else(|| "-".to_string(), |m| m.to_string());
        format!("{}\t{}\t{}", self.epoch, self.mean_loss, ms)
    }
}

pub fn format_loss_log(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tmean_loss\twall_ms\n");
    for r in records {
        let _ = writeln!(out, "{}", r.log_line());
    }
    out
}

/// Everything a training step needs besides the parameters.
struct Step<'a> {
    cfg: &'a TrainConfig,
    model: &'a ModelParams,
    entities: usize,
}

impl Step<'_> {
    /// Loss of one mini-batch: queries are grouped by structure and each
    /// group's mean is weighted by its share of the batch.
    fn loss(&self, g: &mut Graph, store: &ParamStore, chunk: &[&GroundedQuery], rng: &mut ChaCha8Rng) -> Result<Var> {
        let mut groups: Vec<(QueryType, Vec<&GroundedQuery>)> = Vec::new();
        for q in chunk {
            match groups.iter_mut().find(|(t, _)| *t == q.structure) {
                Some((_, v)) => v.push(q),
                None => groups.push((q.structure, vec![q])),
            }
        }
        groups.sort_by_key(|(t, _)| *t);
        let mut total: Option<Var> = None;
        for (_, qs) in groups {
            let mut positives = Vec::with_capacity(qs.len());
            let mut negatives = Vec::with_capacity(qs.len());
            for q in &qs {
                let answers = q.answers();
                positives.push(*answers.iter().choose(rng).expect("checked non-empty"));
                negatives.push(negative_sample(q, self.entities, self.cfg.negatives, rng)?);
            }
            let l = batch_loss(g, store, self.model, &qs, &positives, &negatives, self.cfg.into(), ExecMode::Train)?;
            let l = g.scale(l, qs.len() as f64 / chunk.len() as f64);
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::Contract("empty batch".into()))
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch training.
///
/// `on_epoch` sees every finished epoch and the current parameters, e.g. to
/// write checkpoints. On a non-finite loss or gradient the run stops with an
/// error and `store` keeps the parameters of the last successful step.
pub fn train(
    cfg: &TrainConfig,
    data: &QueryDataset,
    store: &mut ParamStore,
    model: &ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if model.dim() != cfg.dim || model.variant() != cfg.variant {
        return Err(Error::Config(format!(
            "parameters are {} d={}, config asks for {} d={}",
            model.variant(),
            model.dim(),
            cfg.variant,
            cfg.dim
        )));
    }
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("no training queries".into()));
    }
    if let Some(i) = data.queries.iter().position(|q| q.easy.is_empty() && q.hard.is_empty()) {
        return Err(Error::Data(format!("training query {i} has no answers")));
    }
    let step = Step { cfg, model, entities: model.shape.entities };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(store, cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let qs: Vec<&GroundedQuery> = chunk.iter().map(|&i| &data.queries[i]).collect();
            let mut g = Graph::new();
            let loss = step.loss(&mut g, store, &qs, &mut rng)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {}", batches + 1)));
            }
            let grads = g.backward(loss)?;
            store.accumulate(&grads);
            if let Err(e) = adam_step(store, &mut opt) {
                store.zero_grad();
                return Err(e);
            }
            sum += value;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: sum / batches as f64,
            wall_ms: cfg.record_time.then(|| start.elapsed().as_millis()),
        };
        debug!("{}", record.log_line());
        if epoch == 1 || epoch == cfg.epochs || epoch % 50 == 0 {
            info!("epoch {epoch}: mean loss {:.6}", record.mean_loss);
        }
        on_epoch(&record, store)?;
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::diff::grad_check;
    use crate::geometry::UnitComplexVec;
    use crate::model::{init_store, ModelShape};
    use crate::operators::{distance, ConeSet, Variant};
    use crate::query::execute;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeSet;

    fn q(structure: QueryType, anchors: Vec<usize>, relations: Vec<usize>, easy: &[usize]) -> GroundedQuery {
        GroundedQuery::new(structure, anchors, relations, easy.iter().copied().collect(), BTreeSet::new()).unwrap()
    }

    #[test]
    fn negatives_avoid_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let query = q(QueryType::P1, vec![0], vec![0], &[1, 2, 3]);
        let ns = negative_sample(&query, 10, 64, &mut rng).unwrap();
        assert_eq!(ns.len(), 64);
        assert!(ns.iter().all(|e| ![1, 2, 3].contains(e) && *e < 10));
        let crowded = q(QueryType::P1, vec![0], vec![0], &[0, 1, 2, 3, 4, 5, 6, 7]);
        let ns = negative_sample(&crowded, 10, 30, &mut rng).unwrap();
        assert!(ns.iter().all(|&e| e == 8 || e == 9));
        let full = q(QueryType::P1, vec![0], vec![0], &[0, 1, 2]);
        assert!(matches!(negative_sample(&full, 3, 1, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn negatives_are_uniform() {
        // chi-squared goodness of fit over 17 eligible ids at 10^5 draws
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let query = q(QueryType::P1, vec![0], vec![0], &[4, 9, 11]);
        let draws = negative_sample(&query, 20, 100_000, &mut rng).unwrap();
        let mut counts = [0f64; 20];
        for e in draws {
            counts[e] += 1.0;
        }
        let expected = 100_000.0 / 17.0;
        let chi2: f64 =
            (0..20).filter(|e| ![4, 9, 11].contains(e)).map(|e| (counts[e] - expected).powi(2) / expected).sum();
        // 16 degrees of freedom, 0.999 quantile ≈ 39.25
        assert!(chi2 < 39.25, "chi2 = {chi2}");
    }

    #[test]
    fn loss_at_margin_is_two_ln_two() {
        assert_abs_diff_eq!(loss_from_distances(3.0, &[3.0, 3.0, 3.0], 3.0), 2.0 * 2f64.ln(), epsilon = 1e-15);
        for (p, n) in [(0.0, 100.0), (100.0, 0.0), (5.0, 5.0)] {
            assert!(loss_from_distances(p, &[n], 20.0) > 0.0);
        }
    }

    fn toy_model(variant: Variant, dim: usize) -> (ParamStore, ModelParams) {
        let shape = ModelShape { entities: 6, relations: 2, dim, variant };
        init_store(shape, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn tape_loss_matches_plain_reference() {
        let (store, model) = toy_model(Variant::Rotate, 2);
        let queries = [q(QueryType::P2, vec![0], vec![0, 1], &[2]), q(QueryType::P2, vec![3], vec![1, 1], &[4])];
        let refs: Vec<&GroundedQuery> = queries.iter().collect();
        let positives = [2, 4];
        let negatives = vec![vec![5, 1, 3], vec![0, 5, 2]];
        let settings = LossSettings { gamma: 1.5, lambda: 0.3, inside: InsideDistance::AsPrinted };
        let mut g = Graph::new();
        let l = batch_loss(&mut g, &store, &model, &refs, &positives, &negatives, settings, ExecMode::Infer).unwrap();

        let target = |e: usize| UnitComplexVec::from_angles(model.entity_axis(&store, e).unwrap());
        let dist = |set: &ConeSet, e: usize| distance(&target(e), set, 0.3, InsideDistance::AsPrinted).unwrap();
        let mut expected = 0.0;
        for (i, query) in queries.iter().enumerate() {
            let set = execute(query, &store, &model).unwrap();
            let dn: Vec<f64> = negatives[i].iter().map(|&e| dist(&set, e)).collect();
            expected += loss_from_distances(dist(&set, positives[i]), &dn, 1.5) / 2.0;
        }
        assert_abs_diff_eq!(g.value(l).item(), expected, epsilon = 1e-12);
    }

    #[test]
    fn negative_order_does_not_matter() {
        let (store, model) = toy_model(Variant::SigmoidExpand, 3);
        let query = q(QueryType::I2, vec![0, 1], vec![0, 1], &[2]);
        let settings = LossSettings { gamma: 2.0, lambda: 0.1, inside: InsideDistance::AsPrinted };
        let value = |negs: Vec<usize>| {
            let mut g = Graph::new();
            let l = batch_loss(&mut g, &store, &model, &[&query], &[2], &[negs], settings, ExecMode::Train).unwrap();
            g.value(l).item()
        };
        assert_eq!(value(vec![5, 3, 4, 1, 0]), value(vec![0, 1, 3, 4, 5]));
        assert_eq!(value(vec![5, 3, 4, 1, 0]), value(vec![4, 0, 5, 3, 1]));
    }

    #[test]
    fn loss_gradients_check_out() {
        for variant in Variant::ALL {
            let (store, model) = toy_model(variant, 4);
            let queries =
                [q(QueryType::In2, vec![0, 1], vec![0, 1], &[2]), q(QueryType::In2, vec![3, 2], vec![1, 0], &[4])];
            let refs: Vec<&GroundedQuery> = queries.iter().collect();
            let settings = LossSettings { gamma: 2.0, lambda: 0.2, inside: InsideDistance::AsPrinted };
            let negatives = [vec![5, 1], vec![0, 3]];
            let objective =
                LossObjective { model: &model, queries: &refs, positives: &[2, 4], negatives: &negatives, settings };
            let report = grad_check(&store, 1e-5, &objective).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{variant}: {report:?}");
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dim: 4,
            batch: 3,
            negatives: 2,
            gamma: 2.0,
            lr: 0.01,
            lambda: 0.1,
            epochs: 3,
            seed: 5,
            record_time: false,
            ..TrainConfig::profile(Profile::Nell995)
        }
    }

    fn small_data() -> QueryDataset {
        QueryDataset::new(vec![
            q(QueryType::P1, vec![0], vec![0], &[1]),
            q(QueryType::P1, vec![1], vec![1], &[2, 3]),
            q(QueryType::I2, vec![0, 4], vec![0, 1], &[1]),
            q(QueryType::P1, vec![5], vec![0], &[4]),
        ])
    }

    #[test]
    fn zero_epochs_leave_store_unchanged() {
        let (mut store, model) = toy_model(Variant::Rotate, 4);
        let before = store.clone();
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let log = train(&cfg, &small_data(), &mut store, &model, |_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(store, before);
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let (mut store, model) = toy_model(Variant::Rotate, 4);
            let log = train(&small_cfg(), &small_data(), &mut store, &model, |_, _| Ok(())).unwrap();
            (format_loss_log(&log), store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.lines().count(), 4);
        assert!(a.lines().nth(1).unwrap().ends_with("\t-"));
    }

    #[test]
    fn training_reduces_loss_and_leaves_data_alone() {
        let (mut store, model) = toy_model(Variant::Rotate, 4);
        let data = small_data();
        let copy = data.clone();
        let cfg = TrainConfig { epochs: 60, ..small_cfg() };
        let mut seen = 0;
        let log = train(&cfg, &data, &mut store, &model, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 60);
        assert!(log.last().unwrap().mean_loss < log[0].mean_loss);
        assert_eq!(data, copy);
    }

    #[test]
    fn non_finite_parameters_abort_without_update() {
        let (mut store, model) = toy_model(Variant::Rotate, 4);
        store.value_mut(model.entity).data_mut()[0] = f64::NAN;
        let before = store.clone();
        let err = train(&small_cfg(), &small_data(), &mut store, &model, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        // NaN != NaN, so compare bit patterns
        let bits = |s: &ParamStore| -> Vec<u64> {
            s.ids().flat_map(|id| s.value(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
        };
        assert_eq!(bits(&store), bits(&before));
    }

    #[test]
    fn config_must_match_parameters() {
        let (mut store, model) = toy_model(Variant::Rotate, 4);
        let cfg = TrainConfig { dim: 8, ..small_cfg() };
        assert!(matches!(train(&cfg, &small_data(), &mut store, &model, |_, _| Ok(())), Err(Error::Config(_))));
        let empty = QueryDataset::new(vec![q(QueryType::P1, vec![0], vec![0], &[])]);
        assert!(train(&small_cfg(), &empty, &mut store, &model, |_, _| Ok(())).is_err());
    }
}
