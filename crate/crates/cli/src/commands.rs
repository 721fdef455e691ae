use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rocone::config::{Profile, TrainConfig};
use rocone::data::{
    generate_synthetic, held_out_queries, load_graph, load_queries, save_dataset, KnowledgeGraph, PatternSpec,
    QueryDataset, Split,
};
use rocone::diff::{grad_check, read_checkpoint, write_checkpoint, GradCheckReport, ParamStore};
use rocone::eval::{evaluate, format_table, EvalReport};
use rocone::model::{init_store, ModelParams, ModelShape};
use rocone::operators::{InsideDistance, Variant};
use rocone::query::{GroundedQuery, QueryType};
use rocone::train::{format_loss_log, train, LossObjective, LossSettings};

use crate::{Command, DataArgs, HyperArgs};

/// Usage failures exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(String),
}

impl From<rocone::Error> for Failure {
    fn from(e: rocone::Error) -> Self {
        match e {
            rocone::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { data, hyper, variant, seed, checkpoint } => {
            let cfg = resolve_config(&hyper, variant.as_deref(), seed)?;
            train_cmd(&data, cfg, checkpoint.as_deref())
        }
        Command::Eval { data, checkpoint, split } => eval_cmd(&data, &checkpoint, &split),
        Command::GenerateSynthetic { out, pattern, entities, count, groups, holdout, seed } => {
            let spec = PatternSpec { pattern: pattern.parse()?, entities, count, relation_groups: groups, holdout };
            let sd = generate_synthetic(&spec, seed)?;
            let out = out_dir(out);
            save_dataset(&out, &sd.graph, &[(Split::Train, &sd.train), (Split::Test, &sd.test)])?;
            println!(
                "{}: {} entities, {} relations, {} train / {} test edges, {} train / {} test queries -> {}",
                spec.pattern,
                sd.graph.num_entities(),
                sd.graph.num_relations(),
                sd.graph.split(Split::Train).len(),
                sd.graph.split(Split::Test).len(),
                sd.train.len(),
                sd.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::GradCheck { d, seed, variant, eps, tolerance } => {
            grad_check_cmd(d, seed, variant.parse()?, eps, tolerance)
        }
        Command::Ablate { data, hyper, variants, seeds } => {
            let base = resolve_config(&hyper, None, None)?;
            let variants = variants.iter().map(|v| v.parse()).collect::<rocone::Result<Vec<Variant>>>()?;
            if seeds.is_empty() {
                return Err(Failure::Usage("--seeds needs at least one seed".into()));
            }
            ablate_cmd(&data, base, &variants, &seeds)
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("ROCONE_OUT").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

/// Profile, then config file, then flags.
fn resolve_config(h: &HyperArgs, variant: Option<&str>, seed: Option<u64>) -> Result<TrainConfig> {
    let profile: Profile = h.profile.as_deref().unwrap_or("nell995").parse()?;
    let mut cfg = TrainConfig::profile(profile);
    if let Some(path) = &h.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    let flags = [
        ("dim", h.d.map(|v| v.to_string())),
        ("batch", h.batch.map(|v| v.to_string())),
        ("negatives", h.negatives.map(|v| v.to_string())),
        ("gamma", h.gamma.map(|v| v.to_string())),
        ("lr", h.lr.map(|v| v.to_string())),
        ("lambda", h.lambda.map(|v| v.to_string())),
        ("epochs", h.epochs.map(|v| v.to_string())),
        ("checkpoint_every", h.checkpoint_every.map(|v| v.to_string())),
        ("variant", variant.map(str::to_string)),
        ("seed", seed.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    if h.no_time {
        cfg.record_time = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", dir.display())));
    }
    Ok(())
}

/// `queries-<split>.tsv` if present; held-out `1p` queries from the graph
/// otherwise (not possible for the train split).
fn split_queries(dir: &Path, graph: &KnowledgeGraph, split: Split) -> Result<QueryDataset> {
    let file = dir.join(format!("queries-{split}.tsv"));
    let data = if file.exists() {
        load_queries(&file)?
    } else if split == Split::Train {
        return Err(Failure::Run(format!("{} not found", file.display())));
    } else {
        info!("{} not found, using held-out 1p queries of the graph", file.display());
        held_out_queries(graph, split)?
    };
    data.check_ids(graph)?;
    Ok(data)
}

fn fresh_model(graph: &KnowledgeGraph, cfg: &TrainConfig) -> Result<(ParamStore, ModelParams)> {
    let shape = ModelShape {
        entities: graph.num_entities(),
        relations: graph.num_relations(),
        dim: cfg.dim,
        variant: cfg.variant,
    };
    Ok(init_store(shape, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?)
}

fn save_checkpoint(path: &Path, cfg: &TrainConfig, store: &ParamStore) -> rocone::Result<()> {
    write_checkpoint(BufWriter::new(fs::File::create(path)?), &cfg.to_string(), store)
}

fn train_cmd(args: &DataArgs, cfg: TrainConfig, resume: Option<&Path>) -> Result<()> {
    require_dir(&args.data)?;
    let graph = load_graph(&args.data)?;
    let data = split_queries(&args.data, &graph, Split::Train)?;
    let (mut store, model) = match resume {
        Some(path) => {
            let ckpt = read_checkpoint(fs::File::open(path)?)?;
            let model = ModelParams::resolve(&ckpt.store, cfg.variant)?;
            if model.shape.entities != graph.num_entities() || model.shape.relations != graph.num_relations() {
                return Err(Failure::Run(format!(
                    "checkpoint has {} entities and {} relations, the graph {} and {}",
                    model.shape.entities,
                    model.shape.relations,
                    graph.num_entities(),
                    graph.num_relations()
                )));
            }
            (ckpt.store, model)
        }
        None => fresh_model(&graph, &cfg)?,
    };
    let out = out_dir(args.out.clone());
    fs::create_dir_all(&out)?;
    info!("training {} d={} on {} queries for {} epochs", cfg.variant, cfg.dim, data.len(), cfg.epochs);
    let log = train(&cfg, &data, &mut store, &model, |rec, store| {
        if cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(&out.join(format!("checkpoint-{}.ckpt", rec.epoch)), &cfg, store)?;
        }
        if rec.epoch % 50 == 0 {
            info!("epoch {} loss {:.5}", rec.epoch, rec.mean_loss);
        }
        Ok(())
    })?;
    fs::write(out.join("loss.tsv"), format_loss_log(&log))?;
    fs::write(out.join("config.toml"), cfg.to_string())?;
    save_checkpoint(&out.join("model.ckpt"), &cfg, &store)?;
    if let Some(last) = log.last() {
        println!("final loss {} after {} epochs", last.mean_loss, last.epoch);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_reports(out: &Path, stem: &str, table: &str, json: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{stem}.tsv")), table)?;
    fs::write(out.join(format!("{stem}.json")), json)?;
    Ok(())
}

fn eval_cmd(args: &DataArgs, checkpoint: &Path, split: &str) -> Result<()> {
    require_dir(&args.data)?;
    let split: Split = split.parse()?;
    let ckpt = read_checkpoint(fs::File::open(checkpoint)?)?;
    let cfg = TrainConfig::from_text(&ckpt.config)?;
    let model = ModelParams::resolve(&ckpt.store, cfg.variant)?;
    let graph = load_graph(&args.data)?;
    let data = split_queries(&args.data, &graph, split)?;
    data.check_evaluable()?;
    let report = evaluate(&ckpt.store, &model, &data, cfg.lambda, cfg.inside)?;
    let table = format_table(&[(cfg.variant.as_str(), &report)]);
    write_reports(&out_dir(args.out.clone()), "report", &table, &report.to_json())?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(args: &DataArgs, base: TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<()> {
    require_dir(&args.data)?;
    let graph = load_graph(&args.data)?;
    let train_data = split_queries(&args.data, &graph, Split::Train)?;
    let test_data = split_queries(&args.data, &graph, Split::Test)?;
    test_data.check_evaluable()?;
    let mut reports = BTreeMap::new();
    for &variant in variants {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { variant, seed, ..base.clone() };
            info!("{variant} seed {seed}");
            let (mut store, model) = fresh_model(&graph, &cfg)?;
            train(&cfg, &train_data, &mut store, &model, |_, _| Ok(()))?;
            runs.push(evaluate(&store, &model, &test_data, cfg.lambda, cfg.inside)?);
        }
        reports.insert(variant.as_str(), EvalReport::aggregate(&runs)?);
    }
    // table rows in the order asked for
    let rows: Vec<(&str, &EvalReport)> = variants.iter().map(|v| (v.as_str(), &reports[v.as_str()])).collect();
    let table = format_table(&rows);
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Run(e.to_string()))?;
    write_reports(&out_dir(args.out.clone()), "ablation", &table, &json)?;
    print!("{table}");
    Ok(())
}

const CHECK_ENTITIES: usize = 8;
const CHECK_RELATIONS: usize = 3;

/// Two queries of every structure against a tiny random model, one batch
/// per structure.
fn grad_check_cmd(d: usize, seed: u64, variant: Variant, eps: f64, tolerance: f64) -> Result<()> {
    if d == 0 {
        return Err(Failure::Usage("--d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ModelShape { entities: CHECK_ENTITIES, relations: CHECK_RELATIONS, dim: d, variant };
    let (store, model) = init_store(shape, &mut rng)?;
    let settings = LossSettings { gamma: 3.0, lambda: 0.2, inside: InsideDistance::AsPrinted };
    let mut worst: Option<(QueryType, GradCheckReport)> = None;
    for t in QueryType::ALL {
        let queries = (0..2)
            .map(|_| {
                let anchors = (0..t.num_anchors()).map(|_| rng.gen_range(0..CHECK_ENTITIES)).collect();
                let relations = (0..t.num_relations()).map(|_| rng.gen_range(0..CHECK_RELATIONS)).collect();
                GroundedQuery::new(t, anchors, relations, BTreeSet::from([0]), BTreeSet::new())
            })
            .collect::<rocone::Result<Vec<_>>>()?;
        let refs: Vec<&GroundedQuery> = queries.iter().collect();
        let positives: Vec<usize> = queries.iter().map(|_| rng.gen_range(0..CHECK_ENTITIES)).collect();
        let negatives: Vec<Vec<usize>> =
            queries.iter().map(|_| (0..2).map(|_| rng.gen_range(0..CHECK_ENTITIES)).collect()).collect();
        let objective =
            LossObjective { model: &model, queries: &refs, positives: &positives, negatives: &negatives, settings };
        let r = grad_check(&store, eps, &objective)?;
        if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error > w.max_rel_error) {
            worst = Some((t, r));
        }
    }
    let (t, r) = worst.expect("at least one structure");
    let (group, k) = r.worst.clone().unwrap_or_default();
    println!(
        "max relative error {:.3e} at {t} (worst {group}[{k}]: reverse {:.6e}, finite difference {:.6e})",
        r.max_rel_error, r.worst_values.0, r.worst_values.1
    );
    if r.max_rel_error > tolerance {
        return Err(Failure::Run(format!("gradient check failed: {:.3e} > {tolerance:e}", r.max_rel_error)));
    }
    Ok(())
}
