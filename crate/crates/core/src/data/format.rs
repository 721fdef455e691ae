use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KnowledgeGraph, QueryDataset, Split, Triple};
use crate::error::{Error, Result};
use crate::query::{GroundedQuery, QueryType};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    entities: usize,
    relations: usize,
    split: String,
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.to_string(), line, msg: msg.into() }
}

/// Numbered non-empty lines after a checked version header.
fn body_lines<R: Read>(r: R, file: &str) -> Result<Vec<(usize, String)>> {
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        lines.push((i + 1, line));
    }
    let (no, header) = lines.first().ok_or_else(|| parse_err(file, 1, "empty file"))?;
    let version =
        header.trim().strip_prefix("#version ").ok_or_else(|| parse_err(file, *no, "missing '#version' header"))?;
    if version.trim() != FORMAT_VERSION.to_string() {
        return Err(parse_err(file, *no, format!("unsupported format version '{}'", version.trim())));
    }
    Ok(lines.into_iter().skip(1).filter(|(_, l)| !l.trim().is_empty()).collect())
}

fn parse_id(s: &str, file: &str, line: usize) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| parse_err(file, line, format!("'{s}' is not a non-negative integer id")))
}

/// Reads one split of a graph from a graph file.
pub fn read_graph<R: Read>(r: R, file: &str) -> Result<(Split, KnowledgeGraph)> {
    let lines = body_lines(r, file)?;
    let mut iter = lines.into_iter();
    let (no, manifest) = iter.next().ok_or_else(|| parse_err(file, 2, "missing manifest line"))?;
    let manifest: Manifest =
        serde_json::from_str(&manifest).map_err(|e| parse_err(file, no, format!("bad manifest: {e}")))?;
    let split: Split = manifest.split.parse().map_err(|_| parse_err(file, no, "unknown split in manifest"))?;
    let mut triples = Vec::new();
    let mut seen = BTreeSet::new();
    for (no, line) in iter {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(file, no, format!("expected 3 tab-separated ids, found {}", cols.len())));
        }
        let t = Triple::new(parse_id(cols[0], file, no)?, parse_id(cols[1], file, no)?, parse_id(cols[2], file, no)?);
        if t.head >= manifest.entities || t.tail >= manifest.entities || t.relation >= manifest.relations {
            return Err(parse_err(file, no, "id out of range of the manifest"));
        }
        if !seen.insert(t) {
            return Err(parse_err(file, no, "duplicate triple"));
        }
        triples.push(t);
    }
    let mut g = KnowledgeGraph::new(manifest.entities, manifest.relations);
    g.set_split(split, triples)?;
    Ok((split, g))
}

fn merge(into: &mut Option<KnowledgeGraph>, split: Split, part: KnowledgeGraph, file: &str) -> Result<()> {
    match into {
        None => *into = Some(part),
        Some(g) => {
            if (g.num_entities(), g.num_relations()) != (part.num_entities(), part.num_relations()) {
                return Err(Error::Data(format!("{file}: manifest sizes disagree with the other splits")));
            }
            g.set_split(split, part.split(split).to_vec())?;
        }
    }
    Ok(())
}

/// Loads a graph from one split file or from a dataset directory.
pub fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    if path.is_dir() {
        let mut graph = None;
        for split in Split::ALL {
            let file = path.join(format!("graph-{split}.tsv"));
            if !file.exists() {
                if split == Split::Train {
                    return Err(Error::Data(format!("{} not found", file.display())));
                }
                continue;
            }
            let name = file.display().to_string();
            let (s, part) = read_graph(fs::File::open(&file)?, &name)?;
            if s != split {
                return Err(Error::Data(format!("{name}: manifest says split '{s}'")));
            }
            merge(&mut graph, split, part, &name)?;
        }
        Ok(graph.expect("train split is required"))
    } else {
        let name = path.display().to_string();
        Ok(read_graph(fs::File::open(path)?, &name)?.1)
    }
}

pub fn write_graph<W: Write>(mut w: W, graph: &KnowledgeGraph, split: Split) -> Result<()> {
    writeln!(w, "#version {FORMAT_VERSION}")?;
    let manifest =
        Manifest { entities: graph.num_entities(), relations: graph.num_relations(), split: split.to_string() };
    writeln!(w, "{}", serde_json::to_string(&manifest).expect("plain struct"))?;
    for t in graph.split(split) {
        writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
    }
    Ok(())
}

fn parse_list(s: &str, file: &str, line: usize) -> Result<Vec<usize>> {
    if s.trim() == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse_id(x, file, line)).collect()
}

fn format_list<'a>(ids: impl IntoIterator<Item = &'a usize>) -> String {
    let parts: Vec<String> = ids.into_iter().map(|i| i.to_string()).collect();
    if parts.is_empty() {
        "-".to_string()
    } else {
        parts.join(",")
    }
}

pub fn read_queries<R: Read>(r: R, file: &str) -> Result<QueryDataset> {
    let mut queries = Vec::new();
    for (no, line) in body_lines(r, file)? {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(file, no, format!("expected 5 tab-separated fields, found {}", cols.len())));
        }
        let structure: QueryType = cols[0].trim().parse().map_err(|e: Error| parse_err(file, no, e.to_string()))?;
        let easy: BTreeSet<usize> = parse_list(cols[3], file, no)?.into_iter().collect();
        let hard: BTreeSet<usize> = parse_list(cols[4], file, no)?.into_iter().collect();
        let q =
            GroundedQuery::new(structure, parse_list(cols[1], file, no)?, parse_list(cols[2], file, no)?, easy, hard)
                .map_err(|e| parse_err(file, no, e.to_string()))?;
        queries.push(q);
    }
    Ok(QueryDataset::new(queries))
}

pub fn load_queries(path: &Path) -> Result<QueryDataset> {
    read_queries(fs::File::open(path)?, &path.display().to_string())
}

pub fn write_queries<W: Write>(mut w: W, data: &QueryDataset) -> Result<()> {
    writeln!(w, "#version {FORMAT_VERSION}")?;
    for q in &data.queries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            q.structure,
            format_list(&q.anchors),
            format_list(&q.relations),
            format_list(&q.easy),
            format_list(&q.hard)
        )?;
    }
    Ok(())
}

/// Writes a dataset directory: every graph split plus the given query files.
pub fn save_dataset(dir: &Path, graph: &KnowledgeGraph, queries: &[(Split, &QueryDataset)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let f = fs::File::create(dir.join(format!("graph-{split}.tsv")))?;
        write_graph(std::io::BufWriter::new(f), graph, split)?;
    }
    for (split, data) in queries {
        let f = fs::File::create(dir.join(format!("queries-{split}.tsv")))?;
        write_queries(std::io::BufWriter::new(f), data)?;
    }
    Ok(())
}
