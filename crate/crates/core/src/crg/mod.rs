//! Class relationship graph mined from a language model.
//!
//! For every class the prompt is sent `Q` times; parsed relations are
//! scored by mapped strength averaged over the queries (a query that does
//! not mention a class contributes 0) and the top-N related classes become
//! unweighted in-edges.

pub mod backend;
pub mod parse;
pub mod prompt;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backend::{Backend, LiveConfig, ReplayStore};
pub use parse::{parse_response, ParseOutcome};
pub use prompt::render_prompt;

use crate::atm::ClassGraph;
use crate::error::{Error, Result};
use crate::files;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    Synonymy,
    IsA,
    Functional,
    Cooccurrence,
    PartWhole,
}

impl RelationType {
    /// Label used in the response format.
    pub fn label(self) -> &'static str {
        match self {
            RelationType::Synonymy => "Synonymy/Similarity",
            RelationType::IsA => "Is-a/Hypernym",
            RelationType::Functional => "Functional Relationship",
            RelationType::Cooccurrence => "Co-occurrence",
            RelationType::PartWhole => "Part-Whole Relationship",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strength {
    High,
    Medium,
    Low,
}

impl Strength {
    pub fn value(self) -> f64 {
        match self {
            Strength::High => 1.0,
            Strength::Medium => 0.6,
            Strength::Low => 0.3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strength::High => "High",
            Strength::Medium => "Medium",
            Strength::Low => "Low",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub target: String,
    pub related: String,
    pub rel_type: RelationType,
    pub strength: Strength,
    pub explanation: String,
    pub query_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub class: String,
    pub query_index: usize,
    pub raw: String,
    pub parse_status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedEdge {
    pub target: String,
    pub related: String,
    pub score: f64,
}

/// Mean mapped strength per related class over `q` queries. Repeated
/// mentions within one query count once, at their strongest.
pub fn aggregate(records: &[RelationRecord], q: usize) -> Result<Vec<AggregatedEdge>> {
    if q == 0 {
        return Err(Error::Config("aggregation needs at least one query".into()));
    }
    // related (lower-cased) → (display name, target, best strength per query)
    let mut per: BTreeMap<String, (String, String, BTreeMap<usize, f64>)> = BTreeMap::new();
    for r in records {
        let key = r.related.trim().to_lowercase();
        let entry = per
            .entry(key)
            .or_insert_with(|| (r.related.trim().to_string(), r.target.clone(), BTreeMap::new()));
        let best = entry.2.entry(r.query_index).or_insert(0.0);
        *best = best.max(r.strength.value());
    }
    Ok(per
        .into_values()
        .map(|(related, target, by_query)| AggregatedEdge {
            target,
            related,
            score: by_query.values().sum::<f64>() / q as f64,
        })
        .collect())
}

/// Keeps the `n` best-scoring known classes per target (ties by name).
pub fn build_graph(
    edges: &[Vec<AggregatedEdge>],
    names: &[String],
    seen_mask: &[bool],
    n: usize,
) -> Result<ClassGraph> {
    if n == 0 {
        return Err(Error::Config("neighbour count must be ≥ 1".into()));
    }
    if edges.len() != names.len() || seen_mask.len() != names.len() {
        return Err(Error::dim("build_graph", &[edges.len()], &[names.len()]));
    }
    let index: BTreeMap<String, usize> = names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.trim().to_lowercase(), i))
        .collect();
    let mut in_neighbors = Vec::with_capacity(names.len());
    for (c, cand) in edges.iter().enumerate() {
        let mut known: Vec<(usize, f64)> = Vec::new();
        for e in cand {
            match index.get(&e.related.trim().to_lowercase()) {
                Some(&j) if j != c && e.score > 0.0 => {
                    if !known.iter().any(|&(k, _)| k == j) {
                        known.push((j, e.score));
                    }
                }
                Some(_) => {}
                None => log::debug!("{:?} is not in the vocabulary; dropped", e.related),
            }
        }
        known.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| names[a.0].cmp(&names[b.0])));
        known.truncate(n);
        in_neighbors.push(known.into_iter().map(|(j, _)| j).collect());
    }
    let graph = ClassGraph {
        num_classes: names.len(),
        names: names.to_vec(),
        in_neighbors,
        seen_mask: seen_mask.to_vec(),
    };
    graph.validate()?;
    Ok(graph)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub queries: usize,
    pub top_p: f64,
    pub neighbors: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            queries: 3,
            top_p: 0.3,
            neighbors: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MiningResult {
    pub relations: Vec<RelationRecord>,
    pub logs: Vec<QueryLog>,
    pub graph: ClassGraph,
    pub parse_warnings: usize,
}

/// Queries every class `cfg.queries` times and builds the graph. Results
/// are ordered by (class, query) whatever order the responses arrive in.
pub fn mine_all(names: &[String], seen_mask: &[bool], backend: &Backend, cfg: &MiningConfig) -> Result<MiningResult> {
    if names.is_empty() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..names.len())
        .flat_map(|c| (0..cfg.queries).map(move |q| (c, q)))
        .collect();
    let run = |&(c, q): &(usize, usize)| -> Result<String> {
        let others: Vec<String> = names
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != c)
            .map(|(_, s)| s.clone())
            .collect();
        let prompt = render_prompt(&names[c], &others)?;
        backend.query(&names[c], q, &prompt)
    };
    let width = backend.max_in_flight();
    let mut raws: Vec<Result<String>> = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(width) {
        if width == 1 {
            raws.extend(chunk.iter().map(run));
        } else {
            let out: Vec<Result<String>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|job| s.spawn(move || run(job))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("query thread panicked"))
                    .collect()
            });
            raws.extend(out);
        }
    }
    let mut relations = Vec::new();
    let mut logs = Vec::with_capacity(jobs.len());
    let mut per_class: Vec<Vec<RelationRecord>> = vec![Vec::new(); names.len()];
    let mut parse_warnings = 0;
    for (&(c, q), raw) in jobs.iter().zip(raws) {
        let raw = raw?;
        let parsed = parse_response(&raw, &names[c], q);
        parse_warnings += parsed.warnings();
        logs.push(QueryLog {
            class: names[c].clone(),
            query_index: q,
            raw,
            parse_status: parsed.status(),
        });
        per_class[c].extend(parsed.records.iter().cloned());
        relations.extend(parsed.records);
    }
    let edges: Vec<Vec<AggregatedEdge>> = per_class
        .iter()
        .map(|r| aggregate(r, cfg.queries))
        .collect::<Result<_>>()?;
    let graph = build_graph(&edges, names, seen_mask, cfg.neighbors)?;
    Ok(MiningResult {
        relations,
        logs,
        graph,
        parse_warnings,
    })
}

pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const QUERY_LOG_FILE: &str = "queries.jsonl";
pub const GRAPH_FILE: &str = "graph.json";

impl MiningResult {
    /// Writes the relations, query log and graph files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        files::write_jsonl(&dir.join(RELATIONS_FILE), &self.relations)?;
        files::write_jsonl(&dir.join(QUERY_LOG_FILE), &self.logs)?;
        write_graph(&dir.join(GRAPH_FILE), &self.graph)
    }
}

pub fn write_graph(path: &Path, graph: &ClassGraph) -> Result<()> {
    files::write_json(path, graph)
}

pub fn read_graph(path: &Path) -> Result<ClassGraph> {
    let g: ClassGraph = files::read_json(path)?;
    g.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(g)
}

/// Renders relations in the response format the parser reads.
pub fn render_response(items: &[(&str, RelationType, Strength, &str)]) -> String {
    let mut s = String::new();
    for (i, (name, rel, strength, why)) in items.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(&format!(
            "**Related Category {}: {}**\n- **Type of Relationship**: {}\n- **Association Strength**: {}\n- **Explanation**: {}\n",
            i + 1,
            name,
            rel.label(),
            strength.label(),
            why
        ));
    }
    s
}
