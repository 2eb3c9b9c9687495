use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainDataset, GraphInstance, Split, Target, TaskKind};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const GRAPH_FORMAT_TAG: &str = "uglm-graphs";
pub const GRAPH_FORMAT_VERSION: u32 = 1;
pub const EMBEDDING_MAGIC: &[u8; 6] = b"UGEMB\x01";
pub const DATASET_SUFFIX: &str = ".graphs.jsonl";
pub const EMBEDDING_SUFFIX: &str = ".emb";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    domain: String,
    task: TaskKind,
    classes: usize,
    splits: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TargetRecord {
    Node(usize),
    Edge([usize; 2]),
    Graph(bool),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    domain: String,
    task: TaskKind,
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_features: Option<Vec<Vec<f64>>>,
    target: TargetRecord,
    label: Option<usize>,
    text_index: usize,
}

/// Graph file contents before the embedding table is attached.
#[derive(Debug)]
pub struct GraphFile {
    pub domain: String,
    pub task: TaskKind,
    pub classes: usize,
    pub split: Split,
    pub instances: Vec<GraphInstance>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], width_hint: usize) -> std::result::Result<Matrix, String> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, width_hint));
    }
    Matrix::from_rows(rows).map_err(|_| "rows have unequal lengths".to_string())
}

fn record_to_instance(rec: Record, width_hint: usize) -> std::result::Result<(GraphInstance, TaskKind), String> {
    let node_features = matrix_from_rows(&rec.node_features, width_hint).map_err(|e| format!("node_features: {e}"))?;
    let edge_features = match rec.edge_features {
        Some(rows) => Some(matrix_from_rows(&rows, 0).map_err(|e| format!("edge_features: {e}"))?),
        None => None,
    };
    let target = match rec.target {
        TargetRecord::Node(v) => Target::Node(v),
        TargetRecord::Edge([u, v]) => Target::Edge(u, v),
        TargetRecord::Graph(true) => Target::Graph,
        TargetRecord::Graph(false) => return Err("graph target must be `true`".into()),
    };
    let instance = GraphInstance {
        num_nodes: rec.num_nodes,
        edges: rec.edges.into_iter().map(|[u, v]| (u, v)).collect(),
        node_features,
        edge_features,
        target,
        label: rec.label,
        text_index: rec.text_index,
        domain: rec.domain,
    };
    Ok((instance, rec.task))
}

/// Parses a graph dataset file. Structural problems are parse errors with a
/// 1-based line number; invariant checks happen in [`load_dataset`].
pub fn read_graph_file(path: &Path) -> Result<GraphFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(path, 1, "missing header line")),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, format!("header: {e}")))?;
            }
        }
    };
    if header.format != GRAPH_FORMAT_TAG {
        return Err(parse_err(path, 1, format!("unknown format tag `{}`", header.format)));
    }
    if header.version != GRAPH_FORMAT_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported graph file version {}", header.version),
        ));
    }

    let mut instances = Vec::new();
    let mut width = None;
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let (g, task) = record_to_instance(rec, width.unwrap_or(0)).map_err(|m| parse_err(path, i + 1, m))?;
        if task != header.task {
            return Err(Error::Validation {
                instance: instances.len(),
                field: "task".into(),
                message: format!("{task} record in a {} file", header.task),
            });
        }
        if g.num_nodes > 0 {
            width.get_or_insert(g.node_features.cols());
        }
        instances.push(g);
    }
    Ok(GraphFile {
        domain: header.domain,
        task: header.task,
        classes: header.classes,
        split: header.splits,
        instances,
    })
}

/// Reads a `UGEMB\x01` embedding table, upcasting to `f64`.
pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 14 || &bytes[..6] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("{}: not an embedding file", path.display())));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[14..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{}: header overflows", path.display())))?;
    if payload.len() != expected {
        return Err(Error::Length(format!(
            "{}: expected {expected} payload bytes for {count}×{dim}, found {}",
            path.display(),
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: path.display().to_string(),
            index,
        });
    }
    Matrix::from_vec(count, dim, values)
}

/// Parses and validates one domain from its graph file and embedding table.
pub fn load_dataset(graph_path: &Path, embedding_path: &Path) -> Result<DomainDataset> {
    let gf = read_graph_file(graph_path)?;
    let text_embeddings = read_embeddings(embedding_path)?;
    let ds = DomainDataset {
        domain: gf.domain,
        task: gf.task,
        classes: gf.classes,
        instances: gf.instances,
        text_embeddings,
        split: gf.split,
    };
    let violations = ds.violations();
    if let Some((instance, v)) = violations.first() {
        let extra = violations.len() - 1;
        let message = if extra > 0 {
            format!("{} (and {extra} more)", v.message)
        } else {
            v.message.clone()
        };
        return Err(Error::Validation {
            instance: *instance,
            field: v.field.to_string(),
            message,
        });
    }
    Ok(ds)
}

/// Loads every `*.graphs.jsonl` in `dir` (sorted by name) with its companion `.emb`.
pub fn load_directory(dir: &Path) -> Result<Vec<DomainDataset>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut graph_files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(DATASET_SUFFIX))
        {
            graph_files.push(path);
        }
    }
    graph_files.sort();
    if graph_files.is_empty() {
        return Err(Error::EmptyData(format!(
            "no *{DATASET_SUFFIX} files in {}",
            dir.display()
        )));
    }
    graph_files
        .iter()
        .map(|g| load_dataset(g, &companion_embedding_path(g)))
        .collect()
}

fn companion_embedding_path(graph_path: &Path) -> PathBuf {
    let name = graph_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(DATASET_SUFFIX).unwrap_or(name);
    graph_path.with_file_name(format!("{stem}{EMBEDDING_SUFFIX}"))
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn write_graph_file(ds: &DomainDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        format: GRAPH_FORMAT_TAG.into(),
        version: GRAPH_FORMAT_VERSION,
        domain: ds.domain.clone(),
        task: ds.task,
        classes: ds.classes,
        splits: ds.split.clone(),
    };
    let io = |e: std::io::Error| Error::io(path, e);
    let json = |e: serde_json::Error| Error::Format(e.to_string());
    serde_json::to_writer(&mut out, &header).map_err(json)?;
    out.write_all(b"\n").map_err(io)?;
    for g in &ds.instances {
        if !g.node_features.is_finite() {
            return Err(Error::contract("node features must be finite to serialize"));
        }
        let rec = Record {
            domain: g.domain.clone(),
            task: ds.task,
            num_nodes: g.num_nodes,
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            node_features: rows_of(&g.node_features),
            edge_features: g.edge_features.as_ref().map(rows_of),
            target: match g.target {
                Target::Node(v) => TargetRecord::Node(v),
                Target::Edge(u, v) => TargetRecord::Edge([u, v]),
                Target::Graph => TargetRecord::Graph(true),
            },
            label: g.label,
            text_index: g.text_index,
        };
        serde_json::to_writer(&mut out, &rec).map_err(json)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes an embedding table; values are narrowed to `f32`.
pub fn write_embeddings(m: &Matrix, path: &Path) -> Result<()> {
    let count = u32::try_from(m.rows()).map_err(|_| Error::contract("too many embeddings"))?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::contract("embedding too wide"))?;
    let mut bytes = Vec::with_capacity(14 + m.len() * 4);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&count.to_le_bytes());
    bytes.extend_from_slice(&dim.to_le_bytes());
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<domain>.graphs.jsonl` and `<dir>/<domain>.emb`, returning both paths.
pub fn write_dataset(ds: &DomainDataset, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let graph_path = dir.join(format!("{}{DATASET_SUFFIX}", ds.domain));
    let emb_path = dir.join(format!("{}{EMBEDDING_SUFFIX}", ds.domain));
    write_graph_file(ds, &graph_path)?;
    write_embeddings(&ds.text_embeddings, &emb_path)?;
    Ok((graph_path, emb_path))
}
