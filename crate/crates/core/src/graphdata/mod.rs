//! Multi-domain graph datasets: the in-memory model, validation, file
//! formats and minibatch sampling.

mod format;
mod sampling;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::numcore::Matrix;

pub use format::{
    load_dataset, load_directory, read_embeddings, read_graph_file, write_dataset, write_embeddings, write_graph_file,
    DATASET_SUFFIX, EMBEDDING_MAGIC, EMBEDDING_SUFFIX,
};
pub use sampling::{iterate_epochs, sample_minibatch, EpochBatches};

/// Representation granularity a task needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Edge,
    Graph,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Node => "node",
            TaskKind::Edge => "edge",
            TaskKind::Graph => "graph",
        })
    }
}

/// What a single instance asks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Node(usize),
    Edge(usize, usize),
    Graph,
}

impl Target {
    pub fn kind(&self) -> TaskKind {
        match self {
            Target::Node(_) => TaskKind::Node,
            Target::Edge(..) => TaskKind::Edge,
            Target::Graph => TaskKind::Graph,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    pub num_nodes: usize,
    /// Directed `(source, destination)` pairs as listed in the file.
    pub edges: Vec<(usize, usize)>,
    pub node_features: Matrix,
    /// Parsed and kept, but not consumed by the encoder.
    pub edge_features: Option<Matrix>,
    pub target: Target,
    pub label: Option<usize>,
    pub text_index: usize,
    pub domain: String,
}

/// One broken invariant found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

/// Checks the structural invariants of a single instance, returning all of
/// the violations rather than the first.
pub fn validate_graph(g: &GraphInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = g.num_nodes;
    if n == 0 {
        out.push(Violation {
            field: "num_nodes",
            message: "graph has no nodes".into(),
        });
    }
    if g.node_features.rows() != n {
        out.push(Violation {
            field: "node_features",
            message: format!("{} feature rows for {} nodes", g.node_features.rows(), n),
        });
    }
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if u >= n || v >= n {
            out.push(Violation {
                field: "edges",
                message: format!("edge {i} = ({u}, {v}) references a node outside 0..{n}"),
            });
        }
    }
    if let Some(ef) = &g.edge_features {
        if ef.rows() != g.edges.len() {
            out.push(Violation {
                field: "edge_features",
                message: format!("{} edge feature rows for {} edges", ef.rows(), g.edges.len()),
            });
        }
    }
    match g.target {
        Target::Node(v) if v >= n => out.push(Violation {
            field: "target",
            message: format!("target node {v} is outside 0..{n}"),
        }),
        Target::Edge(u, v) if !g.edges.contains(&(u, v)) => out.push(Violation {
            field: "target",
            message: format!("target edge ({u}, {v}) is not in the edge list"),
        }),
        _ => {}
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Everything that is not training data.
    pub fn held_out(&self) -> Vec<usize> {
        self.val.iter().chain(&self.test).copied().collect()
    }
}

/// Which part of a dataset to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: String,
    pub task: TaskKind,
    pub classes: usize,
    pub instances: Vec<GraphInstance>,
    pub text_embeddings: Matrix,
    pub split: Split,
}

impl DomainDataset {
    pub fn split_indices(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.split.train,
            SplitKind::Val => &self.split.val,
            SplitKind::Test => &self.split.test,
        }
    }

    pub fn text_row(&self, instance: usize) -> &[f64] {
        self.text_embeddings.row(self.instances[instance].text_index)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.instances.first().map(|g| g.node_features.cols())
    }

    pub fn text_dim(&self) -> usize {
        self.text_embeddings.cols()
    }

    /// Dataset-level invariants on top of the per-instance ones. Returns the
    /// offending instance index (or `usize::MAX` for dataset-wide problems)
    /// with each violation.
    pub fn violations(&self) -> Vec<(usize, Violation)> {
        let mut out = Vec::new();
        if self.classes == 0 {
            out.push((
                usize::MAX,
                Violation {
                    field: "classes",
                    message: "class count must be positive".into(),
                },
            ));
        }
        let dim = self.feature_dim();
        for (i, g) in self.instances.iter().enumerate() {
            out.extend(validate_graph(g).into_iter().map(|v| (i, v)));
            if g.domain != self.domain {
                out.push((
                    i,
                    Violation {
                        field: "domain",
                        message: format!("`{}` differs from dataset domain `{}`", g.domain, self.domain),
                    },
                ));
            }
            if g.target.kind() != self.task {
                out.push((
                    i,
                    Violation {
                        field: "target",
                        message: format!("{} target in a {} dataset", g.target.kind(), self.task),
                    },
                ));
            }
            if let Some(label) = g.label {
                if label >= self.classes {
                    out.push((
                        i,
                        Violation {
                            field: "label",
                            message: format!("label {label} is not below class count {}", self.classes),
                        },
                    ));
                }
            }
            if g.text_index >= self.text_embeddings.rows() {
                out.push((
                    i,
                    Violation {
                        field: "text_index",
                        message: format!(
                            "text index {} but only {} embeddings",
                            g.text_index,
                            self.text_embeddings.rows()
                        ),
                    },
                ));
            }
            if Some(g.node_features.cols()) != dim {
                out.push((
                    i,
                    Violation {
                        field: "node_features",
                        message: format!("feature width {} differs from {:?}", g.node_features.cols(), dim),
                    },
                ));
            }
        }
        let mut seen = HashSet::new();
        for &idx in self.split.train.iter().chain(&self.split.val).chain(&self.split.test) {
            if idx >= self.instances.len() {
                out.push((
                    usize::MAX,
                    Violation {
                        field: "splits",
                        message: format!("split index {idx} is outside 0..{}", self.instances.len()),
                    },
                ));
            } else if !seen.insert(idx) {
                out.push((
                    idx,
                    Violation {
                        field: "splits",
                        message: format!("instance {idx} appears in more than one split slot"),
                    },
                ));
            }
        }
        out
    }
}

/// One reference into a list of datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchItem {
    pub dataset: usize,
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Sorted, deduplicated dataset indices present in `items`.
    pub active_domains: Vec<usize>,
}

impl Batch {
    pub fn new(items: Vec<BatchItem>) -> Self {
        let mut active: Vec<usize> = items.iter().map(|it| it.dataset).collect();
        active.sort_unstable();
        active.dedup();
        Batch {
            items,
            active_domains: active,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn valid_instance_has_no_violations() {
        assert!(validate_graph(&tiny_instance("a", Target::Node(2), None, 0)).is_empty());
        assert!(validate_graph(&tiny_instance("a", Target::Edge(1, 2), None, 0)).is_empty());
    }

    #[test]
    fn node_target_at_node_count_is_one_violation() {
        let v = validate_graph(&tiny_instance("a", Target::Node(3), None, 0));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "target");
    }

    #[test]
    fn missing_target_edge_is_one_violation() {
        let v = validate_graph(&tiny_instance("a", Target::Edge(0, 2), None, 0));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "target");
    }

    #[test]
    fn all_violations_are_reported() {
        let mut g = tiny_instance("a", Target::Node(7), None, 0);
        g.edges.push((0, 9));
        g.edge_features = Some(Matrix::zeros(1, 1));
        let fields: Vec<_> = validate_graph(&g).into_iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["edges", "edge_features", "target"]);
    }

    #[test]
    fn dataset_checks_labels_and_text_rows() {
        let mut ds = tiny_dataset("a", 4);
        ds.instances[1].label = Some(2);
        ds.instances[3].text_index = 4;
        let found: Vec<_> = ds.violations().into_iter().map(|(i, v)| (i, v.field)).collect();
        assert_eq!(found, vec![(1, "label"), (3, "text_index")]);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut ds = tiny_dataset("a", 4);
        ds.split.val = vec![0];
        assert!(ds.violations().iter().any(|(_, v)| v.field == "splits"));
    }

    #[test]
    fn batch_active_domains_sorted_unique() {
        let b = Batch::new(vec![
            BatchItem {
                dataset: 2,
                instance: 0,
            },
            BatchItem {
                dataset: 0,
                instance: 1,
            },
            BatchItem {
                dataset: 2,
                instance: 3,
            },
        ]);
        assert_eq!(b.active_domains, vec![0, 2]);
    }
}
