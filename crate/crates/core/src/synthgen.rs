//! Seeded multi-domain synthetic graph-text data.
//!
//! Every class gets a unit prototype in feature space and another in text
//! space. Graphs are noisy copies of their class's feature prototype on a
//! random sparse connected topology; text rows are noisy copies of the text
//! prototype. Text noise and label noise control how hard a domain is to align.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{write_dataset, DomainDataset, GraphInstance, Split, Target, TaskKind};
use crate::numcore::Matrix;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: String,
    pub task: TaskKind,
    pub num_instances: usize,
    pub classes: usize,
    /// Inclusive node-count range per graph.
    pub nodes: (usize, usize),
    pub feature_dim: usize,
    pub text_dim: usize,
    pub feature_noise: f64,
    pub text_noise: f64,
    pub label_noise: f64,
    /// Train and validation shares; the rest is test.
    pub split: (f64, f64),
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("domain `{}`: {m}", self.domain)));
        if self.classes < 2 {
            return bad(format!("needs at least 2 classes, got {}", self.classes));
        }
        if self.num_instances == 0 {
            return bad("needs at least one instance".into());
        }
        let (lo, hi) = self.nodes;
        let min_nodes = if self.task == TaskKind::Edge { 2 } else { 1 };
        if lo < min_nodes || lo > hi {
            return bad(format!("invalid node range {lo}..={hi}"));
        }
        if self.feature_dim == 0 || self.text_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        for (name, v) in [("feature noise", self.feature_noise), ("text noise", self.text_noise)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label noise rate {} outside [0, 1]", self.label_noise));
        }
        let (tr, va) = self.split;
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return bad(format!("split shares ({tr}, {va}) do not fit in [0, 1]"));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `proto + N(0, σ²/dim)` per coordinate, so the noise vector has norm about σ.
fn noisy(rng: &mut ChaCha8Rng, proto: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return proto.to_vec();
    }
    let s = sigma / (proto.len() as f64).sqrt();
    proto
        .iter()
        .map(|&p| p + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Random recursive tree plus `n / 2` extra distinct edges, both directions listed.
fn random_topology(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut undirected = BTreeSet::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        undirected.insert((u, v));
    }
    let max_edges = n * (n - 1) / 2;
    let target = (undirected.len() + n / 2).min(max_edges);
    while undirected.len() < target {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            undirected.insert((a.min(b), a.max(b)));
        }
    }
    undirected.into_iter().flat_map(|(u, v)| [(u, v), (v, u)]).collect()
}

pub fn generate_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut proto_rng = seeding::stream(spec.seed, "prototypes");
    let feature_protos: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| unit_vector(&mut proto_rng, spec.feature_dim))
        .collect();
    let text_protos: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| unit_vector(&mut proto_rng, spec.text_dim))
        .collect();

    let mut rng = seeding::stream(spec.seed, "instances");
    let mut instances = Vec::with_capacity(spec.num_instances);
    let mut text = Vec::with_capacity(spec.num_instances * spec.text_dim);
    for i in 0..spec.num_instances {
        let class = i % spec.classes;
        let n = rng.gen_range(spec.nodes.0..=spec.nodes.1);
        let edges = random_topology(&mut rng, n);
        let mut features = Vec::with_capacity(n * spec.feature_dim);
        for _ in 0..n {
            features.extend(noisy(&mut rng, &feature_protos[class], spec.feature_noise));
        }
        // stored as f32 on disk, so round now to keep memory and disk identical
        text.extend(
            noisy(&mut rng, &text_protos[class], spec.text_noise)
                .into_iter()
                .map(|v| v as f32 as f64),
        );
        let label = if rng.gen_bool(spec.label_noise) {
            let other = rng.gen_range(0..spec.classes - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        let target = match spec.task {
            TaskKind::Node => Target::Node(rng.gen_range(0..n)),
            TaskKind::Edge => {
                let (u, v) = edges[rng.gen_range(0..edges.len())];
                Target::Edge(u, v)
            }
            TaskKind::Graph => Target::Graph,
        };
        instances.push(GraphInstance {
            num_nodes: n,
            edges,
            node_features: Matrix::from_vec(n, spec.feature_dim, features)?,
            edge_features: None,
            target,
            label: Some(label),
            text_index: i,
            domain: spec.domain.clone(),
        });
    }

    let mut order: Vec<usize> = (0..spec.num_instances).collect();
    order.shuffle(&mut seeding::stream(spec.seed, "split"));
    let n_train = (spec.split.0 * spec.num_instances as f64).round() as usize;
    let n_val = ((spec.split.1 * spec.num_instances as f64).round() as usize).min(spec.num_instances - n_train);
    let part = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    let split = Split {
        train: part(0..n_train),
        val: part(n_train..n_train + n_val),
        test: part(n_train + n_val..spec.num_instances),
    };

    Ok(DomainDataset {
        domain: spec.domain.clone(),
        task: spec.task,
        classes: spec.classes,
        instances,
        text_embeddings: Matrix::from_vec(spec.num_instances, spec.text_dim, text)?,
        split,
    })
}

pub const SUITE_FEATURE_DIM: usize = 16;
pub const SUITE_TEXT_DIM: usize = 24;
pub const SUITE_INSTANCES: usize = 200;
pub const SUITE_CLASSES: usize = 20;

/// Names of the three node-task domains, easiest first.
pub const SUITE_NODE_DOMAINS: [&str; 3] = ["easy", "mid", "hard"];

fn suite_spec(
    master_seed: u64,
    domain: &str,
    task: TaskKind,
    classes: usize,
    text_noise: f64,
    label_noise: f64,
) -> DomainSpec {
    DomainSpec {
        domain: domain.to_string(),
        task,
        num_instances: SUITE_INSTANCES,
        classes,
        nodes: (4, 10),
        feature_dim: SUITE_FEATURE_DIM,
        text_dim: SUITE_TEXT_DIM,
        feature_noise: 0.3,
        text_noise,
        label_noise,
        split: (0.5, 0.2),
        seed: seeding::derive(master_seed, domain),
    }
}

/// The fixed acceptance suite: three node domains of increasing difficulty,
/// then one edge-task and one graph-task domain.
pub fn benchmark_suite_specs(master_seed: u64) -> Vec<DomainSpec> {
    vec![
        suite_spec(master_seed, "easy", TaskKind::Node, SUITE_CLASSES, 0.05, 0.0),
        suite_spec(master_seed, "mid", TaskKind::Node, SUITE_CLASSES, 0.3, 0.1),
        suite_spec(master_seed, "hard", TaskKind::Node, SUITE_CLASSES, 0.6, 0.3),
        suite_spec(master_seed, "edges", TaskKind::Edge, 4, 0.2, 0.05),
        suite_spec(master_seed, "graphs", TaskKind::Graph, 4, 0.2, 0.05),
    ]
}

pub fn generate_suite(master_seed: u64) -> Result<Vec<DomainDataset>> {
    benchmark_suite_specs(master_seed)
        .par_iter()
        .map(generate_domain)
        .collect()
}

/// Writes the acceptance suite into `out_dir`, returning `(graphs, embeddings)` paths.
pub fn generate_benchmark_suite(out_dir: &Path, master_seed: u64) -> Result<Vec<(PathBuf, PathBuf)>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    generate_suite(master_seed)?
        .iter()
        .map(|ds| write_dataset(ds, out_dir))
        .collect()
}

/// Mean same-class text cosine minus mean cross-class text cosine.
///
/// Classes follow the generator's round-robin order. Shrinks toward zero
/// as text noise washes out the class structure.
pub fn text_class_margin(ds: &DomainDataset) -> Result<f64> {
    let labels: Vec<usize> = (0..ds.instances.len()).map(|i| i % ds.classes).collect();
    let t = &ds.text_embeddings;
    let rows: Vec<usize> = ds.instances.iter().map(|g| g.text_index).collect();
    let sub = Matrix::from_rows(&rows.iter().map(|&r| t.row(r).to_vec()).collect::<Vec<_>>())?;
    let s = crate::numcore::row_cosine_similarity(&sub, &sub)?;
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same += s.get(i, j);
                ns += 1;
            } else {
                diff += s.get(i, j);
                nd += 1;
            }
        }
    }
    if ns == 0 || nd == 0 {
        return Err(Error::EmptyData("margin needs same-class and cross-class pairs".into()));
    }
    Ok(same / ns as f64 - diff / nd as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::validate_graph;

    fn spec(task: TaskKind) -> DomainSpec {
        DomainSpec {
            domain: "t".into(),
            task,
            num_instances: 100,
            classes: 2,
            nodes: (3, 8),
            feature_dim: 4,
            text_dim: 5,
            feature_noise: 0.2,
            text_noise: 0.2,
            label_noise: 0.0,
            split: (0.5, 0.2),
            seed: 17,
        }
    }

    #[test]
    fn zero_noise_rows_equal_the_prototype() {
        let mut s = spec(TaskKind::Node);
        s.feature_noise = 0.0;
        s.text_noise = 0.0;
        let ds = generate_domain(&s).unwrap();
        for class in 0..2 {
            let members: Vec<_> = ds.instances.iter().filter(|g| g.label == Some(class)).collect();
            let first = members[0].node_features.row(0).to_vec();
            let norm: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for g in members {
                for row in g.node_features.iter_rows() {
                    assert_eq!(row, first.as_slice());
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let s = spec(TaskKind::Edge);
        assert_eq!(generate_domain(&s).unwrap(), generate_domain(&s).unwrap());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate_domain(&s).unwrap(), generate_domain(&other).unwrap());
    }

    #[test]
    fn round_robin_balance() {
        let ds = generate_domain(&spec(TaskKind::Graph)).unwrap();
        let ones = ds.instances.iter().filter(|g| g.label == Some(1)).count();
        assert_eq!(ones, 50);
    }

    fn connected(g: &GraphInstance) -> bool {
        let mut seen = vec![false; g.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(a, b) in &g.edges {
                if a == u && !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn graphs_are_connected_symmetric_and_valid() {
        for task in [TaskKind::Node, TaskKind::Edge, TaskKind::Graph] {
            let ds = generate_domain(&spec(task)).unwrap();
            assert!(ds.violations().is_empty());
            for g in &ds.instances {
                assert!(validate_graph(g).is_empty());
                assert!(connected(g));
                let set: BTreeSet<_> = g.edges.iter().copied().collect();
                assert!(g.edges.iter().all(|&(u, v)| set.contains(&(v, u))));
                assert_eq!(set.len(), g.edges.len());
            }
        }
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_share() {
        let mut s = spec(TaskKind::Node);
        s.num_instances = 2000;
        s.classes = 5;
        s.label_noise = 0.3;
        let ds = generate_domain(&s).unwrap();
        let flipped = ds
            .instances
            .iter()
            .enumerate()
            .filter(|(i, g)| g.label != Some(i % 5))
            .count() as f64
            / 2000.0;
        assert!((flipped - 0.3).abs() < 0.04, "{flipped}");
    }

    #[test]
    fn split_partitions_all_instances() {
        let ds = generate_domain(&spec(TaskKind::Node)).unwrap();
        assert_eq!(
            (ds.split.train.len(), ds.split.val.len(), ds.split.test.len()),
            (50, 20, 30)
        );
        let mut all: Vec<_> = ds
            .split
            .train
            .iter()
            .chain(&ds.split.val)
            .chain(&ds.split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(TaskKind::Node);
        s.classes = 1;
        assert!(generate_domain(&s).is_err());
        let mut s = spec(TaskKind::Node);
        s.label_noise = 1.5;
        assert!(generate_domain(&s).is_err());
        let mut s = spec(TaskKind::Node);
        s.text_noise = -0.1;
        assert!(generate_domain(&s).is_err());
    }

    #[test]
    fn text_margin_shrinks_with_text_noise() {
        let margins: Vec<f64> = [0.05, 0.3, 0.6]
            .iter()
            .map(|&sigma| {
                let mut s = spec(TaskKind::Node);
                s.text_noise = sigma;
                s.text_dim = 24;
                text_class_margin(&generate_domain(&s).unwrap()).unwrap()
            })
            .collect();
        assert!(margins[0] > margins[1] && margins[1] > margins[2], "{margins:?}");
    }
}
