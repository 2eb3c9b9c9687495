//! Finite-difference audit of every hand-written backward pass.
//!
//! Each trial draws a small random configuration and compares analytic
//! gradients against central differences for the encoder, the contrastive
//! loss and the weighted alignment objective.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::align::{accumulate_projector_gradient, instance_loss_from_repr, FrozenHead, Projector};
use crate::encoder::{EncoderDims, GraphInput, MultiScaleEncoder};
use crate::error::{Error, Result};
use crate::graphdata::{Target, TaskKind};
use crate::numcore::{finite_difference_gradient_o4, max_relative_error, softmax_with_temperature, Matrix, ParamSet};
use crate::pretrain::{dr_clip_loss, DomainCenters, DomainWeightMatrix};
use crate::seeding;

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Denominator floor for relative errors. Rounding noise of the stencil is
/// about `ε·|f|/h ≈ 1e-11`, so entries whose true value is zero still
/// score well inside the tolerance.
pub const GRADCHECK_FLOOR: f64 = 1e-5;
pub const DEFAULT_TRIALS: usize = 24;
pub const GRADCHECK_STEP: f64 = 2e-4;
/// ReLU inputs closer to zero than this trigger a redraw.
const KINK_MARGIN: f64 = 1e-2;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Encoder,
    Contrastive,
    Objective,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Encoder => "encoder",
            CheckKind::Contrastive => "contrastive",
            CheckKind::Objective => "objective",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub trial: usize,
    pub check: CheckKind,
    pub task: TaskKind,
    pub nodes: usize,
    pub dim: usize,
    pub batch: usize,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error <= self.tolerance)
    }

    /// Worst error per check kind.
    pub fn summary(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            let e = out.entry(r.check.to_string()).or_insert(0.0f64);
            *e = e.max(r.max_rel_error);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>5}  {:<11}  {:<5}  {:>5}  {:>3}  {:>5}  {:>7}  {:>12}  {:>12}\n",
            "trial", "check", "task", "nodes", "dim", "batch", "scalars", "max_rel_err", "max_abs_err"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>5}  {:<11}  {:<5}  {:>5}  {:>3}  {:>5}  {:>7}  {:>12.3e}  {:>12.3e}\n",
                r.trial,
                r.check.to_string(),
                r.task.to_string(),
                r.nodes,
                r.dim,
                r.batch,
                r.scalars,
                r.max_rel_error,
                r.max_abs_error
            ));
        }
        s
    }
}

/// `(max relative, max absolute)` discrepancy between two gradients.
fn discrepancy(analytic: &ParamSet, numeric: &ParamSet) -> Result<(f64, f64)> {
    let rel = max_relative_error(analytic, numeric, GRADCHECK_FLOOR)?;
    let abs = analytic
        .values()
        .iter()
        .zip(numeric.values())
        .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok((rel, abs))
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    pairs.shuffle(rng);
    let keep = rng.gen_range(0..=pairs.len());
    let mut edges = Vec::new();
    for &(u, v) in &pairs[..keep] {
        edges.push((u, v));
        edges.push((v, u));
    }
    edges
}

fn random_target(rng: &mut ChaCha8Rng, task: TaskKind, n: usize) -> Target {
    match task {
        TaskKind::Node => Target::Node(rng.gen_range(0..n)),
        TaskKind::Edge => {
            let u = rng.gen_range(0..n);
            let v = (u + rng.gen_range(1..n)) % n;
            Target::Edge(u, v)
        }
        TaskKind::Graph => Target::Graph,
    }
}

struct SmallGraph {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    target: Target,
}

impl SmallGraph {
    fn input(&self) -> GraphInput<'_> {
        GraphInput {
            task: self.target.kind(),
            features: &self.features,
            edges: &self.edges,
            target: self.target,
        }
    }
}

/// Draws graphs until every ReLU input sits clear of its kink.
fn draw_graph(rng: &mut ChaCha8Rng, enc: &MultiScaleEncoder, task: TaskKind, n: usize) -> Result<SmallGraph> {
    for _ in 0..MAX_REDRAWS {
        let g = SmallGraph {
            features: normal_matrix(rng, n, enc.dims().input_dim),
            edges: random_edges(rng, n),
            target: random_target(rng, task, n),
        };
        let (_, cache) = enc.task_representation(&g.input())?;
        if cache.relu_margin().is_none_or(|m| m > KINK_MARGIN) {
            return Ok(g);
        }
    }
    Err(Error::contract("could not draw a graph away from ReLU kinks"))
}

fn encoder_check(rng: &mut ChaCha8Rng, trial: usize, task: TaskKind) -> Result<GradcheckRow> {
    let n = rng.gen_range(2..=6);
    let dims = EncoderDims {
        input_dim: rng.gen_range(1..=8),
        hidden_dim: rng.gen_range(1..=8),
        layers: rng.gen_range(1..=3),
    };
    let enc = MultiScaleEncoder::new(dims, rng.gen())?;
    let g = draw_graph(rng, &enc, task, n)?;
    let upstream: Vec<f64> = (0..dims.hidden_dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let input = g.input();
    let (_, cache) = enc.task_representation(&input)?;
    let analytic = enc.backward(&cache, &upstream)?;
    let project = |x: &[f64]| x.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>();

    let numeric = finite_difference_gradient_o4(
        |p| {
            let e = MultiScaleEncoder::from_params(dims, p.clone())?;
            Ok(project(&e.task_representation(&input)?.0))
        },
        enc.params(),
        GRADCHECK_STEP,
    )?;
    let (mut rel, mut abs) = discrepancy(&analytic.params, &numeric)?;

    let mut feats = ParamSet::new();
    feats.push("features", g.features.clone())?;
    let numeric_x = finite_difference_gradient_o4(
        |p| {
            let moved = GraphInput {
                features: p.at(0),
                ..input
            };
            Ok(project(&enc.task_representation(&moved)?.0))
        },
        &feats,
        GRADCHECK_STEP,
    )?;
    let mut ax = ParamSet::new();
    ax.push("features", analytic.features)?;
    let (rel_x, abs_x) = discrepancy(&ax, &numeric_x)?;
    rel = rel.max(rel_x);
    abs = abs.max(abs_x);

    Ok(GradcheckRow {
        trial,
        check: CheckKind::Encoder,
        task,
        nodes: n,
        dim: dims.hidden_dim,
        batch: 1,
        scalars: enc.params().scalar_count() + feats.scalar_count(),
        max_rel_error: rel,
        max_abs_error: abs,
    })
}

fn random_weights(rng: &mut ChaCha8Rng, domains: usize, dim: usize) -> Result<DomainWeightMatrix> {
    let center = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let centers = DomainCenters {
        domains: (0..domains).map(|d| format!("d{d}")).collect(),
        graph: (0..domains).map(|_| center(rng)).collect(),
        text: (0..domains).map(|_| center(rng)).collect(),
        sampled: vec![1; domains],
    };
    DomainWeightMatrix::from_centers(&centers)
}

fn contrastive_check(rng: &mut ChaCha8Rng, trial: usize, task: TaskKind) -> Result<GradcheckRow> {
    let n = rng.gen_range(1..=8);
    let d = rng.gen_range(2..=8);
    let k = rng.gen_range(1..=3);
    let w = random_weights(rng, k, d)?;
    let domains: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let temperature = rng.gen_range(0.1..2.0);
    let mut reps = ParamSet::new();
    reps.push("graphs", normal_matrix(rng, n, d))?;
    reps.push("texts", normal_matrix(rng, n, d))?;
    let loss = |p: &ParamSet| dr_clip_loss(p.at(0), p.at(1), &domains, &w.w_graph, &w.w_text, temperature);

    let out = loss(&reps)?;
    let mut analytic = ParamSet::new();
    analytic.push("graphs", out.grad_graph)?;
    analytic.push("texts", out.grad_text)?;
    let numeric = finite_difference_gradient_o4(|p| Ok(loss(p)?.loss), &reps, GRADCHECK_STEP)?;
    let (rel, abs) = discrepancy(&analytic, &numeric)?;
    Ok(GradcheckRow {
        trial,
        check: CheckKind::Contrastive,
        task,
        nodes: 0,
        dim: d,
        batch: n,
        scalars: reps.scalar_count(),
        max_rel_error: rel,
        max_abs_error: abs,
    })
}

/// `Σ_d w_d · mean_{i∈d} ℓ_i(θ)` with the weights held constant, the
/// quantity a curriculum step descends.
fn objective_check(rng: &mut ChaCha8Rng, trial: usize, task: TaskKind) -> Result<GradcheckRow> {
    let n = rng.gen_range(2..=6);
    let dims = EncoderDims {
        input_dim: rng.gen_range(1..=8),
        hidden_dim: rng.gen_range(1..=8),
        layers: rng.gen_range(1..=2),
    };
    let enc = MultiScaleEncoder::new(dims, rng.gen())?;
    let tokens = rng.gen_range(1..=3);
    let token_dim = rng.gen_range(1..=8);
    let domain_count = rng.gen_range(1..=3);
    let classes: Vec<(String, usize)> = (0..domain_count)
        .map(|d| (format!("d{d}"), rng.gen_range(2..=4)))
        .collect();
    let head = FrozenHead::new(rng.gen(), tokens, token_dim, &classes)?;
    let projector = Projector::new(dims.hidden_dim, tokens, token_dim, rng.gen())?;

    let batch = rng.gen_range(1..=8);
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let g = draw_graph(rng, &enc, task, n)?;
        let x = enc.task_representation(&g.input())?.0;
        let d = rng.gen_range(0..domain_count);
        items.push((x, d, rng.gen_range(0..classes[d].1)));
    }
    let mut counts = vec![0usize; domain_count];
    for &(_, d, _) in &items {
        counts[d] += 1;
    }
    let scores: Vec<f64> = (0..domain_count).map(|_| rng.gen_range(0.0..2.0)).collect();
    let weights = softmax_with_temperature(&scores, 1.0)?;
    let scale = |d: usize| weights[d] / counts[d] as f64;

    let mut analytic = projector.params().zeros_like();
    for (x, d, label) in &items {
        let (_, cache) = instance_loss_from_repr(x, *label, *d, &projector, &head)?;
        accumulate_projector_gradient(&cache, &head, scale(*d), &mut analytic)?;
    }
    let numeric = finite_difference_gradient_o4(
        |p| {
            let proj = Projector::from_params(tokens, token_dim, p.clone())?;
            items.iter().try_fold(0.0, |acc, (x, d, label)| {
                Ok(acc + scale(*d) * instance_loss_from_repr(x, *label, *d, &proj, &head)?.0)
            })
        },
        projector.params(),
        GRADCHECK_STEP,
    )?;
    let (rel, abs) = discrepancy(&analytic, &numeric)?;
    Ok(GradcheckRow {
        trial,
        check: CheckKind::Objective,
        task,
        nodes: n,
        dim: dims.hidden_dim,
        batch,
        scalars: projector.params().scalar_count(),
        max_rel_error: rel,
        max_abs_error: abs,
    })
}

/// Runs `trials` random configurations, cycling node, edge and graph tasks.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("gradcheck needs at least one trial".into()));
    }
    let tasks = [TaskKind::Node, TaskKind::Edge, TaskKind::Graph];
    let mut rows = Vec::with_capacity(3 * trials);
    for trial in 0..trials {
        let task = tasks[trial % 3];
        let mut rng = seeding::stream(seeding::derive(seed, "gradcheck"), &format!("trial-{trial}"));
        rows.push(encoder_check(&mut rng, trial, task)?);
        rows.push(contrastive_check(&mut rng, trial, task)?);
        rows.push(objective_check(&mut rng, trial, task)?);
    }
    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        rows,
    })
}
