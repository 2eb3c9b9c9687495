//! Multi-scale message-passing encoder.
//!
//! A stack of mean-aggregation SAGE layers produces node representations;
//! mean pooling gives the graph representation. Three linear heads map
//! `[local ‖ graph]` to a `hidden_dim` vector for node, edge and whole-graph
//! targets, so every granularity lands in the same space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{GraphInstance, Target, TaskKind};
use crate::numcore::{affine, affine_backward, Matrix, ParamSet, Scalar};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "encoder needs at least one layer and positive widths, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Borrowed view of one graph, detached from the dataset's `f64` storage.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a, T: Scalar = f64> {
    pub task: TaskKind,
    pub features: &'a Matrix<T>,
    pub edges: &'a [(usize, usize)],
    pub target: Target,
}

impl GraphInstance {
    pub fn input(&self) -> GraphInput<'_, f64> {
        GraphInput {
            task: self.target.kind(),
            features: &self.node_features,
            edges: &self.edges,
            target: self.target,
        }
    }
}

/// One layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a, T: Scalar> {
    pub w_self: &'a Matrix<T>,
    pub w_neigh: &'a Matrix<T>,
    pub bias: &'a Matrix<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Matrix<T>,
    neighbor_mean: Matrix<T>,
    pre_activation: Matrix<T>,
}

/// Intermediates from a forward pass, consumed by [`MultiScaleEncoder::backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache<T: Scalar = f64> {
    dims: EncoderDims,
    generation: u64,
    edges: Vec<(usize, usize)>,
    in_degree: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    node_repr: Matrix<T>,
    graph_repr: Vec<T>,
    head_input: Option<(Target, Vec<T>)>,
}

impl<T: Scalar> EncodeCache<T> {
    pub fn node_repr(&self) -> &Matrix<T> {
        &self.node_repr
    }

    pub fn graph_repr(&self) -> &[T] {
        &self.graph_repr
    }

    /// Smallest `|z|` over the ReLU inputs; finite differences with a step
    /// below this never cross a kink. `None` for a single-layer encoder.
    pub fn relu_margin(&self) -> Option<T> {
        let hidden = self.layers.len().saturating_sub(1);
        self.layers[..hidden]
            .iter()
            .flat_map(|l| l.pre_activation.as_slice().iter().map(|v| v.abs()))
            .reduce(|a, b| if b < a { b } else { a })
    }
}

/// Gradients produced by the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderGradients<T: Scalar = f64> {
    pub params: ParamSet<T>,
    pub features: Matrix<T>,
}

fn in_degrees(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut deg = vec![0; n];
    for &(_, v) in edges {
        deg[v] += 1;
    }
    deg
}

fn check_edges(n: usize, edges: &[(usize, usize)]) -> Result<()> {
    match edges.iter().find(|&&(u, v)| u >= n || v >= n) {
        Some(&(u, v)) => Err(Error::contract(format!("edge ({u}, {v}) outside a {n}-node graph"))),
        None => Ok(()),
    }
}

fn neighbor_mean<T: Scalar>(h: &Matrix<T>, edges: &[(usize, usize)], in_degree: &[usize]) -> Matrix<T> {
    let mut agg = Matrix::zeros(h.rows(), h.cols());
    for &(u, v) in edges {
        let src = h.row(u).to_vec();
        for (a, s) in agg.row_mut(v).iter_mut().zip(src) {
            *a += s;
        }
    }
    for (v, &deg) in in_degree.iter().enumerate() {
        if deg > 0 {
            let inv = T::from_usize(deg);
            for a in agg.row_mut(v) {
                *a /= inv;
            }
        }
    }
    agg
}

fn layer_forward<T: Scalar>(
    h: &Matrix<T>,
    edges: &[(usize, usize)],
    in_degree: &[usize],
    layer: LayerParams<'_, T>,
    last: bool,
) -> Result<(Matrix<T>, LayerCache<T>)> {
    let d_out = layer.w_self.cols();
    if h.cols() != layer.w_self.rows()
        || layer.w_neigh.shape() != layer.w_self.shape()
        || layer.bias.shape() != (1, d_out)
    {
        return Err(Error::Dimension {
            op: "sage_layer_forward",
            left: h.shape(),
            right: layer.w_self.shape(),
        });
    }
    let agg = neighbor_mean(h, edges, in_degree);
    let mut pre = h.matmul(layer.w_self)?;
    pre.add_assign(&agg.matmul(layer.w_neigh)?)?;
    for r in 0..pre.rows() {
        for (p, &b) in pre.row_mut(r).iter_mut().zip(layer.bias.as_slice()) {
            *p += b;
        }
    }
    let out = if last {
        pre.clone()
    } else {
        pre.map(|v| v.max(T::zero()))
    };
    Ok((
        out,
        LayerCache {
            input: h.clone(),
            neighbor_mean: agg,
            pre_activation: pre,
        },
    ))
}

/// `act(h·W_self + mean_in(h)·W_neigh + b)`, with ReLU unless `last`.
pub fn sage_layer_forward<T: Scalar>(
    h: &Matrix<T>,
    edges: &[(usize, usize)],
    layer: LayerParams<'_, T>,
    last: bool,
) -> Result<Matrix<T>> {
    check_edges(h.rows(), edges)?;
    let deg = in_degrees(h.rows(), edges);
    layer_forward(h, edges, &deg, layer, last).map(|(out, _)| out)
}

#[derive(Debug, Clone)]
pub struct MultiScaleEncoder<T: Scalar = f64> {
    dims: EncoderDims,
    params: ParamSet<T>,
    generation: u64,
}

const HEAD_NAMES: [&str; 3] = ["head_node", "head_edge", "head_graph"];

fn head_slot(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Node => 0,
        TaskKind::Edge => 1,
        TaskKind::Graph => 2,
    }
}

fn expected_shapes(dims: &EncoderDims) -> Vec<(String, (usize, usize))> {
    let d = dims.hidden_dim;
    let mut out = Vec::new();
    for l in 0..dims.layers {
        let fan_in = if l == 0 { dims.input_dim } else { d };
        out.push((format!("layer{l}.w_self"), (fan_in, d)));
        out.push((format!("layer{l}.w_neigh"), (fan_in, d)));
        out.push((format!("layer{l}.bias"), (1, d)));
    }
    for head in HEAD_NAMES {
        out.push((format!("{head}.weight"), (2 * d, d)));
        out.push((format!("{head}.bias"), (1, d)));
    }
    out
}

impl<T: Scalar> MultiScaleEncoder<T> {
    /// Fan-in uniform initialization, `U(−1/√fan_in, 1/√fan_in)`, from `seed`.
    pub fn new(dims: EncoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = seeding::stream(seed, "encoder-init");
        let mut params = ParamSet::new();
        for (name, (rows, cols)) in expected_shapes(&dims) {
            // biases share the fan-in of their weight
            let fan_in = match params.values().last() {
                Some(w) if name.ends_with("bias") => w.rows(),
                _ => rows,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
            params.push(name, Matrix::from_vec(rows, cols, data)?)?;
        }
        Ok(MultiScaleEncoder {
            dims,
            params,
            generation: 0,
        })
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(dims: EncoderDims, params: ParamSet<T>) -> Result<Self> {
        dims.validate()?;
        let expected = expected_shapes(&dims);
        if expected.len() != params.len() {
            return Err(Error::contract(format!(
                "encoder expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || *shape != got.shape() {
                return Err(Error::contract(format!(
                    "encoder tensor `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(MultiScaleEncoder {
            dims,
            params,
            generation: 0,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable access invalidates any outstanding [`EncodeCache`].
    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.generation += 1;
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn layer(&self, l: usize) -> LayerParams<'_, T> {
        LayerParams {
            w_self: self.params.at(3 * l),
            w_neigh: self.params.at(3 * l + 1),
            bias: self.params.at(3 * l + 2),
        }
    }

    fn head(&self, kind: TaskKind) -> (&Matrix<T>, &Matrix<T>) {
        let base = 3 * self.dims.layers + 2 * head_slot(kind);
        (self.params.at(base), self.params.at(base + 1))
    }

    /// Node representations, the mean-pooled graph representation, and the cache.
    pub fn encode_node_graph(&self, g: &GraphInput<'_, T>) -> Result<(Matrix<T>, Vec<T>, EncodeCache<T>)> {
        let n = g.features.rows();
        if n == 0 {
            return Err(Error::contract("cannot encode an empty graph"));
        }
        if g.features.cols() != self.dims.input_dim {
            return Err(Error::Dimension {
                op: "encode_node_graph",
                left: g.features.shape(),
                right: (n, self.dims.input_dim),
            });
        }
        check_edges(n, g.edges)?;
        let in_degree = in_degrees(n, g.edges);
        let mut h = g.features.clone();
        let mut layers = Vec::with_capacity(self.dims.layers);
        for l in 0..self.dims.layers {
            let (out, cache) = layer_forward(&h, g.edges, &in_degree, self.layer(l), l + 1 == self.dims.layers)?;
            layers.push(cache);
            h = out;
        }
        let graph = h.column_means();
        let cache = EncodeCache {
            dims: self.dims,
            generation: self.generation,
            edges: g.edges.to_vec(),
            in_degree,
            layers,
            node_repr: h.clone(),
            graph_repr: graph.clone(),
            head_input: None,
        };
        Ok((h, graph, cache))
    }

    /// The representation the instance's task asks for.
    pub fn task_representation(&self, g: &GraphInput<'_, T>) -> Result<(Vec<T>, EncodeCache<T>)> {
        if g.target.kind() != g.task {
            return Err(Error::contract(format!(
                "{} task with a {} target",
                g.task,
                g.target.kind()
            )));
        }
        let n = g.features.rows();
        match g.target {
            Target::Node(v) if v >= n => return Err(Error::contract(format!("target node {v} outside 0..{n}"))),
            Target::Edge(u, v) if u >= n || v >= n => {
                return Err(Error::contract(format!("target edge ({u}, {v}) outside 0..{n}")))
            }
            _ => {}
        }
        let (h, graph, mut cache) = self.encode_node_graph(g)?;
        let half = T::lit(0.5);
        let local: Vec<T> = match g.target {
            Target::Node(v) => h.row(v).to_vec(),
            Target::Edge(u, v) => h.row(u).iter().zip(h.row(v)).map(|(&a, &b)| (a + b) * half).collect(),
            Target::Graph => graph.clone(),
        };
        let mut z = local;
        z.extend_from_slice(&graph);
        let (w, b) = self.head(g.task);
        let x = affine(&z, w, b);
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: "task_representation".into(),
                index,
            });
        }
        cache.head_input = Some((g.target, z));
        Ok((x, cache))
    }

    /// Exact reverse pass of [`Self::task_representation`] for upstream `dL/dX`.
    pub fn backward(&self, cache: &EncodeCache<T>, upstream: &[T]) -> Result<EncoderGradients<T>> {
        if cache.dims != self.dims || cache.generation != self.generation {
            return Err(Error::contract("encode cache is stale or from a different encoder"));
        }
        let (target, z) = cache
            .head_input
            .as_ref()
            .ok_or_else(|| Error::contract("cache has no task head; use task_representation"))?;
        let d = self.dims.hidden_dim;
        if upstream.len() != d {
            return Err(Error::Dimension {
                op: "encoder_backward",
                left: (1, upstream.len()),
                right: (1, d),
            });
        }
        let mut grads = self.params.zeros_like();
        let kind = target.kind();
        let head_base = 3 * self.dims.layers + 2 * head_slot(kind);
        let (w, _) = self.head(kind);
        let dz = {
            let (left, right) = grads.values_mut().split_at_mut(head_base + 1);
            affine_backward(z, w, upstream, &mut left[head_base], &mut right[0])
        };
        let (d_local, d_graph_head) = dz.split_at(d);

        let n = cache.node_repr.rows();
        let mut d_h = Matrix::<T>::zeros(n, d);
        let mut d_graph = d_graph_head.to_vec();
        let half = T::lit(0.5);
        match *target {
            Target::Node(v) => {
                for (a, &g) in d_h.row_mut(v).iter_mut().zip(d_local) {
                    *a += g;
                }
            }
            Target::Edge(u, v) => {
                for node in [u, v] {
                    for (a, &g) in d_h.row_mut(node).iter_mut().zip(d_local) {
                        *a += g * half;
                    }
                }
            }
            Target::Graph => {
                for (a, &g) in d_graph.iter_mut().zip(d_local) {
                    *a += g;
                }
            }
        }
        let inv_n = T::one() / T::from_usize(n);
        for r in 0..n {
            for (a, &g) in d_h.row_mut(r).iter_mut().zip(&d_graph) {
                *a += g * inv_n;
            }
        }

        for l in (0..self.dims.layers).rev() {
            let lc = &cache.layers[l];
            let mut d_pre = d_h;
            if l + 1 != self.dims.layers {
                for (g, &p) in d_pre.as_mut_slice().iter_mut().zip(lc.pre_activation.as_slice()) {
                    if !(p > T::zero()) {
                        *g = T::zero();
                    }
                }
            }
            let layer = self.layer(l);
            grads.at_mut(3 * l).add_assign(&lc.input.t_matmul(&d_pre)?)?;
            grads
                .at_mut(3 * l + 1)
                .add_assign(&lc.neighbor_mean.t_matmul(&d_pre)?)?;
            grads.at_mut(3 * l + 2).add_assign(&d_pre.column_sums())?;

            let mut d_input = d_pre.matmul_t(layer.w_self)?;
            let d_agg = d_pre.matmul_t(layer.w_neigh)?;
            for &(u, v) in &cache.edges {
                let inv = T::from_usize(cache.in_degree[v]);
                let src = d_agg.row(v).to_vec();
                for (a, s) in d_input.row_mut(u).iter_mut().zip(src) {
                    *a += s / inv;
                }
            }
            d_h = d_input;
        }

        Ok(EncoderGradients {
            params: grads,
            features: d_h,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_difference_gradient, max_relative_error, DEFAULT_FD_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_layer(ws: f64, wn: f64, b: f64) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
        (
            Matrix::filled(1, 1, ws),
            Matrix::filled(1, 1, wn),
            Matrix::filled(1, 1, b),
        )
    }

    /// One-layer, one-dimensional encoder with every weight set to `value`.
    fn scalar_encoder(value: f64) -> MultiScaleEncoder<f64> {
        let dims = EncoderDims {
            input_dim: 1,
            hidden_dim: 1,
            layers: 1,
        };
        let mut p = MultiScaleEncoder::<f64>::new(dims, 0).unwrap().into_params();
        for m in p.values_mut() {
            for v in m.as_mut_slice() {
                *v = value;
            }
        }
        // biases to zero
        for name in ["layer0.bias", "head_node.bias", "head_edge.bias", "head_graph.bias"] {
            p.get_mut(name).unwrap().scale(0.0);
        }
        MultiScaleEncoder::from_params(dims, p).unwrap()
    }

    fn two_node_input<'a>(features: &'a Matrix<f64>, edges: &'a [(usize, usize)], target: Target) -> GraphInput<'a> {
        GraphInput {
            task: target.kind(),
            features,
            edges,
            target,
        }
    }

    #[test]
    fn isolated_identity_layer_is_identity() {
        let h = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]]).unwrap();
        let (eye, zero) = (Matrix::identity(2), Matrix::zeros(1, 2));
        let layer = LayerParams {
            w_self: &eye,
            w_neigh: &eye,
            bias: &zero,
        };
        assert_eq!(sage_layer_forward(&h, &[], layer, true).unwrap(), h);
    }

    #[test]
    fn two_node_worked_example() {
        let h = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let (ws, wn, b) = scalar_layer(1.0, 1.0, 0.0);
        let layer = LayerParams {
            w_self: &ws,
            w_neigh: &wn,
            bias: &b,
        };
        let out = sage_layer_forward(&h, &[(0, 1), (1, 0)], layer, true).unwrap();
        assert_eq!(out.as_slice(), &[4.0, 4.0]);
    }

    #[test]
    fn zero_weights_zero_output() {
        let h = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let (w, b) = (Matrix::zeros(2, 3), Matrix::zeros(1, 3));
        let layer = LayerParams {
            w_self: &w,
            w_neigh: &w,
            bias: &b,
        };
        let out = sage_layer_forward(&h, &[(0, 1)], layer, false).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_rejects_wrong_width() {
        let h = Matrix::<f64>::zeros(2, 3);
        let (w, b) = (Matrix::zeros(2, 2), Matrix::zeros(1, 2));
        let layer = LayerParams {
            w_self: &w,
            w_neigh: &w,
            bias: &b,
        };
        assert!(matches!(
            sage_layer_forward(&h, &[], layer, true),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn worked_example_graph_and_node_head() {
        let enc = scalar_encoder(1.0);
        let f = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let edges = [(0, 1), (1, 0)];
        let (_, graph, _) = enc
            .encode_node_graph(&two_node_input(&f, &edges, Target::Node(0)))
            .unwrap();
        assert_eq!(graph, vec![4.0]);
        let (x, _) = enc
            .task_representation(&two_node_input(&f, &edges, Target::Node(0)))
            .unwrap();
        assert_eq!(x, vec![8.0]);
    }

    #[test]
    fn single_node_graph_pools_to_its_node() {
        let enc = MultiScaleEncoder::<f64>::new(
            EncoderDims {
                input_dim: 3,
                hidden_dim: 4,
                layers: 2,
            },
            5,
        )
        .unwrap();
        let f = Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let (h, graph, _) = enc.encode_node_graph(&two_node_input(&f, &[], Target::Graph)).unwrap();
        assert_eq!(h.row(0), graph.as_slice());
    }

    #[test]
    fn edge_representation_is_symmetric() {
        let enc = MultiScaleEncoder::<f64>::new(
            EncoderDims {
                input_dim: 2,
                hidden_dim: 3,
                layers: 2,
            },
            1,
        )
        .unwrap();
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.2, 0.7], [-1.0, 0.5]]).unwrap();
        let edges = [(0, 1), (1, 0), (1, 2), (2, 1)];
        let (a, _) = enc
            .task_representation(&two_node_input(&f, &edges, Target::Edge(1, 2)))
            .unwrap();
        let (b, _) = enc
            .task_representation(&two_node_input(&f, &edges, Target::Edge(2, 1)))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_graph_head_blocks_sum() {
        let dims = EncoderDims {
            input_dim: 2,
            hidden_dim: 2,
            layers: 1,
        };
        let mut p = MultiScaleEncoder::<f64>::new(dims, 3).unwrap().into_params();
        // head = [I/2 ; I/2], bias 0
        let w = p.get_mut("head_graph.weight").unwrap();
        *w = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5], [0.5, 0.0], [0.0, 0.5]]).unwrap();
        p.get_mut("head_graph.bias").unwrap().scale(0.0);
        let enc = MultiScaleEncoder::from_params(dims, p).unwrap();
        let f = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.25]]).unwrap();
        let edges = [(0, 1)];
        let input = two_node_input(&f, &edges, Target::Graph);
        let (x, cache) = enc.task_representation(&input).unwrap();
        for (a, b) in x.iter().zip(cache.graph_repr()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn task_target_mismatch_is_contract_error() {
        let enc = scalar_encoder(1.0);
        let f = Matrix::from_rows(&[[1.0]]).unwrap();
        let input = GraphInput {
            task: TaskKind::Edge,
            features: &f,
            edges: &[],
            target: Target::Node(0),
        };
        assert!(matches!(enc.task_representation(&input), Err(Error::Contract(_))));
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, d_in: usize) -> (Matrix<f64>, Vec<(usize, usize)>) {
        let f = Matrix::from_vec(n, d_in, (0..n * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut edges = Vec::new();
        for v in 1..n {
            let u = rng.gen_range(0..v);
            edges.push((u, v));
            edges.push((v, u));
        }
        (f, edges)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (trial, target) in [Target::Node(2), Target::Edge(0, 1), Target::Graph]
            .into_iter()
            .enumerate()
        {
            let dims = EncoderDims {
                input_dim: 3,
                hidden_dim: 4,
                layers: 2,
            };
            let enc = MultiScaleEncoder::<f64>::new(dims, trial as u64).unwrap();
            let (f, edges) = random_graph(&mut rng, 5, 3);
            let upstream: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let input = two_node_input(&f, &edges, target);
            let (_, cache) = enc.task_representation(&input).unwrap();
            let analytic = enc.backward(&cache, &upstream).unwrap();
            let numeric = finite_difference_gradient(
                |p| {
                    let e = MultiScaleEncoder::from_params(dims, p.clone())?;
                    let (x, _) = e.task_representation(&input)?;
                    Ok(x.iter().zip(&upstream).map(|(a, b)| a * b).sum())
                },
                enc.params(),
                DEFAULT_FD_EPS,
            )
            .unwrap();
            let err = max_relative_error(&analytic.params, &numeric, 1e-8).unwrap();
            assert!(err < 1e-6, "{target:?}: max relative error {err}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let enc = MultiScaleEncoder::<f64>::new(
            EncoderDims {
                input_dim: 2,
                hidden_dim: 3,
                layers: 2,
            },
            9,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, edges) = random_graph(&mut rng, 4, 2);
        let (_, cache) = enc
            .task_representation(&two_node_input(&f, &edges, Target::Node(1)))
            .unwrap();
        let g = enc.backward(&cache, &[0.0; 3]).unwrap();
        assert_eq!(g.params.l2_norm(), 0.0);
    }

    #[test]
    fn edgeless_graph_has_zero_neighbor_gradient() {
        let dims = EncoderDims {
            input_dim: 2,
            hidden_dim: 3,
            layers: 2,
        };
        let enc = MultiScaleEncoder::<f64>::new(dims, 9).unwrap();
        let f = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0], [0.0, 1.0]]).unwrap();
        let (_, cache) = enc
            .task_representation(&two_node_input(&f, &[], Target::Node(1)))
            .unwrap();
        let g = enc.backward(&cache, &[1.0, -0.5, 0.25]).unwrap();
        for l in 0..2 {
            assert_eq!(g.params.at(3 * l + 1).sum_squares(), 0.0);
        }
        assert!(g.params.at(0).sum_squares() > 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut enc = scalar_encoder(0.5);
        let f = Matrix::from_rows(&[[1.0]]).unwrap();
        let (_, cache) = enc
            .task_representation(&two_node_input(&f, &[], Target::Node(0)))
            .unwrap();
        enc.params_mut();
        assert!(matches!(enc.backward(&cache, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn node_representation_is_local() {
        // path 0-1-2-3-4; with two layers node 0 sees nodes 0..=2 only
        let dims = EncoderDims {
            input_dim: 2,
            hidden_dim: 3,
            layers: 2,
        };
        let enc = MultiScaleEncoder::<f64>::new(dims, 4).unwrap();
        let edges: Vec<_> = (0..4).flat_map(|v| [(v, v + 1), (v + 1, v)]).collect();
        let mut f = Matrix::from_vec(5, 2, (0..10).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (h1, _, _) = enc
            .encode_node_graph(&two_node_input(&f, &edges, Target::Graph))
            .unwrap();
        f.row_mut(4).copy_from_slice(&[9.0, -9.0]);
        f.row_mut(3).copy_from_slice(&[-3.0, 7.0]);
        let (h2, _, _) = enc
            .encode_node_graph(&two_node_input(&f, &edges, Target::Graph))
            .unwrap();
        assert_eq!(h1.row(0), h2.row(0));
        assert_ne!(h1.row(2), h2.row(2));
    }

    #[test]
    fn single_precision_forward_tracks_double() {
        let dims = EncoderDims {
            input_dim: 2,
            hidden_dim: 3,
            layers: 2,
        };
        let enc64 = MultiScaleEncoder::<f64>::new(dims, 2).unwrap();
        let enc32 = MultiScaleEncoder::<f32>::from_params(dims, enc64.params().cast()).unwrap();
        let f = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let f32m = f.cast::<f32>();
        let edges = [(0, 1), (1, 0)];
        let (a, _) = enc64
            .task_representation(&two_node_input(&f, &edges, Target::Graph))
            .unwrap();
        let input32 = GraphInput {
            task: TaskKind::Graph,
            features: &f32m,
            edges: &edges,
            target: Target::Graph,
        };
        let (b, _) = enc32.task_representation(&input32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
