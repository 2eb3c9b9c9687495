use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, normalize_rows, normalize_rows_backward, Matrix, ParamSet, Scalar};
use crate::seeding;

/// Loss value, its two directional halves, and gradients for both inputs.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T: Scalar = f64> {
    pub loss: T,
    pub graph_to_text: T,
    pub text_to_graph: T,
    pub grad_graph: Matrix<T>,
    pub grad_text: Matrix<T>,
}

fn check_weights<T: Scalar>(w: &Matrix<T>, domains: &[usize], which: &str) -> Result<()> {
    if w.rows() != w.cols() {
        return Err(Error::contract(format!(
            "{which} weight matrix is not square: {:?}",
            w.shape()
        )));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= w.rows()) {
        return Err(Error::contract(format!(
            "domain id {d} not present in the {}-domain {which} weight matrix",
            w.rows()
        )));
    }
    if w.as_slice().iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::contract(format!("{which} weights must be positive and finite")));
    }
    Ok(())
}

/// One direction: rows of `s` are anchors, `s[i][i]` the positive, and
/// negative `j` scaled by `w[d_i][d_j]`. Returns the mean loss and adds
/// `scale · dL/ds` into `grad`, transposed when `transpose` is set.
fn directional<T: Scalar>(
    s: &Matrix<T>,
    transpose: bool,
    domains: &[usize],
    w: &Matrix<T>,
    scale: T,
    grad: &mut Matrix<T>,
) -> T {
    let n = domains.len();
    let inv_n = T::one() / T::from_usize(n);
    let mut total = T::zero();
    let mut logits = vec![T::zero(); n];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            let sim = if transpose { s.get(j, i) } else { s.get(i, j) };
            *l = if j == i {
                sim
            } else {
                sim + w.get(domains[i], domains[j]).ln()
            };
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[i];
        for (j, &l) in logits.iter().enumerate() {
            let mut g = (l - lse).exp();
            if j == i {
                g -= T::one();
            }
            let g = g * inv_n * scale;
            if transpose {
                grad.set(j, i, grad.get(j, i) + g);
            } else {
                grad.set(i, j, grad.get(i, j) + g);
            }
        }
    }
    total * inv_n
}

/// Domain-reweighted symmetric contrastive loss over paired rows of
/// `graphs` and `texts`.
///
/// Similarities are cosines divided by `temperature`. Each negative pair
/// `(i, j)` enters the graph-to-text denominator scaled by
/// `w_graph[d_i][d_j]` and the text-to-graph one by `w_text[d_i][d_j]`;
/// the result is the mean of both directions.
pub fn dr_clip_loss<T: Scalar>(
    graphs: &Matrix<T>,
    texts: &Matrix<T>,
    domains: &[usize],
    w_graph: &Matrix<T>,
    w_text: &Matrix<T>,
    temperature: T,
) -> Result<ContrastiveOutput<T>> {
    let n = graphs.rows();
    if n == 0 {
        return Err(Error::EmptyData("contrastive loss of an empty batch".into()));
    }
    if texts.shape() != graphs.shape() || domains.len() != n {
        return Err(Error::Dimension {
            op: "dr_clip_loss",
            left: graphs.shape(),
            right: (texts.rows().min(domains.len()), texts.cols()),
        });
    }
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_weights(w_graph, domains, "graph")?;
    check_weights(w_text, domains, "text")?;

    let (gu, g_norms) = normalize_rows(graphs, "graph representation")?;
    let (tu, t_norms) = normalize_rows(texts, "text representation")?;
    let mut s = gu.matmul_t(&tu)?;
    s.scale(T::one() / temperature);

    let half = T::lit(0.5);
    let mut d_s = Matrix::zeros(n, n);
    let g2t = directional(&s, false, domains, w_graph, half, &mut d_s);
    let t2g = directional(&s, true, domains, w_text, half, &mut d_s);

    d_s.scale(T::one() / temperature);
    let d_gu = d_s.matmul(&tu)?;
    let d_tu = d_s.t_matmul(&gu)?;
    Ok(ContrastiveOutput {
        loss: half * (g2t + t2g),
        graph_to_text: g2t,
        text_to_graph: t2g,
        grad_graph: normalize_rows_backward(&gu, &g_norms, &d_gu),
        grad_text: normalize_rows_backward(&tu, &t_norms, &d_tu),
    })
}

/// Trainable linear map from text-embedding width to encoder width.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAdapter<T: Scalar = f64> {
    params: ParamSet<T>,
}

impl<T: Scalar> TextAdapter<T> {
    pub fn new(text_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if text_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidParameter("adapter widths must be positive".into()));
        }
        let mut rng = seeding::stream(seed, "adapter-init");
        let bound = 1.0 / (text_dim as f64).sqrt();
        let mut draw = |len: usize| -> Vec<T> { (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect() };
        let mut params = ParamSet::new();
        params.push(
            "weight",
            Matrix::from_vec(text_dim, hidden_dim, draw(text_dim * hidden_dim))?,
        )?;
        params.push("bias", Matrix::from_vec(1, hidden_dim, draw(hidden_dim))?)?;
        Ok(TextAdapter { params })
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let ok = params.names() == ["weight", "bias"]
            && params.at(1).rows() == 1
            && params.at(1).cols() == params.at(0).cols();
        if !ok {
            return Err(Error::contract(
                "adapter needs `weight` (in × out) and `bias` (1 × out)",
            ));
        }
        Ok(TextAdapter { params })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn text_dim(&self) -> usize {
        self.params.at(0).rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.at(0).cols()
    }

    pub fn forward(&self, texts: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = texts.matmul(self.params.at(0))?;
        let bias = self.params.at(1).as_slice();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Parameter gradients for upstream `dL/d(forward(texts))`.
    pub fn backward(&self, texts: &Matrix<T>, upstream: &Matrix<T>) -> Result<ParamSet<T>> {
        let mut grads = self.params.zeros_like();
        *grads.at_mut(0) = texts.t_matmul(upstream)?;
        *grads.at_mut(1) = upstream.column_sums();
        Ok(grads)
    }
}
