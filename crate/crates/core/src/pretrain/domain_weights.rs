use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::DomainDataset;
use crate::numcore::{dot, l2_norm, Matrix, NORM_FLOOR};

/// Per-domain means of raw graph features and raw text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCenters {
    pub domains: Vec<String>,
    pub graph: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub sampled: Vec<usize>,
}

/// Samples `min(cap, |train|)` training instances per domain without
/// replacement. The graph center averages each instance's mean node row.
pub fn compute_domain_centers<R: Rng + ?Sized>(
    datasets: &[DomainDataset],
    cap: usize,
    rng: &mut R,
) -> Result<DomainCenters> {
    if cap == 0 {
        return Err(Error::InvalidParameter("center sample cap must be at least 1".into()));
    }
    let mut out = DomainCenters {
        domains: Vec::new(),
        graph: Vec::new(),
        text: Vec::new(),
        sampled: Vec::new(),
    };
    for ds in datasets {
        let pool = &ds.split.train;
        if pool.is_empty() {
            return Err(Error::EmptyData(format!(
                "domain `{}` has no training instances",
                ds.domain
            )));
        }
        let take = cap.min(pool.len());
        let mut picked: Vec<usize> = sample(rng, pool.len(), take).into_iter().map(|k| pool[k]).collect();
        picked.sort_unstable();
        let feature_dim = ds.instances[picked[0]].node_features.cols();
        let mut g = vec![0.0; feature_dim];
        let mut t = vec![0.0; ds.text_dim()];
        for &i in &picked {
            let inst = &ds.instances[i];
            for (a, m) in g.iter_mut().zip(inst.node_features.column_means()) {
                *a += m;
            }
            for (a, &v) in t.iter_mut().zip(ds.text_row(i)) {
                *a += v;
            }
        }
        let n = take as f64;
        g.iter_mut().for_each(|v| *v /= n);
        t.iter_mut().for_each(|v| *v /= n);
        out.domains.push(ds.domain.clone());
        out.graph.push(g);
        out.text.push(t);
        out.sampled.push(take);
    }
    Ok(out)
}

fn normalized_distances(centers: &[Vec<f64>], names: &[String]) -> Result<Matrix> {
    let k = centers.len();
    let mut norms = Vec::with_capacity(k);
    for (c, name) in centers.iter().zip(names) {
        let n = l2_norm(c);
        if !(n > NORM_FLOOR) {
            return Err(Error::Degenerate {
                what: "domain center",
                index: name.clone(),
            });
        }
        norms.push(n);
    }
    let mut m = Matrix::zeros(k, k);
    let mut max = 0.0f64;
    for a in 0..k {
        for b in a + 1..k {
            let cos = dot(&centers[a], &centers[b]) / (norms[a] * norms[b]);
            let dist = (1.0 - cos).max(0.0);
            m.set(a, b, dist);
            m.set(b, a, dist);
            max = max.max(dist);
        }
    }
    if max < NORM_FLOOR {
        return Ok(Matrix::zeros(k, k));
    }
    m.as_mut_slice().iter_mut().for_each(|v| *v /= max);
    Ok(m)
}

/// Cosine distances between centers, each matrix scaled by its own maximum.
pub fn domain_distance_matrix(centers: &DomainCenters) -> Result<(Matrix, Matrix)> {
    if centers.domains.is_empty() {
        return Err(Error::EmptyData("no domain centers".into()));
    }
    Ok((
        normalized_distances(&centers.graph, &centers.domains)?,
        normalized_distances(&centers.text, &centers.domains)?,
    ))
}

/// `W = 1 + M`, entrywise.
pub fn domain_weight_matrix(m_graph: &Matrix, m_text: &Matrix) -> Result<(Matrix, Matrix)> {
    let lift = |m: &Matrix| -> Result<Matrix> {
        if let Some(v) = m.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("distance entry {v} outside [0, 1]")));
        }
        Ok(m.map(|v| 1.0 + v))
    };
    Ok((lift(m_graph)?, lift(m_text)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeightMatrix {
    pub domains: Vec<String>,
    pub m_graph: Matrix,
    pub m_text: Matrix,
    pub w_graph: Matrix,
    pub w_text: Matrix,
}

impl DomainWeightMatrix {
    pub fn from_centers(centers: &DomainCenters) -> Result<Self> {
        let (m_graph, m_text) = domain_distance_matrix(centers)?;
        let (w_graph, w_text) = domain_weight_matrix(&m_graph, &m_text)?;
        Ok(DomainWeightMatrix {
            domains: centers.domains.clone(),
            m_graph,
            m_text,
            w_graph,
            w_text,
        })
    }

    /// All-ones weights, which reduce the loss to plain symmetric InfoNCE.
    pub fn uniform(domains: Vec<String>) -> Self {
        let k = domains.len();
        DomainWeightMatrix {
            domains,
            m_graph: Matrix::zeros(k, k),
            m_text: Matrix::zeros(k, k),
            w_graph: Matrix::filled(k, k, 1.0),
            w_text: Matrix::filled(k, k, 1.0),
        }
    }

    pub fn index_of(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }
}
