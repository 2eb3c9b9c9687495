use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numcore::{affine, dot, log_sum_exp, Matrix, ParamSet, Scalar};
use crate::seeding;

/// Trainable linear map from encoder space to `m` tokens of width `d_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T: Scalar = f64> {
    tokens: usize,
    token_dim: usize,
    params: ParamSet<T>,
}

impl<T: Scalar> Projector<T> {
    pub fn new(input_dim: usize, tokens: usize, token_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || tokens == 0 || token_dim == 0 {
            return Err(Error::InvalidParameter("projector widths must be positive".into()));
        }
        let out = tokens * token_dim;
        let mut rng = seeding::stream(seed, "projector-init");
        let bound = 1.0 / (input_dim as f64).sqrt();
        let mut draw = |len: usize| -> Vec<T> { (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect() };
        let mut params = ParamSet::new();
        params.push("weight", Matrix::from_vec(input_dim, out, draw(input_dim * out))?)?;
        params.push("bias", Matrix::from_vec(1, out, draw(out))?)?;
        Ok(Projector {
            tokens,
            token_dim,
            params,
        })
    }

    pub fn from_params(tokens: usize, token_dim: usize, params: ParamSet<T>) -> Result<Self> {
        let out = tokens * token_dim;
        let ok = params.names() == ["weight", "bias"]
            && params.at(0).cols() == out
            && params.at(1).shape() == (1, out)
            && out > 0;
        if !ok {
            return Err(Error::contract(format!(
                "projector needs `weight` (d × {out}) and `bias` (1 × {out})"
            )));
        }
        Ok(Projector {
            tokens,
            token_dim,
            params,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn input_dim(&self) -> usize {
        self.params.at(0).rows()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Flat `x · W + b`, tokens laid out row-major.
    pub fn project_flat(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                op: "project",
                left: (1, x.len()),
                right: self.params.at(0).shape(),
            });
        }
        Ok(affine(x, self.params.at(0), self.params.at(1)))
    }

    /// `x · W + b` reshaped into `m × d_l` tokens.
    pub fn project(&self, x: &[T]) -> Result<Matrix<T>> {
        Matrix::from_vec(self.tokens, self.token_dim, self.project_flat(x)?)
    }
}

/// Frozen per-domain pieces of the scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainHead<T: Scalar = f64> {
    pub domain: String,
    pub instruction: Vec<T>,
    /// One row per candidate label.
    pub labels: Matrix<T>,
}

impl<T: Scalar> DomainHead<T> {
    pub fn classes(&self) -> usize {
        self.labels.rows()
    }
}

/// Frozen stand-in for the language model: mixes the instruction vector and
/// graph tokens into one query, then scores each candidate label embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHead<T: Scalar = f64> {
    tokens: usize,
    token_dim: usize,
    /// `(m + 1)·d_l × d_l`; rows for the instruction come first.
    mix: Matrix<T>,
    domains: Vec<DomainHead<T>>,
}

fn gaussian<T: Scalar>(rng: &mut impl Rng, len: usize, std: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

impl<T: Scalar> FrozenHead<T> {
    /// Deterministic head for `(domain, classes)` pairs. Each domain's part
    /// depends only on `seed`, its name and its class count.
    pub fn new(seed: u64, tokens: usize, token_dim: usize, domains: &[(String, usize)]) -> Result<Self> {
        if tokens == 0 || token_dim == 0 {
            return Err(Error::InvalidParameter("head widths must be positive".into()));
        }
        let fan_in = (tokens + 1) * token_dim;
        let mix_std = 1.0 / (fan_in as f64).sqrt();
        let mix = Matrix::from_vec(
            fan_in,
            token_dim,
            gaussian(&mut seeding::stream(seed, "head/mix"), fan_in * token_dim, mix_std),
        )?;
        let mut heads = Vec::with_capacity(domains.len());
        for (name, k) in domains {
            if *k == 0 {
                return Err(Error::InvalidParameter(format!("domain `{name}` has no classes")));
            }
            let mut rng = seeding::stream(seed, &format!("head/{name}/{k}"));
            let instruction = gaussian(&mut rng, token_dim, 1.0 / (token_dim as f64).sqrt());
            let labels = Matrix::from_vec(*k, token_dim, gaussian(&mut rng, k * token_dim, 1.0))?;
            heads.push(DomainHead {
                domain: name.clone(),
                instruction,
                labels,
            });
        }
        Self::from_parts(tokens, token_dim, mix, heads)
    }

    pub fn from_parts(tokens: usize, token_dim: usize, mix: Matrix<T>, domains: Vec<DomainHead<T>>) -> Result<Self> {
        if mix.shape() != ((tokens + 1) * token_dim, token_dim) {
            return Err(Error::contract(format!(
                "mix matrix {:?} does not fit {tokens} tokens of width {token_dim}",
                mix.shape()
            )));
        }
        for (i, h) in domains.iter().enumerate() {
            if domains[..i].iter().any(|o| o.domain == h.domain) {
                return Err(Error::contract(format!("duplicate head for `{}`", h.domain)));
            }
            if h.instruction.len() != token_dim || h.labels.cols() != token_dim || h.labels.rows() == 0 {
                return Err(Error::contract(format!("head for `{}` has the wrong widths", h.domain)));
            }
        }
        Ok(FrozenHead {
            tokens,
            token_dim,
            mix,
            domains,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn domain(&self, idx: usize) -> &DomainHead<T> {
        &self.domains[idx]
    }

    pub fn domains(&self) -> &[DomainHead<T>] {
        &self.domains
    }

    pub fn index_of(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|h| h.domain == domain)
    }

    /// Every frozen tensor, in a fixed order, for hashing and checkpoints.
    pub fn to_params(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let mut push = |name: String, m: Matrix<T>| p.push(name, m).expect("domain names are unique");
        push("mix".into(), self.mix.clone());
        for h in &self.domains {
            push(format!("{}.instruction", h.domain), Matrix::row_vector(&h.instruction));
            push(format!("{}.labels", h.domain), h.labels.clone());
        }
        p
    }

    /// Inverse of [`FrozenHead::to_params`].
    pub fn from_params(tokens: usize, token_dim: usize, params: &ParamSet<T>) -> Result<Self> {
        let bad = || Error::contract("head tensors must be `mix` then `<domain>.instruction`/`<domain>.labels` pairs");
        if params.is_empty() || params.name(0) != "mix" || params.len() % 2 == 0 {
            return Err(bad());
        }
        let mut heads = Vec::with_capacity(params.len() / 2);
        for pair in 0..params.len() / 2 {
            let (i, l) = (1 + 2 * pair, 2 + 2 * pair);
            let domain = params.name(i).strip_suffix(".instruction").ok_or_else(bad)?;
            if params.name(l).strip_suffix(".labels") != Some(domain) || params.at(i).rows() != 1 {
                return Err(bad());
            }
            heads.push(DomainHead {
                domain: domain.to_string(),
                instruction: params.at(i).as_slice().to_vec(),
                labels: params.at(l).clone(),
            });
        }
        Self::from_parts(tokens, token_dim, params.at(0).clone(), heads)
    }

    /// Label logits for flat graph tokens `z` under domain `idx`.
    fn query(&self, idx: usize, z: &[T]) -> Vec<T> {
        let mut input = self.domains[idx].instruction.clone();
        input.extend_from_slice(z);
        let zero = Matrix::zeros(1, self.token_dim);
        affine(&input, &self.mix, &zero)
    }

    pub fn logits(&self, idx: usize, z: &[T]) -> Result<Vec<T>> {
        if idx >= self.domains.len() {
            return Err(Error::contract(format!("no head for domain index {idx}")));
        }
        if z.len() != self.tokens * self.token_dim {
            return Err(Error::Dimension {
                op: "head_logits",
                left: (1, z.len()),
                right: (self.tokens, self.token_dim),
            });
        }
        let q = self.query(idx, z);
        Ok(self.domains[idx].labels.iter_rows().map(|e| dot(e, &q)).collect())
    }
}

/// Intermediates of one instance's loss; enough to get `dL/dθ`.
#[derive(Debug, Clone)]
pub struct InstanceCache<T: Scalar = f64> {
    pub domain: usize,
    pub label: usize,
    input: Vec<T>,
    probs: Vec<T>,
}

/// Cross-entropy of the head's label scores for one encoded instance.
pub fn instance_loss_from_repr<T: Scalar>(
    x: &[T],
    label: usize,
    domain: usize,
    projector: &Projector<T>,
    head: &FrozenHead<T>,
) -> Result<(T, InstanceCache<T>)> {
    if projector.tokens() != head.tokens() || projector.token_dim() != head.token_dim() {
        return Err(Error::contract("projector and head disagree on token layout"));
    }
    let z = projector.project_flat(x)?;
    let logits = head.logits(domain, &z)?;
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} outside {} candidates",
            logits.len()
        )));
    }
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[label];
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            name: "instance_loss".into(),
            index: domain,
        });
    }
    let probs = logits.iter().map(|&l| (l - lse).exp()).collect();
    Ok((
        loss,
        InstanceCache {
            domain,
            label,
            input: x.to_vec(),
            probs,
        },
    ))
}

/// Accumulates `scale · dL/dθ` for one cached instance into `grads`.
pub fn accumulate_projector_gradient<T: Scalar>(
    cache: &InstanceCache<T>,
    head: &FrozenHead<T>,
    scale: T,
    grads: &mut ParamSet<T>,
) -> Result<()> {
    let labels = &head.domain(cache.domain).labels;
    let mut d_logits = cache.probs.clone();
    d_logits[cache.label] -= T::one();
    let mut d_query = vec![T::zero(); head.token_dim()];
    for (row, &g) in labels.iter_rows().zip(&d_logits) {
        for (q, &e) in d_query.iter_mut().zip(row) {
            *q += g * e;
        }
    }
    // rows of the mix that read the tokens start after the instruction block
    let skip = head.token_dim();
    let d_z: Vec<T> = (0..head.tokens() * head.token_dim())
        .map(|r| dot(head.mix.row(skip + r), &d_query) * scale)
        .collect();
    if grads.len() != 2 || grads.at(0).rows() != cache.input.len() || grads.at(0).cols() != d_z.len() {
        return Err(Error::contract("gradient buffer does not match the projector"));
    }
    {
        let gw = grads.at_mut(0);
        for (k, &a) in cache.input.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            for (w, &g) in gw.row_mut(k).iter_mut().zip(&d_z) {
                *w += a * g;
            }
        }
    }
    for (b, &g) in grads.at_mut(1).as_mut_slice().iter_mut().zip(&d_z) {
        *b += g;
    }
    Ok(())
}
