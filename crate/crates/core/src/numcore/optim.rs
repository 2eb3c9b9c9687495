use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer with optional Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f64> {
    pub kind: OptimizerKind,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub step: u64,
    /// Adam first and second moments; empty for SGD.
    pub first_moment: ParamSet<T>,
    pub second_moment: ParamSet<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn sgd(learning_rate: T) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, &ParamSet::new())
    }

    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8, moments shaped after `params`.
    pub fn adam(learning_rate: T, params: &ParamSet<T>) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate, params)
    }

    pub fn new(kind: OptimizerKind, learning_rate: T, params: &ParamSet<T>) -> Result<Self> {
        if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (ParamSet::new(), ParamSet::new()),
            OptimizerKind::Adam => (params.zeros_like(), params.zeros_like()),
        };
        Ok(OptimizerState {
            kind,
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            step: 0,
            first_moment,
            second_moment,
        })
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        params.ensure_mirrors(grads, "optimizer_step")?;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().iter_mut().zip(grads.values()) {
                    for (pv, &gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *pv -= self.learning_rate * gv;
                    }
                }
                self.step += 1;
            }
            OptimizerKind::Adam => {
                params.ensure_mirrors(&self.first_moment, "optimizer_step")?;
                self.step += 1;
                let t = self.step as i32;
                let one = T::one();
                let bias1 = one - self.beta1.powi(t);
                let bias2 = one - self.beta2.powi(t);
                let moments = self
                    .first_moment
                    .values_mut()
                    .iter_mut()
                    .zip(self.second_moment.values_mut().iter_mut());
                for ((p, g), (m, v)) in params.values_mut().iter_mut().zip(grads.values()).zip(moments) {
                    let slots = p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()));
                    for ((pv, &gv), (mv, vv)) in slots {
                        *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                        let m_hat = *mv / bias1;
                        let v_hat = *vv / bias2;
                        *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step<T: Scalar>(
    opt: &mut OptimizerState<T>,
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
) -> Result<()> {
    opt.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("p", Matrix::from_vec(1, 1, vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn sgd_update() {
        let mut p = scalar_set(1.0);
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        opt.step(&mut p, &scalar_set(2.0)).unwrap();
        assert!((p.at(0).get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = scalar_set(0.37);
        let before = p.clone();
        OptimizerState::sgd(0.5)
            .unwrap()
            .step(&mut p, &scalar_set(0.0))
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_set(0.0);
        let mut opt = OptimizerState::adam(1.0, &p).unwrap();
        opt.step(&mut p, &scalar_set(1.0)).unwrap();
        // m_hat = v_hat = 1, so the step is 1 / (1 + 1e-8)
        let expected = -1.0 / (1.0 + 1e-8);
        assert!((p.at(0).get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_hand_rolled_two_steps() {
        let mut p = scalar_set(0.5);
        let mut opt = OptimizerState::adam(0.01, &p).unwrap();
        let grads = [0.3, -0.7];
        for g in grads {
            opt.step(&mut p, &scalar_set(g)).unwrap();
        }
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.at(0).get(0, 0) - x).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_set(1.0);
        let mut g = ParamSet::new();
        g.push("p", Matrix::zeros(2, 1)).unwrap();
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Dimension { .. })));
    }
}
