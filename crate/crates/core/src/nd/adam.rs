use serde::{Deserialize, Serialize};

use super::array::NumArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "adam settings out of range: {self:?}"
            )))
        }
    }
}

/// Adam moments laid out exactly like the parameter list they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<NumArray>,
    pub v: Vec<NumArray>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[NumArray]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| NumArray::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [NumArray], grads: &[NumArray]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam layout: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            m.same_shape(p, "adam param")?;
            m.same_shape(g, "adam grad")?;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![NumArray::from_rows(&[[1.0, -2.0]]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &[NumArray::zeros(&[1, 2])]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the update is lr / (1 + eps).
        let mut params = vec![NumArray::scalar(0.5)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &params);
        st.step(&mut params, &[NumArray::scalar(1.0)]).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut params = vec![NumArray::from_rows(&[[0.3, 0.1]]).unwrap()];
            let mut st = AdamState::new(AdamConfig::default(), &params);
            for k in 0..5 {
                let g = NumArray::from_rows(&[[k as f64 * 0.1, -0.2]]).unwrap();
                st.step(&mut params, &[g]).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layout_mismatch() {
        let mut params = vec![NumArray::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(st.step(&mut params, &[NumArray::zeros(&[3])]).is_err());
        assert!(st.step(&mut params, &[]).is_err());
        assert_eq!(st.step, 0);
    }
}
