use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        Self { m, v, t: 0 }
    }

    /// One bias-corrected Adam update over `params` (same order as at
    /// construction), then clears their gradients. A missing gradient counts
    /// as zero. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], names: &[String], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::invalid(format!(
                    "parameter {} changed size",
                    names.get(i).map_or("?", |s| s.as_str())
                )));
            }
            if let Some(g) = p.grad() {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!(
                        "{}[{k}] = {}",
                        names.get(i).map_or("?", |s| s.as_str()),
                        g[k]
                    )));
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.take_grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for k in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k] as f64);
                let mk = b1 * m[k] as f64 + (1.0 - b1) * g;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
                data[k] = (data[k] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        p.accumulate_grad(&[0.0; 3]);
        let before = p.data().to_vec();
        let mut st = OptimizerState::new([&p]);
        st.step(&mut [&mut p], &names(1), &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &before[..]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.3).with_grad();
        p.accumulate_grad(&[0.5]);
        let mut st = OptimizerState::new([&p]);
        st.step(&mut [&mut p], &names(1), &AdamConfig::default()).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
        let delta = p.data()[0] as f64 - 0.3f32 as f64;
        assert!((delta + 1e-3).abs() < 1e-6, "{delta}");
        assert!(p.grad().is_none());
    }

    #[test]
    fn two_steps_descend_on_a_parabola() {
        let mut p = Tensor::scalar(1.0).with_grad();
        let mut st = OptimizerState::new([&p]);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut f = 1.0f32;
        for _ in 0..2 {
            let x = p.data()[0];
            p.accumulate_grad(&[2.0 * x]);
            st.step(&mut [&mut p], &names(1), &cfg).unwrap();
            let fx = p.data()[0] * p.data()[0];
            assert!(fx < f);
            f = fx;
        }
    }

    #[test]
    fn sign_pattern_survives_gradient_scaling() {
        let g = [0.3f32, -2.0, 1e-4, -7.5];
        let run = |scale: f32| {
            let mut p = Tensor::zeros([4]).with_grad();
            p.accumulate_grad(&g.map(|v| v * scale));
            let mut st = OptimizerState::new([&p]);
            st.step(&mut [&mut p], &names(1), &AdamConfig::default()).unwrap();
            p.data().iter().map(|v| v.signum()).collect::<Vec<_>>()
        };
        assert_eq!(run(1.0), run(1000.0));
        assert_eq!(run(1.0), run(1e-3));
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut a = Tensor::scalar(1.0).with_grad();
        let mut b = Tensor::scalar(2.0).with_grad();
        a.accumulate_grad(&[0.1]);
        b.accumulate_grad(&[f32::NAN]);
        let mut st = OptimizerState::new([&a, &b]);
        let err = st
            .step(&mut [&mut a, &mut b], &names(2), &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref m) if m.starts_with("p1")), "{err}");
        assert_eq!((a.data()[0], b.data()[0], st.t), (1.0, 2.0, 0));
    }
}
