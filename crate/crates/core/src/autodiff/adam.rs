use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above");
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Stores the moments as `<param>.m` / `<param>.v` plus a scalar `adam.step`.
    pub fn write_state(&self, params: &ParamSet, ckpt: &mut Checkpoint) -> Result<()> {
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            ckpt.insert(format!("{}.m", p.name), Tensor::new(p.value.shape().to_vec(), m.clone())?)?;
            ckpt.insert(format!("{}.v", p.name), Tensor::new(p.value.shape().to_vec(), v.clone())?)?;
        }
        ckpt.insert("adam.step", Tensor::new(vec![], vec![self.step as f64])?)?;
        Ok(())
    }

    pub fn read_state(config: AdamConfig, params: &ParamSet, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params.iter() {
            for (suffix, dst) in [("m", &mut m), ("v", &mut v)] {
                let t = ckpt.require(&format!("{}.{suffix}", p.name))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "moment `{}.{suffix}` has shape {:?}, parameter has {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                dst.push(t.data().to_vec());
            }
        }
        let step = ckpt.require("adam.step")?.data()[0];
        Ok(Self {
            config,
            step: step as u64,
            m,
            v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![w])).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = scalar_set(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        ps.iter_mut().for_each(|p| p.grad = Some(vec![0.0]));
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.iter().next().unwrap().value.data(), &[0.7]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        for g in [3.0, -0.02, 1e-3] {
            let mut ps = scalar_set(1.0);
            let cfg = AdamConfig::default();
            let mut adam = Adam::new(cfg, &ps);
            ps.iter_mut().for_each(|p| p.grad = Some(vec![g]));
            adam.step(&mut ps).unwrap();
            let moved = 1.0 - ps.iter().next().unwrap().value.data()[0];
            let want = cfg.lr * g / (g.abs() + cfg.eps);
            assert!((moved - want).abs() < 1e-15, "g={g}: {moved} vs {want}");
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut ps = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        assert!(matches!(adam.step(&mut ps), Err(Error::MissingGradient(n)) if n == "w"));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut ps = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        for _ in 0..3 {
            ps.iter_mut().for_each(|p| p.grad = Some(vec![0.4]));
            adam.step(&mut ps).unwrap();
        }
        let mut ck = Checkpoint::new();
        adam.write_state(&ps, &mut ck).unwrap();
        let back = Adam::read_state(AdamConfig::default(), &ps, &Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
        assert_eq!(back, adam);
    }
}
