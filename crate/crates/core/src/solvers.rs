//! Parameter update rules: heavy-ball SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub lr: f64,
    /// Heavy-ball coefficient for SGD; Adam uses `beta1` instead.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl SolverConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        SolverConfig {
            kind: SolverKind::SgdMomentum,
            lr,
            momentum,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        SolverConfig {
            kind: SolverKind::Adam,
            lr,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("solver.lr must be positive, got {}", self.lr)));
        }
        match self.kind {
            SolverKind::SgdMomentum if !unit(self.momentum) => Err(Error::validation(format!(
                "solver.momentum must lie in [0, 1), got {}",
                self.momentum
            ))),
            SolverKind::Adam if !unit(self.beta1) || !unit(self.beta2) => Err(Error::validation(format!(
                "solver betas must lie in [0, 1), got {} / {}",
                self.beta1, self.beta2
            ))),
            SolverKind::Adam if self.epsilon <= 0.0 => Err(Error::validation(format!(
                "solver.epsilon must be positive, got {}",
                self.epsilon
            ))),
            _ => Ok(()),
        }
    }
}

/// Auxiliary buffers for one group of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub config: SolverConfig,
    /// Adam step counter; unused by SGD.
    pub step: u64,
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<Tensor>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<Tensor>,
}

impl SolverState {
    pub fn new(config: SolverConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let second = match config.kind {
            SolverKind::Adam => zeros(),
            SolverKind::SgdMomentum => Vec::new(),
        };
        Ok(SolverState {
            config,
            step: 0,
            first: zeros(),
            second,
        })
    }

    /// Applies one update with whichever rule the state was built for.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor], layer: &str) -> Result<()> {
        match self.config.kind {
            SolverKind::SgdMomentum => sgd_momentum_step(params, grads, self, layer),
            SolverKind::Adam => adam_step(params, grads, self, layer),
        }
    }
}

fn check_operands(params: &[Tensor], grads: &[Tensor], buffers: &[Tensor], layer: &str, step: u64) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffers.len() {
        return Err(Error::shape(format!(
            "{layer}: {} params, {} grads, {} solver buffers",
            params.len(),
            grads.len(),
            buffers.len()
        )));
    }
    for ((p, g), b) in params.iter().zip(grads).zip(buffers) {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{layer}: param {:?}, grad {:?}, buffer {:?}",
                p.shape(),
                g.shape(),
                b.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Divergence {
            layer: layer.to_string(),
            step,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// `v <- mu v + g; p <- p - lr v`.
pub fn sgd_momentum_step(params: &mut [Tensor], grads: &[Tensor], state: &mut SolverState, layer: &str) -> Result<()> {
    check_operands(params, grads, &state.first, layer, state.step)?;
    let SolverConfig { lr, momentum, .. } = state.config;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias correction; the step counter is incremented before use.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut SolverState, layer: &str) -> Result<()> {
    check_operands(params, grads, &state.first, layer, state.step)?;
    check_operands(params, grads, &state.second, layer, state.step)?;
    state.step += 1;
    let SolverConfig {
        lr,
        beta1,
        beta2,
        epsilon,
        ..
    } = state.config;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor> {
        vec![Tensor::filled(&[1], v)]
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::from_vec(&[3], vec![0.3, 0.1, -0.7]).unwrap()];
        let mut state = SolverState::new(SolverConfig::sgd(0.1, 0.0), &p).unwrap();
        let expected: Vec<f64> = p[0].data().iter().zip(g[0].data()).map(|(a, b)| a - 0.1 * b).collect();
        sgd_momentum_step(&mut p, &g, &mut state, "l0").unwrap();
        assert_eq!(p[0].data(), &expected[..]);
    }

    #[test]
    fn momentum_unrolls() {
        let (lr, g) = (0.1, 2.0);
        let mut p = scalar(0.0);
        let mut state = SolverState::new(SolverConfig::sgd(lr, 0.5), &p).unwrap();
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &scalar(g), &mut state, "l0").unwrap();
        }
        let expected = -lr * g * (1.0 + 1.5);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_coasts() {
        let mut p = scalar(1.0);
        let mut state = SolverState::new(SolverConfig::sgd(0.1, 0.7), &p).unwrap();
        state.first = scalar(2.0);
        sgd_momentum_step(&mut p, &scalar(0.0), &mut state, "l0").unwrap();
        assert!((p[0].data()[0] - (1.0 - 0.1 * 0.7 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut cfg = SolverConfig::adam(1e-3);
        cfg.epsilon = 1e-12;
        for g in [3.0, -0.25] {
            let mut p = scalar(0.0);
            let mut state = SolverState::new(cfg, &p).unwrap();
            adam_step(&mut p, &scalar(g), &mut state, "l0").unwrap();
            let dp = p[0].data()[0];
            assert!((dp.abs() - 1e-3).abs() < 1e-12, "{dp}");
            assert_eq!(dp.signum(), -g.signum());
            assert_eq!(state.step, 1);
        }
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut p = scalar(0.4);
        let mut state = SolverState::new(SolverConfig::adam(1e-3), &p).unwrap();
        for _ in 0..10 {
            adam_step(&mut p, &scalar(0.0), &mut state, "l0").unwrap();
        }
        assert_eq!(p[0].data()[0], 0.4);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = scalar(1.0);
        let mut state = SolverState::new(SolverConfig::adam(1e-3), &p).unwrap();
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut state, "conv3").unwrap_err();
        match err {
            Error::Divergence { layer, .. } => assert_eq!(layer, "conv3"),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(SolverConfig::sgd(0.1, 1.0).validate().is_err());
        assert!(SolverConfig::sgd(-0.1, 0.0).validate().is_err());
        let mut cfg = SolverConfig::adam(1e-3);
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
    }
}
