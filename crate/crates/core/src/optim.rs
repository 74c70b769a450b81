//! Per-replica optimizers: plain SGD, Adam and Adagrad.

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adagrad,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "adagrad" => Ok(Self::Adagrad),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub adagrad_eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8, adagrad_eps: 1e-10 }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn adagrad(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adagrad, learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.adagrad_eps.is_nan() || self.adagrad_eps <= 0.0 {
            return Err(Error::InvalidConfig("optimizer epsilons must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
    Adagrad { accumulator: Vec<f64> },
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, n_params: usize) -> Self {
        match config.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => {
                OptimizerState::Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
            }
            OptimizerKind::Adagrad => OptimizerState::Adagrad { accumulator: vec![0.0; n_params] },
        }
    }

    fn matches(&self, kind: OptimizerKind, n: usize) -> bool {
        match (self, kind) {
            (OptimizerState::Sgd, OptimizerKind::Sgd) => true,
            (OptimizerState::Adam { m, v, .. }, OptimizerKind::Adam) => m.len() == n && v.len() == n,
            (OptimizerState::Adagrad { accumulator }, OptimizerKind::Adagrad) => accumulator.len() == n,
            _ => false,
        }
    }
}

/// Applies one update in place.
pub fn step_in_place(
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut Parameters,
    grad: &Parameters,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    if !state.matches(config.kind, params.len()) {
        return Err(Error::InvalidConfig("optimizer state does not match config or parameters".into()));
    }
    if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    let lr = config.learning_rate;
    let theta = params.values_mut();
    let g = grad.values();
    match state {
        OptimizerState::Sgd => {
            for (p, gi) in theta.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        OptimizerState::Adam { m, v, t } => {
            *t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powf(*t as f64);
            let c2 = 1.0 - b2.powf(*t as f64);
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
            }
        }
        OptimizerState::Adagrad { accumulator } => {
            for ((p, acc), gi) in theta.iter_mut().zip(accumulator.iter_mut()).zip(g) {
                *acc += gi * gi;
                *p -= lr * gi / (acc.sqrt() + config.adagrad_eps);
            }
        }
    }
    Ok(())
}

/// Pure form of [`step_in_place`]: returns the updated parameters and state.
pub fn step(
    config: &OptimizerConfig,
    state: &OptimizerState,
    params: &Parameters,
    grad: &Parameters,
) -> Result<(Parameters, OptimizerState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    step_in_place(config, &mut state, &mut params, grad)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn one_param(v: f64) -> Parameters {
        // 1 -> 1 linear layer without bias is not expressible; use weight + bias and ignore bias
        Parameters::new(Architecture::classifier(1, vec![], 1).unwrap(), vec![v, 0.0]).unwrap()
    }

    #[test]
    fn sgd_example() {
        let cfg = OptimizerConfig::sgd(0.1);
        let (p, _) = step(&cfg, &OptimizerState::Sgd, &one_param(1.0), &one_param(2.0)).unwrap();
        assert_eq!(p.values()[0], 0.8);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimizerConfig::adam(0.01);
        let st = OptimizerState::new(&cfg, 2);
        for g in [3.0, -0.25, 1e-3] {
            let (p, st2) = step(&cfg, &st, &one_param(1.0), &one_param(g)).unwrap();
            let shift = p.values()[0] - 1.0;
            assert!((shift + 0.01 * g.signum()).abs() < 1e-6 * 0.01 / g.abs().min(1.0), "{g}: {shift}");
            assert!(matches!(st2, OptimizerState::Adam { t: 1, .. }));
        }
    }

    #[test]
    fn adagrad_first_step() {
        let cfg = OptimizerConfig::adagrad(0.001);
        let st = OptimizerState::new(&cfg, 2);
        let (p, st) = step(&cfg, &st, &one_param(0.0), &one_param(3.0)).unwrap();
        assert!((p.values()[0] + 0.001).abs() < 1e-12);
        match st {
            OptimizerState::Adagrad { accumulator } => assert_eq!(accumulator[0], 9.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let cfg = OptimizerConfig::sgd(0.1);
        let err = step(&cfg, &OptimizerState::Sgd, &one_param(1.0), &one_param(f64::NAN));
        assert!(matches!(err, Err(Error::NonFiniteGradient(0))));
    }

    #[test]
    fn rejects_mismatched_state() {
        let cfg = OptimizerConfig::adam(0.1);
        assert!(step(&cfg, &OptimizerState::Sgd, &one_param(1.0), &one_param(1.0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        let mut c = OptimizerConfig::adam(0.1);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::adagrad(0.1).validate().is_ok());
    }
}
