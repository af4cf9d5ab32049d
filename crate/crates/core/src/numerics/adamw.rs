//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::params::Params;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract("AdamWConfig", format!("invalid hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for every parameter buffer, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new<P: Params>(params: &P, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<usize> = params.slices().iter().map(|(_, s)| s.len()).collect();
        Ok(OptState {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }
}

/// One AdamW update: `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. The decay term never
/// enters the moment estimates.
pub fn adamw_step<P: Params>(params: &mut P, grads: &P, state: &mut OptState) -> Result<()> {
    let grad_slices = grads.slices();
    for (name, g) in &grad_slices {
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                "adamw_step",
                format!("non-finite gradient at {name}[{pos}]"),
            ));
        }
    }
    let mut param_slices = params.slices_mut();
    if param_slices.len() != grad_slices.len() || param_slices.len() != state.m.len() {
        return Err(Error::shape("adamw_step", "parameter, gradient and state layouts differ"));
    }

    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (i, ((name, theta), (_, g))) in param_slices.iter_mut().zip(&grad_slices).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if theta.len() != g.len() || theta.len() != m.len() {
            return Err(Error::shape("adamw_step", format!("buffer {name} changed size")));
        }
        for j in 0..theta.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[j]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Vec<f64>);

    impl Params for Scalar {
        fn slices(&self) -> Vec<(String, &[f64])> {
            vec![("theta".into(), &self.0)]
        }
        fn slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
            vec![("theta".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Scalar(vec![0.0]);
        let mut st = OptState::new(&p, AdamWConfig::default()).unwrap();
        adamw_step(&mut p, &Scalar(vec![1.0]), &mut st).unwrap();
        // m̂ = v̂ = 1 → Δ = −lr·1/(1 + 1e-8)
        assert!((p.0[0] + 1e-3).abs() < 1e-10, "{}", p.0[0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Scalar(vec![0.7, -1.3]);
        let mut st = OptState::new(&p, AdamWConfig::default()).unwrap();
        for _ in 0..5 {
            adamw_step(&mut p, &Scalar(vec![0.0, 0.0]), &mut st).unwrap();
        }
        assert_eq!(p.0, vec![0.7, -1.3]);
    }

    #[test]
    fn decay_only_step() {
        let mut p = Scalar(vec![1.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut st = OptState::new(&p, cfg).unwrap();
        adamw_step(&mut p, &Scalar(vec![0.0]), &mut st).unwrap();
        assert!((p.0[0] - (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Scalar(vec![1.0, 2.0]);
        let mut st = OptState::new(&p, AdamWConfig::default()).unwrap();
        let err = adamw_step(&mut p, &Scalar(vec![0.0, f64::NAN]), &mut st).unwrap_err();
        assert!(err.to_string().contains("theta[1]"), "{err}");
        assert_eq!(p.0, vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_invalid_hyperparameters() {
        let p = Scalar(vec![1.0]);
        let cfg = AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        };
        assert!(OptState::new(&p, cfg).is_err());
    }
}
