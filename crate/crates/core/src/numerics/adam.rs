use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, Tensor};

/// Adam hyperparameters. Defaults follow the usual transformer setup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Learning-rate schedule evaluated at 1-based step numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup to `peak` over `warmup` steps, then `peak * sqrt(warmup / step)`.
    InverseSqrt {
        peak: f64,
        warmup: u64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::InverseSqrt { peak: 1e-3, warmup: 4000 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::InverseSqrt { peak, warmup } => {
                let step = step.max(1) as f64;
                let warmup = warmup.max(1) as f64;
                peak * (step / warmup).min((warmup / step).sqrt())
            }
        }
    }
}

/// First/second moment estimates for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Result<Self, NumericsError> {
        if !(0.0 < config.beta1 && config.beta1 < 1.0 && 0.0 < config.beta2 && config.beta2 < 1.0) {
            return Err(NumericsError::InvalidArgument(format!(
                "adam betas must lie in (0, 1), got {} and {}",
                config.beta1, config.beta2
            )));
        }
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Ok(AdamState { config, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 })
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let step_size = T::from_f64(lr / bc1);
    let bc2_sqrt = T::from_f64(bc2.sqrt());
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let eps = T::from_f64(eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + ob1 * gi;
            vd[i] = b2 * vd[i] + ob2 * gi * gi;
            let denom = vd[i].sqrt() / bc2_sqrt + eps;
            pd[i] -= step_size * md[i] / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::<f32>::from_fn(&[3], |i| i as f32)];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params).unwrap();
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_has_magnitude_lr_against_gradient() {
        let mut params = vec![Tensor::<f64>::zeros(&[4])];
        let grads = vec![Tensor::new(vec![4], vec![0.5, -2.0, 1e-3, -7.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &params).unwrap();
        adam_step(&mut params, &grads, &mut st, 0.01).unwrap();
        for (p, g) in params[0].data().iter().zip(grads[0].data()) {
            // At t = 1 the bias-corrected update is lr * g / (|g| + eps).
            let expected = -0.01 * g / (g.abs() + 1e-9);
            assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        }
    }

    #[test]
    fn equal_gradients_update_equally() {
        let mut params = vec![Tensor::<f32>::full(&[2], 1.0), Tensor::full(&[2], 1.0)];
        let grads = vec![Tensor::full(&[2], 0.3), Tensor::full(&[2], 0.3)];
        let mut st = AdamState::new(AdamConfig::default(), &params).unwrap();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut st, 0.05).unwrap();
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params).unwrap();
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, 0.1).is_err());
    }

    #[test]
    fn inverse_sqrt_schedule_peaks_at_warmup() {
        let s = LrSchedule::InverseSqrt { peak: 1e-3, warmup: 400 };
        assert!((s.lr_at(400) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(200) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at(1600) - 5e-4).abs() < 1e-15);
    }
}
