use super::{Batch, ModelError, ModelState};
use crate::numerics::{adam_step, AdamConfig, AdamState, LrSchedule, Real};

/// Adam moments plus the learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f32> {
    pub adam: AdamState<T>,
    pub schedule: LrSchedule,
}

impl<T: Real> Optimizer<T> {
    pub fn new(state: &ModelState<T>, config: AdamConfig, schedule: LrSchedule) -> Result<Self, ModelError> {
        Ok(Optimizer { adam: AdamState::new(config, state.params())?, schedule })
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.adam.t
    }
}

/// One forward, backward and Adam update. Returns the pre-update loss.
pub fn train_step<T: Real>(
    state: &mut ModelState<T>,
    batch: &Batch,
    opt: &mut Optimizer<T>,
    smoothing: f64,
    dropout_seed: u64,
) -> Result<f64, ModelError> {
    let (loss, grads) = state.loss_and_grads(batch, smoothing, Some(dropout_seed))?;
    if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(ModelError::NonFiniteLoss { step: opt.step() + 1, loss });
    }
    let lr = opt.schedule.lr_at(opt.step() + 1);
    adam_step(state.params_mut(), &grads, &mut opt.adam, lr)?;
    Ok(loss)
}
