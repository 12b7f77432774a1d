//! One-cycle learning-rate schedule: cosine ramp to the peak over the first
//! 30% of steps, cosine anneal down to lr0/1e4 over the rest.

use crate::ndgrad::NdError;

/// Fraction of total steps spent ramping up.
pub const WARMUP_FRACTION: f64 = 0.3;

/// Factor dividing `lr0` for the final annealed learning rate.
pub const FINAL_DIV: f64 = 1e4;

/// Learning rate for `step` in `0..total_steps`.
pub fn onecycle_lr(step: usize, total_steps: usize, lr0: f64, max_lr: f64) -> Result<f64, NdError> {
    if total_steps == 0 {
        return Err(NdError::Invalid("schedule needs at least one step".into()));
    }
    if step >= total_steps {
        return Err(NdError::Invalid(format!("step {step} out of range for {total_steps} total")));
    }
    if lr0 <= 0.0 || max_lr < lr0 {
        return Err(NdError::Invalid(format!("need 0 < lr0 <= max_lr, got {lr0} and {max_lr}")));
    }
    if total_steps == 1 {
        return Ok(lr0);
    }
    let warmup = ((total_steps as f64 * WARMUP_FRACTION).round() as usize).max(1);
    let final_lr = lr0 / FINAL_DIV;
    if step <= warmup {
        let t = step as f64 / warmup as f64;
        // Cosine ramp: lr0 at t=0, max_lr at t=1, strictly increasing.
        Ok(lr0 + (max_lr - lr0) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos()))
    } else {
        let span = total_steps - 1 - warmup;
        if span == 0 {
            return Ok(final_lr);
        }
        let t = (step - warmup) as f64 / span as f64;
        Ok(final_lr + (max_lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
