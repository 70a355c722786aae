use crate::error::{Error, Result};

/// Number of warmup steps: `ceil(warmup_frac * total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    // Guard against products like 0.1 * 30 = 3.0000000000000004.
    ((warmup_frac * total_steps as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Linear ramp from 0 to `peak` over the warmup steps, then linear decay to
/// 0 at `total_steps`.
pub fn triangular_lr(step: usize, total_steps: usize, warmup_frac: f64, peak: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
        return Err(Error::Config(format!(
            "warmup_frac {warmup_frac} outside (0, 1)"
        )));
    }
    let warm = warmup_steps(total_steps, warmup_frac).min(total_steps);
    if step <= warm {
        Ok(peak * step as f64 / warm as f64)
    } else {
        Ok(peak * (total_steps - step) as f64 / (total_steps - warm) as f64)
    }
}
