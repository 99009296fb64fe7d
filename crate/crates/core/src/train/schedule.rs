use crate::error::{invalid, Result};

/// `lr0 * (1 - iter / total_iters)^power`.
pub fn poly_lr(iter: usize, total_iters: usize, lr0: f64, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(invalid!("poly schedule needs at least one iteration"));
    }
    if iter > total_iters {
        return Err(invalid!("iteration {iter} is past the end of a {total_iters}-iteration schedule"));
    }
    Ok(lr0 * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// `lr0 * factor^k` where `k` counts the milestones at or before `epoch`.
pub fn step_lr(epoch: usize, lr0: f64, milestones: &[usize], factor: f64) -> f64 {
    let drops = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * factor.powi(drops as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrPolicy {
    /// Decayed every iteration.
    Poly { power: f64 },
    /// Decayed at epoch boundaries.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrPolicy {
    pub fn classification_default() -> Self {
        LrPolicy::Step { milestones: vec![30, 60, 90], factor: 0.1 }
    }

    pub fn lr(&self, lr0: f64, epoch: usize, iter: usize, total_iters: usize) -> Result<f64> {
        match self {
            LrPolicy::Poly { power } => poly_lr(iter, total_iters, lr0, *power),
            LrPolicy::Step { milestones, factor } => Ok(step_lr(epoch, lr0, milestones, *factor)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrPolicy::Poly { power } if !(*power > 0.0) => Err(invalid!("poly power must be positive, got {power}")),
            LrPolicy::Step { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] > w[1]) {
                    return Err(invalid!("step milestones must be sorted, got {milestones:?}"));
                }
                if !(*factor > 0.0) {
                    return Err(invalid!("step factor must be positive, got {factor}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl Default for LrPolicy {
    fn default() -> Self {
        LrPolicy::Poly { power: 0.9 }
    }
}
