//! Cosine annealing with warm restarts, evaluated per optimizer step.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineRestarts {
    /// Steps per cycle.
    pub period: usize,
    /// Floor as a fraction of the base rate.
    pub min_factor: f64,
}

impl CosineRestarts {
    pub fn new(period: usize, min_factor: f64) -> Self {
        CosineRestarts {
            period: period.max(1),
            min_factor,
        }
    }

    /// Multiplier on the base learning rate at `step` (0-based).
    pub fn factor(&self, step: usize) -> f64 {
        let t = (step % self.period) as f64 / self.period as f64;
        self.min_factor + 0.5 * (1.0 - self.min_factor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
