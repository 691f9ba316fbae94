//! AdamW with decoupled weight decay, learning-rate schedules and global
//! gradient-norm clipping.

use crate::error::{Error, Result};
use crate::numerics::ValueGrid;
use crate::train::config::Schedule;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate at 0-based `step` of `total` steps: linear warmup to
/// `base`, then constant or cosine decay to zero.
pub fn learning_rate(schedule: Schedule, base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// One parameter group's moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    m: Vec<ValueGrid>,
    v: Vec<ValueGrid>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: Vec<&mut ValueGrid>, grads: &[&ValueGrid], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer groups", params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ValueGrid::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("optimizer state", self.m.len(), params.len()));
        }
        self.step += 1;
        let b1c = 1.0 - BETA1.powi(self.step as i32);
        let b2c = 1.0 - BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape("optimizer tensor", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
            let ps = p.as_mut_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                ms[k] = BETA1 * ms[k] + (1.0 - BETA1) * gk;
                vs[k] = BETA2 * vs[k] + (1.0 - BETA2) * gk * gk;
                let mhat = ms[k] / b1c;
                let vhat = vs[k] / b2c;
                ps[k] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * ps[k]);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: Vec<&mut ValueGrid>, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            g.scale(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(learning_rate(Schedule::Constant, 0.1, 50, 100, 0), 0.1);
        assert_eq!(learning_rate(Schedule::Cosine, 0.1, 0, 100, 0), 0.1);
        assert!((learning_rate(Schedule::Cosine, 0.1, 50, 100, 0) - 0.05).abs() < 1e-15);
        assert!(learning_rate(Schedule::Cosine, 0.1, 100, 100, 0).abs() < 1e-15);
        assert!((learning_rate(Schedule::Cosine, 0.1, 4, 100, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first update is lr·sign(g) (up to eps)
        let mut p = ValueGrid::from_rows(&[[1.0, -2.0]]).unwrap();
        let g = ValueGrid::from_rows(&[[0.3, -5.0]]).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.update(vec![&mut p], &[&g], 0.1).unwrap();
        assert!((p[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((p[(0, 1)] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = ValueGrid::filled(1, 1, 2.0);
        let g = ValueGrid::zeros(1, 1);
        let mut opt = AdamW::new(0.5);
        opt.update(vec![&mut p], &[&g], 0.1).unwrap();
        assert!((p[(0, 0)] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = ValueGrid::from_rows(&[[3.0, -4.0]]).unwrap();
        let mut opt = AdamW::new(0.0);
        for step in 0..500 {
            let g = x.scaled(2.0);
            let lr = learning_rate(Schedule::Cosine, 0.1, step, 500, 10);
            opt.update(vec![&mut x], &[&g], lr).unwrap();
        }
        assert!(x.max_abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut a = ValueGrid::from_rows(&[[3.0]]).unwrap();
        let mut b = ValueGrid::from_rows(&[[4.0]]).unwrap();
        let n = clip_global_norm(vec![&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[(0, 0)] - 0.6).abs() < 1e-15 && (b[(0, 0)] - 0.8).abs() < 1e-15);
        let n = clip_global_norm(vec![&mut a], 0.0);
        assert!((n - 0.6).abs() < 1e-15);
    }
}
