//! AdamW with decoupled weight decay, the single-cycle cosine learning-rate
//! schedule, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine annealing schedule bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { eta_max: 1e-4, eta_min: 1e-6, t_max: 50 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min < self.eta_max) {
            return Err(Error::Config(format!(
                "schedule needs eta_min < eta_max, got {} vs {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("schedule needs t_max >= 1".into()));
        }
        Ok(())
    }
}

/// eta_min + (eta_max - eta_min) * (1 + cos(t pi / T)) / 2, stepped once per
/// epoch. Written as a convex combination so the endpoints are exact:
/// cosine_lr(0) == eta_max and cosine_lr(T) == eta_min bit for bit.
pub fn cosine_lr(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if t > cfg.t_max {
        return Err(Error::Config(format!(
            "schedule index {t} outside [0, {}]",
            cfg.t_max
        )));
    }
    let u = 0.5 * (1.0 + (t as f64 * std::f64::consts::PI / cfg.t_max as f64).cos());
    Ok(cfg.eta_max * u + cfg.eta_min * (1.0 - u))
}

/// Scale all gradients so their concatenated l2 norm is at most `max_norm`;
/// gradients at or under the bound are untouched. Returns the pre-clip norm.
pub fn clip_gradients<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    max_norm: f64,
) -> Result<f64> {
    let params: Vec<&'a mut Tensor> = params.into_iter().collect();
    let mut sq = 0.0;
    for p in &params {
        let g = p.grad().ok_or_else(|| {
            Error::State("clip_gradients called with unpopulated gradients".into())
        })?;
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params {
            let g = p.grad().expect("checked above").to_vec();
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            p.set_grad(scaled)?;
        }
    }
    Ok(norm)
}

/// Per-parameter first/second moment accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    /// Moments shaped after the given parameter list, step counter at zero.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, weight_decay: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        OptimState { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One AdamW update over all parameters (same order as construction).
    /// Decay is decoupled: theta <- theta - lr * (m_hat/(sqrt(v_hat)+eps)
    /// + lambda * theta).
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&'a mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = p
                .grad()
                .ok_or_else(|| {
                    Error::State("adamw_step called before backward populated gradients".into())
                })?
                .to_vec();
            if g.len() != self.m[i].len() {
                return Err(Error::Dimension(format!(
                    "moment {i} has {} entries, gradient has {}",
                    self.m[i].len(),
                    g.len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_are_exact() {
        let cfg = ScheduleConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
        assert_eq!(cosine_lr(50, &cfg).unwrap(), 1e-6);
    }

    #[test]
    fn cosine_midpoint() {
        let cfg = ScheduleConfig::default();
        let mid = cosine_lr(25, &cfg).unwrap();
        let expect = (1e-4 + 1e-6) / 2.0;
        assert!((mid - expect).abs() < 1e-18, "{mid} vs {expect}");
    }

    #[test]
    fn cosine_monotone_and_symmetric() {
        let cfg = ScheduleConfig::default();
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let lr = cosine_lr(t, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
            let mirror = cosine_lr(50 - t, &cfg).unwrap();
            assert!((lr + mirror - (1e-4 + 1e-6)).abs() < 1e-18);
        }
    }

    #[test]
    fn cosine_rejects_out_of_range() {
        let cfg = ScheduleConfig::default();
        assert!(cosine_lr(51, &cfg).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleConfig::default().validate().is_ok());
        assert!(ScheduleConfig { eta_max: 1e-6, eta_min: 1e-4, t_max: 50 }.validate().is_err());
        assert!(ScheduleConfig { eta_max: 1e-4, eta_min: 1e-6, t_max: 0 }.validate().is_err());
    }

    fn tensor_with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let n = data.len();
        let mut t = Tensor::new(vec![n], data).unwrap().with_grad();
        t.set_grad(grad).unwrap();
        t
    }

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let mut a = tensor_with_grad(vec![0.0, 0.0], vec![0.3, 0.4]);
        let before = a.grad().unwrap().to_vec();
        let norm = clip_gradients([&mut a], 1.0).unwrap();
        assert_eq!(norm, 0.5);
        for (x, y) in a.grad().unwrap().iter().zip(&before) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn clip_scales_by_global_norm() {
        // grads (6, 0) and (0, 8): global norm 10, everything scaled by 0.1
        let mut a = tensor_with_grad(vec![0.0, 0.0], vec![6.0, 0.0]);
        let mut b = tensor_with_grad(vec![0.0, 0.0], vec![0.0, 8.0]);
        let norm = clip_gradients([&mut a, &mut b], 1.0).unwrap();
        assert_eq!(norm, 10.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((b.grad().unwrap()[1] - 0.8).abs() < 1e-15);
        // post-clip norm is at most max_norm
        let sq: f64 = a
            .grad()
            .unwrap()
            .iter()
            .chain(b.grad().unwrap())
            .map(|g| g * g)
            .sum();
        assert!(sq.sqrt() <= 1.0 + 1e-12);
    }

    #[test]
    fn clip_requires_populated_gradients() {
        let mut a = Tensor::zeros(vec![2]).with_grad();
        assert!(matches!(clip_gradients([&mut a], 1.0), Err(Error::State(_))));
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut p = tensor_with_grad(vec![1.5, -2.5], vec![0.0, 0.0]);
        let mut state = OptimState::new([&p], 0.0);
        state.step([&mut p], 0.1).unwrap();
        assert_eq!(p.data(), &[1.5, -2.5]);
    }

    #[test]
    fn adamw_single_step_from_origin() {
        let mut p = tensor_with_grad(vec![0.0], vec![1.0]);
        let snapshot = Tensor::zeros(vec![1]);
        let mut state = OptimState::new([&snapshot], 0.0);
        let lr = 0.01;
        state.step([&mut p], lr).unwrap();
        // m_hat = 1, v_hat = 1 -> update = -lr / (1 + eps)
        let expect = -lr / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-18, "{}", p.data()[0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_optimizes_a_parabola() {
        // 200 steps on f(theta) = theta^2 from theta = 5 with lr = 0.1
        let mut p = Tensor::new(vec![1], vec![5.0]).unwrap().with_grad();
        let snapshot = Tensor::zeros(vec![1]);
        let mut state = OptimState::new([&snapshot], 0.0);
        for _ in 0..200 {
            let theta = p.data()[0];
            p.set_grad(vec![2.0 * theta]).unwrap();
            state.step([&mut p], 0.1).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-2, "{}", p.data()[0]);
    }

    #[test]
    fn decay_is_decoupled() {
        // zero gradient, lambda > 0: one step multiplies theta by (1 - lr*lambda);
        // dyadic values keep both evaluation routes exact
        let mut p = tensor_with_grad(vec![1.0, -4.0], vec![0.0, 0.0]);
        let snapshot = Tensor::zeros(vec![2]);
        let mut state = OptimState::new([&snapshot], 0.5);
        state.step([&mut p], 0.5).unwrap();
        assert_eq!(p.data(), &[1.0 * 0.75, -4.0 * 0.75]);
    }

    #[test]
    fn step_before_backward_is_state_error() {
        let mut p = Tensor::zeros(vec![2]).with_grad();
        let snapshot = Tensor::zeros(vec![2]);
        let mut state = OptimState::new([&snapshot], 0.0);
        assert!(matches!(state.step([&mut p], 0.1), Err(Error::State(_))));
    }
}
