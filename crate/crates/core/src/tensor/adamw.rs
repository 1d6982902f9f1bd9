//! AdamW with decoupled weight decay, plus the cosine learning-rate decay
//! used by the training stages.

use super::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `params` (same order as construction). Missing grads
    /// count as zero, so unused parameters see only the decoupled decay.
    pub fn step(&mut self, params: &[Tensor]) {
        debug_assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (p, (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            let grad = p.grad();
            let mut data = p.inner.data.borrow_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |gv| gv[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] * (1.0 - self.lr * self.weight_decay)
                    - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn zero_grads(params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}

/// Plain cosine decay from `lr0` down to `0.01 * lr0` across the epoch
/// budget (no warm restarts).
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    let lr_final = 0.01 * lr0;
    if total_epochs <= 1 {
        return lr0;
    }
    let t = (epoch as f64 / (total_epochs - 1) as f64).clamp(0.0, 1.0);
    lr_final + (lr0 - lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(&[p.clone()], 0.1, 0.0);
        let before = p.to_vec();
        opt.step(&[p.clone()]);
        assert_eq!(p.to_vec(), before);
    }

    #[test]
    fn update_descends_along_gradient() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(&[p.clone()], 0.1, 0.0);
        opt.step(&[p.clone()]);
        assert!(p.item() < 1.0, "positive grad must decrease the parameter, got {}", p.item());
    }

    #[test]
    fn decoupled_decay_matches_definition() {
        let p = Tensor::param(&[1], vec![2.0]).unwrap();
        let mut opt = AdamW::new(&[p.clone()], 0.1, 0.1);
        opt.step(&[p.clone()]);
        assert_eq!(p.item(), 2.0 * (1.0 - 0.01));
    }

    #[test]
    fn step_counter_increments_by_one() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(&[p.clone()], 0.1, 0.0);
        assert_eq!(opt.step_count(), 0);
        opt.step(&[p.clone()]);
        opt.step(&[p.clone()]);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        let last = cosine_lr(1e-3, 99, 100);
        assert!((last - 1e-5).abs() < 1e-12, "final lr {last}");
        let mid = cosine_lr(1e-3, 50, 101);
        assert!((mid - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-9);
    }
}
