//! Variational Bayesian output layer.
//!
//! The final 1x1x1 conv's weights get a Gaussian posterior `N(mu, sigma^2)`
//! with `sigma = softplus(rho)` against a standard Gaussian prior.
//! Weights are drawn with the reparameterization trick so gradients flow
//! through `(mu, rho)` pathwise, and predictive uncertainty is the
//! population variance of per-draw sigmoid probabilities.

use crate::error::{Error, Result};
use crate::losses::dice_ce;
use crate::rng::Rng;
use crate::tensor::{conv3d, no_grad, Tensor};

/// Default rho at head replacement: sigma = softplus(-5) ≈ 0.0067.
pub const RHO_INIT_DEFAULT: f64 = -5.0;

#[derive(Debug, Clone)]
pub struct VariationalHead {
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub rho_w: Tensor,
    pub rho_b: Tensor,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl VariationalHead {
    /// Replace a deterministic head: `mu` copies the converged weights
    /// bit-exactly, every `rho` entry starts at `rho_init`.
    pub fn from_deterministic(weight: &Tensor, bias: &Tensor, rho_init: f64) -> Result<VariationalHead> {
        if weight.shape().len() != 5 {
            return Err(Error::checkpoint(format!(
                "variational head expects a conv weight [Co,Ci,k,k,k], got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::checkpoint(format!(
                "bias shape {:?} does not match weight output channels {}",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        Ok(VariationalHead {
            mu_w: Tensor::param(weight.shape(), weight.to_vec())?,
            mu_b: Tensor::param(bias.shape(), bias.to_vec())?,
            rho_w: Tensor::param(weight.shape(), vec![rho_init; weight.numel()])?,
            rho_b: Tensor::param(bias.shape(), vec![rho_init; bias.numel()])?,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("head.mu_weight".to_string(), self.mu_w.clone()),
            ("head.mu_bias".to_string(), self.mu_b.clone()),
            ("head.rho_weight".to_string(), self.rho_w.clone()),
            ("head.rho_bias".to_string(), self.rho_b.clone()),
        ]
    }

    /// One reparameterized draw: `w = mu + softplus(rho) ⊙ eps` with the
    /// noise treated as a constant, so the result is differentiable in
    /// `(mu, rho)`.
    pub fn sample(&self, seed: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = Rng::derived(seed, 0xB45E);
        let mut ew = vec![0.0; self.mu_w.numel()];
        rng.fill_normal(&mut ew, 1.0);
        let mut eb = vec![0.0; self.mu_b.numel()];
        rng.fill_normal(&mut eb, 1.0);
        let eps_w = Tensor::from_vec(self.mu_w.shape(), ew)?;
        let eps_b = Tensor::from_vec(self.mu_b.shape(), eb)?;
        let w = self.mu_w.add(&self.rho_w.softplus().mul(&eps_w)?)?;
        let b = self.mu_b.add(&self.rho_b.softplus().mul(&eps_b)?)?;
        Ok((w, b))
    }

    /// Closed-form KL(q || N(0, I)) summed over all weights and biases:
    /// `Σ -log σ + (σ² + μ²)/2 - 1/2`.
    pub fn kl_to_prior(&self) -> Result<Tensor> {
        let term = |mu: &Tensor, rho: &Tensor| -> Result<Tensor> {
            let sigma = rho.softplus();
            let log_sigma = sigma.log()?;
            let quad = sigma.mul(&sigma)?.add(&mu.mul(mu)?)?.mul_scalar(0.5);
            Ok(log_sigma.neg().add(&quad)?.add_scalar(-0.5).sum_all())
        };
        let w = term(&self.mu_w, &self.rho_w)?;
        let b = term(&self.mu_b, &self.rho_b)?;
        w.add(&b)
    }

    pub fn sigma_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.rho_w.to_vec().iter().map(|r| softplus(*r)).collect();
        out.extend(self.rho_b.to_vec().iter().map(|r| softplus(*r)));
        out
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        vec![self.mu_w.clone(), self.mu_b.clone(), self.rho_w.clone(), self.rho_b.clone()]
    }
}

#[derive(Debug, Clone)]
pub struct PredictiveOutput {
    /// Mean of per-draw sigmoid probabilities.
    pub mean_prob: Vec<f64>,
    /// Population variance (divisor T) of per-draw probabilities.
    pub variance: Vec<f64>,
    pub samples_used: usize,
    pub shape: Vec<usize>,
}

/// Population mean and variance over draws indexed by position; the result
/// depends only on the index order, never on generation order.
pub fn population_mean_var(draws: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let t = draws.len();
    let n = draws[0].len();
    let mut mean = vec![0.0; n];
    for d in draws {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut var = vec![0.0; n];
    for d in draws {
        for (vo, (v, m)) in var.iter_mut().zip(d.iter().zip(&mean)) {
            let diff = v - m;
            *vo += diff * diff;
        }
    }
    for v in var.iter_mut() {
        *v /= t as f64;
    }
    (mean, var)
}

/// Monte-Carlo prediction through the variational head over frozen
/// features: T draws, sigmoid probabilities, population statistics.
/// Draw t uses the stream `(seed, t)`, so any execution order agrees.
pub fn mc_predict(head: &VariationalHead, features: &Tensor, t_infer: usize, seed: u64) -> Result<PredictiveOutput> {
    if t_infer == 0 {
        return Err(Error::config("mc_predict needs T >= 1".to_string()));
    }
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(t_infer);
    no_grad(|| -> Result<()> {
        for t in 0..t_infer {
            let (w, b) = head.sample(Rng::derived(seed, t as u64).next_u64())?;
            let probs = conv3d(features, &w, Some(&b), 1, 0)?.sigmoid();
            draws.push(probs.to_vec());
        }
        Ok(())
    })?;
    let (mean_prob, variance) = population_mean_var(&draws);
    let mut shape = vec![features.shape()[0], head.mu_w.shape()[0]];
    shape.extend_from_slice(&features.shape()[2..]);
    Ok(PredictiveOutput { mean_prob, variance, samples_used: t_infer, shape })
}

#[derive(Debug)]
pub struct ElboParts {
    pub total: Tensor,
    pub seg: f64,
    pub kl: f64,
}

/// Single-draw evidence bound: `dice_ce(logits(W), y) + kl_beta * KL`.
/// `t_train` > 1 averages the data term over draws; the KL enters once.
pub fn elbo_loss(
    head: &VariationalHead,
    features: &Tensor,
    target: &Tensor,
    kl_beta: f64,
    dice_smooth: f64,
    t_train: usize,
    seed: u64,
) -> Result<ElboParts> {
    if t_train == 0 {
        return Err(Error::config("elbo_loss needs T_train >= 1".to_string()));
    }
    let mut seg: Option<Tensor> = None;
    for t in 0..t_train {
        let (w, b) = head.sample(Rng::derived(seed, t as u64).next_u64())?;
        let logits = conv3d(features, &w, Some(&b), 1, 0)?;
        let term = dice_ce(&logits, target, dice_smooth)?;
        seg = Some(match seg {
            Some(s) => s.add(&term)?,
            None => term,
        });
    }
    let seg = seg.expect("t_train >= 1").mul_scalar(1.0 / t_train as f64);
    let seg_val = seg.item();
    let kl = head.kl_to_prior()?;
    let kl_val = kl.item();
    let total = seg.add(&kl.mul_scalar(kl_beta))?;
    Ok(ElboParts { total, seg: seg_val, kl: kl_val })
}
