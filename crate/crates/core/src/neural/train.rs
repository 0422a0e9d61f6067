use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_gradient, FusionMode, NetworkWeights, NeuralError, TrainingScene, DEFAULT_IVAR_BOUNDS};
use crate::parallel::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Cosine schedule floor as a fraction of `learning_rate`.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the rotation term in the loss.
    pub loss_weight: f64,
    pub rng_seed: u64,
    /// Global gradient-norm clipping bound.
    pub grad_clip: f64,
    pub d: usize,
    pub layers: usize,
    pub attention: bool,
    pub fusion: FusionMode,
    /// Leading epochs trained on the learned pose alone, before `fusion`
    /// takes over, so the pose head learns before it is down-weighted.
    pub warmup_epochs: usize,
    pub ivar_bounds: [f64; 2],
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            batch_size: 32,
            epochs: 30,
            loss_weight: 1.0,
            rng_seed: 0,
            grad_clip: 1.0,
            d: 32,
            layers: 4,
            attention: true,
            fusion: FusionMode::Learned,
            warmup_epochs: 15,
            ivar_bounds: DEFAULT_IVAR_BOUNDS,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.d == 0 {
            return bad("batch_size, epochs and d must be positive");
        }
        if !(self.loss_weight > 0.0) || !(self.grad_clip > 0.0) {
            return bad("loss_weight and grad_clip must be > 0");
        }
        let [lo, hi] = self.ivar_bounds;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("ivar_bounds must satisfy 0 ≤ lo ≤ hi < ∞");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam moments must lie in [0, 1) and epsilon > 0");
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        let floor = self.final_lr_fraction;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Adam moment estimates, shaped like the network.
pub struct Adam {
    m: NetworkWeights,
    v: NetworkWeights,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(like: &NetworkWeights, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step(&mut self, w: &mut NetworkWeights, grad: &NetworkWeights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let params = w.arrays_mut();
        let ms = self.m.arrays_mut();
        let vs = self.v.arrays_mut();
        for (((p, m), v), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grad.arrays()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Per-parameter median of the valid geometric inverse variances.
pub fn median_geometric_ivars(scenes: &[TrainingScene]) -> Option<[f64; 5]> {
    let valid: Vec<_> = scenes.iter().filter(|s| s.geo.valid).collect();
    let mut out = [0.0; 5];
    for (k, o) in out.iter_mut().enumerate() {
        *o = median(valid.iter().map(|s| s.geo.inverse_variances[k]).collect())?;
    }
    Some(out)
}

/// Minibatch Adam on the fused loss. Deterministic in `cfg.rng_seed`.
pub fn train(scenes: &[TrainingScene], cfg: &TrainConfig, exec: Execution) -> Result<NetworkWeights, NeuralError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut w = NetworkWeights::random(cfg.d, cfg.layers, &mut rng);
    w.attention_enabled = cfg.attention;
    w.ivar_bounds = cfg.ivar_bounds;
    w.median_inverse_variances = median_geometric_ivars(scenes);
    if cfg.fusion == FusionMode::Median && w.median_inverse_variances.is_none() {
        return Err(NeuralError::InvalidConfig(
            "median fusion needs valid geometric estimates".into(),
        ));
    }
    // Start the learned precisions at the typical geometric ones so both
    // branches initially share the fused estimate.
    if let Some(med) = w.median_inverse_variances {
        for (k, m) in med.iter().enumerate() {
            let m = m.clamp(cfg.ivar_bounds[0].max(1e-300), cfg.ivar_bounds[1].max(1e-300));
            w.uncertainty_head[1].bias[(0, k)] = m.ln();
        }
    }

    let mut adam = Adam::new(&w, cfg.beta1, cfg.beta2, cfg.epsilon);
    let batches_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mode = if epoch < cfg.warmup_epochs {
            FusionMode::Disabled
        } else {
            cfg.fusion
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let (loss, mut grad) = batch_gradient(&w, &batch, cfg.loss_weight, mode, exec)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(NeuralError::NonFiniteLoss { batch: step });
            }
            let norm = grad.norm();
            if norm > cfg.grad_clip {
                grad.scale(cfg.grad_clip / norm);
            }
            adam.step(&mut w, &grad, cfg.learning_rate_at(step, total_steps));
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        w.epoch_losses.push(epoch_loss / scenes.len() as f64);
    }
    Ok(w)
}
