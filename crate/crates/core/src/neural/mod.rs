//! Learned pose branch: pointwise correspondence embedding, single-head
//! self-attention message passing, mean pooling and two heads predicting
//! the five pose parameters and their inverse variances. Gradients are
//! derived by hand; the loss is evaluated after fusion with a constant
//! geometric estimate.

mod io;
mod train;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::fuse_pose_full;
use crate::geometry::{CameraPose, CorrespondenceSet};
use crate::motion::{
    circular_nearest, euler_from_rotation_clamped, idx, sphere_from_vector, sphere_jacobian, vector_from_sphere,
    wrap_half_closed, MotionParams, SphereAngles,
};
use crate::parallel::{map_slice, Execution};
use crate::uncertainty::GaussianEstimate;

pub use io::{load_weights, save_weights, weights_from_json, weights_to_json, WeightsError, WEIGHTS_FORMAT_VERSION};
pub use train::{median_geometric_ivars, train, Adam, TrainConfig};

pub const DEFAULT_IVAR_BOUNDS: [f64; 2] = [1e-6, 1e8];
pub const INPUT_DIM: usize = 4;
pub const POSE_OUT: usize = 6;
pub const UNC_OUT: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("network input has no correspondences")]
    EmptyInput,
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// `y = x·W + b` with `W` of shape in×out and `b` of shape 1×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(inputs, outputs),
            bias: DMatrix::zeros(1, outputs),
        }
    }

    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn random(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, gain: f64) -> Self {
        let a = gain * (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(inputs, outputs, |_, _| rng.random_range(-a..=a)),
            bias: DMatrix::zeros(1, outputs),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &self.weight;
        for r in 0..z.nrows() {
            for c in 0..z.ncols() {
                z[(r, c)] += self.bias[(0, c)];
            }
        }
        z
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &DMatrix<f64>, dz: &DMatrix<f64>, grad: &mut Linear) -> DMatrix<f64> {
        grad.weight += x.tr_mul(dz);
        for r in 0..dz.nrows() {
            for c in 0..dz.ncols() {
                grad.bias[(0, c)] += dz[(r, c)];
            }
        }
        dz * self.weight.transpose()
    }
}

fn relu(mut z: DMatrix<f64>) -> DMatrix<f64> {
    z.apply(|v| *v = v.max(0.0));
    z
}

fn relu_backward(pre: &DMatrix<f64>, mut grad: DMatrix<f64>) -> DMatrix<f64> {
    grad.zip_apply(pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    grad
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = s.clone();
    for r in 0..a.nrows() {
        let mut row = a.row_mut(r);
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Update MLP on `[f, m]`: 2d → 2d (ReLU) → d.
    pub update: [Linear; 2],
}

impl AttentionWeights {
    fn zeros(d: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            update: [Linear::zeros(2 * d, 2 * d), Linear::zeros(2 * d, d)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub d: usize,
    /// Embedding MLP: 4 → d (ReLU) → d.
    pub embed: [Linear; 2],
    pub attention: Vec<AttentionWeights>,
    /// Pre-pooling MLP: d → d (ReLU).
    pub post: Linear,
    /// d → d (ReLU) → 3 Euler angles + raw translation 3-vector.
    pub pose_head: [Linear; 2],
    /// d → d (ReLU) → 5 raw log inverse variances.
    pub uncertainty_head: [Linear; 2],
    /// When false, messages are the value vectors themselves (no attention).
    pub attention_enabled: bool,
    pub ivar_bounds: [f64; 2],
    /// Median geometric inverse variances of the training set.
    pub median_inverse_variances: Option<[f64; 5]>,
    pub epoch_losses: Vec<f64>,
}

impl NetworkWeights {
    pub fn zeros(d: usize, layers: usize) -> Self {
        Self {
            d,
            embed: [Linear::zeros(INPUT_DIM, d), Linear::zeros(d, d)],
            attention: (0..layers).map(|_| AttentionWeights::zeros(d)).collect(),
            post: Linear::zeros(d, d),
            pose_head: [Linear::zeros(d, d), Linear::zeros(d, POSE_OUT)],
            uncertainty_head: [Linear::zeros(d, d), Linear::zeros(d, UNC_OUT)],
            attention_enabled: true,
            ivar_bounds: DEFAULT_IVAR_BOUNDS,
            median_inverse_variances: None,
            epoch_losses: Vec::new(),
        }
    }

    /// Random initialization. Residual branches and output layers start
    /// small; the translation output is biased towards the optical axis.
    pub fn random(d: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Self::zeros(d, layers);
        w.embed = [Linear::random(rng, INPUT_DIM, d, 1.0), Linear::random(rng, d, d, 1.0)];
        for a in w.attention.iter_mut() {
            a.query = Linear::random(rng, d, d, 1.0);
            a.key = Linear::random(rng, d, d, 1.0);
            a.value = Linear::random(rng, d, d, 1.0);
            a.update = [Linear::random(rng, 2 * d, 2 * d, 1.0), Linear::random(rng, 2 * d, d, 0.1)];
        }
        w.post = Linear::random(rng, d, d, 1.0);
        w.pose_head = [Linear::random(rng, d, d, 1.0), Linear::random(rng, d, POSE_OUT, 0.1)];
        w.pose_head[1].bias[(0, 5)] = 1.0;
        w.uncertainty_head = [Linear::random(rng, d, d, 1.0), Linear::random(rng, d, UNC_OUT, 0.1)];
        w
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.d, self.layers());
        z.attention_enabled = self.attention_enabled;
        z.ivar_bounds = self.ivar_bounds;
        z
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut v: Vec<(String, &Linear)> = vec![("embed.0".into(), &self.embed[0]), ("embed.1".into(), &self.embed[1])];
        for (l, a) in self.attention.iter().enumerate() {
            v.push((format!("attention.{l}.query"), &a.query));
            v.push((format!("attention.{l}.key"), &a.key));
            v.push((format!("attention.{l}.value"), &a.value));
            v.push((format!("attention.{l}.update.0"), &a.update[0]));
            v.push((format!("attention.{l}.update.1"), &a.update[1]));
        }
        v.push(("post".into(), &self.post));
        v.push(("pose_head.0".into(), &self.pose_head[0]));
        v.push(("pose_head.1".into(), &self.pose_head[1]));
        v.push(("uncertainty_head.0".into(), &self.uncertainty_head[0]));
        v.push(("uncertainty_head.1".into(), &self.uncertainty_head[1]));
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = Vec::new();
        let [e0, e1] = &mut self.embed;
        v.push(e0);
        v.push(e1);
        for a in self.attention.iter_mut() {
            let [u0, u1] = &mut a.update;
            v.push(&mut a.query);
            v.push(&mut a.key);
            v.push(&mut a.value);
            v.push(u0);
            v.push(u1);
        }
        v.push(&mut self.post);
        let [p0, p1] = &mut self.pose_head;
        v.push(p0);
        v.push(p1);
        let [u0, u1] = &mut self.uncertainty_head;
        v.push(u0);
        v.push(u1);
        v
    }

    /// Every parameter array with its name, in a fixed order.
    pub fn arrays(&self) -> Vec<(String, &DMatrix<f64>)> {
        self.linears()
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.weight"), &l.weight), (format!("{name}.bias"), &l.bias)])
            .collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += c · other`, array by array.
    pub fn add_scaled(&mut self, other: &NetworkWeights, c: f64) {
        for (a, (_, b)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.arrays_mut() {
            *a *= c;
        }
    }

    pub fn norm(&self) -> f64 {
        self.arrays().iter().map(|(_, a)| a.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

pub fn input_features(corr: &CorrespondenceSet) -> DMatrix<f64> {
    DMatrix::from_fn(corr.len(), INPUT_DIM, |r, c| corr.points[r].as_array()[c])
}

/// Pointwise embedding of each correspondence, `n × d`.
pub fn embed_correspondences(corr: &CorrespondenceSet, w: &NetworkWeights) -> Result<DMatrix<f64>, NeuralError> {
    if corr.is_empty() {
        return Err(NeuralError::EmptyInput);
    }
    let x = input_features(corr);
    Ok(w.embed[1].forward(&relu(w.embed[0].forward(&x))))
}

/// Row-stochastic attention matrix `softmax(QKᵀ/√d)`.
pub fn attention_weights(f: &DMatrix<f64>, layer: &AttentionWeights) -> DMatrix<f64> {
    let q = layer.query.forward(f);
    let k = layer.key.forward(f);
    let scale = 1.0 / (f.ncols() as f64).sqrt();
    softmax_rows(&((q * k.transpose()) * scale))
}

/// One message-passing step `f + MLP([f, m])` with `m = softmax(QKᵀ/√d)·V`.
pub fn attention_layer(f: &DMatrix<f64>, layer: &AttentionWeights, attention_enabled: bool) -> DMatrix<f64> {
    layer_forward(f, layer, attention_enabled).output
}

struct LayerCache {
    input: DMatrix<f64>,
    k: DMatrix<f64>,
    q: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: Option<DMatrix<f64>>,
    concat: DMatrix<f64>,
    hidden_pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
    output: DMatrix<f64>,
}

fn layer_forward(f: &DMatrix<f64>, layer: &AttentionWeights, attention_enabled: bool) -> LayerCache {
    let d = f.ncols();
    let n = f.nrows();
    let v = layer.value.forward(f);
    let (q, k, attn, m) = if attention_enabled {
        let q = layer.query.forward(f);
        let k = layer.key.forward(f);
        let a = softmax_rows(&((&q * k.transpose()) * (1.0 / (d as f64).sqrt())));
        let m = &a * &v;
        (q, k, Some(a), m)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), None, v.clone())
    };
    let mut concat = DMatrix::zeros(n, 2 * d);
    concat.columns_mut(0, d).copy_from(f);
    concat.columns_mut(d, d).copy_from(&m);
    let hidden_pre = layer.update[0].forward(&concat);
    let hidden = relu(hidden_pre.clone());
    let output = f + layer.update[1].forward(&hidden);
    LayerCache {
        input: f.clone(),
        q,
        k,
        v,
        attn,
        concat,
        hidden_pre,
        hidden,
        output,
    }
}

fn layer_backward(c: &LayerCache, layer: &AttentionWeights, d_out: &DMatrix<f64>, grad: &mut AttentionWeights) -> DMatrix<f64> {
    let d = c.input.ncols();
    let mut d_in = d_out.clone();
    let d_hidden = layer.update[1].backward(&c.hidden, d_out, &mut grad.update[1]);
    let d_hidden_pre = relu_backward(&c.hidden_pre, d_hidden);
    let d_concat = layer.update[0].backward(&c.concat, &d_hidden_pre, &mut grad.update[0]);
    d_in += d_concat.columns(0, d);
    let d_m = d_concat.columns(d, d).into_owned();
    let d_v = match &c.attn {
        Some(a) => {
            let d_a = &d_m * c.v.transpose();
            let mut d_s = a.clone();
            for r in 0..a.nrows() {
                let dot = a.row(r).dot(&d_a.row(r));
                for j in 0..a.ncols() {
                    d_s[(r, j)] = a[(r, j)] * (d_a[(r, j)] - dot);
                }
            }
            let scale = 1.0 / (d as f64).sqrt();
            let d_q = (&d_s * &c.k) * scale;
            let d_k = d_s.tr_mul(&c.q) * scale;
            d_in += layer.query.backward(&c.input, &d_q, &mut grad.query);
            d_in += layer.key.backward(&c.input, &d_k, &mut grad.key);
            a.tr_mul(&d_m)
        }
        None => d_m,
    };
    d_in += layer.value.backward(&c.input, &d_v, &mut grad.value);
    d_in
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardPass {
    x: DMatrix<f64>,
    embed_pre: DMatrix<f64>,
    embed_hidden: DMatrix<f64>,
    layers: Vec<LayerCache>,
    post_pre: DMatrix<f64>,
    pooled: DMatrix<f64>,
    pose_pre: DMatrix<f64>,
    pose_hidden: DMatrix<f64>,
    unc_pre: DMatrix<f64>,
    unc_hidden: DMatrix<f64>,
    pose_out: DMatrix<f64>,
    /// Learned Gaussian estimate.
    pub estimate: GaussianEstimate,
    ivar_active: [bool; 5],
}

impl ForwardPass {
    /// Attention matrix of the last message-passing layer, if any.
    pub fn last_attention(&self) -> Option<&DMatrix<f64>> {
        self.layers.last().and_then(|l| l.attn.as_ref())
    }

    pub fn raw_translation(&self) -> Vector3<f64> {
        Vector3::new(self.pose_out[(0, 3)], self.pose_out[(0, 4)], self.pose_out[(0, 5)])
    }
}

fn sphere_or_default(t: &Vector3<f64>) -> SphereAngles {
    sphere_from_vector(t).unwrap_or(SphereAngles { alpha: 0.0, beta: 0.0 })
}

/// Derivatives of `(α, β)` with respect to an unnormalized direction.
fn sphere_angle_gradients(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n2 = t.norm_squared();
    let rho2 = t.y * t.y + t.z * t.z;
    if n2 == 0.0 || rho2 == 0.0 {
        return (Vector3::zeros(), Vector3::zeros());
    }
    let rho = rho2.sqrt();
    let d_alpha = Vector3::new(-rho / n2, t.x * t.y / (rho * n2), t.x * t.z / (rho * n2));
    let d_beta = Vector3::new(0.0, -t.z / rho2, t.y / rho2);
    (d_alpha, d_beta)
}

pub fn forward_pass(corr: &CorrespondenceSet, w: &NetworkWeights) -> Result<ForwardPass, NeuralError> {
    if corr.is_empty() {
        return Err(NeuralError::EmptyInput);
    }
    let x = input_features(corr);
    let embed_pre = w.embed[0].forward(&x);
    let embed_hidden = relu(embed_pre.clone());
    let mut f = w.embed[1].forward(&embed_hidden);
    let mut layers = Vec::with_capacity(w.layers());
    for a in &w.attention {
        let c = layer_forward(&f, a, w.attention_enabled);
        f = c.output.clone();
        layers.push(c);
    }
    let post_pre = w.post.forward(&f);
    let post = relu(post_pre.clone());
    let n = post.nrows() as f64;
    let pooled = DMatrix::from_fn(1, w.d, |_, c| post.column(c).sum() / n);

    let pose_pre = w.pose_head[0].forward(&pooled);
    let pose_hidden = relu(pose_pre.clone());
    let pose_out = w.pose_head[1].forward(&pose_hidden);
    let unc_pre = w.uncertainty_head[0].forward(&pooled);
    let unc_hidden = relu(unc_pre.clone());
    let unc_raw = w.uncertainty_head[1].forward(&unc_hidden);

    let t_raw = Vector3::new(pose_out[(0, 3)], pose_out[(0, 4)], pose_out[(0, 5)]);
    let s = sphere_or_default(&t_raw);
    let means = [
        wrap_half_closed(pose_out[(0, 0)]),
        wrap_half_closed(pose_out[(0, 1)]),
        wrap_half_closed(pose_out[(0, 2)]),
        s.alpha,
        s.beta,
    ];
    let [lo, hi] = w.ivar_bounds;
    let mut ivars = [0.0; 5];
    let mut active = [false; 5];
    for k in 0..5 {
        let e = unc_raw[(0, k)].exp();
        if e < lo {
            ivars[k] = lo;
        } else if e > hi {
            ivars[k] = hi;
        } else {
            ivars[k] = e;
            active[k] = true;
        }
    }
    Ok(ForwardPass {
        x,
        embed_pre,
        embed_hidden,
        layers,
        post_pre,
        pooled,
        pose_pre,
        pose_hidden,
        unc_pre,
        unc_hidden,
        pose_out,
        estimate: GaussianEstimate {
            means,
            inverse_variances: ivars,
            valid: true,
        },
        ivar_active: active,
    })
}

/// Learned Gaussian estimate for one correspondence set.
pub fn forward(corr: &CorrespondenceSet, w: &NetworkWeights) -> Result<GaussianEstimate, NeuralError> {
    Ok(forward_pass(corr, w)?.estimate)
}

/// Backpropagates gradients on the learned means and inverse variances.
fn backward(pass: &ForwardPass, w: &NetworkWeights, d_means: &[f64; 5], d_ivars: &[f64; 5]) -> NetworkWeights {
    let mut g = w.zeros_like();
    let mut d_pose = DMatrix::zeros(1, POSE_OUT);
    for k in 0..3 {
        d_pose[(0, k)] = d_means[k];
    }
    let t_raw = pass.raw_translation();
    let (da, db) = sphere_angle_gradients(&t_raw);
    let dt = da * d_means[idx::ALPHA] + db * d_means[idx::BETA];
    for k in 0..3 {
        d_pose[(0, 3 + k)] = dt[k];
    }
    let mut d_unc = DMatrix::zeros(1, UNC_OUT);
    for k in 0..5 {
        if pass.ivar_active[k] {
            d_unc[(0, k)] = d_ivars[k] * pass.estimate.inverse_variances[k];
        }
    }

    let d_hidden = w.pose_head[1].backward(&pass.pose_hidden, &d_pose, &mut g.pose_head[1]);
    let d_pre = relu_backward(&pass.pose_pre, d_hidden);
    let mut d_pooled = w.pose_head[0].backward(&pass.pooled, &d_pre, &mut g.pose_head[0]);
    let d_hidden = w.uncertainty_head[1].backward(&pass.unc_hidden, &d_unc, &mut g.uncertainty_head[1]);
    let d_pre = relu_backward(&pass.unc_pre, d_hidden);
    d_pooled += w.uncertainty_head[0].backward(&pass.pooled, &d_pre, &mut g.uncertainty_head[0]);

    let n = pass.x.nrows();
    let d_post = DMatrix::from_fn(n, w.d, |_, c| d_pooled[(0, c)] / n as f64);
    let d_post_pre = relu_backward(&pass.post_pre, d_post);
    let last = match pass.layers.last() {
        Some(l) => l.output.clone(),
        None => w.embed[1].forward(&pass.embed_hidden),
    };
    let mut d_f = w.post.backward(&last, &d_post_pre, &mut g.post);
    for (l, cache) in pass.layers.iter().enumerate().rev() {
        d_f = layer_backward(cache, &w.attention[l], &d_f, &mut g.attention[l]);
    }
    let d_hidden = w.embed[1].backward(&pass.embed_hidden, &d_f, &mut g.embed[1]);
    let d_pre = relu_backward(&pass.embed_pre, d_hidden);
    w.embed[0].backward(&pass.x, &d_pre, &mut g.embed[0]);
    g
}

/// Ground truth in the loss parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTarget {
    pub euler: [f64; 3],
    pub translation: Vector3<f64>,
}

impl LossTarget {
    pub fn from_pose(gt: &CameraPose) -> Self {
        let e = euler_from_rotation_clamped(&gt.rotation);
        Self {
            euler: [e.yaw, e.pitch, e.roll],
            translation: gt.translation.normalize(),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 translation error on the unit sphere plus `w` times the L1 error of
/// the Euler angles against the circularly nearest ground truth. Returns
/// the loss and its gradient on the five pose parameters.
pub fn loss_and_gradient(means: &[f64; 5], target: &LossTarget, w: f64) -> (f64, [f64; 5]) {
    let s = SphereAngles {
        alpha: means[idx::ALPHA],
        beta: means[idx::BETA],
    };
    let t = vector_from_sphere(s);
    let (da, db) = sphere_jacobian(s);
    let mut grad = [0.0; 5];
    let mut loss = 0.0;
    for j in 0..3 {
        let diff = t[j] - target.translation[j];
        loss += diff.abs();
        grad[idx::ALPHA] += sign(diff) * da[j];
        grad[idx::BETA] += sign(diff) * db[j];
    }
    for k in 0..3 {
        let nearest = circular_nearest(means[k], target.euler[k]);
        let diff = means[k] - nearest;
        loss += w * diff.abs();
        grad[k] = w * sign(diff);
    }
    (loss, grad)
}

pub fn loss(fused: &MotionParams, gt_pose: &CameraPose, w: f64) -> f64 {
    loss_and_gradient(&fused.to_array(), &LossTarget::from_pose(gt_pose), w).0
}

/// One training example with its cached geometric estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScene {
    pub corr: CorrespondenceSet,
    pub target: LossTarget,
    pub geo: GaussianEstimate,
}

impl TrainingScene {
    pub fn new(corr: CorrespondenceSet, gt_pose: &CameraPose, geo: GaussianEstimate) -> Self {
        Self {
            corr,
            target: LossTarget::from_pose(gt_pose),
            geo,
        }
    }
}

/// How the learned estimate enters the training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Fused with the geometric estimate using the predicted precisions.
    #[default]
    Learned,
    /// Fused using the training-set median geometric precisions.
    Median,
    /// Loss on the learned pose alone.
    Disabled,
}

fn learned_for_fusion(pass: &ForwardPass, w: &NetworkWeights, mode: FusionMode) -> Result<GaussianEstimate, NeuralError> {
    let mut dnn = pass.estimate;
    if mode == FusionMode::Median {
        dnn.inverse_variances = w
            .median_inverse_variances
            .ok_or_else(|| NeuralError::InvalidConfig("median fusion needs median inverse variances".into()))?;
    }
    Ok(dnn)
}

/// Loss of one scene under the given fusion mode.
pub fn scene_loss(w: &NetworkWeights, scene: &TrainingScene, loss_weight: f64, mode: FusionMode) -> Result<f64, NeuralError> {
    let pass = forward_pass(&scene.corr, w)?;
    if mode == FusionMode::Disabled {
        return Ok(loss_and_gradient(&pass.estimate.means, &scene.target, loss_weight).0);
    }
    let fused = fuse_pose_full(&scene.geo, &learned_for_fusion(&pass, w, mode)?);
    Ok(loss_and_gradient(&fused.estimate.means, &scene.target, loss_weight).0)
}

/// Loss of one scene and its gradient with respect to every weight. The
/// geometric estimate is a constant.
pub fn scene_gradient(
    w: &NetworkWeights,
    scene: &TrainingScene,
    loss_weight: f64,
    mode: FusionMode,
) -> Result<(f64, NetworkWeights), NeuralError> {
    let pass = forward_pass(&scene.corr, w)?;
    if mode == FusionMode::Disabled {
        let (l, d_means) = loss_and_gradient(&pass.estimate.means, &scene.target, loss_weight);
        return Ok((l, backward(&pass, w, &d_means, &[0.0; 5])));
    }
    let fused = fuse_pose_full(&scene.geo, &learned_for_fusion(&pass, w, mode)?);
    let (l, d_fused) = loss_and_gradient(&fused.estimate.means, &scene.target, loss_weight);
    let mut d_means = [0.0; 5];
    let mut d_ivars = [0.0; 5];
    for k in 0..5 {
        d_means[k] = d_fused[k] * fused.gradient.d_mean_d_dnn_mean[k];
        if mode == FusionMode::Learned {
            d_ivars[k] = d_fused[k] * fused.gradient.d_mean_d_dnn_ivar[k];
        }
    }
    Ok((l, backward(&pass, w, &d_means, &d_ivars)))
}

/// Mean loss and mean gradient over a batch. Per-scene gradients may be
/// computed in parallel; they are summed in scene order.
pub fn batch_gradient(
    w: &NetworkWeights,
    scenes: &[&TrainingScene],
    loss_weight: f64,
    mode: FusionMode,
    exec: Execution,
) -> Result<(f64, NetworkWeights), NeuralError> {
    if scenes.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let parts = map_slice(exec, scenes, |s| scene_gradient(w, s, loss_weight, mode));
    let mut total = 0.0;
    let mut grad = w.zeros_like();
    for p in parts {
        let (l, g) = p?;
        total += l;
        grad.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / scenes.len() as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}
