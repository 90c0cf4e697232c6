//! The dynamics network: a conv encoder for image and optical flow, an FC block
//! that merges the image feature with joint states and a torque sequence, and a
//! deconv decoder that predicts the binary image `T` frames ahead.
//!
//! The network can run in two ways that give bit-identical results in eval mode:
//! one monolithic pass, or [`DynamicsNet::encode`] once followed by any number of
//! [`DynamicsNet::predict`] calls on the cached feature. The controller uses the
//! second, since only the torque input changes between candidates.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, AdamState, BatchNorm, Conv2d, Deconv2d, Layer, Linear, Mode, Real, Relu, Reshape, Sequential, Sigmoid,
    Tensor,
};
use crate::error::{Error, Result};
use crate::vision::{prediction_loss, FlowField, Image, FLOW_CLAMP, IMAGE_SIZE};

pub const WEIGHT_MAGIC: &[u8; 4] = b"FDNW";
pub const WEIGHT_VERSION: u32 = 1;
/// Normalized joint velocities are clamped to this magnitude.
pub const VELOCITY_CLAMP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DynNetConfig {
    /// Prediction horizon `T` in frames.
    pub horizon: usize,
    /// Number of actuators `M`.
    pub actuators: usize,
    pub tau_max: f64,
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub image_feature_dim: usize,
    /// Hidden FC sizes after the merged input layer.
    pub fc_units: Vec<usize>,
}

impl DynNetConfig {
    pub fn new(horizon: usize, actuators: usize, tau_max: f64) -> Self {
        Self {
            horizon,
            actuators,
            tau_max,
            in_channels: 3,
            image_size: IMAGE_SIZE,
            conv_channels: vec![4, 8, 16, 32, 64],
            image_feature_dim: 128,
            fc_units: vec![128, 128, 128, 256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.horizon == 0 || self.actuators == 0 {
            return bad(format!("T and M must be ≥ 1 (T={}, M={})", self.horizon, self.actuators));
        }
        if !(self.tau_max > 0.0 && self.tau_max.is_finite()) {
            return bad(format!("tau_max must be positive, got {}", self.tau_max));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive".into());
        }
        let div = 1usize << self.conv_channels.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return bad(format!(
                "image size {} is not divisible by 2^{} (number of conv layers)",
                self.image_size,
                self.conv_channels.len()
            ));
        }
        if self.fc_units.is_empty() || self.fc_units.contains(&0) || self.image_feature_dim == 0 || self.in_channels == 0 {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Per-sample width of the joint-state and torque inputs, `M·(3+T)`.
    pub fn extras_width(&self) -> usize {
        self.actuators * (3 + self.horizon)
    }

    /// Width of the merged FC input, `feature + M·(3+T)`.
    pub fn fc_input_width(&self) -> usize {
        self.image_feature_dim + self.extras_width()
    }

    fn bottleneck(&self) -> (usize, usize) {
        let side = self.image_size >> self.conv_channels.len();
        (*self.conv_channels.last().expect("validated"), side)
    }
}

/// Raw (unnormalized) state of one actuated joint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState {
    pub position: f64,
    pub velocity: f64,
    pub torque: f64,
}

/// What the network sees at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Image,
    pub flow: FlowField,
    pub joints: Vec<JointState>,
}

impl Observation {
    /// Image, flow x, flow y as three planes; flow scaled to ±1.
    pub fn image_channels<F: Real>(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(3 * self.image.data().len());
        out.extend(self.image.data().iter().map(|&v| F::of(v as f64)));
        let s = 1.0 / FLOW_CLAMP as f64;
        out.extend(self.flow.x.iter().map(|&v| F::of(v as f64 * s)));
        out.extend(self.flow.y.iter().map(|&v| F::of(v as f64 * s)));
        out
    }
}

/// Wraps to `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// `(position/π, velocity/2π, torque/τ_max)` per actuator, each clamped.
pub fn normalize_joints(joints: &[JointState], tau_max: f64) -> Vec<f64> {
    joints
        .iter()
        .flat_map(|j| {
            [
                wrap_angle(j.position) / PI,
                (j.velocity / (2.0 * PI)).clamp(-VELOCITY_CLAMP, VELOCITY_CLAMP),
                (j.torque / tau_max).clamp(-1.0, 1.0),
            ]
        })
        .collect()
}

/// Torque command over the horizon, `M × T`, actuator-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueSequence {
    actuators: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl TorqueSequence {
    pub fn zeros(actuators: usize, horizon: usize) -> Self {
        Self {
            actuators,
            horizon,
            values: vec![0.0; actuators * horizon],
        }
    }

    pub fn from_vec(actuators: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != actuators * horizon {
            return Err(Error::InvalidArgument(format!(
                "torque sequence {actuators}×{horizon} needs {} values, got {}",
                actuators * horizon,
                values.len()
            )));
        }
        Ok(Self {
            actuators,
            horizon,
            values,
        })
    }

    pub fn actuators(&self) -> usize {
        self.actuators
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, actuator: usize, t: usize) -> f64 {
        self.values[actuator * self.horizon + t]
    }

    pub fn set(&mut self, actuator: usize, t: usize, v: f64) {
        self.values[actuator * self.horizon + t] = v;
    }

    /// Torques for the current frame, one per actuator.
    pub fn first(&self) -> Vec<f64> {
        (0..self.actuators).map(|a| self.get(a, 0)).collect()
    }

    pub fn clip(&mut self, tau_max: f64) {
        self.values.iter_mut().for_each(|v| *v = v.clamp(-tau_max, tau_max));
    }

    pub fn within(&self, tau_max: f64) -> bool {
        self.values.iter().all(|v| v.abs() <= tau_max)
    }
}

/// Training data: frames, blurred targets and the pairs that link them.
#[derive(Debug, Clone)]
pub struct Dataset {
    horizon: usize,
    actuators: usize,
    observations: Vec<Observation>,
    targets: Vec<Image>,
    pairs: Vec<Pair>,
}

/// Observation at frame `obs`, torques over `[obs, obs+T)`, blurred image at `obs+T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub episode: usize,
    pub obs: usize,
    pub target: usize,
    pub tau: TorqueSequence,
}

impl Dataset {
    pub fn new(horizon: usize, actuators: usize) -> Self {
        Self {
            horizon,
            actuators,
            observations: Vec::new(),
            targets: Vec::new(),
            pairs: Vec::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn actuators(&self) -> usize {
        self.actuators
    }

    /// Adds an episode. `torques[t]` is the command applied during frame `t`, and
    /// `blurred[t]` the blurred version of frame `t`'s image.
    pub fn push_episode(&mut self, observations: Vec<Observation>, blurred: Vec<Image>, torques: &[Vec<f64>]) -> Result<()> {
        let n = observations.len();
        let t = self.horizon;
        if blurred.len() != n || torques.len() != n {
            return Err(Error::Dataset(format!(
                "episode arrays differ in length ({n} observations, {} targets, {} torques)",
                blurred.len(),
                torques.len()
            )));
        }
        if n <= t {
            return Err(Error::Dataset(format!("episode of {n} frames is too short for T={t}")));
        }
        if torques.iter().any(|v| v.len() != self.actuators) || observations.iter().any(|o| o.joints.len() != self.actuators) {
            return Err(Error::Dataset(format!("expected {} actuators per frame", self.actuators)));
        }
        let episode = self.pairs.last().map_or(0, |p| p.episode + 1);
        let base = self.observations.len();
        for start in 0..n - t {
            let mut tau = TorqueSequence::zeros(self.actuators, t);
            for k in 0..t {
                for a in 0..self.actuators {
                    tau.set(a, k, torques[start + k][a]);
                }
            }
            self.pairs.push(Pair {
                episode,
                obs: base + start,
                target: base + start + t,
                tau,
            });
        }
        self.observations.extend(observations);
        self.targets.extend(blurred);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn observation(&self, pair: &Pair) -> &Observation {
        &self.observations[pair.obs]
    }

    pub fn target(&self, pair: &Pair) -> &Image {
        &self.targets[pair.target]
    }

    /// Splits pair indices into training and validation sets. The last
    /// `val_fraction` of each episode is held out, and training pairs whose target
    /// lies inside the held-out stretch are dropped so no frame is shared.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut i = 0;
        while i < self.pairs.len() {
            let ep = self.pairs[i].episode;
            let end = self.pairs[i..].iter().position(|p| p.episode != ep).map_or(self.pairs.len(), |k| i + k);
            let count = end - i;
            let n_val = ((count as f64 * val_fraction).round() as usize).min(count);
            let cut = self.pairs[end - n_val.max(1).min(count)].obs;
            for j in i..end {
                let p = &self.pairs[j];
                if n_val > 0 && p.obs >= cut {
                    val.push(j);
                } else if n_val == 0 || p.target < cut {
                    train.push(j);
                }
            }
            i = end;
        }
        (train, val)
    }

    /// Mean loss of predicting "nothing moves": the current image against the
    /// blurred future target.
    pub fn copy_baseline_loss(&self, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Dataset("no pairs to evaluate".into()));
        }
        let mut total = 0.0;
        for &i in indices {
            let p = &self.pairs[i];
            total += prediction_loss(&self.observation(p).image, self.target(p))?;
        }
        Ok(total / indices.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_loss: f64,
    /// Copy-current-image loss on the validation split.
    pub baseline_loss: f64,
}

/// Mean squared error over a batch and its gradient with respect to `pred`.
pub fn mse_with_grad<F: Real>(pred: &[F], target: &[F]) -> (f64, Vec<F>) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let scale = F::of(2.0 / n);
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.as_f64() * d.as_f64();
            d * scale
        })
        .collect();
    (sum / n, grad)
}

#[derive(Debug, Clone)]
pub struct DynamicsNet<F = f32> {
    config: DynNetConfig,
    encoder: Sequential<F>,
    fc: Sequential<F>,
    decoder: Sequential<F>,
}

fn bn_relu<F: Real>(layers: &mut Vec<Layer<F>>, channels: usize) {
    layers.push(Layer::BatchNorm(BatchNorm::new(channels)));
    layers.push(Layer::Relu(Relu::default()));
}

impl<F: Real> DynamicsNet<F> {
    /// Builds a freshly initialized network; equal seeds give equal weights.
    pub fn build(config: DynNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (last_ch, side) = config.bottleneck();
        let flat = last_ch * side * side;

        let mut enc = Vec::new();
        let mut prev = config.in_channels;
        for &c in &config.conv_channels {
            enc.push(Layer::Conv2d(Conv2d::new(prev, c, &mut rng)));
            bn_relu(&mut enc, c);
            prev = c;
        }
        enc.push(Layer::Linear(Linear::new(flat, config.image_feature_dim, &mut rng)));
        bn_relu(&mut enc, config.image_feature_dim);

        let mut fc = Vec::new();
        let mut width = config.fc_input_width();
        for &u in &config.fc_units {
            fc.push(Layer::Linear(Linear::new(width, u, &mut rng)));
            bn_relu(&mut fc, u);
            width = u;
        }

        let mut dec = vec![Layer::Linear(Linear::new(width, flat, &mut rng))];
        bn_relu(&mut dec, flat);
        dec.push(Layer::Reshape(Reshape::new(vec![last_ch, side, side])));
        let mut up: Vec<usize> = config.conv_channels.iter().rev().skip(1).copied().collect();
        up.push(1);
        let mut prev = last_ch;
        for (i, &c) in up.iter().enumerate() {
            dec.push(Layer::Deconv2d(Deconv2d::new(prev, c, &mut rng)));
            if i + 1 < up.len() {
                bn_relu(&mut dec, c);
            }
            prev = c;
        }
        dec.push(Layer::Sigmoid(Sigmoid::default()));

        Ok(Self {
            config,
            encoder: Sequential::new(enc),
            fc: Sequential::new(fc),
            decoder: Sequential::new(dec),
        })
    }

    pub fn config(&self) -> &DynNetConfig {
        &self.config
    }

    /// Encoder, fully connected stage and decoder. The image feature and the extras
    /// are concatenated per sample between the first two.
    pub fn stages_mut(&mut self) -> [&mut Sequential<F>; 3] {
        [&mut self.encoder, &mut self.fc, &mut self.decoder]
    }

    /// The same network in another precision, e.g. `f64` for gradient checks.
    pub fn cast<G: Real>(&self) -> DynamicsNet<G> {
        DynamicsNet {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            fc: self.fc.cast(),
            decoder: self.decoder.cast(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.fc.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|t| t.zero_grad());
    }

    /// All tensors, running statistics included, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = self.encoder.named_tensors("encoder");
        v.extend(self.fc.named_tensors("fc"));
        v.extend(self.decoder.named_tensors("decoder"));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = self.encoder.named_tensors_mut("encoder");
        v.extend(self.fc.named_tensors_mut("fc"));
        v.extend(self.decoder.named_tensors_mut("decoder"));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.len()).sum()
    }

    fn image_shape(&self, batch: usize) -> Vec<usize> {
        let s = self.config.image_size;
        vec![batch, self.config.in_channels, s, s]
    }

    /// Concatenates `feature` (`B × D`) with `extras` (`B × M(3+T)`) row by row.
    fn merge(&self, feature: &[F], extras: &[F], batch: usize) -> Result<Tensor<F>> {
        let d = self.config.image_feature_dim;
        let e = self.config.extras_width();
        if feature.len() != batch * d || extras.len() != batch * e {
            return Err(Error::ShapeMismatch {
                layer: "fc input".into(),
                expected: vec![batch, d + e],
                actual: vec![feature.len(), extras.len()],
            });
        }
        let mut data = Vec::with_capacity(batch * (d + e));
        for b in 0..batch {
            data.extend_from_slice(&feature[b * d..(b + 1) * d]);
            data.extend_from_slice(&extras[b * e..(b + 1) * e]);
        }
        Tensor::new(vec![batch, d + e], data)
    }

    /// Normalized joint states followed by normalized torques, for one sample.
    pub fn extras(&self, joints: &[JointState], tau: &TorqueSequence) -> Result<Vec<F>> {
        let c = &self.config;
        if joints.len() != c.actuators || tau.actuators() != c.actuators || tau.horizon() != c.horizon {
            return Err(Error::ShapeMismatch {
                layer: "torque/joint input".into(),
                expected: vec![c.actuators, c.horizon],
                actual: vec![joints.len().max(tau.actuators()), tau.horizon()],
            });
        }
        let mut v: Vec<F> = normalize_joints(joints, c.tau_max).into_iter().map(F::of).collect();
        v.extend(tau.values().iter().map(|&t| F::of(t / c.tau_max)));
        Ok(v)
    }

    /// Full forward pass on raw inputs: images `B × C × H × W`, extras `B × M(3+T)`.
    /// With `record`, the pass can be followed by [`Self::backward_full`].
    pub fn forward_full(&mut self, images: &Tensor<F>, extras: &[F], mode: Mode, record: bool) -> Result<Tensor<F>> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let feature = if record {
            self.encoder.forward(images, mode)?
        } else {
            self.encoder.forward_no_record(images, mode)?
        };
        let merged = self.merge(feature.data(), extras, batch)?;
        self.head(&merged, mode, record)
    }

    fn head(&mut self, merged: &Tensor<F>, mode: Mode, record: bool) -> Result<Tensor<F>> {
        if record {
            let h = self.fc.forward(merged, mode)?;
            self.decoder.forward(&h, mode)
        } else {
            let h = self.fc.forward_no_record(merged, mode)?;
            self.decoder.forward_no_record(&h, mode)
        }
    }

    fn head_backward(&mut self, grad_out: &[F]) -> Result<Vec<F>> {
        let g = self.decoder.backward(grad_out, true)?.expect("input gradient requested");
        Ok(self.fc.backward(&g, true)?.expect("input gradient requested"))
    }

    /// Back-propagates through the whole network, accumulating parameter gradients.
    /// Returns the gradient with respect to the extras input (`B × M(3+T)`).
    pub fn backward_full(&mut self, grad_out: &[F]) -> Result<Vec<F>> {
        let g = self.head_backward(grad_out)?;
        let d = self.config.image_feature_dim;
        let e = self.config.extras_width();
        let batch = g.len() / (d + e);
        let mut g_feat = Vec::with_capacity(batch * d);
        let mut g_extra = Vec::with_capacity(batch * e);
        for row in g.chunks(d + e) {
            g_feat.extend_from_slice(&row[..d]);
            g_extra.extend_from_slice(&row[d..]);
        }
        self.encoder.backward(&g_feat, false)?;
        Ok(g_extra)
    }

    fn observation_tensor(&self, obs: &Observation) -> Result<Tensor<F>> {
        if obs.image.width() != self.config.image_size || obs.image.height() != self.config.image_size {
            return Err(Error::ShapeMismatch {
                layer: "image input".into(),
                expected: vec![self.config.image_size, self.config.image_size],
                actual: vec![obs.image.width(), obs.image.height()],
            });
        }
        Tensor::new(self.image_shape(1), obs.image_channels())
    }

    /// Image feature of one observation (eval mode, nothing recorded).
    pub fn encode(&mut self, obs: &Observation) -> Result<Vec<F>> {
        let x = self.observation_tensor(obs)?;
        Ok(self.encoder.forward_no_record(&x, Mode::Eval)?.into_data())
    }

    /// Predicted image after `T` frames for every torque sequence, from a cached feature.
    pub fn predict_batch(&mut self, feature: &[F], joints: &[JointState], taus: &[TorqueSequence]) -> Result<Vec<Image>> {
        let b = taus.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let mut feats = Vec::with_capacity(b * feature.len());
        let mut extras = Vec::with_capacity(b * self.config.extras_width());
        for tau in taus {
            feats.extend_from_slice(feature);
            extras.extend(self.extras(joints, tau)?);
        }
        let merged = self.merge(&feats, &extras, b)?;
        let out = self.head(&merged, Mode::Eval, false)?;
        self.to_images(out.data())
    }

    pub fn predict(&mut self, feature: &[F], joints: &[JointState], tau: &TorqueSequence) -> Result<Image> {
        Ok(self.predict_batch(feature, joints, std::slice::from_ref(tau))?.remove(0))
    }

    /// Encoder and head in a single pass (eval mode).
    pub fn forward_monolithic(&mut self, obs: &Observation, tau: &TorqueSequence) -> Result<Image> {
        let x = self.observation_tensor(obs)?;
        let extras = self.extras(&obs.joints, tau)?;
        let out = self.forward_full(&x, &extras, Mode::Eval, false)?;
        Ok(self.to_images(out.data())?.remove(0))
    }

    /// Prediction loss for one torque sequence and its gradient with respect to the
    /// torques (in N·m). Parameter gradients are left untouched.
    pub fn loss_and_tau_grad(
        &mut self,
        feature: &[F],
        joints: &[JointState],
        tau: &TorqueSequence,
        blurred_target: &Image,
    ) -> Result<(f64, Vec<f64>)> {
        let extras = self.extras(joints, tau)?;
        let merged = self.merge(feature, &extras, 1)?;
        let out = self.head(&merged, Mode::Eval, true)?;
        let target: Vec<F> = blurred_target.data().iter().map(|&v| F::of(v as f64)).collect();
        if target.len() != out.len() {
            return Err(Error::ShapeMismatch {
                layer: "loss".into(),
                expected: out.shape().to_vec(),
                actual: vec![blurred_target.width(), blurred_target.height()],
            });
        }
        let (loss, g) = mse_with_grad(out.data(), &target);
        let g_in = self.head_backward(&g)?;
        self.fc.clear_cache();
        self.decoder.clear_cache();
        self.zero_grad();
        let off = self.config.image_feature_dim + 3 * self.config.actuators;
        let inv = 1.0 / self.config.tau_max;
        Ok((loss, g_in[off..].iter().map(|v| v.as_f64() * inv).collect()))
    }

    fn to_images(&self, data: &[F]) -> Result<Vec<Image>> {
        let s = self.config.image_size;
        data.chunks(s * s)
            .map(|c| Image::from_vec(s, s, c.iter().map(|v| v.as_f64() as f32).collect()))
            .collect()
    }

    fn batch_inputs(&self, data: &Dataset, idx: &[usize]) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
        let mut images = Vec::with_capacity(idx.len() * self.config.in_channels * self.config.image_size.pow(2));
        let mut extras = Vec::with_capacity(idx.len() * self.config.extras_width());
        let mut targets = Vec::with_capacity(idx.len() * self.config.image_size.pow(2));
        for &i in idx {
            let p = &data.pairs[i];
            let obs = data.observation(p);
            images.extend(obs.image_channels::<F>());
            extras.extend(self.extras(&obs.joints, &p.tau)?);
            targets.extend(data.target(p).data().iter().map(|&v| F::of(v as f64)));
        }
        Ok((Tensor::new(self.image_shape(idx.len()), images)?, extras, targets))
    }

    /// Mean prediction loss over the given pairs in eval mode.
    pub fn evaluate(&mut self, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Dataset("no pairs to evaluate".into()));
        }
        let mut total = 0.0;
        for chunk in indices.chunks(batch_size.max(1)) {
            let (x, e, t) = self.batch_inputs(data, chunk)?;
            let out = self.forward_full(&x, &e, Mode::Eval, false)?;
            total += mse_with_grad(out.data(), &t).0 * chunk.len() as f64;
        }
        Ok(total / indices.len() as f64)
    }

    /// Adam training on the dataset's training split. `progress` sees each epoch's
    /// metrics as soon as they are known.
    pub fn train(
        &mut self,
        data: &Dataset,
        tc: &TrainConfig,
        mut progress: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if data.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if data.horizon() != self.config.horizon || data.actuators() != self.config.actuators {
            return Err(Error::Dataset(format!(
                "dataset has T={}, M={} but the network expects T={}, M={}",
                data.horizon(),
                data.actuators(),
                self.config.horizon,
                self.config.actuators
            )));
        }
        if tc.batch_size < 2 || tc.lr <= 0.0 || !(0.0..1.0).contains(&tc.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "need batch ≥ 2, lr > 0 and 0 ≤ val_fraction < 1 (got {}, {}, {})",
                tc.batch_size, tc.lr, tc.val_fraction
            )));
        }
        let (mut train_idx, val_idx) = data.split(tc.val_fraction);
        if train_idx.len() < 2 {
            return Err(Error::Dataset(format!("only {} training pairs after the split", train_idx.len())));
        }
        let baseline = if val_idx.is_empty() { f64::NAN } else { data.copy_baseline_loss(&val_idx)? };
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut adam = AdamState::new(tc.lr);
        let mut history = Vec::with_capacity(tc.epochs);
        for epoch in 1..=tc.epochs {
            train_idx.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut count = 0usize;
            for chunk in train_idx.chunks(tc.batch_size) {
                // Batch statistics of a single sample are degenerate.
                if chunk.len() < 2 {
                    continue;
                }
                let (x, e, t) = self.batch_inputs(data, chunk)?;
                let out = self.forward_full(&x, &e, Mode::Train, true)?;
                let (loss, g) = mse_with_grad(out.data(), &t);
                if !loss.is_finite() {
                    return Err(Error::Dataset(format!("training diverged at epoch {epoch}")));
                }
                self.backward_full(&g)?;
                adam_step(&mut self.params_mut(), &mut adam);
                sum += loss * chunk.len() as f64;
                count += chunk.len();
            }
            self.encoder.clear_cache();
            self.fc.clear_cache();
            self.decoder.clear_cache();
            let val_loss = if val_idx.is_empty() { f64::NAN } else { self.evaluate(data, &val_idx, tc.batch_size)? };
            let m = EpochMetrics {
                epoch,
                train_loss: sum / count.max(1) as f64,
                val_loss,
                baseline_loss: baseline,
            };
            progress(&m);
            history.push(m);
        }
        Ok(history)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_list(buf: &mut Vec<u8>, v: &[usize]) {
    put_u32(buf, v.len() as u32);
    v.iter().for_each(|&x| put_u32(buf, x as u32));
}

struct Reader<'a> {
    rest: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.rest.len() < n {
            return Err(Error::WeightFile("file is truncated".into()));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A u32 that must be a plausible size, so corrupt headers fail cleanly.
    fn size(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > 1 << 24 {
            return Err(Error::WeightFile(format!("implausible {what}: {v}")));
        }
        Ok(v)
    }

    fn list(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.size(what)?;
        if n > 64 {
            return Err(Error::WeightFile(format!("implausible {what} length {n}")));
        }
        (0..n).map(|_| self.size(what)).collect()
    }
}

impl DynamicsNet<f32> {
    /// Serialized weights: header, config block, then every named tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHT_MAGIC);
        put_u32(&mut buf, WEIGHT_VERSION);
        put_u32(&mut buf, c.horizon as u32);
        put_u32(&mut buf, c.actuators as u32);
        buf.extend_from_slice(&c.tau_max.to_le_bytes());
        put_u32(&mut buf, c.in_channels as u32);
        put_u32(&mut buf, c.image_size as u32);
        put_u32(&mut buf, c.image_feature_dim as u32);
        put_list(&mut buf, &c.conv_channels);
        put_list(&mut buf, &c.fc_units);
        let tensors = self.named_tensors();
        put_u32(&mut buf, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_list(&mut buf, t.shape());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { rest: bytes };
        if r.take(4).map_err(|_| Error::WeightFile("file is truncated".into()))? != WEIGHT_MAGIC {
            return Err(Error::WeightFile("bad magic (not a dynamics-net weight file)".into()));
        }
        let version = r.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::WeightVersion {
                found: version,
                expected: WEIGHT_VERSION,
            });
        }
        let horizon = r.size("T")?;
        let actuators = r.size("M")?;
        let tau_max = r.f64()?;
        let config = DynNetConfig {
            horizon,
            actuators,
            tau_max,
            in_channels: r.size("input channels")?,
            image_size: r.size("image size")?,
            image_feature_dim: r.size("feature size")?,
            conv_channels: r.list("conv channels")?,
            fc_units: r.list("fc units")?,
        };
        let mut net = Self::build(config, 0).map_err(|e| Error::WeightFile(format!("invalid config block: {e}")))?;
        let count = r.size("tensor count")?;
        let mut slots = net.named_tensors_mut();
        if count != slots.len() {
            return Err(Error::WeightFile(format!("file holds {count} tensors, the architecture has {}", slots.len())));
        }
        let mut seen = vec![false; slots.len()];
        for _ in 0..count {
            let len = r.size("name length")?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::WeightFile("tensor name is not UTF-8".into()))?
                .to_string();
            let dims = r.list("tensor rank")?;
            let pos = slots
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::WeightFile(format!("unexpected tensor `{name}`")))?;
            if std::mem::replace(&mut seen[pos], true) {
                return Err(Error::WeightFile(format!("tensor `{name}` appears twice")));
            }
            let t = &mut slots[pos].1;
            if t.shape() != dims.as_slice() {
                return Err(Error::WeightFile(format!(
                    "tensor `{name}` has dims {dims:?}, the header implies {:?}",
                    t.shape()
                )));
            }
            let raw = r.take(4 * t.len())?;
            for (d, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
        if !r.rest.is_empty() {
            return Err(Error::WeightFile(format!("{} trailing bytes", r.rest.len())));
        }
        drop(slots);
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DynNetConfig {
        DynNetConfig {
            image_size: 32,
            conv_channels: vec![2, 2, 4, 4, 4],
            image_feature_dim: 8,
            fc_units: vec![8, 8],
            ..DynNetConfig::new(3, 1, 0.2)
        }
    }

    fn observation(size: usize) -> Observation {
        let mut image = Image::new(size, size);
        for i in 4..20 {
            image.set(i, 10, 1.0);
        }
        let mut flow = FlowField {
            x: vec![0.0; size * size],
            y: vec![0.0; size * size],
        };
        flow.x[10 * size + 8] = 2.0;
        Observation {
            image,
            flow,
            joints: vec![JointState {
                position: 0.4,
                velocity: -1.0,
                torque: 0.05,
            }],
        }
    }

    #[test]
    fn default_fc_input_width() {
        let c = DynNetConfig::new(10, 1, 0.2);
        assert_eq!(c.fc_input_width(), 141);
        assert_eq!(DynNetConfig::new(10, 2, 0.2).fc_input_width(), 128 + 26);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DynNetConfig::new(0, 1, 0.2).validate().is_err());
        assert!(DynNetConfig::new(5, 0, 0.2).validate().is_err());
        assert!(DynNetConfig::new(5, 1, 0.0).validate().is_err());
        let c = DynNetConfig {
            image_size: 48,
            ..DynNetConfig::new(5, 1, 0.2)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_size_output_is_in_open_unit_interval() {
        let mut net = DynamicsNet::<f32>::build(DynNetConfig::new(10, 1, 0.2), 1).unwrap();
        let obs = observation(64);
        let feat = net.encode(&obs).unwrap();
        assert_eq!(feat.len(), 128);
        let img = net.predict(&feat, &obs.joints, &TorqueSequence::zeros(1, 10)).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        assert!(img.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = DynamicsNet::<f32>::build(small_config(), 5).unwrap();
        let b = DynamicsNet::<f32>::build(small_config(), 5).unwrap();
        let c = DynamicsNet::<f32>::build(small_config(), 6).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn split_path_matches_monolithic_forward() {
        let mut net = DynamicsNet::<f32>::build(small_config(), 2).unwrap();
        let obs = observation(32);
        let tau = TorqueSequence::from_vec(1, 3, vec![0.1, -0.2, 0.05]).unwrap();
        let feat = net.encode(&obs).unwrap();
        let a = net.predict(&feat, &obs.joints, &tau).unwrap();
        let b = net.forward_monolithic(&obs, &tau).unwrap();
        assert_eq!(a, b);
        assert_eq!(feat, net.encode(&obs).unwrap());
    }

    #[test]
    fn encoder_distinguishes_empty_and_pendulum_images() {
        let mut net = DynamicsNet::<f32>::build(DynNetConfig::new(10, 1, 0.2), 3).unwrap();
        let obs = observation(64);
        let empty = Observation {
            image: Image::new(64, 64),
            flow: FlowField::zeros(),
            joints: obs.joints.clone(),
        };
        assert_ne!(net.encode(&obs).unwrap(), net.encode(&empty).unwrap());
    }

    #[test]
    fn tau_gradient_leaves_parameter_gradients_clean() {
        let mut net = DynamicsNet::<f64>::build(small_config(), 4).unwrap();
        let obs = observation(32);
        let feat = net.encode(&obs).unwrap();
        let target = Image::filled(32, 32, 0.3);
        let tau = TorqueSequence::from_vec(1, 3, vec![0.1, 0.0, -0.1]).unwrap();
        let (loss, g) = net.loss_and_tau_grad(&feat, &obs.joints, &tau, &target).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g.len(), 3);
        assert!(net.params_mut().iter().all(|p| p.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
    }

    #[test]
    fn weight_round_trip_is_bit_exact() {
        let net = DynamicsNet::<f32>::build(small_config(), 9).unwrap();
        let bytes = net.to_bytes();
        let back = DynamicsNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn corrupt_weight_files_are_rejected() {
        let bytes = DynamicsNet::<f32>::build(small_config(), 9).unwrap().to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(DynamicsNet::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DynamicsNet::from_bytes(&bad), Err(Error::WeightFile(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(DynamicsNet::from_bytes(&bad), Err(Error::WeightVersion { found: 2, .. })));
    }

    #[test]
    fn joint_normalization() {
        let j = [JointState {
            position: 3.0 * PI / 2.0,
            velocity: 100.0,
            torque: -0.3,
        }];
        let v = normalize_joints(&j, 0.2);
        assert!((v[0] + 0.5).abs() < 1e-12);
        assert_eq!(v[1], VELOCITY_CLAMP);
        assert_eq!(v[2], -1.0);
    }

    fn toy_dataset(horizon: usize, frames: usize) -> Dataset {
        let mut obs = Vec::new();
        let mut blurred = Vec::new();
        let mut torques = Vec::new();
        for t in 0..frames {
            let mut o = observation(32);
            o.joints[0].position = t as f64;
            for x in 0..32 {
                o.image.set(x, (t * 7) % 32, 1.0);
            }
            obs.push(o);
            blurred.push(Image::filled(32, 32, (t as f32 + 1.0) / (frames as f32 + 1.0)));
            torques.push(vec![t as f64 * 0.01]);
        }
        let mut d = Dataset::new(horizon, 1);
        d.push_episode(obs, blurred, &torques).unwrap();
        d
    }

    #[test]
    fn pairs_are_aligned() {
        let d = toy_dataset(3, 20);
        assert_eq!(d.len(), 17);
        for p in d.pairs() {
            assert_eq!(p.target, p.obs + 3);
            assert_eq!(d.observation(p).joints[0].position, p.obs as f64);
            for k in 0..3 {
                assert_eq!(p.tau.get(0, k), (p.obs + k) as f64 * 0.01);
            }
        }
        assert!(Dataset::new(3, 1).push_episode(vec![observation(32); 3], vec![Image::new(32, 32); 3], &vec![vec![0.0]; 3]).is_err());
    }

    #[test]
    fn split_has_no_shared_frames() {
        let d = toy_dataset(3, 103);
        let (train, val) = d.split(0.1);
        assert_eq!(val.len(), 10);
        let first_val = val.iter().map(|&i| d.pairs()[i].obs).min().unwrap();
        assert!(train.iter().all(|&i| d.pairs()[i].target < first_val));
        assert_eq!(train.len() + val.len() + 3, d.len());
    }

    #[test]
    fn training_reduces_loss_in_train_and_eval_mode() {
        let d = toy_dataset(3, 24);
        let mut net = DynamicsNet::<f32>::build(small_config(), 0).unwrap();
        let tc = TrainConfig {
            epochs: 150,
            batch_size: 8,
            lr: 3e-3,
            seed: 1,
            val_fraction: 0.0,
        };
        let hist = net.train(&d, &tc, |_| {}).unwrap();
        let first = hist[0].train_loss;
        assert!(hist.last().unwrap().train_loss < first * 0.7);
        let all: Vec<usize> = (0..d.len()).collect();
        let eval = net.evaluate(&d, &all, 8).unwrap();
        assert!(eval < first * 0.7, "eval loss {eval}, first epoch {first}");
    }
}
